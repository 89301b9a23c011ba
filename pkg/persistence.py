"""SQLite persistence for experiment runs and their result rows."""
from __future__ import annotations

import json
import sqlite3
from contextlib import contextmanager
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Optional, Sequence

UTC = timezone.utc


@dataclass
class RunRecord:
    """Representation of a persisted run."""

    id: str
    command: str
    seed: Optional[int]
    version: str
    status: str
    started_at: datetime
    ended_at: Optional[datetime]
    stats: Optional[Dict[str, Any]]


class ResultStore:
    """Persistence layer wrapping SQLite operations."""

    def __init__(self, db_path: Path) -> None:
        self.db_path = Path(db_path)
        self._ensure_schema()

    def _connect(self) -> sqlite3.Connection:
        conn = sqlite3.connect(self.db_path)
        conn.row_factory = sqlite3.Row
        conn.execute("PRAGMA journal_mode=WAL")
        conn.execute("PRAGMA foreign_keys=ON")
        return conn

    def _ensure_schema(self) -> None:
        self.db_path.parent.mkdir(parents=True, exist_ok=True)
        with self._transaction() as conn:
            conn.executescript(
                """
                CREATE TABLE IF NOT EXISTS runs (
                    id TEXT PRIMARY KEY,
                    command TEXT NOT NULL,
                    seed INTEGER,
                    version TEXT NOT NULL,
                    started_at TEXT NOT NULL,
                    ended_at TEXT,
                    status TEXT NOT NULL,
                    stats TEXT
                );

                CREATE TABLE IF NOT EXISTS estimates (
                    run_id TEXT NOT NULL REFERENCES runs(id) ON DELETE CASCADE,
                    row_index INTEGER NOT NULL,
                    payload TEXT NOT NULL,
                    PRIMARY KEY (run_id, row_index)
                );

                CREATE INDEX IF NOT EXISTS idx_runs_command ON runs(command);
                """
            )

    @contextmanager
    def _transaction(self) -> Iterator[sqlite3.Connection]:
        conn = self._connect()
        try:
            yield conn
            conn.commit()
        finally:
            conn.close()

    def start_run(self, run_id: str, command: str, seed: Optional[int], version: str) -> None:
        now = datetime.now(tz=UTC).isoformat()
        with self._transaction() as conn:
            conn.execute(
                "INSERT INTO runs(id, command, seed, version, started_at, status) VALUES(?, ?, ?, ?, ?, 'running')",
                (run_id, command, seed, version, now),
            )

    def finish_run(self, run_id: str, status: str, stats: Dict[str, Any]) -> None:
        now = datetime.now(tz=UTC).isoformat()
        with self._transaction() as conn:
            conn.execute(
                "UPDATE runs SET ended_at=?, status=?, stats=? WHERE id=?",
                (now, status, json.dumps(stats, default=str), run_id),
            )

    def record_rows(self, run_id: str, rows: Sequence[Dict[str, Any]]) -> int:
        """Append result rows to a run; returns the number written."""
        with self._transaction() as conn:
            offset = conn.execute(
                "SELECT COALESCE(MAX(row_index) + 1, 0) FROM estimates WHERE run_id=?",
                (run_id,),
            ).fetchone()[0]
            conn.executemany(
                "INSERT INTO estimates(run_id, row_index, payload) VALUES(?, ?, ?)",
                [
                    (run_id, offset + idx, json.dumps(row, default=str))
                    for idx, row in enumerate(rows)
                ],
            )
        return len(rows)

    def latest_run(self, command: Optional[str] = None) -> Optional[RunRecord]:
        query = "SELECT * FROM runs"
        params: tuple = ()
        if command is not None:
            query += " WHERE command=?"
            params = (command,)
        with self._transaction() as conn:
            row = conn.execute(query + " ORDER BY started_at DESC, rowid DESC LIMIT 1", params).fetchone()
            return self._row_to_record(row) if row else None

    def fetch_rows(self, run_id: str) -> List[Dict[str, Any]]:
        with self._transaction() as conn:
            rows: Iterable[sqlite3.Row] = conn.execute(
                "SELECT payload FROM estimates WHERE run_id=? ORDER BY row_index",
                (run_id,),
            ).fetchall()
            return [json.loads(row["payload"]) for row in rows]

    @staticmethod
    def _row_to_record(row: sqlite3.Row) -> RunRecord:
        def parse_dt(value: Optional[str]) -> Optional[datetime]:
            return datetime.fromisoformat(value) if value else None

        return RunRecord(
            id=row["id"],
            command=row["command"],
            seed=row["seed"],
            version=row["version"],
            status=row["status"],
            started_at=datetime.fromisoformat(row["started_at"]),
            ended_at=parse_dt(row["ended_at"]),
            stats=json.loads(row["stats"]) if row["stats"] else None,
        )


__all__ = ["ResultStore", "RunRecord"]
