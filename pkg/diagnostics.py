"""Collects numerical diagnostics for a run and decides its exit status."""
from __future__ import annotations

import json
import logging
import threading
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional

import psutil

UTC = timezone.utc
LOGGER = logging.getLogger("fpt_lab.diagnostics")

SEVERITIES = ("info", "warning", "error")


@dataclass
class Diagnostic:
    kind: str
    severity: str
    message: str
    context: Dict[str, Any] = field(default_factory=dict)


@dataclass
class Sample:
    ts: float
    rss_mb: float
    cpu_user_s: float
    cpu_system_s: float


class DiagnosticsGovernor:
    """Records diagnostics and resource samples; maps them to an exit status.

    Any ``error`` diagnostic yields status 3. Warnings yield 3 only in strict
    mode.
    """

    def __init__(self, metrics_log: Optional[Path] = None, strict: bool = False) -> None:
        self.strict = strict
        self._metrics_log = Path(metrics_log) if metrics_log else None
        if self._metrics_log is not None:
            self._metrics_log.parent.mkdir(parents=True, exist_ok=True)
        self._diagnostics: List[Diagnostic] = []
        self._samples: List[Sample] = []
        self._lock = threading.Lock()
        self._process = psutil.Process()

    @property
    def diagnostics(self) -> List[Diagnostic]:
        with self._lock:
            return list(self._diagnostics)

    def record(self, kind: str, severity: str, message: str, **context: Any) -> Diagnostic:
        if severity not in SEVERITIES:
            raise ValueError(f"Unknown severity: {severity}")
        diagnostic = Diagnostic(kind=kind, severity=severity, message=message, context=context)
        with self._lock:
            self._diagnostics.append(diagnostic)
        level = {"info": logging.INFO, "warning": logging.WARNING, "error": logging.ERROR}[severity]
        LOGGER.log(level, kind, extra={"message_text": message, **context})
        self._write({"event": "diagnostic", **asdict(diagnostic)})
        return diagnostic

    def sample(self, label: str = "sample") -> Sample:
        """Take a psutil resource sample of this process."""
        cpu = self._process.cpu_times()
        sample = Sample(
            ts=time.time(),
            rss_mb=self._process.memory_info().rss / (1024 * 1024),
            cpu_user_s=cpu.user,
            cpu_system_s=cpu.system,
        )
        with self._lock:
            self._samples.append(sample)
        self._write(
            {
                "event": "metrics_sample",
                "label": label,
                "rss_mb": sample.rss_mb,
                "cpu_user_s": sample.cpu_user_s,
                "cpu_system_s": sample.cpu_system_s,
            },
            ts=sample.ts,
        )
        return sample

    def count(self, severity: str) -> int:
        with self._lock:
            return sum(1 for d in self._diagnostics if d.severity == severity)

    def exit_status(self) -> int:
        if self.count("error"):
            return 3
        if self.strict and self.count("warning"):
            return 3
        return 0

    def summary(self) -> Dict[str, Any]:
        with self._lock:
            samples = list(self._samples)
        summary: Dict[str, Any] = {
            "errors": self.count("error"),
            "warnings": self.count("warning"),
            "kinds": sorted({d.kind for d in self.diagnostics}),
        }
        if samples:
            summary["peak_rss_mb"] = max(s.rss_mb for s in samples)
            summary["cpu_s"] = (samples[-1].cpu_user_s + samples[-1].cpu_system_s) - (
                samples[0].cpu_user_s + samples[0].cpu_system_s
            )
        self._write({"event": "diagnostics_summary", **summary})
        return summary

    def _write(self, record: Dict[str, Any], ts: Optional[float] = None) -> None:
        if self._metrics_log is None:
            return
        stamp = datetime.fromtimestamp(ts if ts is not None else time.time(), tz=UTC).isoformat()
        with self._lock, self._metrics_log.open("a", encoding="utf-8") as handle:
            handle.write(json.dumps({"ts": stamp, **record}, default=str) + "\n")


_ACTIVE: Optional[DiagnosticsGovernor] = None


def active_governor() -> DiagnosticsGovernor:
    """Governor receiving diagnostics from library code; a quiet one by default."""
    global _ACTIVE
    if _ACTIVE is None:
        _ACTIVE = DiagnosticsGovernor()
    return _ACTIVE


def set_active_governor(governor: Optional[DiagnosticsGovernor]) -> None:
    global _ACTIVE
    _ACTIVE = governor


def report(kind: str, severity: str, message: str, **context: Any) -> Diagnostic:
    return active_governor().record(kind, severity, message, **context)


__all__ = [
    "Diagnostic",
    "DiagnosticsGovernor",
    "Sample",
    "active_governor",
    "report",
    "set_active_governor",
]
