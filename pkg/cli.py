"""Batch experiment runner: one subcommand per experiment, results as CSV or JSON."""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import uuid
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

from asymptotics import RegimeLabel, identity_lattice_check, rayleigh_tail
from boundaries import BoundarySequence, l_infinity_criterion, parse_boundary
from cascade import CASCADE_COLUMNS, CascadeConfig, cascade_vs_bridge, load_cascade_config
from concurrency import ReplicateExecutor, set_default_executor
from config import LabConfig, __version__, load_config
from density_kernel import bridge_survival
from diagnostics import DiagnosticsGovernor, report, set_active_governor
from errors import ConfigError, LabError, NumericalDiagnosticError
from estimators import (
    SWEEP_COLUMNS,
    SweepConfig,
    convergence_sweep,
    estimate_Lg,
    estimate_conditional_survival_bridge,
    estimate_conditional_survival_weighted,
    estimate_conditional_survival_window,
    estimate_rayleigh_tail,
    parse_k_rule,
)
from increments import IncrementModel, get_model
from persistence import ResultStore
from walk_sim import estimate_ladder_stats

try:  # pragma: no cover - allow tests without PyYAML
    import yaml  # type: ignore
except ModuleNotFoundError:  # pragma: no cover
    yaml = None

UTC = timezone.utc
LOGGER = logging.getLogger("fpt_lab.cli")

COMMANDS = ("survival", "sweep", "ladder", "lg", "rayleigh", "cascade", "oracle", "identities")
IDENTITY_TOLERANCE = 1e-10

_RESERVED = {
    "args",
    "asctime",
    "created",
    "exc_info",
    "exc_text",
    "filename",
    "funcName",
    "levelname",
    "levelno",
    "lineno",
    "module",
    "msecs",
    "msg",
    "name",
    "pathname",
    "process",
    "processName",
    "relativeCreated",
    "stack_info",
    "taskName",
    "thread",
    "threadName",
}


class JsonFormatter(logging.Formatter):
    """Format log records as structured JSON lines."""

    def format(self, record: logging.LogRecord) -> str:
        payload: Dict[str, Any] = {
            "ts": datetime.now(tz=UTC).isoformat(),
            "level": record.levelname.lower(),
            "logger": record.name,
            "event": record.getMessage(),
        }
        for key, value in record.__dict__.items():
            if key in _RESERVED or key in payload:
                continue
            payload[key] = value
        if record.exc_info:
            payload["exception"] = self.formatException(record.exc_info)
        return json.dumps(payload, default=str)


def setup_logging(level: str = "INFO", log_dir: Path = Path("logs")) -> logging.Logger:
    """Route every ``fpt_lab`` logger to standard error and ``<log_dir>/lab.jsonl``."""
    log_dir = Path(log_dir)
    log_dir.mkdir(parents=True, exist_ok=True)
    logger = logging.getLogger("fpt_lab")
    for handler in logger.handlers:
        handler.close()
    formatter = JsonFormatter()
    file_handler = logging.FileHandler(log_dir / "lab.jsonl")
    file_handler.setFormatter(formatter)
    stream_handler = logging.StreamHandler(sys.stderr)
    stream_handler.setFormatter(formatter)
    logger.handlers = [file_handler, stream_handler]
    logger.setLevel(getattr(logging, level.upper(), logging.INFO))
    logger.propagate = False
    return logger


# ---------------------------------------------------------------- experiment config


@dataclass
class ExperimentConfig:
    """Validated parameters of one experiment; flags override the config file."""

    command: str
    model: str = "gaussian"
    boundary: str = "const:-1"
    n: List[int] = field(default_factory=lambda: [400])
    k: str = "frac:0.5"
    regime: str = "far"
    method: str = "kernel"
    reps: int = 100_000
    seed: int = 0
    grid_nodes: Optional[int] = None
    out: Optional[str] = None
    format: str = "csv"
    threads: Optional[int] = None
    theta: float = 1.0
    perturbation: Optional[str] = None
    cascade_config: Optional[str] = None
    v: List[float] = field(default_factory=lambda: [0.5, 1.0, 2.0])
    horizon: int = 10_000
    paths: int = 100_000
    height_max: float = 5.0
    strict: bool = False
    signed_gamma: bool = True
    db: Optional[str] = None
    lab_config: Optional[str] = None
    increment_model: Optional[IncrementModel] = field(default=None, init=False, repr=False)
    boundary_sequence: Optional[BoundarySequence] = field(default=None, init=False, repr=False)

    def validate(self) -> "ExperimentConfig":
        if self.command not in COMMANDS:
            raise ConfigError(f"Unknown command: {self.command}")
        if self.format not in ("csv", "json"):
            raise ConfigError(f"--format must be csv or json, got {self.format}")
        if not self.n or any(int(n) != n or n < 2 for n in self.n):
            raise ConfigError(f"--n needs integers >= 2, got {self.n}")
        for name in ("reps", "paths", "horizon"):
            if getattr(self, name) < 1:
                raise ConfigError(f"--{name} must be positive")
        if self.seed < 0:
            raise ConfigError(f"--seed must be >= 0, got {self.seed}")
        if self.threads is not None and self.threads < 1:
            raise ConfigError(f"--threads must be >= 1, got {self.threads}")
        if self.grid_nodes is not None and (self.grid_nodes < 3 or self.grid_nodes % 2 == 0):
            raise ConfigError(f"--grid-nodes must be an odd integer >= 3, got {self.grid_nodes}")
        if any(v < 0 for v in self.v):
            raise ConfigError("--v values must be >= 0")
        if self.height_max <= 0:
            raise ConfigError("--height-max must be > 0")
        allowed = {"survival": ("kernel", "bridge_direct", "weighted", "window"), "sweep": ("kernel", "bridge_direct", "weighted")}
        if self.command in allowed and self.method not in allowed[self.command]:
            raise ConfigError(f"--method {self.method} is not available for {self.command}")
        RegimeLabel.parse(self.regime)
        for n in self.n:
            resolve_k(self.k, n)
        self.increment_model = get_model(self.model)
        self.boundary_sequence = parse_boundary(self.boundary)
        return self


FILE_KEYS = {f for f in ExperimentConfig.__dataclass_fields__ if f not in ("command", "increment_model", "boundary_sequence")}


def resolve_k(value: str, n: int) -> int:
    """A bare integer is used as is; otherwise ``value`` is a k rule applied to n."""
    text = str(value).strip()
    if text.lstrip("-").isdigit():
        k = int(text)
    else:
        k = parse_k_rule(text)(n)
    if not 1 <= k < n:
        raise ConfigError(f"k={k} is outside [1, {n - 1}] for n={n}")
    return k


def _read_experiment_file(path: str) -> Dict[str, Any]:
    file_path = Path(path)
    if not file_path.exists():
        raise ConfigError(f"Experiment config not found: {file_path}")
    contents = file_path.read_text(encoding="utf-8")
    raw = (yaml.safe_load(contents) if yaml is not None else json.loads(contents)) or {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{file_path} must hold a mapping")
    raw = {str(key).replace("-", "_"): value for key, value in raw.items()}
    unknown = set(raw) - FILE_KEYS
    if unknown:
        raise ConfigError(f"Unknown experiment keys: {', '.join(sorted(unknown))}")
    for key in ("n", "v"):
        if key in raw and not isinstance(raw[key], list):
            raw[key] = [raw[key]]
    return raw


def _int_list(text: str) -> List[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> List[float]:
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment file with the same keys as the flags")
    common.add_argument("--lab-config", help="Laboratory settings file (default config.yml)")
    common.add_argument("--model")
    common.add_argument("--boundary", help="const:c | power:c,alpha | log:c | table:path.csv")
    common.add_argument("--n", type=_int_list, help="comma-separated walk lengths")
    common.add_argument("--k", help="integer, frac:p or minus_pow:p")
    common.add_argument("--regime", choices=[r.value for r in RegimeLabel])
    common.add_argument("--method")
    common.add_argument("--reps", type=int)
    common.add_argument("--seed", type=int)
    common.add_argument("--out")
    common.add_argument("--format", choices=["csv", "json"])
    common.add_argument("--grid-nodes", type=int)
    common.add_argument("--threads", type=int)
    common.add_argument("--theta", type=float)
    common.add_argument("--perturbation", help="boundary syntax; g(i) added to 1 - theta")
    common.add_argument("--cascade-config", help="YAML file with n, theta and perturbation")
    common.add_argument("--v", type=_float_list)
    common.add_argument("--horizon", type=int)
    common.add_argument("--paths", type=int)
    common.add_argument("--height-max", type=float)
    common.add_argument("--strict", action="store_true", default=None)
    common.add_argument(
        "--unsigned-gamma",
        dest="signed_gamma",
        action="store_false",
        default=None,
        help="near_critical prefactor from gamma(|g_k| / sqrt(n - k)) instead of the signed form",
    )
    common.add_argument("--db", help="SQLite result store (overrides persistence.db_path)")

    parser = argparse.ArgumentParser(prog="fpt-lab", description="First-passage asymptotics laboratory")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "survival": "Estimate P(tau_g > k | S_n = 0)",
        "sweep": "Convergence ratios against the asymptotic formulas",
        "ladder": "Ladder-height means and renewal functions",
        "lg": "Estimate the prefactor L_g(k)",
        "rayleigh": "Survivor-conditioned tails P(S_n > g_n + v sqrt(n) | tau_g > n)",
        "cascade": "Cascading-failure probability against the bridge representation",
        "oracle": "Kernel value of P(tau_g > k | S_n = 0)",
        "identities": "Closed-form integral identities against quadrature",
    }
    for command in COMMANDS:
        sub.add_parser(command, parents=[common], help=helps[command])
    return parser


def build_experiment(args: argparse.Namespace) -> ExperimentConfig:
    values: Dict[str, Any] = {}
    if args.config:
        values.update(_read_experiment_file(args.config))
    for key in FILE_KEYS:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    try:
        experiment = ExperimentConfig(command=args.command, **values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return experiment.validate()


# ---------------------------------------------------------------- commands

Rows = List[Dict[str, Any]]
Handler = Callable[[ExperimentConfig, LabConfig, ReplicateExecutor], Tuple[Rows, Sequence[str]]]


def _survival(exp: ExperimentConfig, lab: LabConfig, executor: ReplicateExecutor):
    model, boundary = exp.increment_model, exp.boundary_sequence
    rows: Rows = []
    for n in exp.n:
        k = resolve_k(exp.k, n)
        if exp.method == "kernel":
            result = bridge_survival(model, boundary, n, k, lab.grid, lab.diagnostics)
            estimate, se, samples, loss = result.value, 0.0, 0, result.quadrature_loss
        else:
            if exp.method == "bridge_direct":
                record = estimate_conditional_survival_bridge(model, boundary, n, k, exp.reps, exp.seed, executor)
            elif exp.method == "weighted":
                record = estimate_conditional_survival_weighted(
                    model, boundary, n, k, exp.reps, exp.seed, lab.grid, lab.diagnostics, executor
                )
            else:
                record = estimate_conditional_survival_window(model, boundary, n, k, exp.reps, exp.seed, executor=executor)
            estimate, se, samples, loss = record.value, record.std_error, record.samples, ""
        rows.append(
            {
                "model": model.name,
                "boundary": boundary.label,
                "n": n,
                "k": k,
                "method": exp.method,
                "estimate": estimate,
                "se": se,
                "samples": samples,
                "quadrature_loss": loss,
                "seed": exp.seed,
            }
        )
    return rows, ("model", "boundary", "n", "k", "method", "estimate", "se", "samples", "quadrature_loss", "seed")


def _oracle(exp: ExperimentConfig, lab: LabConfig, executor: ReplicateExecutor):
    columns = ("model", "boundary", "n", "k", "value", "numerator", "normaliser", "f_n0", "survival_mass", "quadrature_loss", "prefactor")
    jobs = [(n, resolve_k(exp.k, n)) for n in exp.n]
    results = executor.map_items(
        lambda job: bridge_survival(exp.increment_model, exp.boundary_sequence, job[0], job[1], lab.grid, lab.diagnostics),
        jobs,
    )
    rows = [
        {"model": exp.increment_model.name, "boundary": exp.boundary_sequence.label, **asdict(result)}
        for result in results
    ]
    return rows, columns


def _sweep(exp: ExperimentConfig, lab: LabConfig, executor: ReplicateExecutor):
    cfg = SweepConfig(
        model=exp.increment_model,
        boundary=exp.boundary_sequence,
        n_values=exp.n,
        k_rule=exp.k,
        regime=exp.regime,
        method=exp.method,
        reps=exp.reps,
        seed=exp.seed,
        signed_gamma=exp.signed_gamma,
        grid=lab.grid,
    )
    return convergence_sweep(cfg, executor), SWEEP_COLUMNS


def _ladder(exp: ExperimentConfig, lab: LabConfig, executor: ReplicateExecutor):
    stats = estimate_ladder_stats(
        exp.increment_model, exp.paths, exp.height_max, exp.seed, executor=executor, simulation=lab.simulation
    )
    row = {
        "model": stats.model,
        "mean_descending": stats.mean_descending,
        "se_descending": stats.se_descending,
        "mean_ascending_dual": stats.mean_ascending_dual,
        "se_ascending_dual": stats.se_ascending_dual,
        "product": stats.product,
        "product_se": stats.product_se,
        "target": 0.5,
        "capped": stats.capped_descending + stats.capped_ascending,
        "paths": exp.paths,
        "seed": exp.seed,
    }
    return [row], tuple(row)


def _lg(exp: ExperimentConfig, lab: LabConfig, executor: ReplicateExecutor):
    boundary = exp.boundary_sequence
    verdict, criterion = "", ""
    if not boundary.unreachable:
        horizon = max(exp.horizon, 1000)
        report_ = l_infinity_criterion(boundary, horizon)
        verdict, criterion = report_.verdict, report_.criterion or ""
    rows: Rows = []
    for k in sorted({resolve_k(exp.k, n) for n in exp.n}):
        lg = estimate_Lg(exp.increment_model, boundary, k, exp.reps, exp.seed, executor)
        rows.append(
            {
                "model": exp.increment_model.name,
                "boundary": boundary.label,
                "k": k,
                "undershoot": lg.primary.value,
                "undershoot_se": lg.primary.std_error,
                "terminal_excess": lg.terminal.value,
                "terminal_excess_se": lg.terminal.std_error,
                "difference": lg.difference,
                "difference_se": lg.difference_se,
                "verdict": verdict,
                "criterion": criterion,
                "seed": exp.seed,
            }
        )
    return rows, tuple(rows[0]) if rows else ()


def _rayleigh(exp: ExperimentConfig, lab: LabConfig, executor: ReplicateExecutor):
    rows: Rows = []
    for n in exp.n:
        for v in exp.v:
            record = estimate_rayleigh_tail(
                exp.increment_model, exp.boundary_sequence, n, v, exp.reps, exp.seed, lab.diagnostics, executor
            )
            rows.append(
                {
                    "model": exp.increment_model.name,
                    "boundary": exp.boundary_sequence.label,
                    "n": n,
                    "v": v,
                    "estimate": record.value,
                    "se": record.std_error,
                    "limit": rayleigh_tail(v),
                    "survivors": record.samples,
                    "seed": exp.seed,
                }
            )
    return rows, ("model", "boundary", "n", "v", "estimate", "se", "limit", "survivors", "seed")


def _cascade(exp: ExperimentConfig, lab: LabConfig, executor: ReplicateExecutor):
    if exp.cascade_config:
        base = load_cascade_config(exp.cascade_config)
        configs = [base]
    else:
        perturbation = parse_boundary(exp.perturbation) if exp.perturbation else None
        configs = [CascadeConfig(n=n, theta=exp.theta, perturbation=perturbation) for n in exp.n]
    rows: Rows = []
    for cfg in configs:
        k = resolve_k(exp.k, cfg.n)
        try:
            comparison = cascade_vs_bridge(cfg, k, exp.reps, exp.seed, executor, lab.grid)
        except LabError as exc:
            severity = "error" if isinstance(exc, NumericalDiagnosticError) else "warning"
            report("cascade_row_failed", severity, str(exc), n=cfg.n, k=k)
            continue
        rows.extend(comparison.rows())
    return rows, CASCADE_COLUMNS


def _identities(exp: ExperimentConfig, lab: LabConfig, executor: ReplicateExecutor):
    result = identity_lattice_check()
    rows = [
        {"identity": name, "max_rel_error": error, "tolerance": IDENTITY_TOLERANCE, "passed": error <= IDENTITY_TOLERANCE}
        for name, error in sorted(result.max_rel_error.items())
    ]
    rows.append(
        {"identity": "mixed_partial_bound", "max_rel_error": float(result.bound_violations), "tolerance": 0.0, "passed": result.bound_violations == 0}
    )
    if result.worst > IDENTITY_TOLERANCE or result.bound_violations:
        report("identity_mismatch", "error", f"worst relative error {result.worst:.3g}", violations=result.bound_violations)
    return rows, ("identity", "max_rel_error", "tolerance", "passed")


HANDLERS: Dict[str, Handler] = {
    "survival": _survival,
    "sweep": _sweep,
    "ladder": _ladder,
    "lg": _lg,
    "rayleigh": _rayleigh,
    "cascade": _cascade,
    "oracle": _oracle,
    "identities": _identities,
}


# ---------------------------------------------------------------- output


def _cell(value: Any) -> str:
    if isinstance(value, float):
        return repr(value)
    return "" if value is None else str(value)


def render_rows(rows: Rows, columns: Sequence[str], fmt: str, meta: Dict[str, Any]) -> str:
    """CSV with a ``# key=value`` metadata line, or a JSON list with one object per row."""
    if fmt == "json":
        return json.dumps([{col: row.get(col) for col in columns} for row in rows], indent=2) + "\n"
    buffer = io.StringIO()
    buffer.write("# " + " ".join(f"{key}={value}" for key, value in meta.items()) + "\n")
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_cell(row.get(col)) for col in columns])
    return buffer.getvalue()


def _emit(text: str, out: Optional[str]) -> None:
    if out is None:
        sys.stdout.write(text)
        return
    path = Path(out)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _lab_config(exp: ExperimentConfig) -> LabConfig:
    try:
        lab = load_config(exp.lab_config)
    except FileNotFoundError as exc:
        raise ConfigError(str(exc)) from exc
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if exp.grid_nodes is not None:
        lab = replace(lab, grid=replace(lab.grid, nodes=exp.grid_nodes))
    return lab


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Run one experiment; returns 0, 2 on invalid input or 3 on a numerical-diagnostic failure."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        exp = build_experiment(args)
        lab = _lab_config(exp)
    except LabError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return exc.exit_code

    setup_logging(lab.logging.level, lab.logging.log_dir)
    governor = DiagnosticsGovernor(lab.diagnostics.metrics_log, strict=exp.strict)
    set_active_governor(governor)
    threads = exp.threads or lab.simulation.max_threads
    executor = ReplicateExecutor(max_workers=threads, block_size=lab.simulation.block_size)
    set_default_executor(executor)

    store: Optional[ResultStore] = None
    run_id = uuid.uuid4().hex
    if exp.db or lab.persistence.enabled:
        store = ResultStore(Path(exp.db) if exp.db else lab.persistence.db_path)
        store.start_run(run_id, exp.command, exp.seed, __version__)

    LOGGER.info("run_started", extra={"command": exp.command, "seed": exp.seed, "threads": threads, "run_id": run_id})
    governor.sample("start")
    rows: Rows = []
    status = 0
    try:
        rows, columns = HANDLERS[exp.command](exp, lab, executor)
        meta = {"command": exp.command, "seed": exp.seed, "version": __version__}
        _emit(render_rows(rows, columns, exp.format, meta), exp.out)
        if store is not None:
            store.record_rows(run_id, rows)
    except LabError as exc:
        context = getattr(exc, "context", {})
        LOGGER.error("run_failed", extra={"error": str(exc), "error_type": type(exc).__name__, **context})
        sys.stderr.write(f"error: {exc}\n")
        status = exc.exit_code
    finally:
        governor.sample("end")
        summary = governor.summary()
        status = status or governor.exit_status()
        if store is not None:
            store.finish_run(run_id, "completed" if status == 0 else f"exit_{status}", {**summary, "rows": len(rows)})
        LOGGER.info("run_finished", extra={"command": exp.command, "status": status, "rows": len(rows)})
        set_active_governor(None)
    return status


def main() -> None:
    raise SystemExit(run())


if __name__ == "__main__":
    main()
