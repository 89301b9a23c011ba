"""Configuration loading utilities for the first-passage laboratory."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional
import copy
import json
import os

try:  # pragma: no cover - allow tests without PyYAML
    import yaml  # type: ignore
except ModuleNotFoundError:  # pragma: no cover - fallback for minimal environments
    yaml = None

__version__ = "0.3.0"


@dataclass(frozen=True)
class GridConfig:
    nodes: int = 481
    width_sd: float = 12.0
    mass_tolerance: float = 1e-4
    kernel_tail: float = 1e-15

    @property
    def spacing(self) -> float:
        """Lattice spacing: the one-step window [-width_sd, width_sd] holds `nodes` nodes."""
        return 2.0 * self.width_sd / (self.nodes - 1)


@dataclass(frozen=True)
class SimulationConfig:
    block_size: int = 4096
    max_threads: int = 1
    ladder_max_steps: int = 1_000_000
    cap_warn_fraction: float = 0.01


@dataclass(frozen=True)
class DiagnosticsConfig:
    min_survivors: int = 1000
    density_floor: float = 1e-15
    cancellation_tolerance: float = 1e-8
    metrics_log: Path = Path("logs") / "metrics.jsonl"


@dataclass(frozen=True)
class PersistenceConfig:
    enabled: bool = True
    db_path: Path = Path("runs.db")


@dataclass(frozen=True)
class LoggingConfig:
    level: str = "INFO"
    log_dir: Path = Path("logs")


@dataclass(frozen=True)
class LabConfig:
    grid: GridConfig = field(default_factory=GridConfig)
    simulation: SimulationConfig = field(default_factory=SimulationConfig)
    diagnostics: DiagnosticsConfig = field(default_factory=DiagnosticsConfig)
    persistence: PersistenceConfig = field(default_factory=PersistenceConfig)
    logging: LoggingConfig = field(default_factory=LoggingConfig)


DEFAULTS: Dict[str, Dict[str, Any]] = {
    "grid": {"nodes": 481, "width_sd": 12.0, "mass_tolerance": 1e-4, "kernel_tail": 1e-15},
    "simulation": {
        "block_size": 4096,
        "max_threads": 1,
        "ladder_max_steps": 1_000_000,
        "cap_warn_fraction": 0.01,
    },
    "diagnostics": {
        "min_survivors": 1000,
        "density_floor": 1e-15,
        "cancellation_tolerance": 1e-8,
        "metrics_log": "logs/metrics.jsonl",
    },
    "persistence": {"enabled": True, "db_path": "runs.db"},
    "logging": {"level": "INFO", "log_dir": "logs"},
}


def _apply_env_overrides(config: Dict[str, Any]) -> Dict[str, Any]:
    """Apply environment overrides using FPLAB_* variables."""
    mapping = {
        "FPLAB_GRID_NODES": ("grid", "nodes"),
        "FPLAB_GRID_WIDTH_SD": ("grid", "width_sd"),
        "FPLAB_GRID_MASS_TOLERANCE": ("grid", "mass_tolerance"),
        "FPLAB_GRID_KERNEL_TAIL": ("grid", "kernel_tail"),
        "FPLAB_SIM_BLOCK_SIZE": ("simulation", "block_size"),
        "FPLAB_SIM_MAX_THREADS": ("simulation", "max_threads"),
        "FPLAB_SIM_LADDER_MAX_STEPS": ("simulation", "ladder_max_steps"),
        "FPLAB_SIM_CAP_WARN_FRACTION": ("simulation", "cap_warn_fraction"),
        "FPLAB_DIAG_MIN_SURVIVORS": ("diagnostics", "min_survivors"),
        "FPLAB_DIAG_DENSITY_FLOOR": ("diagnostics", "density_floor"),
        "FPLAB_DIAG_METRICS_LOG": ("diagnostics", "metrics_log"),
        "FPLAB_DB_ENABLED": ("persistence", "enabled"),
        "FPLAB_DB_PATH": ("persistence", "db_path"),
        "FPLAB_LOG_LEVEL": ("logging", "level"),
        "FPLAB_LOG_DIR": ("logging", "log_dir"),
    }
    numeric_sections = {"grid", "simulation"}
    numeric_keys = {"min_survivors", "density_floor"}
    for env, keys in mapping.items():
        if env not in os.environ:
            continue
        value: Any = os.environ[env]
        if env.endswith("ENABLED"):
            value = value.lower() in {"1", "true", "yes", "on"}
        elif keys[0] in numeric_sections or keys[-1] in numeric_keys:
            try:
                if "." in value or "e" in value.lower():
                    value = float(value)
                else:
                    value = int(value)
            except ValueError:
                raise ValueError(f"Invalid numeric override for {env}: {value}")
        config.setdefault(keys[0], {})[keys[-1]] = value
    return config


def _merge_defaults(raw: Dict[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(DEFAULTS)
    for section, values in (raw or {}).items():
        if section not in merged:
            raise ValueError(f"Unknown configuration section: {section}")
        if not isinstance(values, dict):
            raise ValueError(f"Configuration section {section} must be a mapping")
        for key, value in values.items():
            if key not in merged[section]:
                raise ValueError(f"Unknown configuration key: {section}.{key}")
            merged[section][key] = value
    return merged


def load_config(path: Optional[str] = None) -> LabConfig:
    """Load configuration from YAML file and environment overrides.

    An explicitly named file must exist; the default ``config.yml`` is optional.
    """
    file_path = Path(path) if path else Path("config.yml")
    raw_config: Dict[str, Any] = {}
    if file_path.exists():
        with open(file_path, "r", encoding="utf-8") as handle:
            contents = handle.read()
            if yaml is not None:
                raw_config = yaml.safe_load(contents) or {}
            else:
                raw_config = json.loads(contents)
    elif path:
        raise FileNotFoundError(f"Configuration file not found: {file_path}")
    config_dict = _apply_env_overrides(_merge_defaults(raw_config))

    grid = GridConfig(
        nodes=int(config_dict["grid"]["nodes"]),
        width_sd=float(config_dict["grid"]["width_sd"]),
        mass_tolerance=float(config_dict["grid"]["mass_tolerance"]),
        kernel_tail=float(config_dict["grid"]["kernel_tail"]),
    )
    if grid.nodes < 3 or grid.nodes % 2 == 0:
        raise ValueError(f"grid.nodes must be an odd integer >= 3, got {grid.nodes}")
    simulation = SimulationConfig(
        block_size=int(config_dict["simulation"]["block_size"]),
        max_threads=int(config_dict["simulation"]["max_threads"]),
        ladder_max_steps=int(config_dict["simulation"]["ladder_max_steps"]),
        cap_warn_fraction=float(config_dict["simulation"]["cap_warn_fraction"]),
    )
    diagnostics = DiagnosticsConfig(
        min_survivors=int(config_dict["diagnostics"]["min_survivors"]),
        density_floor=float(config_dict["diagnostics"]["density_floor"]),
        cancellation_tolerance=float(config_dict["diagnostics"]["cancellation_tolerance"]),
        metrics_log=Path(config_dict["diagnostics"]["metrics_log"]),
    )
    persistence = PersistenceConfig(
        enabled=bool(config_dict["persistence"]["enabled"]),
        db_path=Path(config_dict["persistence"]["db_path"]),
    )
    logging_conf = LoggingConfig(
        level=str(config_dict["logging"]["level"]).upper(),
        log_dir=Path(config_dict["logging"]["log_dir"]),
    )
    return LabConfig(
        grid=grid,
        simulation=simulation,
        diagnostics=diagnostics,
        persistence=persistence,
        logging=logging_conf,
    )


__all__ = [
    "__version__",
    "LabConfig",
    "GridConfig",
    "SimulationConfig",
    "DiagnosticsConfig",
    "PersistenceConfig",
    "LoggingConfig",
    "load_config",
]
