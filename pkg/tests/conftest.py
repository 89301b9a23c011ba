import json
import logging
import sys
from pathlib import Path

import pytest

PROJECT_ROOT = Path(__file__).resolve().parents[1]
if str(PROJECT_ROOT) not in sys.path:
    sys.path.insert(0, str(PROJECT_ROOT))

from concurrency import ReplicateExecutor, set_default_executor
from diagnostics import set_active_governor


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run acceptance-scale checks")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: acceptance-scale check, needs --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def _chdir_tmp(tmp_path, monkeypatch):
    monkeypatch.syspath_prepend(str(PROJECT_ROOT))
    monkeypatch.chdir(tmp_path)
    config = {
        "grid": {"nodes": 481, "width_sd": 12.0, "mass_tolerance": 1e-4, "kernel_tail": 1e-15},
        "simulation": {"block_size": 512, "max_threads": 1, "ladder_max_steps": 200000, "cap_warn_fraction": 0.01},
        "diagnostics": {"min_survivors": 100, "metrics_log": "logs/metrics.jsonl"},
        "persistence": {"enabled": True, "db_path": "runs.db"},
        "logging": {"level": "INFO", "log_dir": "logs"},
    }
    Path("config.yml").write_text(json.dumps(config))
    return config


@pytest.fixture(autouse=True)
def _reset_globals():
    yield
    set_active_governor(None)
    set_default_executor(ReplicateExecutor())
    logger = logging.getLogger("fpt_lab")
    for handler in logger.handlers:
        handler.close()
    logger.handlers = []
    logger.propagate = True
