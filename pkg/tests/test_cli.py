import json
from pathlib import Path

import pytest

from cli import render_rows, resolve_k, run
from config import __version__
from errors import ConfigError
from persistence import ResultStore


def _events(path):
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def test_oracle_writes_csv_with_metadata(capsys):
    assert run(["oracle", "--n", "20,40", "--k", "frac:0.5"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == f"# command=oracle seed=0 version={__version__}"
    assert lines[1].split(",")[:5] == ["model", "boundary", "n", "k", "value"]
    assert len(lines) == 4
    assert lines[2].startswith("gaussian,const:-1,20,10,")


def test_oracle_json_output_to_file():
    assert run(["oracle", "--n", "20", "--format", "json", "--out", "out/oracle.json"]) == 0
    rows = json.loads(Path("out/oracle.json").read_text())
    assert len(rows) == 1
    assert rows[0]["k"] == 10
    assert 0.0 < rows[0]["value"] < 1.0


def test_identities_pass(capsys):
    assert run(["identities"]) == 0
    out = capsys.readouterr().out
    assert "mixed_partial_bound" in out
    assert "False" not in out


def test_logs_are_structured_json():
    assert run(["oracle", "--n", "20"]) == 0
    events = [record["event"] for record in _events("logs/lab.jsonl")]
    assert events[0] == "run_started"
    assert events[-1] == "run_finished"
    summary = [record for record in _events("logs/metrics.jsonl") if record["event"] == "diagnostics_summary"]
    assert summary[-1]["errors"] == 0


@pytest.mark.parametrize(
    "argv",
    [
        ["survival", "--model", "cauchy"],
        ["survival", "--n", "10", "--k", "12"],
        ["survival", "--boundary", "wave:1"],
        ["sweep", "--method", "window"],
        ["survival", "--reps", "many"],
        ["survival", "--lab-config", "missing.yml"],
    ],
)
def test_invalid_input_exits_with_two(argv):
    assert run(argv) == 2


def test_degenerate_conditioning_exits_with_three():
    Path("lab.yml").write_text(json.dumps({"diagnostics": {"min_survivors": 100000}}))
    status = run(["rayleigh", "--lab-config", "lab.yml", "--n", "100", "--v", "1", "--reps", "1000"])
    assert status == 3
    run_record = ResultStore(Path("runs.db")).latest_run("rayleigh")
    assert run_record.status == "exit_3"


def test_sweep_output_does_not_depend_on_threads():
    common = ["sweep", "--method", "bridge_direct", "--n", "40,80", "--k", "frac:0.5", "--reps", "3000", "--seed", "9"]
    assert run(common + ["--threads", "1", "--out", "one.csv"]) == 0
    assert run(common + ["--threads", "4", "--out", "four.csv"]) == 0
    assert Path("one.csv").read_bytes() == Path("four.csv").read_bytes()


def test_rows_are_persisted():
    assert run(["oracle", "--n", "20,30", "--db", "store/lab.db"]) == 0
    store = ResultStore(Path("store/lab.db"))
    record = store.latest_run("oracle")
    assert record.status == "completed"
    assert record.stats["rows"] == 2
    rows = store.fetch_rows(record.id)
    assert [row["n"] for row in rows] == [20, 30]


def test_experiment_file_is_overridden_by_flags():
    Path("exp.yml").write_text("model: uniform\nn: [30]\nk: frac:0.5\nboundary: const:-2\n")
    assert run(["oracle", "--config", "exp.yml", "--n", "40", "--out", "o.csv"]) == 0
    lines = Path("o.csv").read_text().splitlines()
    assert lines[2].startswith("uniform_centered,const:-2,40,20,")

    Path("bad.yml").write_text("model: uniform\nnodes: 12\n")
    assert run(["oracle", "--config", "bad.yml"]) == 2


def test_strict_mode_turns_warnings_into_failure():
    argv = ["cascade", "--n", "5", "--theta", "6", "--k", "2", "--reps", "1000"]
    assert run(argv) == 0
    assert run(argv + ["--strict"]) == 3


def test_resolve_k():
    assert resolve_k("frac:0.5", 400) == 200
    assert resolve_k("7", 400) == 7
    with pytest.raises(ConfigError):
        resolve_k("0", 10)


def test_render_rows_csv_cells():
    text = render_rows([{"a": 0.1, "b": None}], ("a", "b"), "csv", {"command": "x"})
    assert text == "# command=x\na,b\n0.1,\n"


def test_unsigned_gamma_flag_reaches_the_sweep():
    common = ["sweep", "--n", "40", "--k", "minus_pow:0.5", "--regime", "near_critical", "--format", "json"]
    assert run(common + ["--out", "signed.json"]) == 0
    assert run(common + ["--unsigned-gamma", "--out", "unsigned.json"]) == 0
    (signed,) = json.loads(Path("signed.json").read_text())
    (unsigned,) = json.loads(Path("unsigned.json").read_text())
    assert signed["estimate"] == unsigned["estimate"]
    # g_k = -1 < 0, so the signed form exceeds gamma(|g_k| / sqrt(n - k))
    assert unsigned["asymptotic"] < signed["asymptotic"]

    Path("unsigned.yml").write_text("signed_gamma: false\n")
    assert run(common + ["--config", "unsigned.yml", "--out", "from_file.json"]) == 0
    assert json.loads(Path("from_file.json").read_text())[0]["asymptotic"] == unsigned["asymptotic"]


def test_vanishing_weighted_normaliser_is_invalid_input():
    Path("floor.yml").write_text(json.dumps({"diagnostics": {"density_floor": 1.0}}))
    argv = ["survival", "--method", "weighted", "--lab-config", "floor.yml", "--n", "20", "--reps", "100"]
    assert run(argv) == 2
