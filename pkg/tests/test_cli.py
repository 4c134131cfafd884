from __future__ import annotations

import json
from pathlib import Path

import pytest

from percolab.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, load_config, main
from percolab.errors import ConfigError


def write(tmp_path, name, doc):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


def only_run(root: Path) -> Path:
    runs = sorted((root / "runs").iterdir())
    assert len(runs) == 1
    return runs[0]


def test_twopoint_margin_rule_is_a_config_error(tmp_path, capsys):
    cfg = write(tmp_path, "bad.json", {"side": 64, "radii": [1, 2, 32], "beta": 0.2})
    assert main(["twopoint", "--config", cfg, "--out", str(tmp_path)]) == EXIT_CONFIG
    assert "margin rule" in capsys.readouterr().err


@pytest.mark.parametrize("doc, field", [({"alpha": 1.5}, "alpha"), ({"L": 1}, "L"), ({"bogus": 1}, "bogus"),
                                        ({"sigma": "random:x"}, "sigma"), ({"sides": [16, 32]}, "sides")])
def test_field_level_messages(doc, field):
    with pytest.raises(ConfigError) as info:
        load_config(None, "betac", doc)
    assert info.value.field == field


def test_unknown_field_from_file(tmp_path):
    cfg = write(tmp_path, "c.json", {"sidez": 3})
    assert main(["sample", "--config", cfg, "--out", str(tmp_path)]) == EXIT_CONFIG


def test_bisection_failure_is_runtime_error(tmp_path, capsys):
    cfg = write(tmp_path, "c.json", {"sides": [16, 64], "replicates": 200, "beta_bracket": [0, 1e-9],
                                     "max_widen": 0})
    assert main(["betac", "--config", cfg, "--out", str(tmp_path)]) == EXIT_RUNTIME
    assert "BracketError" in capsys.readouterr().err


def test_betac_record_and_determinism(tmp_path):
    cfg = write(tmp_path, "c.json", {"sides": [64, 256], "replicates": 200})
    for k in (1, 2):
        assert main(["betac", "--config", cfg, "--seed", "3", "--out", str(tmp_path / f"o{k}")]) == EXIT_OK
    a, b = only_run(tmp_path / "o1"), only_run(tmp_path / "o2")
    record = json.loads((a / "record.json").read_text())
    assert record["outputs"]["beta_c_hat"] > 0 and len(record["outputs"]["interval"]) == 2
    assert record["config"]["sides"] == [64, 256] and record["seed"] == 3
    csvs = sorted(p.name for p in a.glob("*.csv"))
    assert csvs
    for name in csvs:
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_twopoint_outputs_units(tmp_path):
    cfg = write(tmp_path, "c.json", {"side": 256, "beta": 0.25, "replicates": 40})
    assert main(["twopoint", "--config", cfg, "--out", str(tmp_path)]) == EXIT_OK
    run = only_run(tmp_path)
    header = (run / "twopoint_0.csv").read_text().splitlines()[0]
    assert "[lattice]" in header and "[fraction]" in header


def test_env_overrides_out(tmp_path, monkeypatch):
    monkeypatch.setenv("PERCOLAB_OUT", str(tmp_path / "env"))
    assert main(["sample", "--seed", "1", "--out", str(tmp_path / "flag")]) == EXIT_OK
    assert (tmp_path / "env" / "runs").is_dir()
    assert not (tmp_path / "flag").exists()


def test_sample_dump(tmp_path):
    cfg = write(tmp_path, "c.json", {"side": 16, "beta": 1.0, "layered": True, "sigma": "random:4"})
    assert main(["sample", "--config", cfg, "--seed", "9", "--out", str(tmp_path)]) == EXIT_OK
    text = (only_run(tmp_path) / "configuration.txt").read_text()
    assert text.startswith("# side=16 d=1 beta=1.0 seed=9 stream=0")


def test_blocks_micro_config(tmp_path):
    cfg = write(tmp_path, "c.json", {"L": 2, "side": 8, "N": 3, "beta": 1.0, "replicates": 200})
    assert main(["blocks", "--config", cfg, "--out", str(tmp_path)]) == EXIT_OK
    run = only_run(tmp_path)
    record = json.loads((run / "record.json").read_text())
    assert record["outputs"]["exact_half_good"] is True
    assert (run / "exact_goodness.csv").exists() and (run / "goodness.csv").exists()


def test_oracle_check_small(tmp_path):
    cfg = write(tmp_path, "c.json", {"draws": 10_000})
    assert main(["oracle-check", "--config", cfg, "--seed", "1", "--out", str(tmp_path)]) == EXIT_OK
    record = json.loads((only_run(tmp_path) / "record.json").read_text())
    assert record["outputs"]["min_p_value"] > 1e-3


def test_threads_flag_preserves_results(tmp_path):
    cfg = write(tmp_path, "c.json", {"side": 256, "beta": [0.2, 0.25], "replicates": 40})
    assert main(["tail", "--config", cfg, "--seed", "2", "--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(["tail", "--config", cfg, "--seed", "2", "--threads", "2", "--out", str(tmp_path / "b")]) == EXIT_OK
    a, b = only_run(tmp_path / "a"), only_run(tmp_path / "b")
    for p in a.glob("*.csv"):
        assert p.read_bytes() == (b / p.name).read_bytes()


def test_csv_cells_are_plain_numbers(tmp_path):
    cfg = write(tmp_path, "c.json", {"side": 256, "beta": 0.25, "replicates": 20})
    assert main(["twopoint", "--config", cfg, "--out", str(tmp_path)]) == EXIT_OK
    for line in (only_run(tmp_path) / "twopoint_0.csv").read_text().splitlines()[1:]:
        for cell in line.split(","):
            float(cell)
