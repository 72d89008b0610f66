import csv
import hashlib
import json

import numpy as np
import pytest
import yaml

from bfel.cli import main
from bfel.config import (PAPER_RHO_VALUES, SCHEMA, from_dict, load_config, preset, preset_names,
                         resolve)
from bfel.errors import ConfigurationError, InputError
from bfel.experiment import export_metrics, read_metrics_csv, run_experiment, sweep, verify_artifacts
from bfel.ledger import read_chain_file

from conftest import small_config


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    run_experiment(small_config(), out)
    return out


def test_defaults_follow_published_setup():
    cfg = from_dict({})
    assert cfg.training.learning_rate == 0.001
    assert cfg.training.epochs == 1000 and cfg.training.batch_size == 128
    assert cfg.theta == 0.05
    assert (cfg.federation.workers_per_task, cfg.federation.miners_per_task) == (10, 11)
    assert cfg.federation.tasks == 2
    assert PAPER_RHO_VALUES == (0.1, 0.2, 0.3, 0.5, 0.9, 1, 100)


def test_schema_violations_are_reported():
    with pytest.raises(ConfigurationError, match="compression/rho"):
        from_dict({"compression": {"rho": 0}})
    with pytest.raises(ConfigurationError):
        from_dict({"scenario": "centralized"})
    with pytest.raises(ConfigurationError):
        from_dict({"trainig": {}})


def test_presets_load():
    assert {"desk", "paper", "poisoning", "byzantine"} <= set(preset_names())
    for name in preset_names():
        assert resolve(f"preset:{name}").name == name
    assert preset("desk").training.epochs == 100


def test_config_file_round_trip(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump({"seed": 4, "compression": {"rho": 1}}))
    cfg = load_config(p)
    assert cfg.seed == 4 and cfg.compression.rho_percent == 1
    assert cfg.with_overrides(rho=0.5).compression.rho_percent == 0.5


def test_run_dir_layout_and_replay(run_dir, tmp_path):
    names = {p.name for p in run_dir.iterdir()}
    assert {"config.yaml", "metrics.csv", "trace.csv", "summary.json", "authority.json",
            "chains"} <= names
    assert {p.name for p in (run_dir / "chains").iterdir()} >= {"t1.chain", "main.chain",
                                                                 "trading.chain", "t1.json"}
    again = tmp_path / "again"
    run_experiment(load_config(run_dir / "config.yaml"), again)
    for rel in ("metrics.csv", "trace.csv", "summary.json", "chains/t1.chain", "chains/main.chain"):
        assert sha(run_dir / rel) == sha(again / rel), rel


def test_metrics_columns(run_dir):
    with open(run_dir / "metrics.csv") as fh:
        header = next(csv.reader(fh))
    assert header[2:] == ["status", "global_test_accuracy", "bytes_this_round", "cumulative_bytes",
                          "compression_ratio", "exposure_ratio", "qualified_count",
                          "slashed_count", "simulated_time_ms"]
    rows = read_metrics_csv(run_dir / "metrics.csv")
    assert len(rows) == 8


def test_clean_run_verifies(run_dir):
    report = verify_artifacts(run_dir)
    assert report.ok, report.lines()


def test_hand_tampered_chain_reports_height(run_dir, tmp_path):
    import shutil
    bad = tmp_path / "bad"
    shutil.copytree(run_dir, bad)
    path = bad / "chains" / "t1.chain"
    blocks = read_chain_file(path)
    data = bytearray(path.read_bytes())
    offset = sum(4 + len(b.encode()) for b in blocks[:3]) + 30  # inside block 3's header
    data[offset] ^= 0x01
    path.write_bytes(bytes(data))
    report = verify_artifacts(bad)
    assert not report.ok
    failed = [c for c in report.checks if not c.ok]
    assert failed[0].name == "chain t1" and "height 3" in failed[0].detail
    assert main(["verify", str(bad)]) == 1


def test_fuzzed_tampers_all_detected(run_dir, tmp_path, rng):
    import shutil
    work = tmp_path / "fuzz"
    shutil.copytree(run_dir, work)
    chains = sorted((work / "chains").glob("*.chain"))
    originals = {p: p.read_bytes() for p in chains}
    detected = 0
    for _ in range(100):
        p = chains[int(rng.integers(len(chains)))]
        raw = bytearray(originals[p])
        bit = int(rng.integers(len(raw) * 8))
        raw[bit // 8] ^= 1 << (bit % 8)
        p.write_bytes(bytes(raw))
        detected += not verify_artifacts(work).ok
        p.write_bytes(originals[p])
    assert detected == 100


def test_missing_files_raise(tmp_path):
    with pytest.raises(InputError):
        verify_artifacts(tmp_path)


def test_single_value_sweep_equals_run(tmp_path):
    cfg = small_config(scenario="fel-gcs")
    rows = sweep(cfg, "rho", [5], tmp_path / "sw")
    res = run_experiment(cfg)
    assert rows[0][1] == res.summary["final_accuracy"]
    assert rows[0][5] == res.summary["simulated_time_ms"]
    with open(tmp_path / "sw" / "comparison.csv") as fh:
        assert next(csv.reader(fh))[:3] == ["value", "final_accuracy", "compression_ratio"]
    with pytest.raises(ConfigurationError):
        sweep(cfg, "compression.nonsense", [1])


def test_export_metrics(run_dir):
    text = export_metrics(run_dir)
    assert text.splitlines()[0].startswith("task,round,status")
    doc = json.loads(export_metrics(run_dir, "json", task="t1"))
    assert len(doc) == 8 and doc[0]["round"] == 1


def test_cli_end_to_end(tmp_path, capsys):
    cfgp = tmp_path / "cfg.yaml"
    cfgp.write_text(yaml.safe_dump(small_config().source_dict))
    out = tmp_path / "out"
    assert main(["run", str(cfgp), "--out", str(out), "--set", "rounds=4"]) == 0
    line = capsys.readouterr().out
    assert "final_accuracy=" in line and "total_bytes=" in line and "simulated_time_ms=" in line
    assert main(["verify", str(out)]) == 0
    assert capsys.readouterr().out.strip().endswith("OK")
    assert main(["inspect-block", str(out / "chains" / "t1.chain"), "2"]) == 0
    block = json.loads(capsys.readouterr().out)
    assert block["height"] == 2 and block["round"] == 2
    assert main(["inspect-block", str(out / "chains" / "t1.chain"), "99"]) == 1
    assert main(["export-metrics", str(out)]) == 0
    assert capsys.readouterr().out.count("\n") == 5
    assert main(["sweep", str(cfgp), "--param", "rho", "--values", "5", "100",
                 "--out", str(tmp_path / "sw")]) == 0
    assert (tmp_path / "sw" / "comparison.csv").is_file()
    assert main(["run", str(tmp_path / "missing.yaml")]) == 1
