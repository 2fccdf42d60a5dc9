import csv
import json
import statistics
import time

import pytest

from ccm import cli, verify
from ccm.blob import read_blob
from ccm.data import DatasetSpec

SPEC = {"samples_per_domain": 120, "seed": 2}
CONFIG = {"epochs": 2, "batch_size_per_domain": 16, "hidden_widths": [16], "feature_dim": 8}


@pytest.fixture
def files(tmp_path):
    spec_path = tmp_path / "spec.json"
    spec_path.write_text(json.dumps(SPEC))
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(CONFIG))
    ds = tmp_path / "data.ccm"
    assert cli.main(["generate", "--config", str(spec_path), "--out", str(ds), "--quiet"]) == 0
    return tmp_path, spec_path, cfg_path, ds


def test_generate_is_byte_identical(files):
    tmp, spec_path, _, ds = files
    again = tmp / "again.ccm"
    assert cli.main(["generate", "--config", str(spec_path), "--out", str(again), "--quiet"]) == 0
    assert ds.read_bytes() == again.read_bytes()


def test_generate_header_round_trips_spec(files):
    *_, ds = files
    header, arrays = read_blob(ds)
    assert DatasetSpec.from_dict(header["spec"]) == DatasetSpec(**SPEC)
    assert arrays["0.X"].shape == (120, 20)


def test_corrupted_dataset_header_exit_2(files, capsys):
    tmp, _, cfg, ds = files
    raw = bytearray(ds.read_bytes())
    raw[20] ^= 0xFF
    bad = tmp / "bad.ccm"
    bad.write_bytes(bytes(raw))
    assert cli.main(["train", "--config", str(cfg), "--dataset", str(bad), "--out", str(tmp / "o"), "--quiet"]) == 2
    assert "error" in capsys.readouterr().err
    assert not (tmp / "o").exists()


def test_unknown_spec_key_exit_2(tmp_path):
    p = tmp_path / "s.json"
    p.write_text(json.dumps({"samples_per_domain": 10, "flavour": "x"}))
    assert cli.main(["generate", "--config", str(p), "--out", str(tmp_path / "d.ccm"), "--quiet"]) == 2


def test_train_smoke(files):
    tmp, _, cfg, ds = files
    out = tmp / "run"
    start = time.time()
    assert cli.main(["train", "--config", str(cfg), "--dataset", str(ds), "--out", str(out), "--quiet"]) == 0
    assert time.time() - start < 30
    lines = [json.loads(s) for s in (out / "metrics.jsonl").read_text().splitlines()]
    assert len(lines) == 3 and lines[-1]["summary"]
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["epochs"] == 2
    assert manifest["dataset_spec"] == DatasetSpec(**SPEC).to_dict()
    assert (out / "checkpoint.ccm").is_file()


def test_train_loss_flags_echoed(files):
    tmp, _, cfg, ds = files
    out = tmp / "teach"
    args = ["train", "--config", str(cfg), "--dataset", str(ds), "--out", str(out), "--loss-flags", "teach",
            "--quiet"]
    assert cli.main(args) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["loss_flags"] == [True, False, False]
    assert manifest["effective_prediction_mode"] == "classifier"


def test_train_missing_dataset_exit_2(tmp_path):
    out = tmp_path / "never"
    assert cli.main(["train", "--dataset", str(tmp_path / "nope.ccm"), "--out", str(out), "--quiet"]) == 2
    assert not out.exists()


def test_train_bad_config_value_exit_2(files):
    tmp, _, _, ds = files
    cfg = tmp / "bad.json"
    cfg.write_text(json.dumps({"tau": -1}))
    assert cli.main(["train", "--config", str(cfg), "--dataset", str(ds), "--out", str(tmp / "x"), "--quiet"]) == 2


def test_evaluate_reports_every_domain(files, capsys):
    tmp, _, cfg, ds = files
    out = tmp / "run"
    cli.main(["train", "--config", str(cfg), "--dataset", str(ds), "--out", str(out), "--quiet"])
    capsys.readouterr()
    assert cli.main(["evaluate", str(out / "checkpoint.ccm"), "--dataset", str(ds), "--out", str(out)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert set(report["accuracy"]) == {"0", "1", "2", "3"}
    assert report["held_out_domain"] == 3
    selection = json.loads((out / "manifest.json").read_text())["selection"]
    assert report["accuracy"]["3"] == selection["test_accuracy"]


def test_ablate_table(files):
    tmp, _, cfg, ds = files
    out = tmp / "abl"
    args = ["ablate", "--config", str(cfg), "--dataset", str(ds), "--out", str(out), "--seeds", "0,1,2", "--quiet"]
    assert cli.main(args) == 0
    with open(out / "ablation.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == cli.ABLATION_FIELDS
    runs = [r for r in rows if r["kind"] == "run"]
    aggs = [r for r in rows if r["kind"] == "aggregate"]
    assert len(runs) == 15 and len(aggs) == 5
    assert all(r["prediction_mode"] == "classifier" for r in rows)
    for a in aggs:
        vals = [float(r["test_acc"]) for r in runs if r["config"] == a["config"]]
        assert float(a["test_acc"]) == pytest.approx(statistics.fmean(vals), abs=1e-12)
        assert float(a["test_acc_std"]) == pytest.approx(statistics.pstdev(vals), abs=1e-12)
    wo = [r for r in runs if r["config"] == "wo_teach"][0]
    assert (wo["teach"], wo["learn"], wo["cs"]) == ("0", "1", "1")


def test_ablate_bad_seeds_exit_2(files):
    tmp, _, _, ds = files
    assert cli.main(["ablate", "--dataset", str(ds), "--out", str(tmp / "a"), "--seeds", "x,1", "--quiet"]) == 2


def test_verify_passes(capsys):
    assert cli.main(["verify"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and out.count("PASS") == 4


def test_verify_reports_failure(monkeypatch, capsys):
    fake = [verify.CheckResult("gradients", True, "ok", 0.0), verify.CheckResult("front_door", False, "forced", 0.0)]
    monkeypatch.setattr(verify, "run_all", lambda: fake)
    assert cli.main(["verify", "--quiet"]) == 1
    assert "failed checks" in capsys.readouterr().err


def test_ablate_workers_match_sequential(files):
    tmp, _, cfg, ds = files
    tables = []
    for workers in ("1", "2"):
        out = tmp / f"w{workers}"
        args = ["ablate", "--config", str(cfg), "--dataset", str(ds), "--out", str(out), "--seeds", "0,1",
                "--workers", workers, "--quiet"]
        assert cli.main(args) == 0
        tables.append((out / "ablation.csv").read_bytes())
    assert tables[0] == tables[1]
