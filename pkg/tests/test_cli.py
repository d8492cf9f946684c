import json
import subprocess
import sys

import pytest

from canids import cli
from canids.codec import read_frames


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    assert run("gen", "--out", out, "--frames", 1500, "--seed", 7) == 0
    return out


@pytest.fixture(scope="module")
def bundle(corpus, tmp_path_factory):
    path = tmp_path_factory.mktemp("model") / "ids.bin"
    code = run("train", *sorted(corpus.glob("*.csv")), "--out", path, "--stage2-epochs", 2, "--seed", 1)
    assert code == 0
    return path


def test_gen_files_and_manifest(corpus, tmp_path):
    csvs = sorted(p.name for p in corpus.glob("*.csv"))
    assert csvs == ["DoS_dataset.csv", "Fuzzy_dataset.csv", "RPM_dataset.csv", "gear_dataset.csv"]
    manifest = json.loads((corpus / "manifest.json").read_text())
    assert manifest["schema_version"] == cli.SCHEMA_VERSION and manifest["config"]["seed"] == 7
    assert run("gen", "--out", tmp_path, "--frames", 1500, "--seed", 7) == 0
    for name in csvs:
        assert (tmp_path / name).read_bytes() == (corpus / name).read_bytes()


def test_gen_mix(tmp_path):
    assert run("gen", "--out", tmp_path, "--frames", 4000, "--mix", 0.14, "--seed", 2) == 0
    for p in tmp_path.glob("*.csv"):
        labels = read_frames(p).labels
        assert abs((labels != "Normal").mean() - 0.14) <= 0.005


def test_gen_missing_dir(tmp_path, capsys):
    assert run("gen", "--out", tmp_path / "absent", "--frames", 10) == 3
    assert "absent" in capsys.readouterr().err


def test_train_report(bundle):
    rep = json.loads(bundle.with_name("ids.bin.report.json").read_text())
    assert rep["parameters"] == {"stage1": 517, "stage2": 253_065, "total": 253_582}
    assert rep["config"]["pipeline"]["seed"] == 1
    assert rep["frames"]["train"] + rep["frames"]["test"] == rep["frames"]["total"]


def test_evaluate_reproduces_train_metrics(bundle, tmp_path):
    out = tmp_path / "eval.json"
    assert run("evaluate", "--bundle", bundle, "--split", "test", "--report", out) == 0
    rep = json.loads(bundle.with_name("ids.bin.report.json").read_text())
    assert json.loads(out.read_text())["result"] == rep["test"]


def test_holdout_attack(corpus, tmp_path):
    path = tmp_path / "lo.bin"
    code = run("train", *sorted(corpus.glob("*.csv")), "--out", path, "--holdout-attack", "RPM",
               "--stage1-epochs", 2, "--stage2-epochs", 1)
    assert code == 0
    rep = json.loads((tmp_path / "lo.bin.report.json").read_text())
    assert "RPM" not in rep["fit"]["labels"] and rep["parameters"]["stage1"] == 500
    assert "RPM" in rep["test"]["stage2"]["per_attack"]


def test_holdout_unknown_class_is_usage_error(corpus, tmp_path):
    assert run("train", corpus / "RPM_dataset.csv", "--out", tmp_path / "x", "--holdout-attack", "Nope") == 2


def test_detect_labelled_and_alert(bundle, corpus, tmp_path):
    verdicts, report = tmp_path / "v.jsonl", tmp_path / "r.json"
    src = corpus / "DoS_dataset.csv"
    assert run("detect", src, "--bundle", bundle, "--out", verdicts, "--report", report, "--alert-exit") == 1
    lines = verdicts.read_text().splitlines()
    assert len(lines) == 1500
    first = json.loads(lines[0])
    assert set(first) >= {"index", "verdict", "label", "stage1_distribution", "reconstruction_error"}
    doc = json.loads(report.read_text())
    assert doc["report"]["matrix"] and doc["schema_version"] == cli.SCHEMA_VERSION
    assert run("detect", src, "--bundle", bundle, "--out", verdicts) == 0


def test_detect_unlabelled(bundle, corpus, tmp_path):
    raw = tmp_path / "capture.csv"
    lines = (corpus / "RPM_dataset.csv").read_text().splitlines()[:50]
    raw.write_text("\n".join(l.rsplit(",", 1)[0] for l in lines) + "\n")
    report = tmp_path / "r.json"
    assert run("detect", raw, "--bundle", bundle, "--out", tmp_path / "v.jsonl", "--report", report) == 0
    assert not report.exists()
    assert len((tmp_path / "v.jsonl").read_text().splitlines()) == 50


def test_incorporate(bundle, corpus, tmp_path):
    confirmed = tmp_path / "confirmed.csv"
    confirmed.write_text("".join(f"{i * 0.01:.6f},0545,8,d8,0{i % 4},00,8a,00,01,00,00,Replay\n" for i in range(200)))
    out = tmp_path / "grown.bin"
    code = run("incorporate", "--bundle", bundle, "--confirmed", confirmed, "--label", "Replay",
               "--prior", *sorted(corpus.glob("*.csv")), "--out", out, "--batch-size", 32)
    assert code == 0
    assert run("detect", confirmed, "--bundle", out, "--out", tmp_path / "v.jsonl") == 0
    labels = [json.loads(l)["label"] for l in (tmp_path / "v.jsonl").read_text().splitlines()]
    assert labels.count("Replay") >= 190


def _sim(tmp_path, name, *extra):
    cfg = tmp_path / "sim.json"
    cfg.write_text(json.dumps({"synthetic": {"clients": 4, "frames_per_client": 600, "holdout_frames": 400}, "aggregators": 2}))
    log = tmp_path / name
    code = run("simulate", "--config", cfg, "--log", log, "--local-epochs", 1, "--stage2-epochs", 1, *extra)
    return code, log


def test_simulate_byte_identical(tmp_path):
    code_a, a = _sim(tmp_path, "a.jsonl", "--rounds", 2, "--seed", 4)
    code_b, b = _sim(tmp_path, "b.jsonl", "--rounds", 2, "--seed", 4)
    assert code_a == code_b == 0
    assert a.read_bytes() == b.read_bytes()
    recs = [json.loads(l) for l in a.read_text().splitlines()]
    assert [r["type"] for r in recs] == ["topology", "round", "round", "final"]
    final = recs[-1]
    assert final["schema_version"] == cli.SCHEMA_VERSION
    assert set(final["metrics"]) >= {"labels", "matrix", "per_class", "macro"}
    assert recs[0]["config"]["round"]["seed"] == 4


def test_simulate_zero_rounds(tmp_path):
    code, log = _sim(tmp_path, "z.jsonl", "--rounds", 0)
    lines = log.read_text().splitlines()
    assert code == 0 and len(lines) == 1 and json.loads(lines[0])["type"] == "topology"


def test_newer_config_refused(tmp_path):
    cfg = tmp_path / "sim.json"
    cfg.write_text(json.dumps({"schema_version": 99}))
    assert run("simulate", "--config", cfg, "--log", tmp_path / "l.jsonl") == 3


def test_exit_codes(tmp_path, monkeypatch):
    assert run("train") == 2
    assert run("bogus") == 2
    assert run("detect", tmp_path / "x.csv", "--bundle", tmp_path / "missing.bin") == 3
    monkeypatch.setenv(cli.SEED_ENV, "abc")
    assert run("gen", "--out", tmp_path, "--frames", 10) == 2


def test_seed_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.SEED_ENV, "7")
    assert run("gen", "--out", tmp_path, "--frames", 300) == 0
    assert json.loads((tmp_path / "manifest.json").read_text())["config"]["seed"] == 7


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "canids.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and "canids" in proc.stdout
