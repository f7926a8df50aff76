import hashlib
import json

import numpy as np
import pytest

from nexvitad import cli
from nexvitad.numkernel import GradCheckReport, load_tensor

SMALL = ["--n-train", "12", "--n-test", "6"]


def run(*argv):
    return cli.main([str(a) for a in argv])


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def data_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert run("gen-data", "--out", out, "--split", "11/1", "--seed", 0, *SMALL) == 0
    return out


def test_gen_data_layout_and_hash(data_run, tmp_path):
    lines = (data_run / "data" / "manifest.jsonl").read_text().splitlines()
    header = json.loads(lines[0])
    assert header["split_label"] == "11/1"
    assert len({json.loads(line)["class_id"] for line in lines[1:]}) == 12
    assert run("gen-data", "--out", tmp_path, "--split", "11/1", "--seed", 0, *SMALL) == 0
    assert sha(tmp_path / "data" / "manifest.jsonl") == sha(data_run / "data" / "manifest.jsonl")


def test_gen_data_refuses_overwrite(data_run):
    assert run("gen-data", "--out", data_run) == cli.EXIT_CONFIG


def test_gen_data_records_8_4_split(tmp_path):
    assert run("gen-data", "--out", tmp_path, "--split", "8/4", "--n-train", 10, "--n-test", 2) == 0
    header = json.loads((tmp_path / "data" / "manifest.jsonl").read_text().splitlines()[0])
    assert header["split_label"] == "8/4" and len(header["split"]["target_classes"]) == 4


def test_config_round_trip():
    cfg = cli.RunConfig()
    back = cli.RunConfig.from_json(cfg.to_json())
    assert back == cfg
    with pytest.raises(cli.ConfigError):
        cli.RunConfig.from_json('{"bogus": {}}')


def test_parse_split():
    sc = cli.parse_split("0,1,2:3", 5)
    assert sc.source_classes == (0, 1, 2) and sc.target_classes == (3,) and sc.seed == 5
    with pytest.raises(cli.ConfigError):
        cli.parse_split("eleven", 0)


def test_full_pipeline_and_resume(data_run, tmp_path):
    out = tmp_path / "r"
    out.mkdir()
    (out / "config.json").write_text((data_run / "config.json").read_text())
    data = data_run / "data" / "manifest.jsonl"
    assert run("train", "--out", out, "--data", data, "--epochs", 3) == 0
    log = [json.loads(x) for x in (out / "log.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in log] == [1, 2, 3]

    # interrupted run resumed from its checkpoint ends bit-identical
    out2 = tmp_path / "r2"
    out2.mkdir()
    (out2 / "config.json").write_text((out / "config.json").read_text())
    assert run("train", "--out", out2, "--data", data, "--until", 1) == 0
    assert run("train", "--out", out2, "--data", data, "--resume") == 0
    a, b = out / "checkpoints" / "epoch_003", out2 / "checkpoints" / "epoch_003"
    for f in sorted((a / "params").iterdir()):
        assert f.read_bytes() == (b / "params" / f.name).read_bytes(), f.name

    assert run("build-bank", "--out", out, "--data", data, "--K", 5) == 0
    assert run("infer", "--out", out, "--data", data, "--K", 5) == 0
    index = json.loads((out / "scores" / "index.json").read_text())
    assert index["mode"] == "bank" and len(index["items"]) == 6
    item = index["items"][0]["id"]
    assert load_tensor(out / "scores" / f"{item}.nxt").shape == (64, 64)
    assert (out / "scores" / f"{item}.png").exists()
    assert run("eval", "--out", out, "--manifest", data) == 0
    rep = json.loads((out / "report.json").read_text())
    assert {"auc", "ap", "pro", "pro_threshold"} <= set(rep)
    assert 0 <= rep["auc"] <= 1

    assert run("infer", "--out", out, "--data", data, "--decoder-inference") == 0
    assert json.loads((out / "scores" / "index.json").read_text())["mode"] == "decoder"
    assert set(p.name for p in out.iterdir()) >= {"config.json", "log.jsonl", "checkpoints", "bank", "scores",
                                                 "report.json"}


def test_ablation_flags_recorded(data_run, tmp_path):
    (tmp_path / "config.json").write_text((data_run / "config.json").read_text())
    data = data_run / "data" / "manifest.jsonl"
    assert run("train", "--out", tmp_path, "--data", data, "--epochs", 2, "--no-pseudo", "--no-mtl") == 0
    cfg = json.loads((tmp_path / "config.json").read_text())
    assert cfg["train"]["pseudo_enabled"] is False and cfg["train"]["mtl_enabled"] is False
    meta = json.loads((tmp_path / "checkpoints" / "epoch_002" / "checkpoint.json").read_text())
    assert set(meta["routing"]["source"].values()) == {"source.shared"}


def test_missing_inputs_are_data_errors(tmp_path):
    assert run("train", "--out", tmp_path) == cli.EXIT_DATA
    assert run("infer", "--out", tmp_path) == cli.EXIT_DATA


def test_single_class_eval_fails_cleanly(data_run, tmp_path, capsys):
    scores = tmp_path / "scores"
    scores.mkdir()
    # only a normal image: every pixel is negative, so AUC is undefined
    lines = (data_run / "data" / "manifest.jsonl").read_text().splitlines()
    rec = next(json.loads(x) for x in lines[1:] if json.loads(x)["split"] == "test"
               and not json.loads(x)["is_defective"] and json.loads(x)["domain"] == "target")
    sid = "x"
    from nexvitad.numkernel import save_tensor
    save_tensor(scores / f"{sid}.nxt", np.zeros((64, 64)))
    (scores / "index.json").write_text(json.dumps({"items": [{"id": sid, "class_id": rec["class_id"],
                                                              "index": rec["index"]}]}))
    (tmp_path / "config.json").write_text((data_run / "config.json").read_text())
    code = run("eval", "--out", tmp_path, "--manifest", data_run / "data" / "manifest.jsonl")
    assert code == cli.EXIT_DATA
    assert "UndefinedMetricError" in capsys.readouterr().err


def test_grad_check_exit_codes(monkeypatch):
    monkeypatch.setattr(cli, "grad_check_full_loss", lambda **kw: GradCheckReport(1e-2, {"w": 1e-2}, 1))
    assert run("grad-check") == cli.EXIT_NUMERIC
    monkeypatch.setattr(cli, "grad_check_full_loss", lambda **kw: GradCheckReport(1e-8, {"w": 1e-8}, 1))
    assert run("grad-check") == 0


def test_bench_json(tmp_path):
    assert run("bench", "--out", tmp_path, "--K", 5, 10, "--batch", 1, "--repeats", 1) == 0
    rows = json.loads((tmp_path / "bench.json").read_text())
    assert [(r["K"], r["batch"]) for r in rows] == [(5, 1), (10, 1)]
    assert set(rows[0]) == {"K", "batch", "mean_ms", "std_ms"}


def test_thread_env_override(monkeypatch):
    args = cli.build_parser().parse_args(["--threads", "3", "grad-check"])
    assert cli.thread_count(args) == 3
    monkeypatch.setenv("NEXVITAD_THREADS", "2")
    assert cli.thread_count(args) == 2
