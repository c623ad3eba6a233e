import csv
import json

import pytest

from simulstream.cli import main

TINY_TOML = """
[model]
d_model = 16
enc_heads = 2
enc_ffn = 32
conv_kernel = 5
dec_heads = 2
dec_ffn = 32

[train]
batch_size = 4
"""


def rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.toml").write_text(TINY_TOML)
    assert main(["gen-data", "--out", str(root / "data"), "--n", "40", "--n-eval", "6", "--seed", "3"]) == 0
    assert main(["train", "--config", str(root / "tiny.toml"), "--corpus", str(root / "data"),
                 "--out", str(root / "run"), "--steps", "4", "--r", "8"]) == 0
    return root


def test_gen_data_outputs(work):
    d = work / "data"
    for name in ("train.jsonl.gz", "valid.jsonl.gz", "test.jsonl.gz", "stats.json", "resolved_config.json"):
        assert (d / name).exists()
    assert json.loads((d / "stats.json").read_text())["train"]["samples"] == 40


def test_gen_data_is_byte_identical(work, tmp_path):
    assert main(["gen-data", "--out", str(tmp_path), "--n", "40", "--n-eval", "6", "--seed", "3"]) == 0
    for name in ("train.jsonl.gz", "test.jsonl.gz", "stats.json"):
        assert (tmp_path / name).read_bytes() == (work / "data" / name).read_bytes()


def test_gen_data_rejects_zero_samples(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path), "--n", "0"]) == 1


def test_train_log_has_one_row_per_step(work):
    log = rows(work / "run" / "train_log.csv")
    assert [int(r["step"]) for r in log] == [1, 2, 3, 4]
    assert (work / "run" / "ckpt").is_dir()
    cfg = json.loads((work / "run" / "resolved_config.json").read_text())
    assert cfg["model"]["d_model"] == 16 and cfg["train"]["batch_size"] == 4


def test_train_resume_appends(work, tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--config", str(work / "tiny.toml"), "--corpus", str(work / "data"),
                 "--out", str(out), "--steps", "2", "--r", "8"]) == 0
    assert main(["train", "--config", str(work / "tiny.toml"), "--corpus", str(work / "data"),
                 "--out", str(out), "--steps", "2", "--ckpt", str(out / "ckpt")]) == 0
    steps = [int(r["step"]) for r in rows(out / "train_log.csv")]
    assert steps == [1, 2, 3, 4]
    # resuming reproduces the uninterrupted run exactly
    assert rows(out / "train_log.csv") == rows(work / "run" / "train_log.csv")


def test_training_c_requires_fixed_mode(work, tmp_path):
    base = ["train", "--config", str(work / "tiny.toml"), "--corpus", str(work / "data"),
            "--out", str(tmp_path), "--steps", "1", "--r", "8"]
    assert main(base + ["--C", "4"]) == 1
    assert main(base + ["--chunk-mode", "fixed", "--C", "4"]) == 0
    assert {r["chunk"] for r in rows(tmp_path / "train_log.csv")} == {"4"}


def _eval(work, out, *extra):
    return main(["eval", "--ckpt", str(work / "run" / "ckpt"), "--corpus", str(work / "data"),
                 "--out", str(out), *extra])


def test_eval_offline_writes_report(work, tmp_path):
    assert _eval(work, tmp_path, "--mode", "offline") == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["mode"] == "offline" and report["n_samples"] == 6
    for key in ("unit_bleu", "text_bleu", "AL", "AL_CA", "Discontinuity_Sum", "RTF"):
        assert key in report
    traces = (tmp_path / "traces.jsonl").read_text().splitlines()
    assert len(traces) == 6


def test_eval_rejects_mismatched_parameters(work, tmp_path):
    assert _eval(work, tmp_path, "--mode", "simul", "--k", "3") == 1
    assert _eval(work, tmp_path, "--mode", "waitk") == 1


def test_eval_waitk(work, tmp_path):
    assert _eval(work, tmp_path, "--mode", "waitk", "--k", "2") == 0
    assert json.loads((tmp_path / "report.json").read_text())["k"] == 2


def test_eval_missing_checkpoint_is_usage_error(work, tmp_path):
    assert main(["eval", "--corpus", str(work / "data"), "--out", str(tmp_path)]) == 1


def test_curve_rows_and_determinism(work, tmp_path):
    args = ["curve", "--ckpt", str(work / "run" / "ckpt"), "--corpus", str(work / "data"), "--limit", "4"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "curve.csv").read_bytes()
    assert a == (tmp_path / "b" / "curve.csv").read_bytes()
    curve = rows(tmp_path / "a" / "curve.csv")
    assert len(curve) == 5
    als = [float(r["AL"]) for r in curve]
    assert als == sorted(als)
    assert all(float(r["AL_CA"]) >= float(r["AL"]) for r in curve)
    plot = json.loads((tmp_path / "a" / "curve_plot.json").read_text())
    assert len(plot["ideal"]) == len(plot["computation_aware"]) == 5


def test_curve_single_point_grid(work, tmp_path):
    assert main(["curve", "--ckpt", str(work / "run" / "ckpt"), "--corpus", str(work / "data"),
                 "--limit", "2", "--grid", "inf", "--out", str(tmp_path)]) == 0
    assert [r["C"] for r in rows(tmp_path / "curve.csv")] == ["inf"]


def test_inspect_omits_blanks(work, tmp_path, capsys):
    assert main(["inspect", "--ckpt", str(work / "run" / "ckpt"), "--corpus", str(work / "data"),
                 "--sample", "1", "--C", "4", "--out", str(tmp_path)]) == 0
    dump = json.loads((tmp_path / "inspect_1.json").read_text())
    assert dump["C"] == 4 and dump["chunk_boundaries"][0] == 4
    assert all(e["label"] != 2 for e in dump["asr"] + dump["nar_s2tt"])
    assert all(e["frame"] < dump["frames"] for e in dump["asr"])
    assert json.loads(capsys.readouterr().out) == dump


def test_inspect_sample_out_of_range(work):
    assert main(["inspect", "--ckpt", str(work / "run" / "ckpt"), "--corpus", str(work / "data"),
                 "--sample", "99"]) == 1


def test_config_file_filled_and_overridden(work, tmp_path):
    cfg = tmp_path / "g.toml"
    cfg.write_text('n = 7\nn-eval = 2\nseed = 3\n')
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    assert json.loads((tmp_path / "a" / "stats.json").read_text())["train"]["samples"] == 7
    assert main(["gen-data", "--config", str(cfg), "--n", "5", "--out", str(tmp_path / "b")]) == 0
    assert json.loads((tmp_path / "b" / "stats.json").read_text())["train"]["samples"] == 5


def test_bad_config_is_usage_error(tmp_path):
    cfg = tmp_path / "bad.toml"
    cfg.write_text("bogus_key = 1\n")
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path)]) == 1
    cfg.write_text("n = [\n")
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path)]) == 1


def test_unknown_command_exits_one():
    with pytest.raises(SystemExit) as e:
        main(["frobnicate"])
    assert e.value.code == 1
