import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from sidescore.cli import main, read_embeddings
from sidescore.data import PARKINSON_SCHEMA

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

SMALL = """[data]
source = blobs
n_per_class = 30
spread = 0.5
test_fraction = 0.25

[model]
hidden_layers = 16
n_score_classes = 4
head_hidden = 16

[train]
epochs = {epochs}
batch_size = 32
triplet_reduction = mean
"""


@pytest.fixture
def small_config(tmp_path):
    p = tmp_path / "small.ini"
    p.write_text(SMALL.format(epochs=3))
    return p


@pytest.fixture
def trained_run(tmp_path, small_config):
    out = tmp_path / "run"
    assert main(["train", "--config", str(small_config), "--out", str(out)]) == 0
    return out


def test_train_outputs(trained_run):
    for name in ("checkpoint.pt", "manifest.txt", "history.tsv", "timing.tsv"):
        assert (trained_run / name).exists()
    manifest = (trained_run / "manifest.txt").read_text()
    for section in ("[data]", "[model]", "[train]", "[weights]", "[run]"):
        assert section in manifest
    assert "optimizer = Adam" in manifest
    assert len((trained_run / "history.tsv").read_text().splitlines()) == 4


def test_history_byte_identical(tmp_path, small_config):
    outs = [tmp_path / "a", tmp_path / "b"]
    for o in outs:
        assert main(["train", "--config", str(small_config), "--out", str(o)]) == 0
    assert (outs[0] / "history.tsv").read_bytes() == (outs[1] / "history.tsv").read_bytes()
    assert main(["train", "--config", str(small_config), "--out", str(tmp_path / "c"), "--seed", "5"]) == 0
    assert (tmp_path / "c" / "history.tsv").read_bytes() != (outs[0] / "history.tsv").read_bytes()


def test_manifest_is_a_config(tmp_path, trained_run):
    # the materialized manifest trains again to the same history
    out = tmp_path / "again"
    assert main(["train", "--config", str(trained_run / "manifest.txt"), "--out", str(out)]) == 0
    assert (out / "history.tsv").read_bytes() == (trained_run / "history.tsv").read_bytes()


def test_eval(trained_run, capsys):
    out = trained_run / "eval"
    assert main(["eval", "--checkpoint", str(trained_run / "checkpoint.pt"), "--out", str(out)]) == 0
    report = dict(line.split(": ", 1) for line in (out / "metrics.txt").read_text().splitlines())
    assert 0 <= float(report["cluster_accuracy"]) <= 1
    assert report["n_test"] == "30"
    assert (out / "metrics.tsv").read_text().startswith("metric\tvalue\n")
    assert "cluster_accuracy" in capsys.readouterr().out


def test_embed_and_plot(trained_run, tmp_path):
    emb = tmp_path / "emb.tsv"
    rc = main(["embed", "--checkpoint", str(trained_run / "checkpoint.pt"), "--out", str(emb),
               "--extra", "side,inferred_side,score,label"])
    assert rc == 0
    header, table = read_embeddings(emb)
    assert header == ["id", "mean_0", "mean_1", "var_0", "var_1", "side", "inferred_side", "score", "label"]
    assert table.shape == (30, 9)
    assert (table[:, 3:5] > 0).all()
    assert np.array_equal(table[:, 0], np.arange(30))

    png = tmp_path / "plot.png"
    assert main(["plot-latent", "--embeddings", str(emb), "--color-by", "side", "--out", str(png)]) == 0
    assert png.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    assert main(["plot-latent", "--embeddings", str(emb), "--color-by", "nope", "--out", str(png)]) == 2


def test_embed_train_split(trained_run, tmp_path):
    emb = tmp_path / "tr.tsv"
    assert main(["embed", "--checkpoint", str(trained_run / "checkpoint.pt"), "--split", "train",
                 "--out", str(emb)]) == 0
    assert read_embeddings(emb)[1].shape == (90, 5)


def test_divcheck(capsys):
    assert main(["divcheck", "--n-trials", "20"]) == 0
    out = capsys.readouterr().out
    assert "gating properties hold" in out and "triangle" in out
    assert main(["divcheck", "--n-trials", "20", "--broken-interpolant"]) == 1
    assert "FAILED" in capsys.readouterr().out
    assert main(["divcheck", "--n-trials", "20", "--strict-metric"]) == 1


class TestExitCodes:
    def test_missing_config(self, tmp_path):
        assert main(["train", "--config", str(tmp_path / "none.ini")]) == 2

    def test_bad_config_value(self, tmp_path):
        p = tmp_path / "bad.ini"
        p.write_text("[train]\nepochs = lots\n")
        assert main(["train", "--config", str(p), "--out", str(tmp_path / "o")]) == 2
        p.write_text("[train]\nepochs = 0\n")
        assert main(["train", "--config", str(p), "--out", str(tmp_path / "o")]) == 2
        p.write_text("[extras]\nx = 1\n")
        assert main(["train", "--config", str(p), "--out", str(tmp_path / "o")]) == 2

    def test_missing_data(self, tmp_path):
        p = tmp_path / "csv.ini"
        p.write_text("[data]\nsource = csv\npath = missing.csv\nschema = builtin:parkinson\n")
        assert main(["train", "--config", str(p), "--out", str(tmp_path / "o")]) == 3

    def test_missing_checkpoint(self, tmp_path):
        assert main(["eval", "--checkpoint", str(tmp_path / "x.pt")]) == 3

    def test_numeric_abort(self, tmp_path):
        p = tmp_path / "nan.ini"
        p.write_text(SMALL.format(epochs=1) + "learning_rate = 1e30\n")
        assert main(["train", "--config", str(p), "--out", str(tmp_path / "o")]) == 4

    def test_unknown_extra(self, trained_run):
        assert main(["embed", "--checkpoint", str(trained_run / "checkpoint.pt"), "--extra", "bogus"]) == 2

    def test_bad_embeddings(self, tmp_path):
        p = tmp_path / "e.tsv"
        p.write_text("id\tmean_0\n0\tx\n")
        assert main(["plot-latent", "--embeddings", str(p), "--color-by", "id", "--out", str(tmp_path / "p.png")]) == 3


def test_out_env_default(tmp_path, small_config, monkeypatch):
    monkeypatch.setenv("SIDESCORE_OUT", str(tmp_path / "runs"))
    assert main(["train", "--config", str(small_config)]) == 0
    assert (tmp_path / "runs" / "small" / "checkpoint.pt").exists()


def test_csv_pipeline_with_schema_override(tmp_path):
    rng = np.random.default_rng(0)
    cols = list(PARKINSON_SCHEMA)
    lines = [",".join(cols)]
    for i in range(120):
        motor = rng.uniform(5, 40)
        row = {c: rng.lognormal() for c in cols}
        row.update({"subject#": i % 9, "motor_UPDRS": motor, "total_UPDRS": 1.3 * motor + rng.normal()})
        lines.append(",".join(repr(float(row[c])) for c in cols))
    (tmp_path / "p.csv").write_text("\n".join(lines))
    cfg = tmp_path / "p.ini"
    cfg.write_text("[data]\nsource = csv\npath = p.csv\nschema = builtin:parkinson\n"
                   "[model]\nhidden_layers = 16\nn_score_classes = 4\n"
                   "[train]\nepochs = 2\ntriplet_regime = by_quantile\ntriplet_reduction = mean\n")
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
    assert main(["eval", "--checkpoint", str(out / "checkpoint.pt"), "--out", str(out / "ev")]) == 0
    report = (out / "ev" / "metrics.txt").read_text()
    assert "pearson_r:" in report and "quantile_bin_accuracy:" in report

    schema = tmp_path / "schema.txt"
    schema.write_text("\n".join(f"{c} = {r}" for c, r in PARKINSON_SCHEMA.items()) + "\n")
    assert main(["eval", "--checkpoint", str(out / "checkpoint.pt"), "--schema", str(schema),
                 "--out", str(out / "ev2")]) == 0
    assert (out / "ev2" / "metrics.txt").read_text() == report


def test_console_script(small_config, tmp_path):
    proc = subprocess.run([sys.executable, "-m", "sidescore.cli", "divcheck", "--n-trials", "10"],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr


@pytest.mark.slow
def test_blob_config_under_a_minute(tmp_path):
    import time
    t0 = time.perf_counter()
    out = tmp_path / "blobs"
    assert main(["train", "--config", str(CONFIGS / "blobs.ini"), "--out", str(out)]) == 0
    assert main(["eval", "--checkpoint", str(out / "checkpoint.pt"), "--out", str(out)]) == 0
    assert time.perf_counter() - t0 < 60
    report = dict(l.split(": ", 1) for l in (out / "metrics.txt").read_text().splitlines())
    assert float(report["cluster_accuracy"]) >= 0.95
