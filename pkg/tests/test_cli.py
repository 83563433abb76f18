"""End-to-end command-line tests at micro scale: exit codes, produced
artifacts, manifests, and the report/figure outputs."""

import os

import numpy as np
import pytest

from epf2 import cli
from epf2.model import load_checkpoint
from epf2.synthdata import load_dataset

MICRO_KEYS = dict(views=2, joints=20, channels=16, layers=1, heads=2, window=4,
                  image_height=16, image_width=16, patch_size=8,
                  steps=2, batch_size=1, sequence_length=6)


@pytest.fixture()
def micro_config(tmp_path):
    path = tmp_path / "micro.cfg"
    path.write_text("".join(f"{k} = {v}\n" for k, v in MICRO_KEYS.items()))
    return str(path)


def run(args):
    return cli.main(args)


# ---------------------------------------------------------------------------
# argument handling and exit codes
# ---------------------------------------------------------------------------


def test_unknown_subcommand_exits_one(capsys):
    assert run(["frobnicate"]) == 1
    assert "invalid choice" in capsys.readouterr().err


def test_missing_subcommand_exits_one():
    assert run([]) == 1


def test_unknown_preset_exits_one(capsys):
    assert run(["train", "--config", "no_such_preset"]) == 1
    assert "no_such_preset" in capsys.readouterr().err


def test_missing_checkpoint_exits_one(tmp_path):
    assert run(["eval", "--checkpoint", str(tmp_path / "nope.epf2"),
                "--data", str(tmp_path)]) == 1


def test_numeric_failure_exits_two(monkeypatch, capsys):
    monkeypatch.setattr(cli, "grad_check", lambda *a, **k: 1.0)
    assert run(["gradcheck", "--trials", "1"]) == 2
    assert "numeric failure" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------


def test_bench_prints_reference_totals(capsys):
    assert run(["bench"]) == 0
    out = capsys.readouterr().out
    assert "82688" in out and "131072" in out


def test_bench_writes_csv_png_and_manifest(tmp_path, capsys):
    out = tmp_path / "bench"
    assert run(["bench", "--out", str(out)]) == 0
    assert (out / "bench.csv").exists()
    assert (out / "bench.png").exists()
    manifest = (out / "run_manifest.txt").read_text()
    assert "command = bench" in manifest
    assert "channels = 128" in manifest


def test_bench_respects_channel_flag(capsys):
    assert run(["bench", "--channels", "64", "--views", "2"]) == 0
    out = capsys.readouterr().out
    # C=64, V=2 fused projection: (2*64+1)*64 params
    assert str((2 * 64 + 1) * 64) in out


# ---------------------------------------------------------------------------
# gen
# ---------------------------------------------------------------------------


def test_gen_creates_loadable_split(tmp_path, micro_config):
    data = tmp_path / "data"
    assert run(["gen", "--config", micro_config, "--data", str(data),
                "--out", str(data), "--split", "train", "--seeds", "0:2",
                "--frames", "8"]) == 0
    recs = load_dataset(data, "train")
    assert len(recs) == 2 and recs[0].labeled
    assert recs[0].images.shape == (8, 2, 16, 16)
    assert "command = gen" in (data / "train" / "run_manifest.txt").read_text()


def test_gen_bad_seed_range_exits_one(tmp_path, micro_config):
    assert run(["gen", "--config", micro_config, "--out", str(tmp_path),
                "--seeds", "abc"]) == 1


# ---------------------------------------------------------------------------
# train / eval / stream
# ---------------------------------------------------------------------------


@pytest.fixture()
def trained_run(tmp_path, micro_config):
    data, out = tmp_path / "data", tmp_path / "run"
    for split, seeds, extra in (("train", "0:2", []), ("val", "50:51", []),
                                ("unlabeled", "80:82", ["--unlabeled"])):
        assert run(["gen", "--config", micro_config, "--out", str(data),
                    "--split", split, "--seeds", seeds, "--frames", "8"] + extra) == 0
    assert run(["train", "--config", micro_config, "--data", str(data),
                "--out", str(out), "--val-split", "val"]) == 0
    return data, out, micro_config


def test_train_outputs(trained_run):
    _, out, _ = trained_run
    assert (out / "checkpoint_2.epf2").exists()
    assert (out / "loss_curve.csv").exists()
    assert (out / "loss_curve.png").exists()
    assert (out / "metrics.csv").exists()
    assert (out / "metrics.png").exists()
    manifest = (out / "run_manifest.txt").read_text()
    assert "command = train" in manifest and "steps = 2" in manifest
    # hashes recorded for every output that exists
    assert "checkpoint_2.epf2" in manifest


def test_eval_checkpoint(trained_run, tmp_path, capsys):
    data, out, cfg = trained_run
    ev = tmp_path / "eval"
    assert run(["eval", "--checkpoint", str(out / "checkpoint_2.epf2"),
                "--data", str(data), "--split", "val", "--out", str(ev)]) == 0
    assert (ev / "metrics.csv").exists() and (ev / "metrics.png").exists()
    assert "MPJPE" in capsys.readouterr().out


def test_stream_prints_per_frame_rows(trained_run, capsys):
    data, out, _ = trained_run
    seq = data / "val" / "50.epf2"
    assert run(["stream", "--checkpoint", str(out / "checkpoint_2.epf2"),
                "--data", str(seq)]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "frame,joint,x_m,y_m,z_m,trace_sigma"
    # 8 frames x 20 joints
    assert len(lines) == 1 + 8 * 20
    assert lines[1].startswith("0,head,")
    assert float(lines[1].split(",")[-1]) > 0  # covariance trace is positive


# ---------------------------------------------------------------------------
# auto-labeling pipeline
# ---------------------------------------------------------------------------


def test_pseudolabel_and_ssl_train(trained_run, tmp_path):
    data, out, cfg = trained_run
    ckpt = str(out / "checkpoint_2.epf2")
    assert run(["pseudolabel", "--checkpoint", ckpt, "--data", str(data),
                "--split", "unlabeled"]) == 0
    assert (data / "unlabeled" / "80.pseudo.epf2").exists()
    assert (data / "unlabeled" / "81.pseudo.epf2").exists()

    sslout = tmp_path / "ssl"
    assert run(["ssl-train", "--config", cfg, "--data", str(data),
                "--out", str(sslout), "--checkpoint", ckpt,
                "--val-split", "val"]) == 0
    assert (sslout / "checkpoint_2.epf2").exists()
    assert (sslout / "loss_curve.csv").exists()
    manifest = (sslout / "run_manifest.txt").read_text()
    assert "lambda1 = 0.5" in manifest

    model = load_checkpoint(str(sslout / "checkpoint_2.epf2"))
    assert model.cfg.channels == 16


def test_bench_with_micro_preset_still_prints_reference_rows(capsys):
    assert run(["bench", "--config", "micro"]) == 0
    out = capsys.readouterr().out
    assert "82688" in out and "131072" in out


def test_degenerate_ssl_train_checkpoint_matches_train(trained_run, tmp_path):
    from epf2.model import file_hash
    data, out, cfg = trained_run
    sslout = tmp_path / "ssl0"
    assert run(["ssl-train", "--config", cfg, "--data", str(data),
                "--out", str(sslout), "--lambda1", "0", "--lambda2", "0"]) == 0
    assert file_hash(sslout / "checkpoint_2.epf2") == \
        file_hash(out / "checkpoint_2.epf2")


def test_pseudolabel_requires_unlabeled_split(trained_run):
    data, out, _ = trained_run
    assert run(["pseudolabel", "--checkpoint", str(out / "checkpoint_2.epf2"),
                "--data", str(data), "--split", "train"]) == 1


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------


def test_gradcheck_passes(capsys):
    assert run(["gradcheck", "--trials", "1"]) == 0
    out = capsys.readouterr().out
    assert "full_loss" in out and "FAIL" not in out


# ---------------------------------------------------------------------------
# config plumbing
# ---------------------------------------------------------------------------


def test_config_file_overridden_by_flags(tmp_path, micro_config):
    class A:
        config = micro_config
        seed = 7
        steps = 5
        batch_size = None

    tcfg = cli.build_train_config(A())
    assert tcfg.steps == 5          # flag wins over the file's steps = 2
    assert tcfg.seed == 7
    assert tcfg.sequence_length == 6  # from the file
    assert tcfg.loss.total_steps == 5


def test_thread_cap_env(monkeypatch):
    monkeypatch.setenv("EPF2_THREADS", "1")
    cli._limit_threads()  # must not raise
