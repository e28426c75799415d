import contextlib
import csv
import io
import json

import numpy as np
import pytest
import torch

from cyclevar.cli import ABLATION_COLUMNS, MASK_CELLS, TEMPERATURE_GRID, build_parser, main, resolve_config
from cyclevar.imageio import read_image, to_uint8, write_image
from cyclevar.synthetic import SyntheticDomainSpec, synth_sample

TINY = """
image_size = 16
latent_channels = 4
codebook_size = 8
scales = 1,2,4
vae_width = 8
width = 16
heads = 2
depth = 1
tok_steps = 20
tok_batch = 8
steps = 6
batch_size = 2
log_every = 2
eval_every = 4
warmup = 2
clf_steps = 10
eval_images = 8
ablate_steps = 2
bench_repeats = 2
"""


def run(*argv):
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = main([str(a) for a in argv])
    return code, out.getvalue(), err.getvalue()


def records(stdout, kind):
    return [json.loads(line.split("\t", 1)[1]) for line in stdout.splitlines() if line.startswith(kind + "\t")]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY)
    out = root / "run"
    code, stdout, err = run("pretrain-tokenizer", "--config", cfg, "--out-dir", out)
    assert code == 0, err
    assert "reconstruction_l1=" in stdout
    code, stdout, err = run("train", "--config", cfg, "--out-dir", out)
    assert code == 0, err
    return root, cfg, out, stdout


def test_sweep_grid_constants():
    assert TEMPERATURE_GRID == (0.01, 0.1, 0.7, 1, 2, 10, 10000)
    assert len(MASK_CELLS) == 3


def test_parser_and_overrides(tmp_path):
    cfg_file = tmp_path / "c.cfg"
    cfg_file.write_text("tau = 0.5\nsteps = 7\n")
    args = build_parser().parse_args(
        ["train", "--config", str(cfg_file), "--tau", "3", "--set", "steps=9", "--set", "fusion-a=0.2"]
    )
    cfg = resolve_config(args)
    assert (cfg.tau, cfg.steps, cfg.fusion_a) == (3.0, 9, 0.2)


@pytest.mark.parametrize(
    "argv",
    [
        ["train", "--tau", "0"],
        ["train", "--fusion-a", "1.5"],
        ["train", "--set", "scales=1,2,4"],
        ["train", "--set", "bogus=1"],
        ["train", "--config", "/nonexistent/run.cfg"],
    ],
)
def test_invalid_configuration_exits_1(argv, tmp_path):
    code, _, err = run(*argv, "--out-dir", tmp_path)
    assert code == 1
    assert err.startswith("error:")


def test_missing_checkpoint_exits_1(tmp_path):
    code, _, err = run("translate", "--out-dir", tmp_path, "--input", tmp_path / "a.png",
                       "--output", tmp_path / "b.png", "--to-domain", "y")
    assert code == 1 and "checkpoint" in err
    code, _, _ = run("train", "--out-dir", tmp_path)
    assert code == 1


def test_pretrain_and_train_artifacts(workspace):
    _, _, out, stdout = workspace
    for name in ("tokenizer/manifest.json", "tokenizer_metrics.csv", "tokenizer_loss.png", "tokenizer_report.json",
                 "train_metrics.csv", "train_eval.jsonl", "translator/manifest.json", "train_report.json",
                 "training_curves.png", "samples.png", "classifier/manifest.json"):
        assert (out / name).exists(), name
    rows = list(csv.reader((out / "train_metrics.csv").open()))
    assert rows[0] == ["step", "cycle", "gan_g", "dis", "idt", "grad_norm", "wall_ms"]
    assert [int(r[0]) for r in rows[1:]] == [0, 2, 4, 5]
    assert len(records(stdout, "train_step")) == 4
    assert len(records(stdout, "train_eval")) == 1
    report = json.loads((out / "train_report.json").read_text())
    assert report["steps"] == 6 and set(report["final_eval"]) >= {"fid_proxy", "struct_dist", "domain_acc"}


def test_training_is_deterministic(workspace, tmp_path):
    _, cfg, out, _ = workspace
    code, _, err = run("train", "--config", cfg, "--out-dir", tmp_path, "--set", f"out_dir={tmp_path}",
                       "--tokenizer", out / "tokenizer")
    assert code == 0, err
    assert (tmp_path / "translator" / "tensors.bin").read_bytes() == (out / "translator" / "tensors.bin").read_bytes()


@pytest.fixture(scope="module")
def source_image(workspace):
    root = workspace[0]
    img = synth_sample(SyntheticDomainSpec(seed=77, size=16), 1, "x")[0]
    path = root / "src.png"
    write_image(path, img)
    return path


@pytest.mark.parametrize("mode,forwards", [("parallel", 1), ("serial", 3)])
def test_translate(workspace, source_image, mode, forwards):
    root, cfg, out, _ = workspace
    dst = root / f"out_{mode}.png"
    code, stdout, err = run("translate", "--config", cfg, "--out-dir", out, "--input", source_image,
                            "--output", dst, "--to-domain", "y", "--mode", mode)
    assert code == 0, err
    rec = records(stdout, "translate")[0]
    assert rec["forwards"] == forwards and rec["mode"] == mode
    assert read_image(dst, 16).shape == (3, 16, 16)
    again = root / f"again_{mode}.png"
    run("translate", "--config", cfg, "--out-dir", out, "--input", source_image, "--output", again,
        "--to-domain", "y", "--mode", mode)
    assert again.read_bytes() == dst.read_bytes()


def test_translate_with_zero_fusion_reproduces_reconstruction(workspace, source_image):
    from cyclevar import pipeline as pl

    root, cfg, out, _ = workspace
    dst = root / "a0.png"
    code, _, err = run("translate", "--config", cfg, "--out-dir", out, "--input", source_image,
                       "--output", dst, "--to-domain", "y", "--fusion-a", "0")
    assert code == 0, err
    tok, _ = pl.load_tokenizer(out / "tokenizer")
    with torch.no_grad():
        recon = tok.reconstruct(read_image(source_image)[None])[0]
    diff = np.abs(to_uint8(recon).astype(int) - to_uint8(read_image(dst)).astype(int))
    assert diff.max() <= 1


def test_translate_rejects_wrong_size(workspace, tmp_path):
    _, cfg, out, _ = workspace
    bad = tmp_path / "big.png"
    write_image(bad, torch.rand(3, 20, 20))
    code, _, err = run("translate", "--config", cfg, "--out-dir", out, "--input", bad,
                       "--output", tmp_path / "o.png", "--to-domain", "x")
    assert code == 1 and "16x16" in err


def test_bench(workspace):
    _, cfg, out, _ = workspace
    code, stdout, err = run("bench", "--config", cfg, "--out-dir", out)
    assert code == 0, err
    recs = records(stdout, "bench")
    assert [(r["mode"], r["forwards"]) for r in recs] == [("serial", 3), ("parallel", 1)]
    assert (out / "bench.png").exists() and (out / "bench.json").exists()
    assert list(csv.reader((out / "bench.csv").open()))[0] == ["mode", "K", "mean_s", "std_s", "forwards"]


@pytest.mark.parametrize("sweep,settings", [
    ("mask", ["none", "drop_ms_output", "drop_both"]),
    ("mode", ["serial", "parallel"]),
])
def test_checkpoint_sweeps(workspace, sweep, settings):
    _, cfg, out, _ = workspace
    code, stdout, err = run("ablate", "--config", cfg, "--out-dir", out, "--sweep", sweep)
    assert code == 0, err
    rows = list(csv.DictReader((out / f"ablate_{sweep}.csv").open()))
    assert [r["setting"] for r in rows] == settings
    assert list(rows[0]) == list(ABLATION_COLUMNS)
    assert (out / f"ablate_{sweep}.png").exists()
    if sweep == "mode":
        assert [int(r["forwards"]) for r in rows] == [3, 1]


def test_temperature_sweep_retrains_per_cell(workspace):
    _, cfg, out, _ = workspace
    code, stdout, err = run("ablate", "--config", cfg, "--out-dir", out, "--sweep", "temperature", "--values", "0.5,50")
    assert code == 0, err
    cells = records(stdout, "ablate_cell")
    assert [c["setting"] for c in cells] == ["tau=0.5", "tau=50"]
    assert all(c["train_s"] > 0 for c in cells)
    code, _, err = run("ablate", "--config", cfg, "--out-dir", out, "--sweep", "temperature", "--values", "hot")
    assert code == 1


def test_gradcheck_command(tmp_path):
    code, stdout, err = run("gradcheck", "--out-dir", tmp_path, "--max-coords", "16")
    assert code == 0, err
    rep = json.loads((tmp_path / "gradcheck_report.json").read_text())
    assert rep["srq_passed"] and rep["hard_null_passed"]
    assert any(line.startswith("srq\t") for line in stdout.splitlines())
