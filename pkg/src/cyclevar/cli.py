"""``cyclevar`` command line.

Exit codes: 0 success, 1 validation error (bad config, missing or corrupt
input), 2 numerical failure (diverged training, failed gradient check).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import torch

from . import pipeline as pl
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, dump_config, load_config, parse_assignments
from .gradflow import hard_null_check, srq_gradcheck
from .imageio import read_image, write_image
from .metrics import append_bench_csv, bench_modes
from .plotting import image_grid, plot_ablation, plot_bench, plot_tokenizer_curve, plot_training_curves
from .synthetic import domain_index
from .tokenizer import TrainingDivergedError
from .training import MetricsWriter
from .transformer import Instrument

log = logging.getLogger("cyclevar")

TEMPERATURE_GRID = (0.01, 0.1, 0.7, 1.0, 2.0, 10.0, 1e4)
MASK_CELLS = ("none", "drop_ms_output", "drop_both")
ABLATION_COLUMNS = ("setting", "fid_proxy", "struct_dist", "domain_acc", "wall_clock_s",
                    "train_s", "forwards", "srq_token_var")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2


class ValidationError(Exception):
    pass


# -- argument handling ----------------------------------------------------------

def _shared(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=("serial", "parallel"))
    p.add_argument("--tau", type=float)
    p.add_argument("--fusion-a", type=float, dest="fusion_a")
    p.add_argument("--gumbel", action="store_true", default=None)
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cyclevar", description="Unpaired translation with a next-scale transformer.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain-tokenizer", help="train and freeze the multi-scale tokenizer")
    _shared(p)
    p.add_argument("--steps", type=int, dest="tok_steps")

    p = sub.add_parser("train", help="unpaired cycle/adversarial training")
    _shared(p)
    p.add_argument("--tokenizer", help="tokenizer checkpoint (default OUT_DIR/tokenizer)")
    p.add_argument("--steps", type=int)

    p = sub.add_parser("translate", help="translate one image")
    _shared(p)
    p.add_argument("--checkpoint", help="translator checkpoint (default OUT_DIR/translator)")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--to-domain", required=True, choices=("x", "y"))

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks on a tiny 64-bit model")
    _shared(p)
    p.add_argument("--max-coords", type=int, default=64)

    p = sub.add_parser("ablate", help="temperature, mask, mode or gumbel sweep")
    _shared(p)
    p.add_argument("--sweep", required=True, choices=("temperature", "mask", "mode", "gumbel"))
    p.add_argument("--checkpoint", help="trained translator (mask and mode sweeps)")
    p.add_argument("--tokenizer", help="tokenizer checkpoint (temperature and gumbel sweeps retrain per cell)")
    p.add_argument("--values", help="comma-separated temperatures overriding the default grid")

    p = sub.add_parser("bench", help="serial vs parallel wall-clock")
    _shared(p)
    p.add_argument("--checkpoint")
    p.add_argument("--repeats", type=int, dest="bench_repeats")
    return parser


_CONFIG_KEYS = ("seed", "mode", "tau", "fusion_a", "gumbel", "out_dir", "steps", "tok_steps", "bench_repeats")


def resolve_config(args: argparse.Namespace) -> RunConfig:
    overrides = {k: getattr(args, k) for k in _CONFIG_KEYS if getattr(args, k, None) is not None}
    if args.set:
        overrides = {**parse_assignments("\n".join(args.set)), **overrides}
    return load_config(args.config, overrides)


def _out(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit(kind: str, payload: dict) -> None:
    """One delimited record per line: ``<kind>\\t<json>``."""
    print(f"{kind}\t{json.dumps(payload, sort_keys=True)}", flush=True)


def _require(path: Path, what: str) -> Path:
    if not (path / "manifest.json").exists():
        raise ValidationError(f"{what} checkpoint not found at {path}")
    return path


def _classifier(cfg: RunConfig, out: Path):
    path = out / "classifier"
    if (path / "manifest.json").exists():
        return pl.load_classifier(path)
    clf = pl.train_classifier(cfg)
    pl.save_module(path, clf, cfg, "classifier")
    return clf


def _overlay(cfg: RunConfig, ckpt_cfg: RunConfig, args) -> RunConfig:
    """Generation-time flags from the command line win over the checkpoint's."""
    keys = [k for k in ("seed", "mode", "tau", "fusion_a", "gumbel") if getattr(args, k, None) is not None]
    return ckpt_cfg.replace(**{k: getattr(cfg, k) for k in keys}, out_dir=cfg.out_dir).validate()


# -- commands --------------------------------------------------------------------------

def cmd_pretrain_tokenizer(cfg: RunConfig, args) -> int:
    out = _out(cfg)
    (out / "config.txt").write_text(dump_config(cfg))
    run = pl.pretrain(cfg, on_log=lambda s, r: _emit("tokenizer_step", r))
    ckpt = pl.save_module(out / "tokenizer", run.tokenizer, cfg, "tokenizer")
    with open(out / "tokenizer_metrics.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=("step", "l1", "vq"))
        w.writeheader()
        w.writerows(run.history)
    if run.history:
        plot_tokenizer_curve(run.history, out / "tokenizer_loss.png")
    report = {"checkpoint": str(ckpt), "final_loss": run.history[-1]["l1"] + run.history[-1]["vq"] if run.history else None,
              "heldout_l1": run.heldout_l1, "codebook_usage": run.usage}
    (out / "tokenizer_report.json").write_text(json.dumps(report, sort_keys=True) + "\n")
    _emit("tokenizer_report", report)
    print(f"reconstruction_l1={run.heldout_l1:.6f}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    out = _out(cfg)
    tok_path = _require(Path(args.tokenizer) if args.tokenizer else out / "tokenizer", "tokenizer")
    tok, _ = pl.load_tokenizer(tok_path)
    (out / "config.txt").write_text(dump_config(cfg))
    clf = _classifier(cfg, out)
    xs, ys = pl.eval_sets(cfg, min(cfg.eval_images, 64))
    bundle = pl.build_bundle(cfg, tok)
    rows, evals = [], []
    eval_log = open(out / "train_eval.jsonl", "w")

    def on_log(step, rep):
        row = {"step": step, **rep.as_dict()}
        rows.append(row)
        _emit("train_step", row)
        if cfg.eval_every and step and step % cfg.eval_every == 0:
            bundle.eval()
            r = pl.evaluate_both(bundle.generator, bundle.gen_cfg, clf, xs, ys).as_dict()
            r["step"] = step
            evals.append(r)
            eval_log.write(json.dumps(r, sort_keys=True) + "\n")
            eval_log.flush()
            _emit("train_eval", r)
            bundle.train()

    writer = MetricsWriter(out / "train_metrics.csv")
    try:
        bundle, history = pl.train_translation(cfg, tok, writer=writer, on_log=on_log, bundle=bundle)
    except TrainingDivergedError as exc:
        failed = pl.save_module(out / "translator.failed", bundle, cfg, "translator.failed")
        (out / "failure_report.json").write_text(json.dumps({"error": str(exc), **exc.report}, sort_keys=True, default=str))
        print(f"error: {exc}; partial checkpoint at {failed}", file=sys.stderr)
        return EXIT_NUMERIC
    finally:
        writer.close()
        eval_log.close()

    ckpt = pl.save_module(out / "translator", bundle, cfg, "translator")
    final = pl.evaluate_both(bundle.generator, bundle.gen_cfg, clf, xs, ys).as_dict()
    report = {"checkpoint": str(ckpt), "steps": len(history), "final_eval": final}
    if len(history) >= 50:
        early, late, ratio = pl.cycle_ratio(history)
        report.update(cycle_ma50_early=early, cycle_ma50_final=late, cycle_ratio=ratio)
    (out / "train_report.json").write_text(json.dumps(report, sort_keys=True) + "\n")
    if rows:
        plot_training_curves(rows, out / "training_curves.png")
    with torch.no_grad():
        fy = bundle.generator.translate(xs[:8], 1, bundle.gen_cfg)
        fx = bundle.generator.translate(ys[:8], 0, bundle.gen_cfg)
    image_grid([xs[:8], fy, ys[:8], fx], out / "samples.png", ["x", "x->y", "y", "y->x"])
    _emit("train_report", report)
    return EXIT_OK


def cmd_translate(cfg: RunConfig, args) -> int:
    ckpt = _require(Path(args.checkpoint) if args.checkpoint else Path(cfg.out_dir) / "translator", "translator")
    bundle, ckpt_cfg = pl.load_bundle(ckpt)
    run_cfg = _overlay(cfg, ckpt_cfg, args)
    try:
        img = read_image(args.input, size=run_cfg.image_size)
    except (OSError, ValueError) as exc:
        raise ValidationError(str(exc)) from None
    gen_cfg = pl.generation_config(run_cfg)
    model = bundle.generator.transformer
    model.instrument = Instrument()
    t0 = time.perf_counter()
    with torch.no_grad():
        out = bundle.generator.translate(img[None], domain_index(args.to_domain), gen_cfg)[0]
    elapsed = time.perf_counter() - t0
    write_image(args.output, out)
    _emit("translate", {"output": str(args.output), "mode": gen_cfg.mode, "forwards": model.instrument.calls,
                        "seconds": elapsed, "to_domain": args.to_domain})
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    torch.set_default_dtype(torch.float64)
    try:
        srq = srq_gradcheck(max_coords=args.max_coords)
        null = hard_null_check()
    finally:
        torch.set_default_dtype(torch.float32)
    for line in srq.lines():
        print(f"srq\t{line}")
    for line in null.lines():
        print(f"hard\t{line}")
    report = {
        "srq_passed": srq.passed, "srq_tol": srq.tol,
        "srq_worst_rel_significant": max(srq.rel_err_significant.values()), "srq_worst_abs": max(srq.abs_err.values()), "hard_null_passed": null.passed,
    }
    out = _out(cfg)
    (out / "gradcheck_report.json").write_text(json.dumps(report, sort_keys=True) + "\n")
    _emit("gradcheck", report)
    return EXIT_OK if srq.passed and null.passed else EXIT_NUMERIC


def _forwards(translator, img, domain, gen_cfg) -> int:
    model = translator.transformer
    prev, model.instrument = model.instrument, Instrument()
    try:
        with torch.no_grad():
            translator.translate(img[:1], domain, gen_cfg)
        return model.instrument.calls
    finally:
        model.instrument = prev


def _row(setting, rep, translator, gen_cfg, xs, train_s=0.0) -> dict:
    return {
        "setting": setting, "fid_proxy": rep.fid_proxy, "struct_dist": rep.struct_dist,
        "domain_acc": rep.domain_acc, "wall_clock_s": rep.seconds, "train_s": train_s,
        "forwards": _forwards(translator, xs, 1, gen_cfg),
        "srq_token_var": pl.srq_token_variance(translator, xs, 1, gen_cfg),
    }


def cmd_ablate(cfg: RunConfig, args) -> int:
    out = _out(cfg)
    clf = _classifier(cfg, out)
    xs, ys = pl.eval_sets(cfg)
    rows = []

    if args.sweep in ("temperature", "gumbel"):
        tok_path = _require(Path(args.tokenizer) if args.tokenizer else out / "tokenizer", "tokenizer")
        tok, _ = pl.load_tokenizer(tok_path)
        if args.sweep == "temperature":
            try:
                taus = [float(v) for v in args.values.split(",")] if args.values else list(TEMPERATURE_GRID)
            except ValueError:
                raise ValidationError(f"--values must be comma-separated numbers, got {args.values!r}") from None
            cells = [(f"tau={t:g}", cfg.replace(tau=t, mode="parallel").validate()) for t in taus]
        else:
            cells = [(f"gumbel={g}", cfg.replace(gumbel=g, mode="parallel").validate()) for g in (False, True)]
        for setting, cell_cfg in cells:
            t0 = time.perf_counter()
            bundle, _ = pl.train_translation(cell_cfg, tok, steps=cfg.ablate_steps)
            train_s = time.perf_counter() - t0
            rep = pl.evaluate_both(bundle.generator, bundle.gen_cfg, clf, xs, ys)
            rows.append(_row(setting, rep, bundle.generator, bundle.gen_cfg, xs, train_s))
            _emit("ablate_cell", rows[-1])
    else:
        ckpt = _require(Path(args.checkpoint) if args.checkpoint else out / "translator", "translator")
        bundle, ckpt_cfg = pl.load_bundle(ckpt)
        base = pl.generation_config(_overlay(cfg, ckpt_cfg, args)).with_(mode="parallel")
        if args.sweep == "mask":
            cells = [
                ("none", base),
                ("drop_ms_output", base.with_(drop_ms_output=True)),
                ("drop_both", base.with_(drop_ms_output=True, drop_ms_context=True)),
            ]
        else:
            cells = [("serial", base.with_(mode="serial")), ("parallel", base)]
        for setting, gen_cfg in cells:
            rep = pl.evaluate_both(bundle.generator, gen_cfg, clf, xs, ys)
            rows.append(_row(setting, rep, bundle.generator, gen_cfg, xs))
            _emit("ablate_cell", rows[-1])

    path = out / f"ablate_{args.sweep}.csv"
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS)
        w.writeheader()
        w.writerows(rows)
    plot_ablation(rows, out / f"ablate_{args.sweep}.png", f"{args.sweep} sweep")
    print(",".join(ABLATION_COLUMNS))
    for r in rows:
        print(",".join(str(r[c]) for c in ABLATION_COLUMNS))
    return EXIT_OK


def cmd_bench(cfg: RunConfig, args) -> int:
    out = _out(cfg)
    ckpt = _require(Path(args.checkpoint) if args.checkpoint else out / "translator", "translator")
    bundle, ckpt_cfg = pl.load_bundle(ckpt)
    gen_cfg = pl.generation_config(_overlay(cfg, ckpt_cfg, args))
    xs, _ = pl.eval_sets(cfg, 1)
    reports = bench_modes(bundle.generator, xs, 1, gen_cfg, repeats=cfg.bench_repeats)
    append_bench_csv(out / "bench.csv", reports)
    (out / "bench.json").write_text("\n".join(r.to_json() for r in reports) + "\n")
    plot_bench(reports, out / "bench.png")
    print(f"{'mode':<10}{'K':>3}{'mean_ms':>10}{'std_ms':>9}{'forwards':>10}")
    for r in reports:
        print(f"{r.mode:<10}{r.K:>3}{r.mean_s * 1e3:>10.3f}{r.std_s * 1e3:>9.3f}{r.forwards:>10}")
    for r in reports:
        _emit("bench", json.loads(r.to_json()))
    return EXIT_OK


COMMANDS = {
    "pretrain-tokenizer": cmd_pretrain_tokenizer,
    "train": cmd_train,
    "translate": cmd_translate,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
    "bench": cmd_bench,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, ValidationError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
