"""Builders and end-to-end runs driven by a RunConfig.

The CLI and the acceptance suite both go through these functions, so a
config file fully determines models, data streams and seeds.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, parse_config_text
from .generation import GenerationConfig, Translator
from .metrics import (
    DomainClassifier,
    MetricReport,
    evaluate,
    train_domain_classifier,
)
from .quantizer import SRQConfig
from .rng import numpy_rng, seed_init, stream_seed
from .synthetic import SyntheticDomainSpec, synth_sample
from .synthetic import UnpairedStream
from .tokenizer import ScaleSchedule, Tokenizer, codebook_usage, pretrain_tokenizer, reconstruction_l1
from .training import LossReport, LossWeights, MetricsWriter, OptimConfig, TranslatorBundle, X, Y, train
from .transformer import NextScaleTransformer

_SEED_MASK = 0x7FFF_FFFF


def data_spec(cfg: RunConfig, role: str = "data") -> SyntheticDomainSpec:
    """Synthetic image family for a role: ``data`` (training), ``eval``, ``classifier``, ``heldout``."""
    return SyntheticDomainSpec(seed=stream_seed(cfg.seed, role) & _SEED_MASK, size=cfg.image_size)


# -- builders ---------------------------------------------------------------------

def build_tokenizer(cfg: RunConfig) -> Tokenizer:
    seed_init(cfg.seed)
    return Tokenizer(
        image_size=cfg.image_size,
        C=cfg.latent_channels,
        V=cfg.codebook_size,
        factor=cfg.latent_factor,
        schedule=ScaleSchedule.from_sides(cfg.scale_sides),
        width=cfg.vae_width,
        quantizer=cfg.tokenizer_quantizer,
    )


def generation_config(cfg: RunConfig) -> GenerationConfig:
    return GenerationConfig(
        mode=cfg.mode,
        a=cfg.fusion_a,
        srq=SRQConfig(tau=cfg.tau, gumbel=cfg.gumbel, seed=stream_seed(cfg.seed, "gumbel") & _SEED_MASK),
        quantizer=cfg.quantizer,
        use_cache=cfg.use_cache,
    )


def optim_config(cfg: RunConfig) -> OptimConfig:
    return OptimConfig(
        lr=cfg.lr, disc_lr=cfg.disc_lr, warmup=cfg.warmup,
        betas=(cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay,
    )


def loss_weights(cfg: RunConfig) -> LossWeights:
    return LossWeights(cyc=cfg.lambda_cyc, gan=cfg.lambda_gan, idt=cfg.lambda_idt, perceptual=cfg.lambda_p)


def build_bundle(cfg: RunConfig, tok: Tokenizer) -> TranslatorBundle:
    tok.freeze()
    seed_init(cfg.seed)
    transformer = NextScaleTransformer(
        tok.C, tok.codebook.V, tok.schedule.sizes,
        width=cfg.width, heads=cfg.heads, depth=cfg.depth,
        bitwise=tok.bitwise is not None,
    )
    return TranslatorBundle(Translator(tok, transformer), generation_config(cfg), loss_weights(cfg))


# -- checkpoints --------------------------------------------------------------------

def _config_of(manifest: dict) -> RunConfig:
    text = "".join(f"{k} = {v}\n" for k, v in manifest["config"].items())
    return parse_config_text(text)


def save_module(path, module: torch.nn.Module, cfg: RunConfig, name: str) -> Path:
    return save_checkpoint(path, module.state_dict(), cfg.to_dict(), name)


def load_tokenizer(path) -> tuple[Tokenizer, RunConfig]:
    tensors, manifest = load_checkpoint(path)
    cfg = _config_of(manifest)
    tok = build_tokenizer(cfg)
    tok.load_state_dict(tensors)
    return tok.freeze(), cfg


def load_bundle(path) -> tuple[TranslatorBundle, RunConfig]:
    tensors, manifest = load_checkpoint(path)
    cfg = _config_of(manifest)
    bundle = build_bundle(cfg, build_tokenizer(cfg))
    bundle.load_state_dict(tensors)
    return bundle.eval(), cfg


def load_classifier(path) -> DomainClassifier:
    tensors, _ = load_checkpoint(path)
    clf = DomainClassifier()
    clf.load_state_dict(tensors)
    return clf.eval()


# -- runs ----------------------------------------------------------------------------

@dataclass
class TokenizerRun:
    tokenizer: Tokenizer
    history: list[dict]
    heldout_l1: float
    usage: float


def heldout_images(cfg: RunConfig, n: int = 64) -> torch.Tensor:
    spec = data_spec(cfg, "heldout")
    return torch.cat([synth_sample(spec, n, "x"), synth_sample(spec, n, "y", start=n)])


def pretrain(cfg: RunConfig, on_log: Callable[[int, dict], None] | None = None, log_every: int = 100) -> TokenizerRun:
    tok = build_tokenizer(cfg)
    spec = data_spec(cfg)
    pool = torch.cat([synth_sample(spec, 1024, "x"), synth_sample(spec, 1024, "y", start=1024)])
    rng = numpy_rng(cfg.seed, "data")

    def sample(step):
        return pool[torch.from_numpy(rng.integers(0, len(pool), cfg.tok_batch))]

    history = pretrain_tokenizer(
        tok, sample, cfg.tok_steps, batch_size=cfg.tok_batch, lr=cfg.tok_lr,
        seed=stream_seed(cfg.seed, "tokenizer") & _SEED_MASK, log_every=log_every, on_log=on_log,
    )
    tok.freeze()
    held = heldout_images(cfg)
    return TokenizerRun(tok, history, reconstruction_l1(tok, held), codebook_usage(tok, held))


def train_classifier(cfg: RunConfig) -> DomainClassifier:
    spec = data_spec(cfg, "classifier")
    half = 32
    labels = torch.cat([torch.full((half,), X), torch.full((half,), Y)])

    def sample(step):
        return torch.cat([synth_sample(spec, half, "x", start=step * half),
                          synth_sample(spec, half, "y", start=10**6 + step * half)]), labels

    return train_domain_classifier(sample, cfg.clf_steps, seed=stream_seed(cfg.seed, "classifier") & _SEED_MASK)


def eval_sets(cfg: RunConfig, n: int | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    n = n or cfg.eval_images
    spec = data_spec(cfg, "eval")
    return synth_sample(spec, n, "x"), synth_sample(spec, n, "y", start=n)


def train_translation(
    cfg: RunConfig,
    tok: Tokenizer,
    writer: MetricsWriter | None = None,
    on_log: Callable[[int, LossReport], None] | None = None,
    steps: int | None = None,
    bundle: TranslatorBundle | None = None,
) -> tuple[TranslatorBundle, list[tuple[int, LossReport]]]:
    bundle = bundle or build_bundle(cfg, tok)
    stream = UnpairedStream(data_spec(cfg), cfg.batch_size, seed=stream_seed(cfg.seed, "data") & _SEED_MASK)
    history = train(
        bundle, stream.next, cfg.steps if steps is None else steps, optim_config(cfg),
        log_every=cfg.log_every, writer=writer,
        gumbel_seed=stream_seed(cfg.seed, "gumbel") & _SEED_MASK, on_log=on_log,
    )
    return bundle.eval(), history


@dataclass
class DirectionalReport:
    x2y: MetricReport
    y2x: MetricReport
    seconds: float

    @property
    def fid_proxy(self) -> float:
        return (self.x2y.fid_proxy + self.y2x.fid_proxy) / 2

    @property
    def struct_dist(self) -> float:
        return (self.x2y.struct_dist + self.y2x.struct_dist) / 2

    @property
    def domain_acc(self) -> float:
        return (self.x2y.domain_acc + self.y2x.domain_acc) / 2

    def as_dict(self) -> dict:
        return {
            "fid_proxy": self.fid_proxy, "struct_dist": self.struct_dist, "domain_acc": self.domain_acc,
            "x2y": vars(self.x2y), "y2x": vars(self.y2x), "seconds": self.seconds,
        }


def evaluate_both(translator: Translator, gen_cfg: GenerationConfig, clf: DomainClassifier, xs, ys) -> DirectionalReport:
    t0 = time.perf_counter()
    a = evaluate(translator, gen_cfg, clf, xs, ys, Y)
    b = evaluate(translator, gen_cfg, clf, ys, xs, X)
    return DirectionalReport(a, b, time.perf_counter() - t0)


@torch.no_grad()
def srq_token_variance(translator: Translator, imgs: torch.Tensor, domain, gen_cfg: GenerationConfig) -> float:
    """Per-image variance of quantizer outputs across all scale tokens, averaged over channels and images."""
    state = translator.translate(imgs, domain, gen_cfg, return_state=True)[1]
    toks = torch.cat([r.flatten(2) for r in state.Rhat], dim=2)  # B, C, L
    return toks.double().var(dim=2).mean().item()


def cycle_ratio(history: list[tuple[int, LossReport]], window: int = 50) -> tuple[float, float, float]:
    """(step-50 moving average, final moving average, ratio) of the cycle loss."""
    cyc = np.array([r.cycle for _, r in history])
    if len(cyc) < window:
        raise ValueError(f"need at least {window} steps for the cycle-loss ratio, got {len(cyc)}")
    early = float(cyc[:window].mean())
    late = float(cyc[-window:].mean())
    return early, late, late / early
