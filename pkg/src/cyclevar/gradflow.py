"""End-to-end gradient checks on a tiny 64-bit translator.

Two questions are answered on the same model: does the relaxed quantizer
deliver correct gradients to every generator parameter, and does hard
argmax selection deliver none at all.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .autograd import GradReport, grad_check
from .generation import GenerationConfig, Translator
from .quantizer import SRQConfig, straight_through_surrogate
from .synthetic import SyntheticDomainSpec, synth_sample
from .tokenizer import ScaleSchedule, Tokenizer
from .training import TranslatorBundle, total_generator_loss
from .transformer import NextScaleTransformer


@dataclass
class TinyConfig:
    image_size: int = 8
    factor: int = 2
    scales: tuple[int, ...] = (2, 4)
    C: int = 4
    V: int = 8
    vae_width: int = 8
    width: int = 16
    heads: int = 2
    depth: int = 1
    disc_width: int = 4
    gate_init_std: float = 0.5
    batch: int = 2
    tau: float = 2.0
    seed: int = 0


def tiny_bundle(cfg: TinyConfig = TinyConfig(), quantizer: str = "srq") -> tuple[TranslatorBundle, tuple]:
    torch.manual_seed(cfg.seed)
    tok = Tokenizer(
        image_size=cfg.image_size, C=cfg.C, V=cfg.V, factor=cfg.factor,
        schedule=ScaleSchedule.from_sides(cfg.scales), width=cfg.vae_width,
    ).freeze()
    tr = NextScaleTransformer(cfg.C, cfg.V, tok.schedule.sizes, width=cfg.width, heads=cfg.heads, depth=cfg.depth,
                              gate_init_std=cfg.gate_init_std)
    gen_cfg = GenerationConfig(srq=SRQConfig(tau=cfg.tau), quantizer=quantizer)
    bundle = TranslatorBundle(Translator(tok, tr), gen_cfg, disc_width=cfg.disc_width).double()
    spec = SyntheticDomainSpec(seed=cfg.seed, size=cfg.image_size, max_shapes=1)
    batch = (synth_sample(spec, cfg.batch, "x").double(), synth_sample(spec, cfg.batch, "y", start=cfg.batch).double())
    return bundle, batch


@dataclass
class NullGradReport:
    head_grad_max: dict[str, float] = field(default_factory=dict)
    any_generator_grad: bool = False

    @property
    def passed(self) -> bool:
        return all(v == 0.0 for v in self.head_grad_max.values())

    def lines(self) -> list[str]:
        status = "PASS (expected-null)" if self.passed else "FAIL"
        return [f"{status} {k}: max|grad|={v:.3e}" for k, v in self.head_grad_max.items()]


def srq_gradcheck(cfg: TinyConfig = TinyConfig(), tol: float = 1e-4, eps: float = 1e-4,
                  max_coords: int | None = 64) -> GradReport:
    """Finite-difference check of the total generator loss over all transformer parameters."""
    bundle, batch = tiny_bundle(cfg, "srq")
    f = straight_through_surrogate(lambda: total_generator_loss(bundle, batch))
    params = {n: p for n, p in bundle.generator.transformer.named_parameters() if p.requires_grad}
    return grad_check(f, params, eps=eps, tol=tol, atol=1e-11, max_coords=max_coords, seed=cfg.seed)


def hard_null_check(cfg: TinyConfig = TinyConfig()) -> NullGradReport:
    """Classifier-head gradients under hard argmax selection."""
    bundle, batch = tiny_bundle(cfg, "hard")
    model = bundle.generator.transformer
    loss = total_generator_loss(bundle, batch)
    head = {n: p for n, p in model.named_parameters() if n.startswith(("head.", "head_ada."))}
    report = NullGradReport()
    if loss.requires_grad:
        params = list(model.parameters())
        grads = torch.autograd.grad(loss, params, allow_unused=True)
        by_name = dict(zip([n for n, _ in model.named_parameters()], grads))
        report.any_generator_grad = any(g is not None and g.abs().max().item() > 0 for g in grads)
        for n in head:
            g = by_name[n]
            report.head_grad_max[n] = 0.0 if g is None else g.abs().max().item()
    else:
        report.head_grad_max = {n: 0.0 for n in head}
    return report
