"""Unpaired bidirectional training: cycle, adversarial and identity losses."""

from __future__ import annotations

import csv
import logging
import math
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable

import torch
import torch.nn.functional as F
from torch import nn

from .features import PerceptualProxy
from .generation import GenerationConfig, Translator
from .tokenizer import TrainingDivergedError

log = logging.getLogger(__name__)

X, Y = 0, 1
METRIC_COLUMNS = ("step", "cycle", "gan_g", "dis", "idt", "grad_norm", "wall_ms")


@dataclass
class LossWeights:
    cyc: float = 1.0
    gan: float = 0.5
    idt: float = 1.0
    perceptual: float = 0.1


@dataclass
class OptimConfig:
    lr: float = 1e-3
    disc_lr: float = 2e-5
    warmup: int = 200
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.01


@dataclass
class LossReport:
    cycle: float
    gan_g: float
    dis: float
    idt: float
    idt_l1: float
    idt_perceptual: float
    total_g: float
    grad_norm: float = 0.0

    def as_dict(self) -> dict:
        return asdict(self)


class PatchDiscriminator(nn.Module):
    """Strided conv stack emitting one real/fake logit per patch."""

    def __init__(self, width: int = 32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, width, 4, 2, 1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(width, 2 * width, 4, 2, 1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(2 * width, 2 * width, 3, 1, 1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(2 * width, 1, 3, 1, 1),
        )

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        return self.net(img * 2 - 1)

    def probs(self, img: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self(img))


class TranslatorBundle(nn.Module):
    """One shared generator for both directions, a discriminator per domain."""

    def __init__(
        self,
        generator: Translator,
        gen_cfg: GenerationConfig | None = None,
        weights: LossWeights | None = None,
        disc_width: int = 32,
        perceptual_seed: int = 1234,
    ):
        super().__init__()
        self.generator = generator
        self.disc_x = PatchDiscriminator(disc_width)
        self.disc_y = PatchDiscriminator(disc_width)
        self.perceptual = PerceptualProxy(perceptual_seed)
        self.gen_cfg = gen_cfg or GenerationConfig()
        self.weights = weights or LossWeights()

    def G(self, img, domain, generator=None):
        return self.generator.translate(img, domain, self.gen_cfg, generator)

    def generator_parameters(self) -> list[nn.Parameter]:
        return [p for p in self.generator.transformer.parameters() if p.requires_grad]

    def discriminator_parameters(self) -> list[nn.Parameter]:
        return list(self.disc_x.parameters()) + list(self.disc_y.parameters())


@contextmanager
def frozen(*modules: nn.Module):
    """Temporarily exclude ``modules`` parameters from the autograd graph."""
    params = [p for m in modules for p in m.parameters()]
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad_(False)
    try:
        yield
    finally:
        for p, f in zip(params, flags):
            p.requires_grad_(f)


# -- loss terms on tensors -----------------------------------------------------------

def nonsaturating_gen_term(fake_logits: torch.Tensor) -> torch.Tensor:
    """-E[log C(fake)] from discriminator logits."""
    return F.softplus(-fake_logits).mean()


def disc_terms(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> torch.Tensor:
    """-E[log C(real)] - E[log(1 - C(fake))]."""
    return F.softplus(-real_logits).mean() + F.softplus(fake_logits).mean()


def rec_loss(bundle: TranslatorBundle, out: torch.Tensor, target: torch.Tensor):
    l1 = (out - target).abs().mean()
    perc = bundle.perceptual(out, target)
    return l1 + bundle.weights.perceptual * perc, l1, perc


def _domains(b: int, *ids: int) -> torch.Tensor:
    return torch.cat([torch.full((b,), i, dtype=torch.long) for i in ids])


@dataclass
class Translations:
    fake_y: torch.Tensor  # G(x, t_y)
    fake_x: torch.Tensor  # G(y, t_x)
    rec_x: torch.Tensor | None = None  # G(G(x, t_y), t_x)
    rec_y: torch.Tensor | None = None
    idt_x: torch.Tensor | None = None  # G(x, t_x)
    idt_y: torch.Tensor | None = None


def translate_all(bundle: TranslatorBundle, x, y, cycle=True, identity=True, generator=None) -> Translations:
    """All translations a step needs, batched into at most two generator calls."""
    b = x.shape[0]
    if y.shape[0] != b:
        raise ValueError("x and y batches must have equal size")
    imgs, doms = [x, y], [Y, X]
    if identity:
        imgs += [x, y]
        doms += [X, Y]
    out = bundle.G(torch.cat(imgs), _domains(b, *doms), generator).split(b)
    tr = Translations(fake_y=out[0], fake_x=out[1])
    if identity:
        tr.idt_x, tr.idt_y = out[2], out[3]
    if cycle:
        back = bundle.G(torch.cat([tr.fake_y, tr.fake_x]), _domains(b, X, Y), generator).split(b)
        tr.rec_x, tr.rec_y = back
    return tr


# -- public loss operations -------------------------------------------------------

def cycle_loss(bundle: TranslatorBundle, batch, tr: Translations | None = None) -> torch.Tensor:
    x, y = batch
    tr = tr or translate_all(bundle, x, y, cycle=True, identity=False)
    return (tr.rec_x - x).abs().mean() + (tr.rec_y - y).abs().mean()


def gan_generator_loss(bundle: TranslatorBundle, batch, tr: Translations | None = None) -> torch.Tensor:
    """Non-saturating generator loss; discriminators are frozen while it is built."""
    x, y = batch
    tr = tr or translate_all(bundle, x, y, cycle=False, identity=False)
    with frozen(bundle.disc_x, bundle.disc_y):
        return nonsaturating_gen_term(bundle.disc_y(tr.fake_y)) + nonsaturating_gen_term(
            bundle.disc_x(tr.fake_x)
        )


def discriminator_loss(bundle: TranslatorBundle, batch, tr: Translations | None = None) -> torch.Tensor:
    """Real-vs-fake loss for both discriminators on detached generator outputs."""
    x, y = batch
    if tr is None:
        with torch.no_grad():
            tr = translate_all(bundle, x, y, cycle=False, identity=False)
    fake_y, fake_x = tr.fake_y.detach(), tr.fake_x.detach()
    return disc_terms(bundle.disc_x(x), bundle.disc_y(fake_y)) + disc_terms(
        bundle.disc_y(y), bundle.disc_x(fake_x)
    )


def identity_loss(bundle: TranslatorBundle, batch, tr: Translations | None = None):
    """Returns (total, l1 part, perceptual part) summed over both domains."""
    x, y = batch
    tr = tr or translate_all(bundle, x, y, cycle=False, identity=True)
    tx, l1x, px = rec_loss(bundle, tr.idt_x, x)
    ty, l1y, py = rec_loss(bundle, tr.idt_y, y)
    return tx + ty, l1x + l1y, px + py


def generator_losses(bundle: TranslatorBundle, batch, generator=None):
    x, y = batch
    tr = translate_all(bundle, x, y, generator=generator)
    w = bundle.weights
    cyc = cycle_loss(bundle, batch, tr)
    gan = gan_generator_loss(bundle, batch, tr)
    idt, idt_l1, idt_p = identity_loss(bundle, batch, tr)
    total = w.cyc * cyc + w.gan * gan + w.idt * idt
    return total, {"cycle": cyc, "gan_g": gan, "idt": idt, "idt_l1": idt_l1, "idt_perceptual": idt_p}, tr


def total_generator_loss(bundle: TranslatorBundle, batch, generator=None) -> torch.Tensor:
    return generator_losses(bundle, batch, generator)[0]


# -- optimisation -----------------------------------------------------------------

class Optimizers:
    def __init__(self, bundle: TranslatorBundle, cfg: OptimConfig):
        self.cfg = cfg
        self.g = torch.optim.AdamW(
            bundle.generator_parameters(), lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay
        )
        self.d = torch.optim.AdamW(
            bundle.discriminator_parameters(), lr=cfg.disc_lr, betas=cfg.betas, weight_decay=cfg.weight_decay
        )
        warm = max(cfg.warmup, 1)
        ramp = lambda s: min(1.0, (s + 1) / warm)
        self.g_sched = torch.optim.lr_scheduler.LambdaLR(self.g, ramp)
        self.d_sched = torch.optim.lr_scheduler.LambdaLR(self.d, ramp)


def _diagnostics(bundle: TranslatorBundle, losses: dict) -> dict:
    return {
        "losses": {k: float(v.detach()) for k, v in losses.items()},
        "param_norms": {
            n: float(p.detach().norm()) for n, p in bundle.generator.transformer.named_parameters()
        },
    }


def train_step(bundle: TranslatorBundle, batch, opt: Optimizers, generator=None) -> LossReport:
    """One generator update on the weighted total, then one discriminator update."""
    bundle.generator.tokenizer.eval()
    total, parts, tr = generator_losses(bundle, batch, generator)
    if not torch.isfinite(total):
        raise TrainingDivergedError("generator loss is not finite", _diagnostics(bundle, parts))
    opt.g.zero_grad(set_to_none=True)
    total.backward()
    grads = [p.grad for p in bundle.generator_parameters() if p.grad is not None]
    grad_norm = torch.linalg.vector_norm(torch.stack([g.norm() for g in grads])).item() if grads else 0.0
    opt.g.step()
    opt.g_sched.step()

    dis = discriminator_loss(bundle, batch, tr)
    if not torch.isfinite(dis):
        raise TrainingDivergedError("discriminator loss is not finite", _diagnostics(bundle, {"dis": dis}))
    opt.d.zero_grad(set_to_none=True)
    dis.backward()
    opt.d.step()
    opt.d_sched.step()

    for p in bundle.generator_parameters():
        if not torch.isfinite(p).all():
            raise TrainingDivergedError("non-finite generator parameter after update", _diagnostics(bundle, parts))

    return LossReport(
        cycle=parts["cycle"].item(),
        gan_g=parts["gan_g"].item(),
        dis=dis.item(),
        idt=parts["idt"].item(),
        idt_l1=parts["idt_l1"].item(),
        idt_perceptual=parts["idt_perceptual"].item(),
        total_g=total.item(),
        grad_norm=grad_norm,
    )


class MetricsWriter:
    """Step-indexed CSV stream: step, cycle, gan_g, dis, idt, grad_norm, wall_ms."""

    def __init__(self, path):
        self._fh = open(path, "w", newline="")
        self._w = csv.writer(self._fh)
        self._w.writerow(METRIC_COLUMNS)

    def write(self, step: int, rep: LossReport, wall_ms: float):
        self._w.writerow(
            [step, f"{rep.cycle:.6f}", f"{rep.gan_g:.6f}", f"{rep.dis:.6f}", f"{rep.idt:.6f}",
             f"{rep.grad_norm:.6f}", f"{wall_ms:.2f}"]
        )
        self._fh.flush()

    def close(self):
        self._fh.close()


def train(
    bundle: TranslatorBundle,
    batches: Callable[[], tuple[torch.Tensor, torch.Tensor]],
    steps: int,
    opt_cfg: OptimConfig | None = None,
    log_every: int = 10,
    writer: MetricsWriter | None = None,
    gumbel_seed: int = 0,
    on_log: Callable[[int, LossReport], None] | None = None,
) -> list[tuple[int, LossReport]]:
    """Run ``steps`` unpaired updates; returns every step's report."""
    opt = Optimizers(bundle, opt_cfg or OptimConfig())
    gen = torch.Generator().manual_seed(gumbel_seed) if bundle.gen_cfg.srq.gumbel else None
    history = []
    for step in range(steps):
        t0 = time.perf_counter()
        rep = train_step(bundle, batches(), opt, gen)
        wall = (time.perf_counter() - t0) * 1000
        history.append((step, rep))
        if step % log_every == 0 or step == steps - 1:
            if writer is not None:
                writer.write(step, rep, wall)
            log.info("step %d cycle=%.4f gan=%.4f dis=%.4f idt=%.4f", step, rep.cycle, rep.gan_g, rep.dis, rep.idt)
            if on_log:
                on_log(step, rep)
    return history


def moving_average(values: Iterable[float], window: int) -> list[float]:
    vals = list(values)
    out = []
    acc = 0.0
    for i, v in enumerate(vals):
        acc += v
        if i >= window:
            acc -= vals[i - window]
        out.append(acc / min(i + 1, window))
    return out
