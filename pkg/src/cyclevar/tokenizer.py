"""Toy VAE plus multi-scale residual tokenization."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import torch
import torch.nn.functional as F
from torch import nn

from .autograd import ShapeError, resize
from .quantizer import (
    BitwiseConfig,
    Codebook,
    bitwise_quantize,
    ste_bitwise,
    ste_lookup,
)

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    """A loss went non-finite; ``report`` carries the diagnostic dump."""

    def __init__(self, msg: str, report: dict | None = None):
        super().__init__(msg)
        self.report = report or {}


@dataclass(frozen=True)
class ScaleSchedule:
    sizes: tuple[tuple[int, int], ...]

    def __post_init__(self):
        sizes = tuple((int(h), int(w)) for h, w in self.sizes)
        object.__setattr__(self, "sizes", sizes)
        if not sizes:
            raise ValueError("scale schedule must have at least one scale")
        areas = [h * w for h, w in sizes]
        if any(h < 1 or w < 1 for h, w in sizes):
            raise ValueError(f"scale extents must be >= 1: {sizes}")
        if any(b <= a for a, b in zip(areas, areas[1:])):
            raise ValueError(f"scale areas must be strictly increasing: {sizes}")

    @classmethod
    def from_sides(cls, sides: Iterable[int]) -> "ScaleSchedule":
        return cls(tuple((s, s) for s in sides))

    @property
    def K(self) -> int:
        return len(self.sizes)

    @property
    def final(self) -> tuple[int, int]:
        return self.sizes[-1]

    @property
    def token_counts(self) -> list[int]:
        return [h * w for h, w in self.sizes]

    def __len__(self):
        return len(self.sizes)


@dataclass
class ResidualPyramid:
    """Per-scale quantized residuals of a latent, coarse to fine.

    ``R`` are the straight-through quantized maps, ``inputs`` the residual
    each scale quantized and ``indices`` the chosen code ids (None for
    bitwise quantizers).
    """

    E: torch.Tensor
    R: list[torch.Tensor]
    inputs: list[torch.Tensor] = field(default_factory=list)
    indices: list[torch.Tensor | None] = field(default_factory=list)
    F: list[torch.Tensor] | None = None

    @property
    def K(self) -> int:
        return len(self.R)


class VAE(nn.Module):
    def __init__(self, C: int = 16, factor: int = 4, width: int = 32):
        super().__init__()
        n_down = int(round(math.log2(factor)))
        if 2 ** n_down != factor:
            raise ValueError(f"downsample factor must be a power of two, got {factor}")
        self.C, self.factor = C, factor
        enc: list[nn.Module] = [nn.Conv2d(3, width, 3, 1, 1)]
        for _ in range(n_down):
            enc += [nn.SiLU(), nn.Conv2d(width, width, 4, 2, 1)]
        enc += [nn.SiLU(), nn.Conv2d(width, width, 3, 1, 1), nn.SiLU(), nn.Conv2d(width, C, 1)]
        dec: list[nn.Module] = [nn.Conv2d(C, width, 3, 1, 1), nn.SiLU(), nn.Conv2d(width, width, 3, 1, 1)]
        for _ in range(n_down):
            dec += [nn.SiLU(), nn.ConvTranspose2d(width, width, 4, 2, 1)]
        dec += [nn.SiLU(), nn.Conv2d(width, 3, 3, 1, 1)]
        self.encoder = nn.Sequential(*enc)
        self.decoder = nn.Sequential(*dec)

    def encode(self, img: torch.Tensor) -> torch.Tensor:
        if img.dim() != 4 or img.shape[1] != 3:
            raise ShapeError("encode", img.shape, detail="expected (B, 3, H, W)")
        if img.shape[-1] % self.factor or img.shape[-2] % self.factor:
            raise ShapeError("encode", img.shape, detail=f"H, W must be divisible by {self.factor}")
        return self.encoder(img * 2 - 1)

    def decode(self, E: torch.Tensor) -> torch.Tensor:
        if E.dim() != 4 or E.shape[1] != self.C:
            raise ShapeError("decode", E.shape, detail=f"expected (B, {self.C}, h, w)")
        return torch.sigmoid(self.decoder(E))


class Tokenizer(nn.Module):
    """VAE, codebook and scale schedule; frozen during translation training.

    ``quantizer`` is ``"vq"`` for codebook lookup, or ``"lfq"`` / ``"bsq"``
    for the bitwise variants (then the codebook is implicit, V = 2**C).
    """

    def __init__(
        self,
        image_size: int = 32,
        C: int = 16,
        V: int = 64,
        factor: int = 4,
        schedule: ScaleSchedule | None = None,
        width: int = 32,
        quantizer: str = "vq",
        up_mode: str = "bilinear",
        down_mode: str = "area",
    ):
        super().__init__()
        if quantizer not in ("vq", "lfq", "bsq"):
            raise ValueError(f"unknown tokenizer quantizer {quantizer!r}")
        self.image_size = image_size
        self.latent_size = (image_size // factor, image_size // factor)
        self.schedule = schedule or ScaleSchedule.from_sides([1, 2, 4, self.latent_size[0]])
        if self.schedule.final != self.latent_size:
            raise ValueError(
                f"schedule must end at the latent size {self.latent_size}, got {self.schedule.final}"
            )
        self.quantizer = quantizer
        self.up_mode, self.down_mode = up_mode, down_mode
        self.vae = VAE(C=C, factor=factor, width=width)
        # bitwise quantizers carry an implicit 2**C codebook; the table here is a placeholder
        self.codebook = Codebook(V if quantizer == "vq" else 2, C)
        if quantizer != "vq":
            self.codebook.Z.requires_grad_(False)
        self.bitwise = BitwiseConfig(C, quantizer) if quantizer != "vq" else None

    @property
    def C(self) -> int:
        return self.vae.C

    def freeze(self) -> "Tokenizer":
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        return self

    def encode(self, img: torch.Tensor) -> torch.Tensor:
        if img.shape[-2:] != (self.image_size, self.image_size):
            raise ShapeError("encode", img.shape, detail=f"expected {self.image_size}x{self.image_size}")
        return self.vae.encode(img)

    def decode(self, E: torch.Tensor) -> torch.Tensor:
        if tuple(E.shape[-2:]) != self.latent_size:
            raise ShapeError("decode", E.shape, detail=f"expected latent {self.latent_size}")
        return self.vae.decode(E)

    def up(self, x: torch.Tensor, size=None) -> torch.Tensor:
        return resize(x, size or self.latent_size, self.up_mode)

    def down(self, x: torch.Tensor, size) -> torch.Tensor:
        return resize(x, size, self.down_mode)

    def _quantize_sites(self, r: torch.Tensor):
        # (B, C, h, w) -> per-site vectors on the last axis and back
        f = r.permute(0, 2, 3, 1)
        if self.bitwise is None:
            q, idx = ste_lookup(f, self.codebook.Z, return_index=True)
        else:
            q = ste_bitwise(f, self.bitwise)
            idx = None
        return q.permute(0, 3, 1, 2), idx

    def tokenize_multiscale(self, E: torch.Tensor) -> ResidualPyramid:
        """Interpolate-quantize-subtract over the schedule, coarse to fine."""
        if tuple(E.shape[-2:]) != self.latent_size or E.shape[1] != self.C:
            raise ShapeError("tokenize_multiscale", E.shape, detail=f"expected (B, {self.C}, {self.latent_size})")
        resid = E
        pyr = ResidualPyramid(E=E, R=[])
        for size in self.schedule.sizes:
            r = self.down(resid, size)
            q, idx = self._quantize_sites(r)
            pyr.R.append(q)
            pyr.inputs.append(r)
            pyr.indices.append(idx)
            resid = resid - self.up(q)
        return pyr

    def build_context(self, pyr: ResidualPyramid) -> list[torch.Tensor]:
        """F_k: the full-resolution sum of upsampled residuals, area-downsampled to each scale."""
        if pyr.K != self.schedule.K:
            raise ShapeError("build_context", (pyr.K,), (self.schedule.K,), detail="pyramid/schedule length")
        acc = sum(self.up(R) for R in pyr.R)
        ctx = [self.down(acc, size) for size in self.schedule.sizes]
        pyr.F = ctx
        return ctx

    def context(self, img: torch.Tensor) -> list[torch.Tensor]:
        return self.build_context(self.tokenize_multiscale(self.encode(img)))

    def reconstruct(self, img: torch.Tensor) -> torch.Tensor:
        return self.decode(self.context(img)[-1])


# -- pretraining -------------------------------------------------------------------

@torch.no_grad()
def _seed_codebook(tok: Tokenizer, img: torch.Tensor, gen: torch.Generator) -> None:
    """Initialise codes from residual vectors of a batch, mixed across scales."""
    resid = tok.encode(img)
    pool = []
    for size in tok.schedule.sizes:
        r = tok.down(resid, size)
        pool.append(r.permute(0, 2, 3, 1).reshape(-1, tok.C))
        resid = resid - tok.up(r)
    pool = torch.cat(pool)
    pick = torch.randint(len(pool), (tok.codebook.V,), generator=gen)
    tok.codebook.Z.copy_(pool[pick] + 0.01 * torch.randn(tok.codebook.V, tok.C, generator=gen))


def pretrain_tokenizer(
    tok: Tokenizer,
    sample: Callable[[int], torch.Tensor],
    steps: int,
    batch_size: int = 32,
    lr: float = 2e-3,
    beta: float = 0.25,
    seed: int = 0,
    log_every: int = 100,
    on_log: Callable[[int, dict], None] | None = None,
) -> list[dict]:
    """Reconstruction (L1) + codebook + beta * commitment training.

    ``sample(step)`` returns a (B, 3, H, W) batch in [0, 1].
    """
    gen = torch.Generator().manual_seed(seed)
    if tok.bitwise is None:
        _seed_codebook(tok, sample(-1), gen)
    params = [p for p in tok.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=lr)
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda s: min(1.0, (s + 1) / 50) * (0.1 + 0.9 * 0.5 * (1 + math.cos(math.pi * s / max(steps, 1))))
    )
    history = []
    tok.train()
    for step in range(steps):
        img = sample(step)
        pyr = tok.tokenize_multiscale(tok.encode(img))
        ctx = tok.build_context(pyr)
        rec = tok.decode(ctx[-1])
        l1 = (rec - img).abs().mean()
        vq = img.new_zeros(())
        for r, idx in zip(pyr.inputs, pyr.indices):
            f = r.permute(0, 2, 3, 1)
            if idx is not None:
                code = tok.codebook.Z[idx]
                vq = vq + F.mse_loss(code, f.detach()) + beta * F.mse_loss(f, code.detach())
            else:
                code = bitwise_quantize(f, tok.bitwise)
                vq = vq + beta * F.mse_loss(f, code)
        loss = l1 + vq
        if not torch.isfinite(loss):
            raise TrainingDivergedError(
                f"tokenizer loss diverged at step {step}",
                {"step": step, "l1": l1.item(), "vq": vq.item()},
            )
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        if step % log_every == 0 or step == steps - 1:
            row = {"step": step, "l1": l1.item(), "vq": vq.item()}
            history.append(row)
            log.info("tokenizer step %d l1=%.4f vq=%.4f", step, row["l1"], row["vq"])
            if on_log:
                on_log(step, row)
    tok.eval()
    return history


@torch.no_grad()
def reconstruction_l1(tok: Tokenizer, img: torch.Tensor) -> float:
    return (tok.reconstruct(img) - img).abs().mean().item()


@torch.no_grad()
def codebook_usage(tok: Tokenizer, img: torch.Tensor) -> float:
    """Fraction of codebook entries selected at least once on ``img``."""
    pyr = tok.tokenize_multiscale(tok.encode(img))
    used = torch.zeros(tok.codebook.V, dtype=torch.bool)
    for idx in pyr.indices:
        if idx is not None:
            used[idx.reshape(-1)] = True
    return used.float().mean().item()
