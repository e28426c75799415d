"""Codebook quantizers: hard lookup, softmax-relaxed mixing, straight-through,
and the bitwise (LFQ / BSQ) family.

All functions act on the trailing axis, so a single C-vector, a batch of
site vectors or a whole (B, sites, C) map are handled alike.
"""

from __future__ import annotations

import contextvars
import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable

import torch
from torch import nn

from .autograd import ShapeError


@dataclass
class SRQConfig:
    tau: float = 2.0
    gumbel: bool = False
    seed: int = 0

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"SRQ temperature must be > 0, got {self.tau}")


@dataclass
class BitwiseConfig:
    d: int
    mode: str = "lfq"

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("bit dimension d must be >= 1")
        if self.mode not in ("lfq", "bsq"):
            raise ValueError(f"bitwise mode must be 'lfq' or 'bsq', got {self.mode!r}")

    @property
    def V(self) -> int:
        return 2 ** self.d


class Codebook(nn.Module):
    """Learnable table of V code vectors with C channels."""

    def __init__(self, V: int, C: int, init_std: float | None = None):
        super().__init__()
        if V < 2 or C < 1:
            raise ValueError(f"codebook needs V >= 2 and C >= 1, got V={V}, C={C}")
        std = 1.0 / math.sqrt(C) if init_std is None else init_std
        self.Z = nn.Parameter(torch.randn(V, C) * std)

    @classmethod
    def from_tensor(cls, Z: torch.Tensor) -> "Codebook":
        if Z.dim() != 2:
            raise ShapeError("codebook", Z.shape, detail="expected V x C")
        if not torch.isfinite(Z).all():
            raise ValueError("codebook contains non-finite entries")
        cb = cls(Z.shape[0], Z.shape[1])
        cb.Z = nn.Parameter(Z.clone())
        return cb

    @property
    def V(self) -> int:
        return self.Z.shape[0]

    @property
    def C(self) -> int:
        return self.Z.shape[1]


def _table(cb) -> torch.Tensor:
    return cb.Z if isinstance(cb, Codebook) else cb


def nearest_code(f: torch.Tensor, cb) -> torch.Tensor:
    """Index of the Euclidean-nearest code for every trailing-axis vector.

    Distances are formed from explicit differences so exact ties stay exact;
    ties resolve to the lowest index.
    """
    Z = _table(cb)
    if f.shape[-1] != Z.shape[-1]:
        raise ShapeError("nearest_code", f.shape, Z.shape)
    d = (f.detach().unsqueeze(-2) - Z.detach()).square().sum(-1)
    return d.argmin(-1)


def hard_quantize_logits(g: torch.Tensor, cb) -> torch.Tensor:
    """Z[argmax g].  Piecewise constant in ``g``: no gradient reaches the logits."""
    Z = _table(cb)
    if g.shape[-1] != Z.shape[0]:
        raise ShapeError("hard_quantize_logits", g.shape, Z.shape)
    return Z[g.detach().argmax(-1)]


def gumbel_noise(shape, generator: torch.Generator | None, dtype=torch.float32) -> torch.Tensor:
    u = torch.rand(shape, generator=generator, dtype=dtype)
    tiny = torch.finfo(dtype).tiny
    e = (-torch.log(u.clamp_min(tiny))).clamp_min(tiny)  # Exp(1) sample
    return -torch.log(e)


def srq_probs(
    g: torch.Tensor, cfg: SRQConfig, generator: torch.Generator | None = None
) -> torch.Tensor:
    """Temperature softmax over the logit axis, optionally Gumbel-perturbed."""
    tau = cfg.tau
    if not tau > 0:
        raise ValueError(f"SRQ temperature must be > 0, got {tau}")
    if cfg.gumbel:
        if generator is None:
            generator = torch.Generator().manual_seed(cfg.seed)
        g = g + gumbel_noise(g.shape, generator, g.dtype)
    z = g / tau
    z = z - z.amax(-1, keepdim=True).detach()
    e = z.exp()
    return e / e.sum(-1, keepdim=True)


def srq_quantize(
    g: torch.Tensor, cb, cfg: SRQConfig, generator: torch.Generator | None = None
) -> torch.Tensor:
    """Probability-weighted mixture of all code vectors."""
    Z = _table(cb)
    if g.shape[-1] != Z.shape[0]:
        raise ShapeError("srq_quantize", g.shape, Z.shape)
    return srq_probs(g, cfg, generator) @ Z


# -- straight-through lookup ------------------------------------------------------

class OffsetTape:
    """Recorded straight-through offsets ``q - f`` for replay.

    The straight-through gradient of a lookup is the exact gradient of
    ``f + const`` with the constant frozen at the current point.  Recording
    the constants once and replaying them turns a piecewise-constant
    pipeline into that smooth surrogate, which finite differences can then
    check against the tape.
    """

    def __init__(self):
        self.offsets: list[torch.Tensor] = []
        self.recording = True
        self.pos = 0

    def exchange(self, offset: torch.Tensor) -> torch.Tensor:
        if self.recording:
            self.offsets.append(offset)
            return offset
        if self.pos >= len(self.offsets):
            raise RuntimeError("replay requested more straight-through lookups than recorded")
        rec = self.offsets[self.pos]
        self.pos += 1
        if rec.shape != offset.shape:
            raise ShapeError("ste_replay", rec.shape, offset.shape)
        return rec

    def rewind(self):
        self.pos = 0


_ACTIVE_TAPE: contextvars.ContextVar[OffsetTape | None] = contextvars.ContextVar(
    "ste_offset_tape", default=None
)


@contextmanager
def frozen_ste_offsets():
    tape = OffsetTape()
    token = _ACTIVE_TAPE.set(tape)
    try:
        yield tape
    finally:
        _ACTIVE_TAPE.reset(token)


def straight_through_surrogate(fn: Callable[[], torch.Tensor]) -> Callable[[], torch.Tensor]:
    """Wrap ``fn`` so its straight-through lookups replay the offsets of the first call."""
    tape = OffsetTape()

    def wrapped():
        tape.rewind()
        token = _ACTIVE_TAPE.set(tape)
        try:
            out = fn()
        finally:
            _ACTIVE_TAPE.reset(token)
        tape.recording = False
        return out

    return wrapped


class _StraightThrough(torch.autograd.Function):
    """Forward returns ``q`` exactly; backward hands the gradient to ``f`` unchanged."""

    @staticmethod
    def forward(ctx, f, q):
        return q.clone()

    @staticmethod
    def backward(ctx, grad):
        return grad, None


def _through(f: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    tape = _ACTIVE_TAPE.get()
    if tape is None:
        return _StraightThrough.apply(f, q.detach())
    return f + tape.exchange((q - f).detach())


def ste_lookup(f: torch.Tensor, cb, return_index: bool = False):
    """Forward: nearest code.  Backward: identity to ``f``, nothing to the codebook."""
    Z = _table(cb)
    idx = nearest_code(f, Z)
    out = _through(f, Z.detach()[idx])
    return (out, idx) if return_index else out


# -- bitwise quantizers -----------------------------------------------------------

def _bit_scale(d: int, mode: str) -> float:
    return 1.0 if mode == "lfq" else 1.0 / math.sqrt(d)


def bitwise_quantize(f: torch.Tensor, cfg: BitwiseConfig) -> torch.Tensor:
    """LFQ: elementwise sign with sign(0) = +1.  BSQ: the same signs scaled by 1/sqrt(d)."""
    if f.shape[-1] != cfg.d:
        raise ShapeError("bitwise_quantize", f.shape, (cfg.d,))
    if cfg.mode == "bsq" and (f.detach().abs().sum(-1) == 0).any():
        raise ValueError("BSQ is undefined for a zero vector")
    signs = torch.where(f.detach() >= 0, 1.0, -1.0).to(f.dtype)
    return signs * _bit_scale(cfg.d, cfg.mode)


def ste_bitwise(f: torch.Tensor, cfg: BitwiseConfig) -> torch.Tensor:
    return _through(f, bitwise_quantize(f, cfg))


def srq_bitwise(
    logits: torch.Tensor,
    cfg: SRQConfig,
    mode: str = "lfq",
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Relaxed bitwise quantization from per-dimension (negative, positive) logits.

    ``logits`` has shape (..., d, 2).  Each dimension mixes -b and +b with a
    two-way tempered softmax, where b = 1 (LFQ) or 1/sqrt(d) (BSQ).
    """
    if logits.shape[-1] != 2:
        raise ShapeError("srq_bitwise", logits.shape, detail="last axis must hold 2 logits")
    if mode not in ("lfq", "bsq"):
        raise ValueError(f"bitwise mode must be 'lfq' or 'bsq', got {mode!r}")
    p = srq_probs(logits, cfg, generator)
    b = _bit_scale(logits.shape[-2], mode)
    return b * (p[..., 1] - p[..., 0])


def hard_bitwise_logits(logits: torch.Tensor, mode: str = "lfq") -> torch.Tensor:
    """Per-dimension argmax of (negative, positive); ties go to the negative bit."""
    b = _bit_scale(logits.shape[-2], mode)
    pos = logits.detach().argmax(-1) == 1
    return torch.where(pos, b, -b).to(logits.dtype)
