"""Differentiable array substrate.

The heavy lifting (tape, reverse-mode sweep) is delegated to torch's
define-by-run autograd.  This module adds the pieces the rest of the
package relies on: a named-op registry with shape validation, the three
resize primitives, and a central finite-difference gradient checker that
is independent of the tape it verifies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch
import torch.nn.functional as F

__all__ = [
    "ShapeError",
    "NonDeterministicError",
    "GradReport",
    "OPS",
    "forward_op",
    "backward",
    "grad_check",
    "resize",
    "RESIZE_MODES",
]

RESIZE_MODES = ("nearest", "bilinear", "area")


class ShapeError(ValueError):
    """Raised when an op receives incompatible extents."""

    def __init__(self, op: str, *shapes, detail: str = ""):
        self.op = op
        self.shapes = [tuple(s) for s in shapes]
        msg = f"{op}: incompatible shapes {', '.join(str(s) for s in self.shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NonDeterministicError(RuntimeError):
    pass


def resize(x: torch.Tensor, size: tuple[int, int], mode: str = "bilinear") -> torch.Tensor:
    """Channelwise resize of a (B, C, h, w) map to ``size``.

    ``area`` averages over source cells and is meant for downsampling;
    ``nearest`` and ``bilinear`` (half-pixel centres) for upsampling.
    All three map a constant field to the same constant.
    """
    if mode not in RESIZE_MODES:
        raise ValueError(f"unsupported resize mode {mode!r}; expected one of {RESIZE_MODES}")
    h, w = int(size[0]), int(size[1])
    if h < 1 or w < 1:
        raise ShapeError("resize", x.shape, (h, w), detail="target extents must be >= 1")
    if x.dim() != 4:
        raise ShapeError("resize", x.shape, detail="expected (B, C, h, w)")
    if tuple(x.shape[-2:]) == (h, w):
        return x
    if mode == "area":
        return F.adaptive_avg_pool2d(x, (h, w))
    if mode == "nearest":
        return F.interpolate(x, size=(h, w), mode="nearest")
    return F.interpolate(x, size=(h, w), mode="bilinear", align_corners=False)


# -- op registry ---------------------------------------------------------------

def _same_shape(name, a, b):
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise ShapeError(name, a.shape, b.shape) from None


def _matmul(a, b):
    if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise ShapeError("matmul", a.shape, b.shape, detail="inner extents differ")
    return a @ b


def _softmax(x, dim=-1, temperature=1.0):
    if temperature <= 0:
        raise ValueError(f"softmax temperature must be > 0, got {temperature}")
    z = x / temperature
    z = z - z.amax(dim=dim, keepdim=True).detach()
    e = z.exp()
    return e / e.sum(dim=dim, keepdim=True)


def _binary(name, fn):
    def op(a, b):
        _same_shape(name, a, b)
        return fn(a, b)
    return op


def _conv2d(x, w, b=None, stride=1, padding=0):
    if x.dim() != 4 or w.dim() != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", x.shape, w.shape, detail="channel extents differ")
    return F.conv2d(x, w, b, stride=stride, padding=padding)


def _cross_entropy(logits, target):
    if logits.dim() != 2 or target.shape != logits.shape[:1]:
        raise ShapeError("cross_entropy", logits.shape, target.shape)
    logp = logits - torch.logsumexp(logits, dim=-1, keepdim=True)
    return -logp.gather(1, target[:, None]).mean()


OPS: dict[str, Callable[..., torch.Tensor]] = {
    "add": _binary("add", torch.add),
    "sub": _binary("sub", torch.sub),
    "mul": _binary("mul", torch.mul),
    "div": _binary("div", torch.div),
    "matmul": _matmul,
    "softmax": _softmax,
    "exp": torch.exp,
    "log": torch.log,
    "tanh": torch.tanh,
    "sigmoid": torch.sigmoid,
    "relu": torch.relu,
    "gelu": F.gelu,
    "silu": F.silu,
    "abs": torch.abs,
    "square": torch.square,
    "sum": lambda x, dim=None: x.sum() if dim is None else x.sum(dim),
    "mean": lambda x, dim=None: x.mean() if dim is None else x.mean(dim),
    "layer_norm": lambda x, eps=1e-6: F.layer_norm(x, x.shape[-1:], eps=eps),
    "conv2d": _conv2d,
    "resize": resize,
    "cross_entropy": _cross_entropy,
}


def forward_op(name: str, inputs: Sequence[torch.Tensor], **attrs) -> torch.Tensor:
    """Apply the registered op ``name``; the result joins the autograd tape."""
    try:
        fn = OPS[name]
    except KeyError:
        raise KeyError(f"unknown op {name!r}") from None
    return fn(*inputs, **attrs)


def backward(loss: torch.Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires-grad leaf."""
    if loss.numel() != 1:
        raise ShapeError("backward", loss.shape, detail="loss must be a scalar")
    loss.backward()


# -- finite-difference checker ---------------------------------------------------

@dataclass
class GradReport:
    """Per-parameter worst errors of tape gradients against finite differences.

    A parameter passes when its worst relative error is within ``tol`` or its
    worst absolute error is within ``atol``.  ``rel_err_significant`` repeats
    the relative figure over coordinates whose gradient is at least
    ``atol / tol``, where finite-difference roundoff no longer dominates.
    """

    rel_err: dict[str, float] = field(default_factory=dict)
    abs_err: dict[str, float] = field(default_factory=dict)
    tol: float = 1e-5
    atol: float = 1e-8
    checked: dict[str, int] = field(default_factory=dict)
    rel_err_significant: dict[str, float] = field(default_factory=dict)

    def ok(self, name: str) -> bool:
        return self.rel_err[name] <= self.tol or self.abs_err[name] <= self.atol

    @property
    def passed(self) -> bool:
        return all(self.ok(k) for k in self.rel_err)

    def lines(self) -> list[str]:
        return [
            f"{'PASS' if self.ok(k) else 'FAIL'} {k}: rel={self.rel_err[k]:.3e} "
            f"rel_significant={self.rel_err_significant[k]:.3e} abs={self.abs_err[k]:.3e} coords={self.checked[k]}"
            for k in self.rel_err
        ]


def grad_check(
    f: Callable[[], torch.Tensor],
    params: dict[str, torch.Tensor] | Sequence[torch.Tensor],
    eps: float = 1e-6,
    tol: float = 1e-5,
    atol: float = 1e-8,
    max_coords: int | None = None,
    seed: int = 0,
) -> GradReport:
    """Compare tape gradients of ``f()`` against central differences.

    ``f`` is re-evaluated with each checked coordinate nudged by ``+-eps``.
    With ``max_coords`` set, a seeded random subset of coordinates per
    parameter is checked instead of all of them.  The relative error of a
    coordinate is ``|fd - tape| / max(|fd|, |tape|)``; see ``GradReport`` for
    the pass rule.
    """
    if eps <= 0:
        raise ValueError("eps must be > 0")
    if not isinstance(params, dict):
        params = {f"p{i}": p for i, p in enumerate(params)}
    for p in params.values():
        if not torch.isfinite(p).all():
            raise ValueError("grad_check parameters must be finite")

    with torch.no_grad():
        v0, v1 = f().item(), f().item()
    if v0 != v1:
        raise NonDeterministicError(f"f is not deterministic: {v0!r} != {v1!r}")

    for p in params.values():
        p.grad = None
    backward(f())
    tape = {k: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
            for k, p in params.items()}

    gen = torch.Generator().manual_seed(seed)
    report = GradReport(tol=tol, atol=atol)
    for name, p in params.items():
        n = p.numel()
        if max_coords is not None and n > max_coords:
            coords = torch.randperm(n, generator=gen)[:max_coords].tolist()
        else:
            coords = range(n)
        flat = p.data.view(-1)
        g = tape[name].view(-1)
        worst_rel = worst_sig = worst_abs = 0.0
        count = 0
        with torch.no_grad():
            for i in coords:
                orig = flat[i].item()
                flat[i] = orig + eps
                fp = f().item()
                flat[i] = orig - eps
                fm = f().item()
                flat[i] = orig
                fd = (fp - fm) / (2 * eps)
                t = g[i].item()
                err = abs(fd - t)
                scale = max(abs(fd), abs(t))
                rel = err / scale if scale > 0 else 0.0
                if not math.isfinite(fd):
                    rel = err = math.inf
                worst_rel = max(worst_rel, rel)
                if scale >= atol / tol:
                    worst_sig = max(worst_sig, rel)
                worst_abs = max(worst_abs, err)
                count += 1
        report.rel_err[name] = worst_rel
        report.rel_err_significant[name] = worst_sig
        report.abs_err[name] = worst_abs
        report.checked[name] = count
    return report
