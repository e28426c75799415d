"""Procedural two-domain shape images.

Domain X paints shapes in warm hues, domain Y in cool hues.  Geometry and
colour are drawn from separate random streams keyed by (seed, index), so
the same seed yields the same layout in both domains.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from matplotlib.colors import hsv_to_rgb

DOMAINS = ("x", "y")

# hue intervals in turns; X wraps through red
_HUES = {"x": (-0.08, 0.15), "y": (0.45, 0.68)}


@dataclass(frozen=True)
class SyntheticDomainSpec:
    seed: int = 0
    size: int = 32
    min_shapes: int = 1
    max_shapes: int = 3


def domain_index(domain) -> int:
    if isinstance(domain, str):
        try:
            return DOMAINS.index(domain.lower())
        except ValueError:
            raise ValueError(f"unknown domain {domain!r}; expected one of {DOMAINS}") from None
    if domain not in (0, 1):
        raise ValueError(f"unknown domain id {domain!r}")
    return int(domain)


def _geometry(spec: SyntheticDomainSpec, index: int) -> list[dict]:
    rng = np.random.default_rng([spec.seed, index, 0])
    n = int(rng.integers(spec.min_shapes, spec.max_shapes + 1))
    s = spec.size
    shapes = []
    for _ in range(n):
        kind = "circle" if rng.random() < 0.5 else "rect"
        cy, cx = rng.uniform(0.2 * s, 0.8 * s, size=2)
        if kind == "circle":
            r = rng.uniform(0.12 * s, 0.3 * s)
            shapes.append({"kind": kind, "cy": cy, "cx": cx, "r": r})
        else:
            hh, hw = rng.uniform(0.1 * s, 0.3 * s, size=2)
            shapes.append({"kind": kind, "cy": cy, "cx": cx, "hh": hh, "hw": hw})
    return shapes


def _palette(spec: SyntheticDomainSpec, index: int, domain: str, n: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng([spec.seed, index, 1 + DOMAINS.index(domain)])
    lo, hi = _HUES[domain]
    bg_hsv = np.array([rng.uniform(lo, hi) % 1.0, rng.uniform(0.15, 0.35), rng.uniform(0.8, 0.95)])
    fg_hsv = np.stack(
        [
            rng.uniform(lo, hi, size=n) % 1.0,
            rng.uniform(0.65, 1.0, size=n),
            rng.uniform(0.45, 0.85, size=n),
        ],
        axis=-1,
    )
    return hsv_to_rgb(bg_hsv), hsv_to_rgb(fg_hsv)


def _render(spec: SyntheticDomainSpec, shapes: list[dict], bg, fg) -> np.ndarray:
    s = spec.size
    yy, xx = np.mgrid[0:s, 0:s] + 0.5
    img = np.broadcast_to(bg, (s, s, 3)).copy()
    for shape, color in zip(shapes, fg):
        if shape["kind"] == "circle":
            mask = (yy - shape["cy"]) ** 2 + (xx - shape["cx"]) ** 2 <= shape["r"] ** 2
        else:
            mask = (np.abs(yy - shape["cy"]) <= shape["hh"]) & (np.abs(xx - shape["cx"]) <= shape["hw"])
        img[mask] = color
    return np.clip(img, 0.0, 1.0)


def synth_sample(
    spec: SyntheticDomainSpec, n: int, domain, start: int = 0, with_geometry: bool = False
):
    """Render images ``start .. start + n - 1`` of ``domain`` as a (n, 3, H, W) float tensor."""
    if n < 1:
        raise ValueError("n must be >= 1")
    dom = DOMAINS[domain_index(domain)]
    imgs, geo = [], []
    for i in range(start, start + n):
        shapes = _geometry(spec, i)
        bg, fg = _palette(spec, i, dom, len(shapes))
        imgs.append(_render(spec, shapes, bg, fg))
        geo.append(shapes)
    batch = torch.from_numpy(np.stack(imgs)).permute(0, 3, 1, 2).float().contiguous()
    return (batch, geo) if with_geometry else batch


class UnpairedStream:
    """Endless unpaired (x, y) batches.

    X and Y draw independent image indices from their own RNGs, so a batch
    never pairs an X layout with its Y twin on purpose.
    """

    def __init__(self, spec: SyntheticDomainSpec, batch_size: int, pool: int = 4096, seed: int = 0):
        self.spec, self.batch_size, self.pool = spec, batch_size, pool
        self.rng = np.random.default_rng(seed)
        self._cache: dict[tuple[str, int], torch.Tensor] = {}

    def _get(self, domain: str, idx: int) -> torch.Tensor:
        key = (domain, idx)
        if key not in self._cache:
            self._cache[key] = synth_sample(self.spec, 1, domain, start=idx)[0]
        return self._cache[key]

    def next(self) -> tuple[torch.Tensor, torch.Tensor]:
        ix = self.rng.integers(0, self.pool, size=self.batch_size)
        iy = self.rng.integers(0, self.pool, size=self.batch_size)
        x = torch.stack([self._get("x", int(i)) for i in ix])
        y = torch.stack([self._get("y", int(i)) for i in iy])
        return x, y
