"""Block-causal next-scale transformer with AdaLN conditioning and a KV cache."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable

import torch
import torch.nn.functional as F
from torch import nn

from .autograd import ShapeError


class CacheOrderError(RuntimeError):
    pass


@dataclass
class Instrument:
    """Counts transformer forward calls and their wall-clock durations."""

    calls: int = 0
    seconds: list[float] = field(default_factory=list)
    listeners: list[Callable[[str, float], None]] = field(default_factory=list)

    def record(self, kind: str, seconds: float) -> None:
        self.calls += 1
        self.seconds.append(seconds)
        for fn in self.listeners:
            fn(kind, seconds)

    def reset(self) -> None:
        self.calls = 0
        self.seconds.clear()


class KVCache:
    """Per-block keys/values of the scales processed so far."""

    def __init__(self, depth: int):
        self.keys: list[torch.Tensor | None] = [None] * depth
        self.values: list[torch.Tensor | None] = [None] * depth
        self.offsets: list[int] = [0]

    @property
    def n_scales(self) -> int:
        return len(self.offsets) - 1

    @property
    def length(self) -> int:
        return self.offsets[-1]

    def append(self, block: int, k: torch.Tensor, v: torch.Tensor):
        if self.keys[block] is None:
            self.keys[block], self.values[block] = k, v
        else:
            self.keys[block] = torch.cat([self.keys[block], k], dim=2)
            self.values[block] = torch.cat([self.values[block], v], dim=2)
        return self.keys[block], self.values[block]

    def close_scale(self, n_tokens: int) -> None:
        self.offsets.append(self.offsets[-1] + n_tokens)


def block_causal_mask(counts: list[int], drop_context_for_last: bool = False) -> torch.Tensor:
    """Boolean (L, L) mask, True where query i may attend to key j.

    Tokens see every token of their own scale and of all coarser scales.
    With ``drop_context_for_last`` the finest scale sees only itself.
    """
    level = torch.cat([torch.full((n,), i) for i, n in enumerate(counts)])
    allowed = level[:, None] >= level[None, :]
    if drop_context_for_last:
        last = len(counts) - 1
        q_last = level[:, None] == last
        allowed = allowed & (~q_last | (level[None, :] == last))
    return allowed


class AdaLNBlock(nn.Module):
    def __init__(self, width: int, heads: int, mlp_ratio: float = 4.0, eps: float = 1e-6):
        super().__init__()
        if width % heads:
            raise ValueError(f"width {width} not divisible by heads {heads}")
        self.width, self.heads = width, heads
        self.eps = eps
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)
        hidden = int(width * mlp_ratio)
        self.fc1 = nn.Linear(width, hidden)
        self.fc2 = nn.Linear(hidden, width)
        # rows: gate1, gate2, scale1, scale2, shift1, shift2
        self.ada = nn.Linear(width, 6 * width)

    def modulation(self, cond: torch.Tensor) -> torch.Tensor:
        return self.ada(F.silu(cond)).view(-1, 1, 6, self.width)

    def _attend(self, x, mod, mask, cache: KVCache | None, block_idx: int):
        B, L, D = x.shape
        H = self.heads
        qkv = self.qkv(x).view(B, L, 3, H, D // H).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        if cache is not None:
            k, v = cache.append(block_idx, k, v)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(D // H)
        if mask is not None:
            att = att.masked_fill(~mask, float("-inf"))
        att = att.softmax(-1)
        return self.proj((att @ v).transpose(1, 2).reshape(B, L, D))

    def forward(self, x, cond, mask=None, cache: KVCache | None = None, block_idx: int = 0):
        gamma1, gamma2, scale1, scale2, shift1, shift2 = self.modulation(cond).unbind(2)
        h = F.layer_norm(x, (self.width,), eps=self.eps) * (1 + scale1) + shift1
        x = x + gamma1 * self._attend(h, None, mask, cache, block_idx)
        h = F.layer_norm(x, (self.width,), eps=self.eps) * (1 + scale2) + shift2
        x = x + gamma2 * self.fc2(F.gelu(self.fc1(h), approximate="tanh"))
        return x


class NextScaleTransformer(nn.Module):
    """Causal transformer over a coarse-to-fine sequence of token maps.

    Inputs are latent maps (B, C, h_k, w_k); each is flattened to tokens,
    projected to ``width`` and tagged with a learned per-position and a
    per-scale embedding.  ``n_domains`` condition embeddings drive the AdaLN
    modulation.  The head emits V logits per site, or d x 2 bitwise logits
    when ``bitwise`` is set.
    """

    def __init__(
        self,
        C: int,
        V: int,
        scale_sizes: list[tuple[int, int]],
        width: int = 64,
        heads: int = 4,
        depth: int = 4,
        mlp_ratio: float = 4.0,
        n_domains: int = 2,
        bitwise: bool = False,
        gate_init_std: float = 0.02,
    ):
        super().__init__()
        self.C, self.V, self.width, self.depth = C, V, width, depth
        self.scale_sizes = [tuple(s) for s in scale_sizes]
        self.counts = [h * w for h, w in self.scale_sizes]
        self.bitwise = bitwise
        init_std = math.sqrt(1 / width / 3)

        self.word_embed = nn.Linear(C, width)
        self.cond_embed = nn.Embedding(n_domains, width)
        self.start = nn.Parameter(torch.randn(C) * 0.1)
        self.pos = nn.Parameter(torch.randn(sum(self.counts), width) * init_std)
        self.lvl = nn.Embedding(len(self.counts), width)
        nn.init.trunc_normal_(self.cond_embed.weight, std=init_std)
        nn.init.trunc_normal_(self.lvl.weight, std=init_std)

        self.blocks = nn.ModuleList([AdaLNBlock(width, heads, mlp_ratio) for _ in range(depth)])
        for b in self.blocks:
            nn.init.normal_(b.ada.weight, std=gate_init_std)
            nn.init.zeros_(b.ada.bias)
        self.head_ada = nn.Linear(width, 2 * width)
        nn.init.normal_(self.head_ada.weight, std=gate_init_std)
        nn.init.zeros_(self.head_ada.bias)
        self.head = nn.Linear(width, 2 * C if bitwise else V)

        self.offsets = [0]
        for n in self.counts:
            self.offsets.append(self.offsets[-1] + n)
        self.instrument: Instrument | None = None

    # -- pieces ------------------------------------------------------------------

    def condition(self, domain) -> torch.Tensor:
        domain = torch.as_tensor(domain, dtype=torch.long).reshape(-1)
        n = self.cond_embed.num_embeddings
        if (domain < 0).any() or (domain >= n).any():
            raise ValueError(f"unknown domain id in {domain.tolist()}; have {n} domains")
        return self.cond_embed(domain)

    def adaln_modulate(self, domain) -> list[torch.Tensor]:
        """Per-block (gate1, gate2, scale1, scale2, shift1, shift2) stacks for ``domain``."""
        cond = self.condition(domain)
        return [b.modulation(cond) for b in self.blocks]

    def start_map(self, batch: int) -> torch.Tensor:
        return self.start.view(1, self.C, 1, 1).expand(batch, -1, *self.scale_sizes[0])

    def embed(self, x: torch.Tensor, scale: int) -> torch.Tensor:
        h, w = self.scale_sizes[scale]
        if x.dim() != 4 or x.shape[1] != self.C or tuple(x.shape[-2:]) != (h, w):
            raise ShapeError("embed", x.shape, detail=f"scale {scale} expects (B, {self.C}, {h}, {w})")
        tok = x.flatten(2).transpose(1, 2)
        lo, hi = self.offsets[scale], self.offsets[scale + 1]
        return self.word_embed(tok) + self.pos[lo:hi] + self.lvl.weight[scale]

    def classify(self, h: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        """Per-site logits: (B, L, V), or (B, L, C, 2) for the bitwise head."""
        scale, shift = self.head_ada(F.silu(cond)).view(-1, 1, 2, self.width).unbind(2)
        h = F.layer_norm(h, (self.width,), eps=1e-6) * (1 + scale) + shift
        logits = self.head(h)
        if self.bitwise:
            logits = logits.view(*logits.shape[:-1], self.C, 2)
        return logits

    def _record(self, kind, t0):
        if self.instrument is not None:
            self.instrument.record(kind, time.perf_counter() - t0)

    # -- forwards ----------------------------------------------------------------

    def forward(self, maps: list[torch.Tensor], domain, drop_context_for_last: bool = False) -> list[torch.Tensor]:
        """Full block-causal pass over ``maps`` (scales 0..n-1); returns per-scale features."""
        t0 = time.perf_counter()
        n = len(maps)
        if not 1 <= n <= len(self.counts):
            raise ShapeError("forward", (n,), (len(self.counts),), detail="number of scales")
        x = torch.cat([self.embed(m, i) for i, m in enumerate(maps)], dim=1)
        cond = self.condition(domain)
        mask = block_causal_mask(self.counts[:n], drop_context_for_last).to(x.device)
        for b in self.blocks:
            x = b(x, cond, mask)
        feats = list(x.split(self.counts[:n], dim=1))
        self._record("full", t0)
        return feats

    def forward_step(self, x_map: torch.Tensor, scale: int, domain, cache: KVCache) -> torch.Tensor:
        """Process one new scale against cached keys/values of the earlier ones."""
        t0 = time.perf_counter()
        if cache.n_scales != scale:
            raise CacheOrderError(f"cache holds {cache.n_scales} scales, cannot append scale {scale}")
        x = self.embed(x_map, scale)
        cond = self.condition(domain)
        # the new scale sees all cached tokens plus itself: no mask needed
        for i, b in enumerate(self.blocks):
            x = b(x, cond, None, cache, i)
        cache.close_scale(x.shape[1])
        self._record("step", t0)
        return x

    def new_cache(self) -> KVCache:
        return KVCache(self.depth)
