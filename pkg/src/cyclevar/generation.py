"""Serial multi-step and parallel one-step decoding, and the translate pipeline."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import torch
from torch import nn

from .autograd import ShapeError
from .quantizer import (
    SRQConfig,
    hard_bitwise_logits,
    hard_quantize_logits,
    srq_bitwise,
    srq_quantize,
)
from .tokenizer import Tokenizer
from .transformer import NextScaleTransformer


@dataclass
class GenerationConfig:
    mode: str = "parallel"
    a: float = 0.5
    srq: SRQConfig = field(default_factory=SRQConfig)
    quantizer: str = "srq"  # "srq" or "hard"
    use_cache: bool = True
    drop_ms_output: bool = False
    drop_ms_context: bool = False

    def __post_init__(self):
        if self.mode not in ("serial", "parallel"):
            raise ValueError(f"mode must be 'serial' or 'parallel', got {self.mode!r}")
        if not 0.0 <= self.a <= 1.0:
            raise ValueError(f"fusion weight a must lie in [0, 1], got {self.a}")
        if self.quantizer not in ("srq", "hard"):
            raise ValueError(f"quantizer must be 'srq' or 'hard', got {self.quantizer!r}")
        if self.mode == "serial" and (self.drop_ms_output or self.drop_ms_context):
            raise ValueError("multi-scale masking flags are only valid in parallel mode")

    def with_(self, **kw) -> "GenerationConfig":
        return replace(self, **kw)


@dataclass
class GenerationState:
    H: list[torch.Tensor]
    Rhat: list[torch.Tensor]
    Ehat: torch.Tensor


class Translator(nn.Module):
    """Generator G(I, t): frozen tokenizer plus trainable next-scale transformer."""

    def __init__(self, tokenizer: Tokenizer, transformer: NextScaleTransformer):
        super().__init__()
        if list(transformer.scale_sizes) != list(tokenizer.schedule.sizes):
            raise ShapeError("translator", tuple(transformer.scale_sizes), tokenizer.schedule.sizes)
        self.tokenizer = tokenizer
        self.transformer = transformer

    @property
    def schedule(self):
        return self.tokenizer.schedule

    # -- quantization of transformer outputs -------------------------------------

    def quantize(self, logits, scale: int, cfg: GenerationConfig, generator=None) -> torch.Tensor:
        tok = self.tokenizer
        if tok.bitwise is not None:
            if cfg.quantizer == "srq":
                q = srq_bitwise(logits, cfg.srq, tok.bitwise.mode, generator)
            else:
                q = hard_bitwise_logits(logits, tok.bitwise.mode)
        elif cfg.quantizer == "srq":
            q = srq_quantize(logits, tok.codebook.Z, cfg.srq, generator)
        else:
            q = hard_quantize_logits(logits, tok.codebook.Z)
        h, w = self.schedule.sizes[scale]
        return q.transpose(1, 2).reshape(q.shape[0], -1, h, w)

    def _generator(self, cfg: GenerationConfig, generator):
        if cfg.quantizer == "srq" and cfg.srq.gumbel and generator is None:
            return torch.Generator().manual_seed(cfg.srq.seed)
        return generator

    def _check_context(self, F):
        if len(F) != self.schedule.K:
            raise ShapeError("generate", (len(F),), (self.schedule.K,), detail="context scales vs schedule")

    # -- decoding modes ---------------------------------------------------------

    def serial_generate(self, F, domain, cfg: GenerationConfig, generator=None) -> GenerationState:
        """K transformer forwards; each fuses the prediction with the source context."""
        self._check_context(F)
        generator = self._generator(cfg, generator)
        model, K, a = self.transformer, self.schedule.K, cfg.a
        cond = model.condition(domain)
        H = [model.start_map(F[0].shape[0]).to(F[0].dtype)]
        Rhat = []
        cache = model.new_cache() if cfg.use_cache else None
        for k in range(1, K + 1):
            if cache is not None:
                h = model.forward_step(H[k - 1], k - 1, domain, cache)
            else:
                h = model.forward(H[:k], domain)[-1]
            R = self.quantize(model.classify(h, cond), k - 1, cfg, generator)
            Rhat.append(R)
            fused = a * (R + H[k - 1]) + (1 - a) * F[k - 1]
            H.append(self.tokenizer.up(fused, self.schedule.sizes[k]) if k < K else fused)
        return GenerationState(H=H, Rhat=Rhat, Ehat=H[K])

    def parallel_generate(self, F, domain, cfg: GenerationConfig, generator=None) -> GenerationState:
        """One block-causal forward over all context scales."""
        self._check_context(F)
        generator = self._generator(cfg, generator)
        model, a = self.transformer, cfg.a
        cond = model.condition(domain)
        feats = model(list(F), domain, drop_context_for_last=cfg.drop_ms_context)
        Rhat = [self.quantize(model.classify(h, cond), k, cfg, generator) for k, h in enumerate(feats)]
        terms = Rhat[-1:] if cfg.drop_ms_output else Rhat
        gen_sum = sum(self.tokenizer.up(R) for R in terms)
        Ehat = a * gen_sum + (1 - a) * F[-1]
        return GenerationState(H=list(F), Rhat=Rhat, Ehat=Ehat)

    def mask_ablation(self, F, domain, cfg: GenerationConfig, drop_ms_output=False, drop_ms_context=False, generator=None):
        if cfg.mode != "parallel":
            raise ValueError("mask ablation flags are only valid in parallel mode")
        cfg = cfg.with_(drop_ms_output=drop_ms_output, drop_ms_context=drop_ms_context)
        return self.parallel_generate(F, domain, cfg, generator).Ehat

    def generate(self, F, domain, cfg: GenerationConfig, generator=None) -> GenerationState:
        if cfg.mode == "serial":
            return self.serial_generate(F, domain, cfg, generator)
        return self.parallel_generate(F, domain, cfg, generator)

    # -- full pipeline ------------------------------------------------------------

    def context(self, img: torch.Tensor) -> list[torch.Tensor]:
        return self.tokenizer.context(img)

    def translate(self, img: torch.Tensor, domain, cfg: GenerationConfig, generator=None, return_state=False):
        """decode(generate(context(encode(img)), t))."""
        state = self.generate(self.context(img), domain, cfg, generator)
        out = self.tokenizer.decode(state.Ehat)
        return (out, state) if return_state else out

    forward = translate
