"""Run configuration: flat ``key = value`` files with typed parsing."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    # geometry
    image_size: int = 32
    latent_factor: int = 4
    latent_channels: int = 16
    codebook_size: int = 64
    scales: str = "1,2,4,8"
    vae_width: int = 32
    tokenizer_quantizer: str = "vq"
    # transformer
    width: int = 64
    heads: int = 4
    depth: int = 4
    # generation
    mode: str = "parallel"
    tau: float = 2.0
    fusion_a: float = 0.5
    gumbel: bool = False
    use_cache: bool = True
    quantizer: str = "srq"
    # losses
    lambda_cyc: float = 1.0
    lambda_gan: float = 0.5
    lambda_idt: float = 1.0
    lambda_p: float = 0.1
    # optimiser
    lr: float = 1e-3
    disc_lr: float = 2e-5
    warmup: int = 200
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    # tokenizer pretraining
    tok_steps: int = 2500
    tok_lr: float = 2e-3
    tok_batch: int = 32
    # translation training
    steps: int = 2000
    batch_size: int = 8
    log_every: int = 10
    eval_every: int = 500
    # evaluation / sweeps
    clf_steps: int = 300
    eval_images: int = 256
    ablate_steps: int = 500
    bench_repeats: int = 10
    out_dir: str = "runs"

    @property
    def scale_sides(self) -> list[int]:
        return [int(s) for s in str(self.scales).split(",") if s.strip()]

    @property
    def K(self) -> int:
        return len(self.scale_sides)

    def validate(self) -> "RunConfig":
        problems = []
        if not self.tau > 0:
            problems.append(f"tau must be > 0 (got {self.tau})")
        if not 0.0 <= self.fusion_a <= 1.0:
            problems.append(f"fusion_a must lie in [0, 1] (got {self.fusion_a})")
        try:
            sides = self.scale_sides
        except ValueError:
            sides = []
            problems.append(f"scales must be a comma-separated list of integers (got {self.scales!r})")
        if len(sides) < 1:
            problems.append("need K >= 1 scales")
        elif any(b <= a for a, b in zip(sides, sides[1:])) or sides[0] < 1:
            problems.append(f"scales must be positive and strictly increasing (got {self.scales})")
        elif self.image_size % self.latent_factor or sides[-1] != self.image_size // self.latent_factor:
            problems.append(
                f"last scale must equal the latent size image_size/latent_factor = "
                f"{self.image_size // max(self.latent_factor, 1)} (got {sides[-1]})"
            )
        if self.mode not in ("serial", "parallel"):
            problems.append(f"mode must be serial or parallel (got {self.mode!r})")
        if self.quantizer not in ("srq", "hard"):
            problems.append(f"quantizer must be srq or hard (got {self.quantizer!r})")
        if self.tokenizer_quantizer not in ("vq", "lfq", "bsq"):
            problems.append(f"tokenizer_quantizer must be vq, lfq or bsq (got {self.tokenizer_quantizer!r})")
        if self.codebook_size < 2:
            problems.append("codebook_size must be >= 2")
        if self.width % max(self.heads, 1):
            problems.append(f"width {self.width} must be divisible by heads {self.heads}")
        for name in ("steps", "batch_size", "tok_steps", "tok_batch", "log_every", "bench_repeats"):
            if getattr(self, name) < 0 or (name in ("batch_size", "tok_batch", "log_every") and getattr(self, name) < 1):
                problems.append(f"{name} out of range (got {getattr(self, name)})")
        if problems:
            raise ConfigError("invalid configuration: " + "; ".join(problems))
        return self

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        text = "\n".join(f"{k}={v}" for k, v in sorted(self.to_dict().items()))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(name: str, typ, raw: str):
    raw = raw.strip()
    typ = {"int": int, "float": float, "bool": bool, "str": str}.get(typ, typ) if isinstance(typ, str) else typ
    try:
        if typ is bool:
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if typ is int:
            return int(float(raw)) if "e" in raw.lower() else int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"cannot parse {name}={raw!r} as {getattr(typ, '__name__', typ)}") from None


def parse_assignments(text: str) -> dict[str, Any]:
    """Typed values of the ``key = value`` lines in ``text``."""
    known = {f.name: f.type for f in fields(RunConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, known[key], raw)
    return values


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    return dataclasses.replace(base or RunConfig(), **parse_assignments(text))


def load_config(path: str | Path | None, overrides: dict[str, Any] | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        cfg = parse_config_text(Path(path).read_text(), cfg)
    if overrides:
        cfg = dataclasses.replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
    return cfg.validate()


def dump_config(cfg: RunConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in cfg.to_dict().items())
