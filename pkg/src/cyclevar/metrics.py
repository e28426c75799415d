"""Desk-scale evaluation: distribution and structure proxies, domain accuracy,
and the serial-vs-parallel timing benchmark."""

from __future__ import annotations

import csv
import json
import os
import statistics
import time
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .features import RandomConvFeatures
from .generation import GenerationConfig, Translator
from .transformer import Instrument

FEATURE_SEED = 4321
BENCH_COLUMNS = ("mode", "K", "mean_s", "std_s", "forwards")


@dataclass
class MetricReport:
    fid_proxy: float
    struct_dist: float
    domain_acc: float
    n_images: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class BenchReport:
    mode: str
    K: int
    mean_s: float
    std_s: float
    forwards: int
    repeats: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def row(self) -> list:
        return [self.mode, self.K, f"{self.mean_s:.6g}", f"{self.std_s:.6g}", self.forwards]


_features: dict[int, RandomConvFeatures] = {}


def feature_net(seed: int = FEATURE_SEED) -> RandomConvFeatures:
    if seed not in _features:
        _features[seed] = RandomConvFeatures(seed).eval()
    return _features[seed]


# -- Frechet distance ---------------------------------------------------------------

def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, U = np.linalg.eigh(m)
    return (U * np.sqrt(np.clip(w, 0.0, None))) @ U.T


def frechet_distance(mu1, cov1, mu2, cov2, reg: float = 1e-6) -> float:
    """||mu1 - mu2||^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2)).

    tr((S1 S2)^(1/2)) is evaluated as tr((S1^(1/2) S2 S1^(1/2))^(1/2)), a
    symmetric PSD form whose eigenvalues can be clamped at zero.
    """
    mu1, mu2 = np.asarray(mu1, np.float64), np.asarray(mu2, np.float64)
    n = len(mu1)
    cov1 = np.asarray(cov1, np.float64) + reg * np.eye(n)
    cov2 = np.asarray(cov2, np.float64) + reg * np.eye(n)
    s1 = _psd_sqrt(cov1)
    mid = s1 @ cov2 @ s1
    ev = np.linalg.eigvalsh((mid + mid.T) / 2)
    tr_sqrt = np.sqrt(np.clip(ev, 0.0, None)).sum()
    d = float(((mu1 - mu2) ** 2).sum() + np.trace(cov1) + np.trace(cov2) - 2 * tr_sqrt)
    return max(d, 0.0)


def fid_from_features(f1: np.ndarray, f2: np.ndarray) -> float:
    f1, f2 = np.asarray(f1, np.float64), np.asarray(f2, np.float64)
    if len(f1) < 2 or len(f2) < 2:
        raise ValueError("fid needs at least 2 samples per set")
    return frechet_distance(f1.mean(0), np.cov(f1, rowvar=False), f2.mean(0), np.cov(f2, rowvar=False))


@torch.no_grad()
def pooled_features(imgs: torch.Tensor, net: RandomConvFeatures | None = None) -> np.ndarray:
    net = net or feature_net()
    feats = net(imgs.float())
    return torch.cat([f.mean((2, 3)) for f in feats], 1).double().numpy()


def fid_proxy(real: torch.Tensor, gen: torch.Tensor, net: RandomConvFeatures | None = None) -> float:
    if len(real) < 2 or len(gen) < 2:
        raise ValueError("fid_proxy needs at least 2 images per batch")
    return fid_from_features(pooled_features(real, net), pooled_features(gen, net))


# -- structure distance --------------------------------------------------------------

def _self_similarity(fmap: torch.Tensor) -> torch.Tensor:
    f = fmap.flatten(2).transpose(1, 2)  # B, N, C
    f = f - f.mean(1, keepdim=True)
    f = F.normalize(f, dim=-1, eps=1e-8)
    return f @ f.transpose(1, 2)


@torch.no_grad()
def struct_dist_per_image(src: torch.Tensor, out: torch.Tensor, net: RandomConvFeatures | None = None) -> torch.Tensor:
    """1 - mean row-wise cosine between self-similarity matrices, per image."""
    if src.shape != out.shape:
        raise ValueError(f"struct_dist needs equal shapes, got {tuple(src.shape)} and {tuple(out.shape)}")
    net = net or feature_net()
    sa = _self_similarity(net(src.float())[1].double())
    sb = _self_similarity(net(out.float())[1].double())
    cos = F.cosine_similarity(sa, sb, dim=-1, eps=1e-12)
    return (1 - cos.mean(-1)).clamp(0.0, 2.0)


def struct_dist(src: torch.Tensor, out: torch.Tensor, net: RandomConvFeatures | None = None) -> float:
    if torch.equal(src, out):
        return 0.0
    return struct_dist_per_image(src, out, net).mean().item()


# -- domain classifier ---------------------------------------------------------------

class DomainClassifier(nn.Module):
    def __init__(self, width: int = 16):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, width, 3, 2, 1),
            nn.ReLU(),
            nn.Conv2d(width, 2 * width, 3, 2, 1),
            nn.ReLU(),
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
            nn.Linear(2 * width, 2),
        )

    def forward(self, img):
        return self.net(img * 2 - 1)

    @torch.no_grad()
    def predict(self, img) -> torch.Tensor:
        return self(img).argmax(-1)


def train_domain_classifier(sample, steps: int = 300, lr: float = 3e-3, seed: int = 0) -> DomainClassifier:
    """``sample(step)`` returns (images, labels)."""
    torch.manual_seed(seed)
    clf = DomainClassifier()
    opt = torch.optim.Adam(clf.parameters(), lr=lr)
    for step in range(steps):
        img, lab = sample(step)
        loss = F.cross_entropy(clf(img), lab)
        opt.zero_grad()
        loss.backward()
        opt.step()
    return clf.eval()


@torch.no_grad()
def domain_acc(clf: DomainClassifier, batch: torch.Tensor, claimed_domain: int) -> float:
    return (clf.predict(batch) == claimed_domain).float().mean().item()


# -- full evaluation ------------------------------------------------------------------

@torch.no_grad()
def translate_batched(translator: Translator, imgs, domain, cfg: GenerationConfig, chunk: int = 64) -> torch.Tensor:
    return torch.cat([translator.translate(c, domain, cfg) for c in imgs.split(chunk)])


@torch.no_grad()
def evaluate(translator: Translator, cfg: GenerationConfig, clf: DomainClassifier, src, target_real, to_domain: int) -> MetricReport:
    out = translate_batched(translator, src, to_domain, cfg)
    return MetricReport(
        fid_proxy=fid_proxy(target_real, out),
        struct_dist=struct_dist(src, out),
        domain_acc=domain_acc(clf, out, to_domain),
        n_images=len(src),
    )


# -- timing -----------------------------------------------------------------------------

@torch.no_grad()
def bench_mode(translator: Translator, F_ctx, domain, cfg: GenerationConfig, repeats: int = 10, warmup: int = 3) -> BenchReport:
    model = translator.transformer
    prev = model.instrument
    inst = model.instrument = Instrument()
    try:
        for _ in range(max(warmup, 3)):
            translator.generate(F_ctx, domain, cfg)
        times, counts = [], []
        for _ in range(repeats):
            inst.reset()
            t0 = time.perf_counter()
            translator.generate(F_ctx, domain, cfg)
            times.append(time.perf_counter() - t0)
            counts.append(inst.calls)
    finally:
        model.instrument = prev
    if len(set(counts)) != 1:
        raise RuntimeError(f"forward count varied across repeats: {counts}")
    return BenchReport(
        mode=cfg.mode,
        K=translator.schedule.K,
        mean_s=statistics.fmean(times),
        std_s=statistics.pstdev(times) if len(times) > 1 else 0.0,
        forwards=counts[0],
        repeats=repeats,
    )


def bench_modes(translator: Translator, img: torch.Tensor, domain, cfg: GenerationConfig, repeats: int = 10, warmup: int = 3):
    """Serial (cached) and parallel timings on the same input; per-image forward counts."""
    torch.set_num_threads(1)
    with torch.no_grad():
        F_ctx = translator.context(img)
    serial = bench_mode(translator, F_ctx, domain, cfg.with_(mode="serial", use_cache=True,
                                                             drop_ms_output=False, drop_ms_context=False),
                        repeats, warmup)
    parallel = bench_mode(translator, F_ctx, domain, cfg.with_(mode="parallel"), repeats, warmup)
    return serial, parallel


def append_bench_csv(path, reports) -> None:
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(BENCH_COLUMNS)
        for r in reports:
            w.writerow(r.row())
