"""Named random streams split from one root seed."""

from __future__ import annotations

import hashlib

import numpy as np
import torch

STREAMS = ("data", "init", "gumbel", "bench", "eval", "tokenizer", "classifier")


def stream_seed(root: int, name: str) -> int:
    digest = hashlib.blake2b(f"{int(root)}/{name}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") & 0x7FFF_FFFF_FFFF_FFFF


def torch_generator(root: int, name: str) -> torch.Generator:
    return torch.Generator().manual_seed(stream_seed(root, name))


def numpy_rng(root: int, name: str) -> np.random.Generator:
    return np.random.default_rng(stream_seed(root, name))


def seed_init(root: int) -> None:
    """Seed torch's global RNG, which module constructors draw from."""
    torch.manual_seed(stream_seed(root, "init"))
