"""8-bit RGB image I/O (PNG, with binary PPM as fallback)."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image


def to_uint8(img: torch.Tensor) -> np.ndarray:
    """(3, H, W) in [0, 1] -> (H, W, 3) uint8, rounding half up."""
    if img.dim() != 3 or img.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got {tuple(img.shape)}")
    a = img.detach().double().clamp(0.0, 1.0).permute(1, 2, 0).numpy()
    return np.floor(a * 255.0 + 0.5).astype(np.uint8)


def from_uint8(arr: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(arr.astype(np.float32) / 255.0).permute(2, 0, 1).contiguous()


def write_image(path, img: torch.Tensor) -> None:
    path = Path(path)
    fmt = "PPM" if path.suffix.lower() in (".ppm", ".pnm") else "PNG"
    Image.fromarray(to_uint8(img), mode="RGB").save(path, format=fmt)


def read_image(path, size: int | None = None) -> torch.Tensor:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"))
    if size is not None and arr.shape[:2] != (size, size):
        raise ValueError(f"{path}: expected {size}x{size} RGB image, got {arr.shape[1]}x{arr.shape[0]}")
    return from_uint8(arr)
