"""Raster resizing shared by the training and inference paths."""

from __future__ import annotations

import numpy as np
import torch
from torch.nn import functional as F


def _as_nchw(arr: np.ndarray) -> torch.Tensor:
    t = torch.tensor(np.asarray(arr, dtype=np.float64))
    if t.ndim == 2:
        return t[None, None]
    return t.permute(2, 0, 1)[None]


def _back(t: torch.Tensor, ndim: int) -> np.ndarray:
    t = t[0]
    return (t[0] if ndim == 2 else t.permute(1, 2, 0)).numpy()


def resize_bilinear(arr: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Half-pixel-centred bilinear resize of an (h, w) or (h, w, c) array."""
    size = (int(size[0]), int(size[1]))
    if tuple(arr.shape[:2]) == size:
        return np.array(arr, dtype=np.float64)
    out = F.interpolate(_as_nchw(arr), size=size, mode="bilinear", align_corners=False)
    return _back(out, arr.ndim)


def resize_nearest(arr: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    size = (int(size[0]), int(size[1]))
    if tuple(arr.shape[:2]) == size:
        return np.array(arr)
    out = F.interpolate(_as_nchw(arr), size=size, mode="nearest-exact")
    return _back(out, arr.ndim).astype(arr.dtype)
