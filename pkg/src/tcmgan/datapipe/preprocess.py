"""Slice-level preprocessing: brain-area filtering, resizing, scaling, labels."""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from ..errors import ShapeError
from .volumes import Modality

BRAIN_THRESHOLD = 2000
OUT_SIZE = 128


def brain_pixel_count(slice_: np.ndarray) -> int:
    """Number of pixels with raw intensity strictly above zero."""
    return int(np.count_nonzero(np.asarray(slice_) > 0))


def filter_slices(volume, threshold: int = BRAIN_THRESHOLD) -> list[int]:
    """Axial indices whose brain area is at least ``threshold`` pixels.

    ``volume`` is a Volume or a raw (H, W, D) array; callers pass the T2
    volume and apply the result to every modality of the subject.
    """
    vox = getattr(volume, "voxels", volume)
    counts = np.count_nonzero(np.asarray(vox) > 0, axis=(0, 1))
    return [int(k) for k in np.flatnonzero(counts >= threshold)]


@lru_cache(maxsize=64)
def _linear_weights(n_in: int, n_out: int) -> np.ndarray:
    # half-pixel centres, edge-clamped (same convention as align_corners=False)
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    w = np.zeros((n_out, n_in))
    w[np.arange(n_out), lo] += 1.0 - frac
    w[np.arange(n_out), hi] += frac
    w.setflags(write=False)
    return w


def _nearest_index(n_in: int, n_out: int) -> np.ndarray:
    idx = np.floor((np.arange(n_out) + 0.5) * n_in / n_out).astype(int)
    return np.minimum(idx, n_in - 1)


def resize_slice(slice_: np.ndarray, out_size: int = OUT_SIZE, kind: str = "image") -> np.ndarray:
    """Resize a square slice; bilinear for images, nearest-neighbour for masks."""
    a = np.asarray(slice_)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"resize_slice expects a square 2D slice, got {a.shape}")
    n = a.shape[0]
    if kind == "mask":
        idx = _nearest_index(n, out_size)
        return a[np.ix_(idx, idx)].copy()
    if kind != "image":
        raise ValueError(f"kind must be 'image' or 'mask', got {kind!r}")
    if n == out_size:
        return a.astype(np.float32, copy=True)
    w = _linear_weights(n, out_size)
    return (w @ a.astype(np.float64) @ w.T).astype(np.float32)


def scale_intensity(volume_voxels: np.ndarray) -> np.ndarray:
    """Per-volume min-max map onto [-1, 1]. A constant volume maps to all -1."""
    v = np.asarray(volume_voxels, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.full(v.shape, -1.0, dtype=np.float32)
    out = 2.0 * (v - lo) / (hi - lo) - 1.0
    return np.clip(out, -1.0, 1.0).astype(np.float32)


def encode_modality_label(c, size: int) -> np.ndarray:
    """Spatially replicated one-hot label of shape (3, size, size)."""
    m = Modality.parse(c)
    out = np.zeros((len(Modality), size, size), dtype=np.float32)
    out[int(m)] = 1.0
    return out


def binarize_tumor(tumor_labels_slice: np.ndarray) -> np.ndarray:
    """Whole-tumor mask: every positive label becomes 1."""
    return (np.asarray(tumor_labels_slice) > 0).astype(np.uint8)
