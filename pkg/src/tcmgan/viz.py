"""PNG sample grids: source | one column per method | real target | gt."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .datapipe import SliceSet
from .datapipe.volumes import Modality


def _to_u8(img, lo=-1.0, hi=1.0) -> np.ndarray:
    a = (np.asarray(img, dtype=np.float64) - lo) / (hi - lo)
    return (np.clip(a, 0, 1) * 255).round().astype(np.uint8)


def render_grid(tiles: list[list[np.ndarray]], pad: int = 2) -> Image.Image:
    """Row-major list of uint8 tiles (all the same shape) -> one image."""
    h, w = tiles[0][0].shape
    n_rows, n_cols = len(tiles), max(len(r) for r in tiles)
    canvas = np.full((n_rows * (h + pad) + pad, n_cols * (w + pad) + pad), 255, np.uint8)
    for i, row in enumerate(tiles):
        for j, t in enumerate(row):
            y, x = pad + i * (h + pad), pad + j * (w + pad)
            canvas[y:y + h, x:x + w] = t
    return Image.fromarray(canvas, mode="L")


def sample_grid(generators: dict, slices: SliceSet, path, n_rows: int = 4,
                modalities=tuple(Modality)) -> Path:
    """One panel per target modality, ``n_rows`` slices each, tumor-bearing slices first."""
    from .trainer import predict

    has_tumor = slices.gt.reshape(len(slices), -1).any(1)
    order = np.concatenate([np.flatnonzero(has_tumor), np.flatnonzero(~has_tumor)])[:n_rows]
    sub = slices.subset(order)
    rows = []
    for m in modalities:
        synth = {name: predict(G, sub.source, int(m)) for name, G in generators.items()}
        real = sub.modality_images(m)
        for i in range(len(sub)):
            row = [_to_u8(sub.source[i, 0])]
            row += [_to_u8(s[i, 0]) for s in synth.values()]
            row += [_to_u8(real[i, 0]), _to_u8(sub.gt[i, 0], 0, 1)]
            rows.append(row)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    render_grid(rows).save(path)
    return path
