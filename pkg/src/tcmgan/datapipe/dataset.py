"""Preprocessed slice collections, subject splits, persistence and batching."""

from __future__ import annotations

import json
import logging
import os
import queue
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

from ..errors import ConfigError, DataLeakError, EmptyDataset, FormatError, ShapeError
from .preprocess import (
    BRAIN_THRESHOLD,
    OUT_SIZE,
    binarize_tumor,
    filter_slices,
    resize_slice,
    scale_intensity,
)
from .volumes import LABEL_MAPPING, SOURCE, TARGETS, Modality, Volume, file_tag

log = logging.getLogger(__name__)

SPLITS = ("train_gan", "train_boost", "test")
INDEX_FILE = "index.json"
INDEX_VERSION = 1


@dataclass
class SliceSample:
    x: np.ndarray
    y_c: np.ndarray
    c: Modality
    gt: np.ndarray
    subject_id: str = ""
    slice_index: int = -1

    def check(self) -> None:
        for name in ("x", "y_c"):
            a = getattr(self, name)
            if a.min() < -1.0 or a.max() > 1.0:
                raise ValueError(f"{name} outside [-1, 1]")
        if not np.isin(self.gt, (0, 1)).all():
            raise ValueError("gt is not binary")
        if not (self.x.shape == self.y_c.shape == self.gt.shape):
            raise ShapeError("x, y_c and gt shapes differ")


@dataclass
class SliceSet:
    """Co-registered preprocessed slices.

    source: (N, 1, S, S) T2 in [-1, 1]; targets: (N, 3, S, S) ordered by
    ``Modality``; gt: (N, 1, S, S) uint8 whole-tumor masks.
    """

    source: np.ndarray
    targets: np.ndarray
    gt: np.ndarray
    subject_ids: list[str]
    slice_indices: np.ndarray

    def __len__(self) -> int:
        return self.source.shape[0]

    @property
    def size(self) -> int:
        return self.source.shape[-1]

    @property
    def subjects(self) -> list[str]:
        return sorted(set(self.subject_ids))

    def sample(self, i: int, c) -> SliceSample:
        m = Modality.parse(c)
        return SliceSample(self.source[i], self.targets[i, int(m)][None], m, self.gt[i],
                           self.subject_ids[i], int(self.slice_indices[i]))

    def subset(self, idx) -> "SliceSet":
        idx = np.asarray(idx, dtype=int)
        return SliceSet(self.source[idx], self.targets[idx], self.gt[idx],
                        [self.subject_ids[i] for i in idx], self.slice_indices[idx])

    def modality_images(self, c) -> np.ndarray:
        return self.targets[:, int(Modality.parse(c))][:, None]

    @classmethod
    def concat(cls, parts: Sequence["SliceSet"]) -> "SliceSet":
        parts = [p for p in parts if len(p)]
        if not parts:
            raise EmptyDataset("no slices")
        return cls(
            np.concatenate([p.source for p in parts]),
            np.concatenate([p.targets for p in parts]),
            np.concatenate([p.gt for p in parts]),
            [s for p in parts for s in p.subject_ids],
            np.concatenate([p.slice_indices for p in parts]),
        )


def preprocess_subject(subject: dict[str, Volume], out_size: int = OUT_SIZE,
                       threshold: int = BRAIN_THRESHOLD) -> SliceSet:
    """Filter on T2, scale each volume to [-1, 1], resize kept slices."""
    t2 = subject[SOURCE]
    keep = filter_slices(t2, threshold)
    sid = t2.subject_id
    n = len(keep)
    source = np.empty((n, 1, out_size, out_size), np.float32)
    targets = np.empty((n, len(TARGETS), out_size, out_size), np.float32)
    gt = np.empty((n, 1, out_size, out_size), np.uint8)
    scaled = {m: scale_intensity(v.voxels) for m, v in subject.items()}
    labels = t2.tumor_labels
    for row, k in enumerate(keep):
        source[row, 0] = resize_slice(scaled[SOURCE][:, :, k], out_size, "image")
        for j, m in enumerate(TARGETS):
            targets[row, j] = resize_slice(scaled[m][:, :, k], out_size, "image")
        gt[row, 0] = resize_slice(binarize_tumor(labels[:, :, k]), out_size, "mask")
    np.clip(source, -1.0, 1.0, out=source)
    np.clip(targets, -1.0, 1.0, out=targets)
    return SliceSet(source, targets, gt, [sid] * n, np.asarray(keep, dtype=int))


def build_slice_set(subjects: Iterable[dict[str, Volume]], out_size: int = OUT_SIZE,
                    threshold: int = BRAIN_THRESHOLD) -> SliceSet:
    return SliceSet.concat([preprocess_subject(s, out_size, threshold) for s in subjects])


def split_subjects(subject_ids: Sequence[str], counts: Sequence[int], seed: int) -> dict[str, list[str]]:
    """Seeded subject-level split into (train_gan, train_boost, test)."""
    if len(counts) != len(SPLITS):
        raise ConfigError(f"expected {len(SPLITS)} split counts, got {counts}")
    ids = sorted(subject_ids)
    if sum(counts) > len(ids):
        raise ConfigError(f"split counts {list(counts)} exceed {len(ids)} subjects")
    order = np.random.default_rng(seed).permutation(len(ids))
    out, start = {}, 0
    for name, n in zip(SPLITS, counts):
        out[name] = sorted(ids[i] for i in order[start:start + n])
        start += n
    check_disjoint(out)
    return out


def check_disjoint(splits: dict[str, Sequence[str]]) -> None:
    names = list(splits)
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            common = set(splits[a]) & set(splits[b])
            if common:
                raise DataLeakError(f"splits {a} and {b} share subjects {sorted(common)[:5]}")


def cap_slices(slices: SliceSet, cap: Optional[int], seed: int) -> SliceSet:
    """Seeded subsample down to ``cap`` slices, original order preserved."""
    if cap is None or len(slices) <= cap:
        return slices
    keep = np.sort(np.random.default_rng(seed).choice(len(slices), size=cap, replace=False))
    return slices.subset(keep)


# -- persistence -------------------------------------------------------------

def save_split(slices: SliceSet, split_dir) -> Path:
    """One .npy stack per (subject, modality) plus an index.json listing slices."""
    root = Path(split_dir)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for sid in slices.subjects:
        rows = [i for i, s in enumerate(slices.subject_ids) if s == sid]
        files = {}
        arrays = {SOURCE: slices.source[rows, 0]}
        for j, m in enumerate(TARGETS):
            arrays[m] = slices.targets[rows, j]
        arrays["seg"] = slices.gt[rows, 0]
        for m, arr in arrays.items():
            name = f"{sid}_{file_tag(m) if m != 'seg' else 'seg'}.npy"
            np.save(root / name, arr)
            files[m] = name
        for row, i in enumerate(rows):
            entries.append({"subject": sid, "slice_index": int(slices.slice_indices[i]),
                            "row": row, "files": files})
    index = {"version": INDEX_VERSION, "label_mapping": LABEL_MAPPING,
             "size": slices.size, "n_slices": len(slices), "entries": entries}
    path = root / INDEX_FILE
    path.write_text(json.dumps(index, indent=1, sort_keys=True))
    return path


def load_split(split_dir) -> SliceSet:
    root = Path(split_dir)
    try:
        index = json.loads((root / INDEX_FILE).read_text())
    except FileNotFoundError:
        raise
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise FormatError(f"{root / INDEX_FILE}: {e}") from None
    if index.get("version") != INDEX_VERSION:
        raise FormatError(f"{root}: unsupported index version {index.get('version')}")
    if not index["entries"]:
        raise EmptyDataset(f"{root}: no slices")
    cache: dict[str, np.ndarray] = {}

    def get(name):
        if name not in cache:
            cache[name] = np.load(root / name)
        return cache[name]

    src, tgt, gt, sids, kidx = [], [], [], [], []
    for e in index["entries"]:
        f, r = e["files"], e["row"]
        src.append(get(f[SOURCE])[r][None])
        tgt.append(np.stack([get(f[m])[r] for m in TARGETS]))
        gt.append(get(f["seg"])[r][None])
        sids.append(e["subject"])
        kidx.append(e["slice_index"])
    return SliceSet(np.stack(src), np.stack(tgt), np.stack(gt).astype(np.uint8), sids,
                    np.asarray(kidx, dtype=int))


# -- batching ----------------------------------------------------------------

def epoch_order(n: int, seed: int, epoch: int = 0, shuffle: bool = True) -> np.ndarray:
    if not shuffle:
        return np.arange(n)
    return np.random.default_rng([seed, epoch]).permutation(n)


def batch_iterator(samples: Sequence, batch_size: int, seed: int = 0, shuffle: bool = True,
                   epoch: int = 0, num_workers: Optional[int] = None) -> Iterator[list]:
    """Yield lists of at most ``batch_size`` items for one epoch.

    Order is a permutation seeded by (seed, epoch); the last partial batch is
    kept. ``num_workers > 0`` prefetches on a background thread without
    changing the order. Defaults to ``$TCMGAN_NUM_WORKERS``.
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    n = len(samples)
    if n == 0:
        raise EmptyDataset("batch_iterator got an empty sample list")
    order = epoch_order(n, seed, epoch, shuffle)
    gen = ([samples[i] for i in order[s:s + batch_size]] for s in range(0, n, batch_size))
    if num_workers is None:
        num_workers = int(os.environ.get("TCMGAN_NUM_WORKERS", "0") or 0)
    return prefetch(gen, num_workers) if num_workers > 0 else gen


_DONE = object()


def prefetch(iterable: Iterable, depth: int = 2) -> Iterator:
    """Run ``iterable`` on a background thread, buffering ``depth`` items in order."""
    q: queue.Queue = queue.Queue(maxsize=max(1, depth))

    def worker():
        try:
            for item in iterable:
                q.put(item)
        except BaseException as e:  # surfaced on the consumer side
            q.put(e)
        q.put(_DONE)

    threading.Thread(target=worker, daemon=True).start()
    while True:
        item = q.get()
        if item is _DONE:
            return
        if isinstance(item, BaseException):
            raise item
        yield item
