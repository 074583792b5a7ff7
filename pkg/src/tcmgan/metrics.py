"""Image-quality and overlap metrics, plus report aggregation.

PSNR and SSIM are evaluated on images mapped from [-1, 1] to [0, 1] with a
data range of 1 (see ``to_unit``); callers do the mapping.
"""

from __future__ import annotations

import csv
import io
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.signal import correlate2d

from .errors import ShapeError

PSNR_CAP = 100.0
SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def to_unit(img):
    """[-1, 1] -> [0, 1]."""
    return (np.asarray(img, dtype=np.float64) + 1.0) / 2.0


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, data_range: float = 1.0, cap: float = PSNR_CAP) -> float:
    a, b = _pair(a, b)
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return float(cap)
    return float(min(cap, 10.0 * math.log10(data_range ** 2 / mse)))


def gaussian_window(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim_map(a, b, data_range: float = 1.0) -> np.ndarray:
    """Local SSIM over every fully contained 11x11 Gaussian window."""
    a, b = _pair(a, b)
    if a.ndim != 2:
        raise ShapeError(f"ssim expects 2D images, got {a.shape}")
    if min(a.shape) < SSIM_WIN:
        raise ShapeError(f"image {a.shape} smaller than the {SSIM_WIN}x{SSIM_WIN} window")
    w = gaussian_window()

    def filt(z):
        return correlate2d(z, w, mode="valid")

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, data_range: float = 1.0) -> float:
    return float(np.mean(ssim_map(a, b, data_range)))


def dice_score(pred, gt) -> float:
    """2|P & G| / (|P| + |G|); 1.0 when both masks are empty."""
    p, g = np.asarray(pred), np.asarray(gt)
    if p.shape != g.shape:
        raise ShapeError(f"shape mismatch: {p.shape} vs {g.shape}")
    for name, m in (("pred", p), ("gt", g)):
        if not np.isin(m, (0, 1)).all():
            raise ValueError(f"{name} is not a binary mask")
    p, g = p.astype(bool), g.astype(bool)
    denom = p.sum() + g.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(p, g).sum() / denom)


# -- aggregation -------------------------------------------------------------

@dataclass
class MetricsReport:
    keys: tuple[str, ...]
    metrics: tuple[str, ...]
    rows: "OrderedDict[tuple, dict]" = field(default_factory=OrderedDict)
    warnings: list[str] = field(default_factory=list)
    unit: str = "slice"

    def row(self, *key) -> dict:
        return self.rows[tuple(key)]

    def columns(self) -> list[str]:
        cols = list(self.keys)
        for m in self.metrics:
            cols += [f"{m}_mean", f"{m}_std"]
        return cols + ["n"]

    def to_csv(self, path=None, header_comment: bool = True) -> str:
        buf = io.StringIO()
        if header_comment:
            buf.write(f"# statistics over: {self.unit}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns())
        for key, stats in self.rows.items():
            vals = list(key)
            for m in self.metrics:
                vals += [f"{stats[m + '_mean']:.6f}", f"{stats[m + '_std']:.6f}"]
            w.writerow(vals + [stats["n"]])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text


def aggregate(records: Sequence[dict], keys: Sequence[str], metrics: Sequence[str],
              unit: str = "slice") -> MetricsReport:
    """Population mean/std of each metric per group of ``keys``.

    Records missing a metric (absent, None or NaN) are skipped for that
    metric; a group left with no values is dropped with a warning.
    """
    if not records:
        raise ValueError("aggregate needs at least one record")
    groups: "OrderedDict[tuple, list[dict]]" = OrderedDict()
    for r in records:
        groups.setdefault(tuple(r[k] for k in keys), []).append(r)
    report = MetricsReport(tuple(keys), tuple(metrics), unit=unit)
    for key, rs in groups.items():
        stats, n = {}, None
        for m in metrics:
            vals = np.array([r[m] for r in rs if r.get(m) is not None and not _isnan(r[m])],
                            dtype=np.float64)
            if vals.size == 0:
                break
            stats[m + "_mean"] = float(vals.mean())
            stats[m + "_std"] = float(vals.std())
            n = vals.size if n is None else min(n, vals.size)
        else:
            stats["n"] = int(n)
            report.rows[key] = stats
            continue
        report.warnings.append(f"group {key} has no values for {m}; dropped")
    return report


def _isnan(v) -> bool:
    try:
        return math.isnan(v)
    except TypeError:
        return False


def read_report(path) -> list[dict]:
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def quality_records(method: str, synth: dict, real: dict) -> list[dict]:
    """Per-slice PSNR/SSIM records for one method.

    ``synth``/``real`` map modality name -> (N, 1, S, S) arrays in [-1, 1].
    """
    out = []
    for modality, fake in synth.items():
        ref = real[modality]
        for i in range(fake.shape[0]):
            a, b = to_unit(fake[i, 0]), to_unit(ref[i, 0])
            out.append({"method": method, "modality": modality,
                        "psnr": psnr(a, b), "ssim": ssim(a, b)})
    return out


def quality_report(records: Iterable[dict]) -> MetricsReport:
    return aggregate(list(records), ("method", "modality"), ("psnr", "ssim"))


def dice_report(records: Iterable[dict], unit: str = "subject") -> MetricsReport:
    return aggregate(list(records), ("method",), ("dice",), unit=unit)
