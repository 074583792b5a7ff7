"""Segmentation boost: fill in missing modalities with G, train a 4-channel segmentor, compare Dice.

Inputs are always ordered [T2, FLAIR, T1, T1ce]. ``only_t2`` zeroes the
last three channels, ``all_real`` uses real images, and ``synth_*``
replaces them with generator outputs at both train and test time.
"""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .datapipe import SliceSet, batch_iterator, check_disjoint
from .datapipe.volumes import ALL_MODALITIES, Modality
from .errors import ConfigError, DataLeakError, EmptyDataset
from .losses import dice_loss
from .metrics import MetricsReport, dice_report, dice_score
from .nets import ArchConfig, init_params
from .seeding import derive_seed
from .trainer import predict, resolve_device
from .viz import _to_u8, render_grid

log = logging.getLogger(__name__)

CHANNEL_ORDER = ALL_MODALITIES  # ("T2", "FLAIR", "T1", "T1ce")
TIE_MARGIN = 0.005


class Condition(str, enum.Enum):
    ONLY_T2 = "only_t2"
    SYNTH_PIX2PIX = "synth_pix2pix"
    SYNTH_MGAN = "synth_mgan"
    SYNTH_TCMGAN = "synth_tcmgan"
    SYNTH_TCMGAN_BW = "synth_tcmgan_bw"
    ALL_REAL = "all_real"

    @classmethod
    def parse(cls, value) -> "Condition":
        try:
            return cls(value)
        except ValueError:
            raise ConfigError(f"unknown boost condition {value!r}") from None

    @property
    def needs_generator(self) -> bool:
        return self.value.startswith("synth_")


@dataclass
class BoostConfig:
    epochs: int = 30
    lr: float = 1e-3
    batch_size: int = 64
    seed: int = 0
    threshold: float = 0.5
    # only_t2 as a 1-channel network instead of zeroed channels
    only_t2_single_channel: bool = False
    device: str = "cpu"

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("boost epochs/batch_size must be >= 1 and lr > 0")
        if not 0 < self.threshold < 1:
            raise ConfigError("threshold must lie in (0, 1)")


@dataclass
class BoostSample:
    input: np.ndarray       # (4, S, S), or (1, S, S) for the single-channel only_t2 variant
    gt: np.ndarray          # (1, S, S) uint8
    condition: Condition


@dataclass
class BoostSet:
    inputs: np.ndarray      # (N, C, S, S) float32
    gt: np.ndarray          # (N, 1, S, S) uint8
    subject_ids: list
    condition: Condition

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def sample(self, i: int) -> BoostSample:
        return BoostSample(self.inputs[i], self.gt[i], self.condition)


class CountingGenerator(torch.nn.Module):
    """Wraps G and counts forward calls; used to prove baselines never synthesize."""

    def __init__(self, G):
        super().__init__()
        self.G = G
        self.calls = 0

    def forward(self, x, c):
        self.calls += 1
        return self.G(x, c)


def synthesize_missing(G, t2: np.ndarray, batch_size: int = 64) -> list[np.ndarray]:
    """One generator pass per target label over (N, 1, S, S) T2 slices -> [FLAIR, T1, T1ce]."""
    return [predict(G, t2, int(m), batch_size) for m in Modality]


def build_boost_dataset(slices: SliceSet, condition, G=None, gan_train_ids: Sequence[str] = (),
                        single_channel: bool = False) -> BoostSet:
    """Assemble 4-channel inputs for ``condition`` from preprocessed slices."""
    condition = Condition.parse(condition)
    leaked = set(slices.subjects) & set(gan_train_ids)
    if leaked:
        raise DataLeakError(f"boost data overlaps GAN-training subjects: {sorted(leaked)[:5]}")
    if len(slices) == 0:
        raise EmptyDataset("no slices for the boost dataset")
    t2 = slices.source
    if condition is Condition.ONLY_T2:
        if single_channel:
            inputs = t2.copy()
        else:
            inputs = np.concatenate([t2, np.zeros_like(slices.targets)], axis=1)
    elif condition is Condition.ALL_REAL:
        inputs = np.concatenate([t2, slices.targets], axis=1)
    else:
        if G is None:
            raise ConfigError(f"condition {condition.value} needs a generator")
        inputs = np.concatenate([t2] + synthesize_missing(G, t2), axis=1)
    return BoostSet(np.ascontiguousarray(inputs, dtype=np.float32), slices.gt.copy(),
                    list(slices.subject_ids), condition)


def train_boost_segmentor(data: BoostSet, config: BoostConfig, arch: ArchConfig):
    """Dice-trained unconditional U-Net on the boost inputs. Returns (S, per-epoch trace)."""
    config.validate()
    if len(data) == 0:
        raise EmptyDataset("empty boost dataset")
    dev = resolve_device(config.device)
    S = init_params(arch, "boost_segmentor", in_ch=data.inputs.shape[1]).to(dev)
    opt = torch.optim.Adam(S.parameters(), lr=config.lr)
    seed = derive_seed(config.seed, "boost")
    trace = []
    for epoch in range(config.epochs):
        losses = []
        for idx in batch_iterator(np.arange(len(data)), config.batch_size, seed=seed, epoch=epoch):
            idx = np.asarray(idx)
            x = torch.from_numpy(data.inputs[idx]).to(dev)
            gt = torch.from_numpy(data.gt[idx].astype(np.float32)).to(dev)
            opt.zero_grad(set_to_none=True)
            loss = dice_loss(S(x), gt)
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        trace.append(float(np.mean(losses)))
        log.info("boost[%s] epoch %d dice_loss %.4f", data.condition.value, epoch + 1, trace[-1])
    return S, trace


def slice_dice(S, data: BoostSet, threshold: float = 0.5) -> np.ndarray:
    prob = predict(S, data.inputs)
    pred = (prob > threshold).astype(np.uint8)
    return np.array([dice_score(pred[i, 0], data.gt[i, 0]) for i in range(len(data))])


def subject_dice(S, data: BoostSet, threshold: float = 0.5) -> dict[str, float]:
    """Per-slice Dice averaged within each subject."""
    d = slice_dice(S, data, threshold)
    ids = np.asarray(data.subject_ids)
    return {s: float(d[ids == s].mean()) for s in sorted(set(data.subject_ids))}


def evaluate_boost(S, test: SliceSet, condition, G=None, threshold: float = 0.5,
                   gan_train_ids: Sequence[str] = (), single_channel: bool = False) -> list[dict]:
    """Subject-level Dice records ``{"method", "subject", "dice"}`` for one condition."""
    data = build_boost_dataset(test, condition, G, gan_train_ids, single_channel)
    per_subject = subject_dice(S, data, threshold)
    return [{"method": data.condition.value, "subject": s, "dice": v} for s, v in per_subject.items()]


def ordering_check(report: MetricsReport, chain: Sequence[str]) -> dict:
    """Check means are non-increasing along ``chain``; margins under TIE_MARGIN are flagged."""
    means = {m: report.row(m)["dice_mean"] for m in chain}
    pairs = []
    for hi, lo in zip(chain, chain[1:]):
        margin = means[hi] - means[lo]
        pairs.append({"higher": hi, "lower": lo, "margin": margin,
                      "holds": margin >= 0, "near_tie": abs(margin) < TIE_MARGIN})
    return {"chain": list(chain), "means": means, "pairs": pairs,
            "holds": all(p["holds"] for p in pairs),
            "flagged": [f"{p['higher']}>={p['lower']}" for p in pairs if p["near_tie"]]}


def boost_grid(S, data: BoostSet, path, n_rows: int = 4, threshold: float = 0.5) -> Path:
    """Columns: the input channels, thresholded prediction, ground truth."""
    has_tumor = data.gt.reshape(len(data), -1).any(1)
    order = np.concatenate([np.flatnonzero(has_tumor), np.flatnonzero(~has_tumor)])[:n_rows]
    pred = predict(S, data.inputs[order]) > threshold
    rows = []
    for k, i in enumerate(order):
        row = [_to_u8(ch) for ch in data.inputs[i]]
        row += [_to_u8(pred[k, 0], 0, 1), _to_u8(data.gt[i, 0], 0, 1)]
        rows.append(row)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    render_grid(rows).save(path)
    return path


def run_boost(train: SliceSet, test: SliceSet, generators: dict, config: BoostConfig,
              arch: ArchConfig, out_dir=None, gan_train_ids: Sequence[str] = (),
              conditions: Optional[Sequence] = None) -> dict:
    """Train and evaluate one boost segmentor per condition.

    ``generators`` maps synth condition names to G. Writes ``dice_report.csv``,
    ``boost_ordering.json`` and per-condition PNG grids when ``out_dir`` is set.
    """
    config.validate()
    check_disjoint({"train_gan": list(gan_train_ids), "train_boost": train.subjects,
                    "test": test.subjects})
    if conditions is None:
        conditions = [Condition.ONLY_T2] + [Condition.parse(k) for k in generators] + [Condition.ALL_REAL]
    conditions = [Condition.parse(c) for c in conditions]
    records, traces = [], {}
    for cond in conditions:
        G = generators.get(cond.value) if cond.needs_generator else None
        single = cond is Condition.ONLY_T2 and config.only_t2_single_channel
        data = build_boost_dataset(train, cond, G, gan_train_ids, single)
        S, trace = train_boost_segmentor(data, config, arch)
        traces[cond.value] = trace
        records += evaluate_boost(S, test, cond, G, config.threshold, gan_train_ids, single)
        if out_dir is not None:
            boost_grid(S, build_boost_dataset(test, cond, G, gan_train_ids, single),
                       Path(out_dir) / "samples" / f"boost_{cond.value}.png",
                       threshold=config.threshold)
    report = dice_report(records, unit="subject")
    chain = [c.value for c in (Condition.ALL_REAL, Condition.SYNTH_TCMGAN, Condition.ONLY_T2)
             if c in conditions]
    ordering = ordering_check(report, chain) if len(chain) > 1 else None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        report.to_csv(out / "dice_report.csv")
        (out / "boost_ordering.json").write_text(json.dumps(
            {"ordering": ordering, "config": asdict(config), "traces": traces}, indent=2))
    return {"report": report, "records": records, "traces": traces, "ordering": ordering}
