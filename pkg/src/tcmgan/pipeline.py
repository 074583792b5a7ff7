"""Run configuration and the end-to-end experiment stages.

One root seed per run; every component seed is derived from it by name.
The CLI, the scripts and the acceptance tests all go through here.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .boostpipe import BoostConfig, Condition, run_boost
from .datapipe import (
    PhantomConfig,
    SliceSet,
    build_slice_set,
    cap_slices,
    check_disjoint,
    list_subjects,
    load_split,
    load_subject,
    make_phantom_dataset,
    save_split,
    save_subject,
    split_subjects,
)
from .datapipe.volumes import Modality
from .errors import ConfigError
from .losses import LossWeights, Mode
from .metrics import dice_score, quality_records, quality_report, ssim, to_unit
from .nets import ArchConfig
from .seeding import derive_seed
from .trainer import (
    TrainConfig,
    predict,
    pretrain_segmentor,
    save_network,
    train,
    train_pix2pix,
)
from .viz import sample_grid

log = logging.getLogger(__name__)

MODE_NAMES = {"pix2pix": Mode.PIX2PIX, "mgan": Mode.MGAN, "tcmgan": Mode.TCMGAN,
              "tcmgan-bw": Mode.TCMGAN_BW}
CONDITION_OF = {Mode.PIX2PIX: Condition.SYNTH_PIX2PIX, Mode.MGAN: Condition.SYNTH_MGAN,
                Mode.TCMGAN: Condition.SYNTH_TCMGAN, Mode.TCMGAN_BW: Condition.SYNTH_TCMGAN_BW}


@dataclass
class PreprocessConfig:
    image_size: int = 128
    brain_threshold: int = 2000
    # cap on GAN-training slices; None keeps all
    max_train_slices: Optional[int] = None


@dataclass
class SplitConfig:
    counts: tuple = (100, 100, 85)


@dataclass
class RunConfig:
    seed: int = 0
    data_dir: str = "data"
    out_dir: str = "runs/default"
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    splits: SplitConfig = field(default_factory=SplitConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    seg_arch: ArchConfig = field(default_factory=ArchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    boost: BoostConfig = field(default_factory=BoostConfig)

    def __post_init__(self):
        self.reseed(self.seed)

    def reseed(self, seed: int) -> "RunConfig":
        """Route the root seed into every component."""
        self.seed = int(seed)
        self.phantom.seed = derive_seed(self.seed, "phantom")
        self.arch.seed = derive_seed(self.seed, "arch") % (2 ** 31)
        self.seg_arch.seed = derive_seed(self.seed, "seg_arch") % (2 ** 31)
        self.train.seed = derive_seed(self.seed, "train")
        self.boost.seed = derive_seed(self.seed, "boost")
        return self

    @property
    def split_seed(self) -> int:
        return derive_seed(self.seed, "splits")

    def validate(self) -> None:
        self.phantom.validate()
        self.arch.validate()
        self.seg_arch.validate()
        self.train.validate()
        self.boost.validate()
        if len(self.splits.counts) != 3 or min(self.splits.counts) < 1:
            raise ConfigError(f"splits.counts must be three positive integers, got {self.splits.counts}")
        p = self.preprocess
        if p.image_size < 8 or p.brain_threshold < 0:
            raise ConfigError("preprocess.image_size must be >= 8 and brain_threshold >= 0")
        if p.max_train_slices is not None and p.max_train_slices < 1:
            raise ConfigError("preprocess.max_train_slices must be >= 1")
        # a file that declares a mode without a segmentation term must not also tune it;
        # a shared config selected per run with --mode may carry lambda_seg for the TC modes
        raw = getattr(self, "_raw", {}).get("train", {})
        if "mode" in raw and not Mode.parse(raw["mode"]).uses_seg and "lambda_seg" in raw.get("weights", {}):
            raise ConfigError(f"mode {raw['mode']} has no segmentation term; remove train.weights.lambda_seg")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"] = self.train.to_dict()
        for k in ("phantom", "arch", "seg_arch", "train", "boost"):
            d[k].pop("seed", None)
        d["phantom"]["tumor_radius_range"] = list(self.phantom.tumor_radius_range)
        d["splits"]["counts"] = list(self.splits.counts)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        _reject_unknown(d, cls, "run config")
        kw = {k: d[k] for k in ("seed", "data_dir", "out_dir") if k in d}
        if "phantom" in d:
            _reject_unknown(d["phantom"], PhantomConfig, "phantom", no_seed=True)
            kw["phantom"] = PhantomConfig.from_dict(d["phantom"])
        if "preprocess" in d:
            _reject_unknown(d["preprocess"], PreprocessConfig, "preprocess")
            kw["preprocess"] = PreprocessConfig(**d["preprocess"])
        if "splits" in d:
            _reject_unknown(d["splits"], SplitConfig, "splits")
            kw["splits"] = SplitConfig(counts=tuple(d["splits"].get("counts", SplitConfig.counts)))
        for key in ("arch", "seg_arch"):
            if key in d:
                _reject_unknown(d[key], ArchConfig, key, no_seed=True)
                kw[key] = ArchConfig(**d[key])
        if "train" in d:
            _reject_unknown(d["train"], TrainConfig, "train", no_seed=True)
            kw["train"] = TrainConfig.from_dict(d["train"])
        if "boost" in d:
            _reject_unknown(d["boost"], BoostConfig, "boost", no_seed=True)
            kw["boost"] = BoostConfig(**d["boost"])
        try:
            cfg = cls(**kw)
        except TypeError as e:
            raise ConfigError(str(e)) from None
        # settings the user wrote down, for mode gating
        cfg._raw = d
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(d)


def _reject_unknown(d, cls, where: str, no_seed: bool = False) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be an object")
    known = {f.name for f in fields(cls)}
    if no_seed:
        known.discard("seed")
    unknown = set(d) - known
    if unknown:
        hint = " (component seeds derive from the root seed)" if "seed" in unknown else ""
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}{hint}")


def phantom_run_config(seed: int = 0) -> RunConfig:
    """Desk-scale defaults: 64x64 phantoms, 200 GAN-training slices, small nets.

    The brain-pixel threshold scales with image area (2000 at 240x240).
    """
    cfg = RunConfig(
        seed=seed,
        data_dir="runs/phantom/data",
        out_dir="runs/phantom",
        phantom=PhantomConfig(image_size=64, n_subjects=30, slices_per_subject=24),
        preprocess=PreprocessConfig(image_size=64, brain_threshold=round(2000 * (64 / 240) ** 2),
                                    max_train_slices=200),
        splits=SplitConfig(counts=(10, 10, 10)),
        arch=ArchConfig(base_width=16, depth=3),
        seg_arch=ArchConfig(base_width=16, depth=3),
        train=TrainConfig(batch_size=8, epochs=30, lr_schedule=[[0, 5e-4]],
                          weights=LossWeights(lambda_l1=100.0, lambda_seg=1.0),
                          seg_pretrain_epochs=30, checkpoint_every=10, sample_every=10),
        boost=BoostConfig(epochs=30, batch_size=8),
    )
    return cfg.reseed(seed)


# -- stages ------------------------------------------------------------------

def dataset_checksum(subjects: Sequence[dict]) -> str:
    h = hashlib.sha256()
    for subj in subjects:
        for name in sorted(subj):
            v = subj[name]
            h.update(f"{v.subject_id}/{name}".encode())
            h.update(np.ascontiguousarray(v.voxels, dtype=np.float32).tobytes())
        h.update(np.ascontiguousarray(next(iter(subj.values())).tumor_labels, dtype=np.uint8).tobytes())
    return h.hexdigest()


def generate_phantoms(cfg: RunConfig, data_dir=None) -> tuple[list, str]:
    subjects = make_phantom_dataset(cfg.phantom)
    if data_dir is not None:
        for s in subjects:
            save_subject(s, data_dir)
    return subjects, dataset_checksum(subjects)


def load_subjects(data_dir) -> list[dict]:
    ids = list_subjects(data_dir)
    if not ids:
        raise FileNotFoundError(f"no subjects found in {data_dir}")
    return [load_subject(data_dir, i) for i in ids]


def make_splits(cfg: RunConfig, subjects: Sequence[dict]) -> dict[str, SliceSet]:
    """Subject split, slice filtering and preprocessing for all three splits."""
    by_id = {next(iter(s.values())).subject_id: s for s in subjects}
    ids = split_subjects(list(by_id), cfg.splits.counts, cfg.split_seed)
    check_disjoint(ids)
    p = cfg.preprocess
    out = {}
    for name, members in ids.items():
        out[name] = build_slice_set([by_id[i] for i in members], p.image_size, p.brain_threshold)
    out["train_gan"] = cap_slices(out["train_gan"], p.max_train_slices, derive_seed(cfg.seed, "cap"))
    return out


def save_splits(splits: dict[str, SliceSet], out_dir) -> dict[str, int]:
    counts = {}
    for name, s in splits.items():
        save_split(s, Path(out_dir) / name)
        counts[name] = len(s)
    return counts


def load_splits(split_root) -> dict[str, SliceSet]:
    return {name: load_split(Path(split_root) / name) for name in ("train_gan", "train_boost", "test")}


def train_generator(cfg: RunConfig, mode, slices: SliceSet, S=None, val: Optional[SliceSet] = None,
                    out_dir=None):
    """Train one synthesis model. pix2pix returns the three-network ensemble."""
    mode = Mode.parse(mode)
    tc = TrainConfig.from_dict({**cfg.train.to_dict(), "mode": mode.value})
    if mode is Mode.PIX2PIX:
        G, _, logs = train_pix2pix(slices, tc, cfg.arch, out_dir=out_dir, val=val)
        return G, logs
    state, tlog = train(slices, tc, cfg.arch, S=S if mode.uses_seg else None,
                        seg_arch=cfg.seg_arch, out_dir=out_dir, val=val)
    return state.G, tlog


def synthesis_scores(G, test: SliceSet, S=None) -> dict:
    """Mean SSIM of every synthesized modality against every real one, plus frozen-S Dice."""
    table = np.zeros((3, 3))
    dice = {}
    for m in Modality:
        fake = predict(G, test.source, int(m))
        for r in Modality:
            real = test.modality_images(r)
            table[m, r] = np.mean([ssim(to_unit(fake[i, 0]), to_unit(real[i, 0]))
                                   for i in range(len(test))])
        if S is not None:
            prob = predict(S, fake, int(m))
            dice[m.label] = float(np.mean([dice_score((prob[i, 0] > 0.5).astype(np.uint8), test.gt[i, 0])
                                           for i in range(len(test))]))
    return {"ssim_table": table, "ssim": {m.label: float(table[m, m]) for m in Modality},
            "seg_dice": dice, "seg_dice_mean": float(np.mean(list(dice.values()))) if dice else None}


def evaluate_generators(generators: dict, test: SliceSet, out_dir=None):
    """quality_report.csv over every method in ``generators`` (name -> G)."""
    records = []
    real = {m.label: test.modality_images(m) for m in Modality}
    for name, G in generators.items():
        synth = {m.label: predict(G, test.source, int(m)) for m in Modality}
        records += quality_records(name, synth, real)
    report = quality_report(records)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        report.to_csv(out / "quality_report.csv")
        sample_grid(generators, test, out / "samples" / "synthesis.png")
    return report


def run_phantom_pipeline(cfg: RunConfig, out_dir, modes=("MGAN", "TC-MGAN"), boost: bool = True) -> dict:
    """gen -> preprocess -> pretrain S -> train each mode -> evaluate -> boost."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    t0 = time.perf_counter()
    subjects, checksum = generate_phantoms(cfg)
    splits = make_splits(cfg, subjects)
    S, seg_trace = pretrain_segmentor(splits["train_gan"], cfg.train, cfg.seg_arch)
    save_network(out / "segmentor.ckpt", S, "segmentor", cfg.seg_arch)
    generators, scores, logs = {}, {}, {}
    for mode in map(Mode.parse, modes):
        G, tlog = train_generator(cfg, mode, splits["train_gan"], S, val=splits["test"],
                                  out_dir=out / mode.value)
        generators[mode.value] = G
        scores[mode.value] = synthesis_scores(G, splits["test"], S)
        logs[mode.value] = tlog
    quality = evaluate_generators(generators, splits["test"], out)
    timings = {"synthesis_s": time.perf_counter() - t0}
    result = {"checksum": checksum, "splits": splits, "S": S, "seg_trace": seg_trace,
              "generators": generators, "scores": scores, "logs": logs, "quality": quality,
              "timings": timings}
    if boost:
        t1 = time.perf_counter()
        synth = {CONDITION_OF[Mode.parse(k)].value: G for k, G in generators.items()}
        gan_ids = splits["train_gan"].subjects
        result["boost"] = run_boost(splits["train_boost"], splits["test"], synth, cfg.boost,
                                    cfg.seg_arch, out_dir=out, gan_train_ids=gan_ids)
        timings["boost_s"] = time.perf_counter() - t1
    timings["total_s"] = time.perf_counter() - t0
    return result
