"""Synthetic multi-modality brain phantoms with known cross-modality maps.

Each subject has a smooth "anatomy" field ``A`` in [0.05, 0.95] inside an
ellipsoidal brain (zero outside) and an ellipsoidal tumor with three
BraTS-style subregions (1 necrotic core, 4 enhancing ring, 2 edema). Every
modality ``m`` is

    I_m = f_m(A) + offset_m[subregion]     inside the tumor
    I_m = f_m(A)                           elsewhere in the brain

with ``f_m(a) = lo + (hi - lo) * g(a)``, ``g(a) = a**gamma`` or
``(1 - a)**gamma`` when inverted. ``f_m`` is strictly monotone on [0, 1] so
``f_m(f_T2^{-1}(I_T2))`` recovers every target outside the tumor exactly.
Intensities are reported on a x1000 scale, like raw scanner units.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError
from .volumes import ALL_MODALITIES, Volume

INTENSITY_SCALE = 1000.0
ANATOMY_RANGE = (0.05, 0.95)
SUBREGIONS = (1, 4, 2)  # core, enhancing, edema (inside-out)


@dataclass(frozen=True)
class ModalityTransform:
    lo: float
    hi: float
    gamma: float
    invert: bool = False

    def __call__(self, a):
        a = np.asarray(a, dtype=np.float64)
        g = (1.0 - a) ** self.gamma if self.invert else a ** self.gamma
        return self.lo + (self.hi - self.lo) * g

    def inverse(self, v):
        g = (np.asarray(v, dtype=np.float64) - self.lo) / (self.hi - self.lo)
        g = np.clip(g, 0.0, 1.0) ** (1.0 / self.gamma)
        return 1.0 - g if self.invert else g


def _default_transforms() -> dict[str, ModalityTransform]:
    return {
        "T2": ModalityTransform(0.15, 0.75, 1.0),
        "FLAIR": ModalityTransform(0.10, 0.65, 2.0),
        "T1": ModalityTransform(0.20, 0.90, 1.0, invert=True),
        "T1ce": ModalityTransform(0.25, 0.70, 2.5, invert=True),
    }


def _default_offsets() -> dict[str, tuple[float, float, float]]:
    # (core, enhancing, edema), added inside the tumor
    return {
        "T2": (0.45, 0.25, 0.35),
        "FLAIR": (-0.05, 0.20, 0.45),
        "T1": (-0.35, -0.10, -0.20),
        "T1ce": (-0.15, 0.65, -0.05),
    }


@dataclass
class PhantomConfig:
    image_size: int = 64
    n_subjects: int = 30
    slices_per_subject: int = 24
    tumor_radius_range: tuple[float, float] = (6.0, 12.0)
    seed: int = 0
    modality_transform_params: dict[str, ModalityTransform] = field(default_factory=_default_transforms)
    tumor_offsets: dict[str, tuple[float, float, float]] = field(default_factory=_default_offsets)
    n_blobs: int = 10

    def validate(self) -> None:
        if self.image_size < 16 or self.image_size % 4:
            raise ConfigError(f"image_size must be >= 16 and divisible by 4, got {self.image_size}")
        if self.n_subjects < 1:
            raise ConfigError(f"n_subjects must be >= 1, got {self.n_subjects}")
        if self.slices_per_subject < 1:
            raise ConfigError(f"slices_per_subject must be >= 1, got {self.slices_per_subject}")
        lo, hi = self.tumor_radius_range
        if not 1.0 <= lo <= hi <= self.image_size / 4:
            raise ConfigError(f"tumor_radius_range {self.tumor_radius_range} outside (1, image_size/4)")
        missing = set(ALL_MODALITIES) - set(self.modality_transform_params)
        if missing:
            raise ConfigError(f"no transform for modalities {sorted(missing)}")
        missing = set(ALL_MODALITIES) - set(self.tumor_offsets)
        if missing:
            raise ConfigError(f"no tumor offsets for modalities {sorted(missing)}")
        for name, t in self.modality_transform_params.items():
            if not (t.gamma > 0 and t.hi > t.lo > 0):
                raise ConfigError(f"transform for {name} must have gamma > 0 and hi > lo > 0")

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomConfig":
        d = dict(d)
        if "tumor_radius_range" in d:
            d["tumor_radius_range"] = tuple(d["tumor_radius_range"])
        if "modality_transform_params" in d:
            base = _default_transforms()
            for k, v in d["modality_transform_params"].items():
                base[k] = v if isinstance(v, ModalityTransform) else ModalityTransform(**v)
            d["modality_transform_params"] = base
        if "tumor_offsets" in d:
            base = _default_offsets()
            base.update({k: tuple(v) for k, v in d["tumor_offsets"].items()})
            d["tumor_offsets"] = base
        return cls(**d)


def _grid(size: int, depth: int):
    ax = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    az = (np.arange(depth) + 0.5) / depth * 2.0 - 1.0
    return np.meshgrid(ax, ax, az, indexing="ij")


def _make_subject(cfg: PhantomConfig, rng: np.random.Generator, subject_id: str) -> dict[str, Volume]:
    s, d = cfg.image_size, cfg.slices_per_subject
    yy, xx, zz = _grid(s, d)

    centre = rng.uniform(-0.04, 0.04, size=2)
    axes = (rng.uniform(0.78, 0.88), rng.uniform(0.62, 0.74), rng.uniform(0.96, 1.0))
    rho_brain = np.sqrt(((yy - centre[0]) / axes[0]) ** 2 + ((xx - centre[1]) / axes[1]) ** 2
                        + (zz / axes[2]) ** 2)
    brain = rho_brain < 1.0

    anatomy = 0.5 + 0.12 * np.cos(np.pi * rho_brain)
    for _ in range(cfg.n_blobs):
        c = rng.uniform(-0.6, 0.6, size=3)
        sigma = rng.uniform(0.12, 0.3)
        amp = rng.choice([-1.0, 1.0]) * rng.uniform(0.1, 0.25)
        r2 = (yy - c[0]) ** 2 + (xx - c[1]) ** 2 + (zz - c[2]) ** 2
        anatomy += amp * np.exp(-r2 / (2 * sigma ** 2))
    anatomy = np.clip(anatomy, *ANATOMY_RANGE)
    anatomy[~brain] = 0.0

    # tumor: centred well inside the brain, in-plane radius in pixels
    r_lo, r_hi = cfg.tumor_radius_range
    radii_px = rng.uniform(r_lo, r_hi, size=2)
    radii = radii_px * 2.0 / s
    radius_z = rng.uniform(0.35, 0.6)
    tc = np.empty(3)
    for _ in range(1000):
        tc[:2] = centre + rng.uniform(-0.45, 0.45, size=2) * np.array(axes[:2])
        tc[2] = rng.uniform(-0.3, 0.3)
        rho_c = np.sqrt(((tc[0] - centre[0]) / axes[0]) ** 2 + ((tc[1] - centre[1]) / axes[1]) ** 2
                        + (tc[2] / axes[2]) ** 2)
        if rho_c + max(radii) / min(axes[:2]) < 0.95:
            break
    rho_t = np.sqrt(((yy - tc[0]) / radii[0]) ** 2 + ((xx - tc[1]) / radii[1]) ** 2
                    + ((zz - tc[2]) / radius_z) ** 2)
    tumor = (rho_t < 1.0) & brain
    labels = np.zeros(brain.shape, dtype=np.uint8)
    labels[tumor & (rho_t >= 0.65)] = 2
    labels[tumor & (rho_t >= 0.4) & (rho_t < 0.65)] = 4
    labels[tumor & (rho_t < 0.4)] = 1

    out = {}
    for modality in ALL_MODALITIES:
        f = cfg.modality_transform_params[modality]
        img = f(anatomy)
        for region, offset in zip(SUBREGIONS, cfg.tumor_offsets[modality]):
            img = np.where(labels == region, img + offset, img)
        img = np.where(brain, np.maximum(img, 0.02), 0.0) * INTENSITY_SCALE
        out[modality] = Volume(subject_id, modality, img.astype(np.float32), labels)
    return out


def make_phantom_dataset(config: PhantomConfig) -> list[dict[str, Volume]]:
    """Deterministic list of phantom subjects (modality -> Volume)."""
    config.validate()
    children = np.random.SeedSequence(config.seed).spawn(config.n_subjects)
    return [
        _make_subject(config, np.random.default_rng(ss), f"phantom_{i:04d}")
        for i, ss in enumerate(children)
    ]


def expected_target(config: PhantomConfig, t2_voxels: np.ndarray, modality: str) -> np.ndarray:
    """Analytic image of ``modality`` implied by a T2 volume, ignoring tumor offsets."""
    t2 = config.modality_transform_params["T2"]
    fm = config.modality_transform_params[modality]
    v = np.asarray(t2_voxels, dtype=np.float64) / INTENSITY_SCALE
    return fm(t2.inverse(v)) * INTENSITY_SCALE
