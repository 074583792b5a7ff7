"""Modality labels, volume containers and on-disk volume formats.

Two formats are readable: NIfTI-1 (``.nii``/``.nii.gz``, via nibabel) and a
small raw container used for phantoms::

    offset  size  field
    0       4     magic b"TCMG"
    4       4     u32 version (=1)
    8       4     u32 H
    12      4     u32 W
    16      4     u32 D
    20      1     u8 dtype (0=float32, 1=uint8)
    21      ...   row-major (C order) voxel data, little-endian

Files are named ``<subject>_<tag>.<ext>`` where ``tag`` is one of ``t2``,
``flair``, ``t1``, ``t1ce`` or ``seg``.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from ..errors import CoregistrationError, FormatError, MissingModality


class Modality(enum.IntEnum):
    """Target-domain selector. The index mapping is fixed and persisted."""

    FLAIR = 0
    T1 = 1
    T1CE = 2

    @property
    def label(self) -> str:
        return MODALITY_NAMES[self]

    @classmethod
    def parse(cls, value) -> "Modality":
        if isinstance(value, (int, np.integer)):
            return cls(int(value))
        key = str(value).strip().lower()
        for m in cls:
            if MODALITY_NAMES[m].lower() == key:
                return m
        raise ValueError(f"unknown modality {value!r}")


MODALITY_NAMES = {Modality.FLAIR: "FLAIR", Modality.T1: "T1", Modality.T1CE: "T1ce"}
SOURCE = "T2"
TARGETS = tuple(MODALITY_NAMES[m] for m in Modality)
ALL_MODALITIES = (SOURCE,) + TARGETS
LABEL_MAPPING = {int(m): MODALITY_NAMES[m] for m in Modality}

_FILE_TAGS = {"T2": "t2", "FLAIR": "flair", "T1": "t1", "T1ce": "t1ce"}
SEG_TAG = "seg"

RAW_MAGIC = b"TCMG"
RAW_VERSION = 1
_RAW_HEADER = struct.Struct("<4sIIIIB")
_RAW_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}


@dataclass
class Volume:
    subject_id: str
    modality: str
    voxels: np.ndarray
    tumor_labels: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.voxels.shape


def file_tag(modality: str) -> str:
    return _FILE_TAGS[modality]


# -- raw phantom container ---------------------------------------------------

def write_raw(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    if array.ndim != 3:
        raise FormatError(f"raw volumes are 3D, got shape {array.shape}")
    if array.dtype == np.uint8:
        code = 1
    else:
        code = 0
        array = array.astype("<f4")
    h, w, d = array.shape
    with open(path, "wb") as fh:
        fh.write(_RAW_HEADER.pack(RAW_MAGIC, RAW_VERSION, h, w, d, code))
        fh.write(np.ascontiguousarray(array).tobytes(order="C"))


def read_raw(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _RAW_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, h, w, d, code = _RAW_HEADER.unpack_from(data)
    if magic != RAW_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != RAW_VERSION:
        raise FormatError(f"{path}: unsupported raw version {version}")
    if code not in _RAW_DTYPES:
        raise FormatError(f"{path}: unknown dtype code {code}")
    dtype = _RAW_DTYPES[code]
    expected = h * w * d * dtype.itemsize
    payload = data[_RAW_HEADER.size:]
    if len(payload) != expected:
        raise FormatError(f"{path}: expected {expected} data bytes, found {len(payload)}")
    arr = np.frombuffer(payload, dtype=dtype).reshape(h, w, d)
    return arr.astype(np.float32 if code == 0 else np.uint8)


# -- NIfTI -------------------------------------------------------------------

def read_nifti(path) -> np.ndarray:
    import nibabel as nib

    img = nib.load(str(path))
    return np.asarray(img.dataobj)


def write_nifti(path, array: np.ndarray) -> None:
    import nibabel as nib

    arr = np.asarray(array)
    if arr.dtype not in (np.uint8, np.int16, np.float32):
        arr = arr.astype(np.float32)
    nib.save(nib.Nifti1Image(arr, affine=np.eye(4)), str(path))


_READERS = ((".tcmg", read_raw), (".nii.gz", read_nifti), (".nii", read_nifti))


def _find_file(root: Path, subject_id: str, tag: str) -> Optional[Path]:
    candidates = [root, root / subject_id]
    for base in candidates:
        if not base.is_dir():
            continue
        for ext, _ in _READERS:
            for name in (f"{subject_id}_{tag}{ext}", f"{subject_id}_{tag.upper()}{ext}"):
                p = base / name
                if p.exists():
                    return p
    return None


def _read_any(path: Path) -> np.ndarray:
    name = path.name.lower()
    for ext, reader in _READERS:
        if name.endswith(ext):
            return reader(path)
    raise FormatError(f"unsupported volume format: {path}")


def load_subject(path, subject_id: str) -> dict[str, Volume]:
    """Load the four co-registered modalities of one subject plus its labels.

    Looks in ``path`` and in ``path/subject_id``. Every returned volume
    shares the same ``tumor_labels`` array.
    """
    root = Path(path)
    seg_path = _find_file(root, subject_id, SEG_TAG)
    if seg_path is None:
        raise MissingModality("seg", str(root))
    labels = _read_any(seg_path)
    if np.issubdtype(labels.dtype, np.floating):
        labels = np.rint(labels)
    if labels.size and labels.min() < 0:
        raise FormatError(f"{seg_path}: negative tumor labels")
    labels = labels.astype(np.uint8)

    out: dict[str, Volume] = {}
    for modality in ALL_MODALITIES:
        p = _find_file(root, subject_id, file_tag(modality))
        if p is None:
            raise MissingModality(modality, str(root))
        vox = _read_any(p).astype(np.float32)
        if vox.ndim != 3:
            raise CoregistrationError(f"{p}: expected a 3D volume, got {vox.shape}")
        out[modality] = Volume(subject_id, modality, vox, labels)

    shapes = {m: v.shape for m, v in out.items()}
    shapes["seg"] = labels.shape
    if len(set(shapes.values())) != 1:
        raise CoregistrationError(f"subject {subject_id}: shape mismatch {shapes}")
    return out


def save_subject(subject: dict[str, Volume], out_dir, fmt: str = "raw") -> list[Path]:
    """Write a subject in the layout ``load_subject`` reads. ``fmt`` is raw or nifti."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ext, writer = {"raw": (".tcmg", write_raw), "nifti": (".nii.gz", write_nifti)}[fmt]
    written = []
    labels = None
    for modality, vol in subject.items():
        p = out / f"{vol.subject_id}_{file_tag(modality)}{ext}"
        writer(p, vol.voxels.astype(np.float32))
        written.append(p)
        labels = vol.tumor_labels if labels is None else labels
        sid = vol.subject_id
    if labels is not None:
        p = out / f"{sid}_{SEG_TAG}{ext}"
        writer(p, labels.astype(np.uint8))
        written.append(p)
    return written


def list_subjects(path) -> list[str]:
    """Subject ids found in ``path`` (flat or one-directory-per-subject layout)."""
    root = Path(path)
    ids = set()
    for p in root.rglob(f"*_{SEG_TAG}.*"):
        name = p.name
        ids.add(name[: name.rfind(f"_{SEG_TAG}.")])
    return sorted(ids)
