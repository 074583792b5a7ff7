"""Versioned single-file container: JSON manifest plus raw tensor blobs.

Layout::

    b"TCMGCKPT" | u32 format version | u64 manifest length | manifest (UTF-8 JSON)
    | blob bytes

The manifest records, per tensor, its dtype, shape, offset and length into
the blob section, plus a CRC32 of the whole blob section. Everything is
written in sorted key order, so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np
import torch

from .errors import FormatError, VersionError

MAGIC = b"TCMGCKPT"
FORMAT_VERSION = 1
_HEAD = struct.Struct("<8sIQ")


def _to_numpy(t) -> np.ndarray:
    if isinstance(t, torch.Tensor):
        t = t.detach().cpu().contiguous().numpy()
    return np.ascontiguousarray(t)


def write_container(path, meta: dict, tensors: dict) -> Path:
    blobs, table, offset = [], {}, 0
    for name in sorted(tensors):
        arr = _to_numpy(tensors[name])
        raw = arr.tobytes(order="C")
        table[name] = {"dtype": arr.dtype.str, "shape": list(arr.shape),
                       "offset": offset, "nbytes": len(raw)}
        blobs.append(raw)
        offset += len(raw)
    payload = b"".join(blobs)
    manifest = {"meta": meta, "tensors": table, "crc32": zlib.crc32(payload),
                "format_version": FORMAT_VERSION}
    mbytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_HEAD.pack(MAGIC, FORMAT_VERSION, len(mbytes)))
        fh.write(mbytes)
        fh.write(payload)
    tmp.replace(path)
    return path


def read_container(path) -> tuple[dict, dict[str, torch.Tensor]]:
    data = Path(path).read_bytes()
    if len(data) < _HEAD.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, mlen = _HEAD.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (magic {magic!r})")
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: checkpoint format {version}, expected {FORMAT_VERSION}")
    start = _HEAD.size + mlen
    if len(data) < start:
        raise FormatError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(data[_HEAD.size:start].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: corrupt manifest ({e})") from None
    payload = data[start:]
    table = manifest["tensors"]
    expected = sum(e["nbytes"] for e in table.values())
    if len(payload) != expected:
        raise FormatError(f"{path}: expected {expected} blob bytes, found {len(payload)}")
    if zlib.crc32(payload) != manifest["crc32"]:
        raise FormatError(f"{path}: blob checksum mismatch")
    tensors = {}
    for name, e in table.items():
        arr = np.frombuffer(payload, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"])),
                            offset=e["offset"]).reshape(e["shape"])
        tensors[name] = torch.from_numpy(arr.copy())
    return manifest["meta"], tensors


def flatten_state_dict(prefix: str, sd: dict, out: dict) -> None:
    for k, v in sd.items():
        out[f"{prefix}/{k}"] = v


def extract_state_dict(prefix: str, tensors: dict) -> dict:
    p = prefix + "/"
    return {k[len(p):]: v for k, v in tensors.items() if k.startswith(p)}


def optimizer_to_container(prefix: str, opt: torch.optim.Optimizer, tensors: dict) -> dict:
    """Tensors go into ``tensors``; the JSON-able remainder is returned."""
    sd = opt.state_dict()
    for pid, st in sd["state"].items():
        for k, v in st.items():
            tensors[f"{prefix}/state/{pid}/{k}"] = v if isinstance(v, torch.Tensor) else torch.tensor(v)
    groups = []
    for g in sd["param_groups"]:
        groups.append({k: (list(v) if isinstance(v, tuple) else v) for k, v in g.items()})
    return {"param_groups": groups}


def optimizer_from_container(prefix: str, meta: dict, tensors: dict) -> dict:
    state: dict = {}
    p = prefix + "/state/"
    for k, v in tensors.items():
        if k.startswith(p):
            pid, name = k[len(p):].split("/", 1)
            state.setdefault(int(pid), {})[name] = v
    groups = [dict(g) for g in meta["param_groups"]]
    for g in groups:
        if "betas" in g:
            g["betas"] = tuple(g["betas"])
    return {"state": state, "param_groups": groups}
