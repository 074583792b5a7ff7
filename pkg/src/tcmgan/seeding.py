"""Named sub-seeds derived from one root seed per run."""

import zlib

import numpy as np


def derive_seed(seed: int, name: str) -> int:
    """Stable 63-bit seed for the stream ``name`` under root ``seed``."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode())])
    return int(ss.generate_state(1, np.uint64)[0] & np.uint64(2**63 - 1))
