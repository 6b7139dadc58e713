"""Sub-seed derivation: every stream is hash(master seed, purpose tag, indices)."""

import hashlib

import numpy as np


def derive_seed(master: int, tag: str, *index) -> int:
    text = ":".join([str(int(master)), tag] + [str(i) for i in index])
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little") >> 1


def derive_rng(master: int, tag: str, *index) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, tag, *index))
