"""Synthetic multimodal data, missing-modality injection and the MMQF file format.

MMQF layout (all integers little-endian)::

    offset 0    4 bytes    magic b"MMQF"
    offset 4    u16        version (1)
    offset 6    u32        metadata length J
    offset 10   J bytes    UTF-8 JSON: {"modalities": [...], "num_classes": C,
                           "num_samples": N}
    then        float64    features, sample-major then modality-major
                           (sample 0: modality 0 dims, modality 1 dims, ...)
    then        u32 x N    labels
    then        u8 x N*M   context bits, sample-major
"""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import FormatError, StructuralError
from .model import ModalitySpec

MAGIC = b"MMQF"
VERSION = 1
GARBAGE_MODES = ("zeros", "gaussian_noise")


@dataclass
class MultimodalDataset:
    features: list
    labels: np.ndarray
    context: np.ndarray
    specs: tuple
    num_classes: int

    def __post_init__(self):
        self.specs = tuple(self.specs)
        self.features = [np.ascontiguousarray(f, dtype=np.float64) for f in self.features]
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        n = self.labels.shape[0]
        self.context = np.asarray(self.context, dtype=np.uint8).reshape(n, len(self.specs))
        self.validate()

    def validate(self):
        if self.num_classes < 1:
            raise StructuralError("num_classes must be >= 1")
        n = len(self.labels)
        if n == 0:
            raise StructuralError("dataset is empty")
        if len(self.features) != len(self.specs):
            raise StructuralError("one feature array per modality")
        for spec, f in zip(self.specs, self.features):
            if f.shape != (n, spec.input_dim):
                raise StructuralError(
                    f"modality {spec.name!r}: features {f.shape}, expected {(n, spec.input_dim)}"
                )
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise StructuralError(f"labels outside 0..{self.num_classes - 1}")
        if np.any(self.context > 1):
            raise StructuralError("context bits must be 0 or 1")

    def __len__(self):
        return len(self.labels)

    @property
    def num_modalities(self) -> int:
        return len(self.specs)

    def subset(self, indices) -> "MultimodalDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return MultimodalDataset(
            [f[idx] for f in self.features], self.labels[idx], self.context[idx], self.specs, self.num_classes
        )

    def select_modalities(self, modalities: Sequence[int]) -> "MultimodalDataset":
        """Keep only ``modalities``; samples left with no modality present are dropped."""
        ms = list(modalities)
        ctx = self.context[:, ms]
        keep = np.flatnonzero(ctx.any(axis=1))
        return MultimodalDataset(
            [self.features[m][keep] for m in ms],
            self.labels[keep],
            ctx[keep],
            [self.specs[m] for m in ms],
            self.num_classes,
        )

    def sample(self, i: int):
        """``(features per modality, label, context)`` of sample ``i``."""
        return [f[i] for f in self.features], int(self.labels[i]), self.context[i].copy()

    def equals(self, other: "MultimodalDataset") -> bool:
        return (
            self.specs == other.specs
            and self.num_classes == other.num_classes
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.context, other.context)
            and all(np.array_equal(a, b) for a, b in zip(self.features, other.features))
        )


@dataclass(frozen=True)
class MissingSpec:
    fractions: tuple
    garbage: str = "gaussian_noise"
    seed: int = 0
    sigma: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "fractions", tuple(float(f) for f in self.fractions))
        if any(not 0.0 <= f <= 1.0 for f in self.fractions):
            raise StructuralError(f"missing fractions must lie in [0, 1]: {self.fractions}")
        if self.garbage not in GARBAGE_MODES:
            raise StructuralError(f"unknown garbage mode {self.garbage!r}")


@dataclass
class MissingReport:
    missing_counts: list
    kept_to_avoid_empty: int = 0
    per_modality_kept: list = field(default_factory=list)


def _unit_rows(rng, count, dim):
    """``count`` unit vectors in R^dim, mutually orthogonal when count <= dim."""
    if count <= dim:
        q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
        return q[:, :count].T.copy()
    v = rng.standard_normal((count, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def gen_synthetic(
    num_samples: int,
    specs: Sequence[ModalitySpec],
    num_classes: int,
    class_separation=3.0,
    cross_modal_weight: float = 0.0,
    seed: int = 0,
    *,
    offset: float = 2.0,
    noise_scale: float = 1.0,
) -> MultimodalDataset:
    """Class-conditional Gaussian clusters with a cross-modal component.

    For label ``y`` modality ``m`` receives::

        x_m = offset * base_m
              + sep * (1 - w) * proto_m[y]          # visible within m
              + sep * w * key_proto_m[k_m]          # only informative jointly
              + noise_scale * N(0, I)

    The keys ``k_0 .. k_{M-2}`` are uniform over the classes and
    ``k_{M-1} = (y - sum of the others) mod C``: every key alone is
    independent of ``y`` but together they determine it. ``w`` is
    ``cross_modal_weight`` and ``sep`` is ``class_separation``, either one
    value or one per modality; ``base_m`` keeps the clusters in one half-space
    so amplitude encoding's sign ambiguity does not merge them. Labels are
    balanced (round-robin, then shuffled).
    """
    specs = tuple(specs)
    if not specs:
        raise StructuralError("need at least one modality")
    if num_classes < 1:
        raise StructuralError("num_classes must be >= 1")
    if num_samples < num_classes:
        raise StructuralError("need at least one sample per class")
    seps = np.broadcast_to(np.asarray(class_separation, dtype=np.float64), (len(specs),))
    if not np.all(seps > 0):
        raise StructuralError("class_separation must be positive")
    if not 0.0 <= cross_modal_weight <= 1.0:
        raise StructuralError("cross_modal_weight must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    m_count = len(specs)

    protos, keys_protos, bases = [], [], []
    for spec in specs:
        rows = _unit_rows(rng, num_classes + 1, spec.input_dim)
        bases.append(rows[-1])
        protos.append(rows[:-1])
        keys_protos.append(_unit_rows(rng, num_classes, spec.input_dim))

    labels = rng.permutation(np.arange(num_samples) % num_classes)
    keys = np.zeros((num_samples, m_count), dtype=np.int64)
    if m_count > 1:
        keys[:, :-1] = rng.integers(0, num_classes, size=(num_samples, m_count - 1))
    keys[:, -1] = (labels - keys[:, :-1].sum(axis=1)) % num_classes

    w = cross_modal_weight
    features = []
    for m, spec in enumerate(specs):
        noise = rng.standard_normal((num_samples, spec.input_dim))
        x = (
            offset * bases[m]
            + seps[m] * (1.0 - w) * protos[m][labels]
            + seps[m] * w * keys_protos[m][keys[:, m]]
            + noise_scale * noise
        )
        features.append(x)
    ctx = np.ones((num_samples, m_count), dtype=np.uint8)
    return MultimodalDataset(features, labels, ctx, specs, num_classes)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5 + 1e-9))


def inject_missing(dataset: MultimodalDataset, spec: MissingSpec):
    """Mark ``round(fraction * N)`` seeded-random samples per modality as
    missing and overwrite their features with garbage.

    A sample is never left with every modality missing: the marking that
    would empty it is skipped and counted. Returns ``(dataset, report)``.
    """
    if len(spec.fractions) != dataset.num_modalities:
        raise StructuralError("one missing fraction per modality")
    rng = np.random.default_rng(spec.seed)
    n = len(dataset)
    features = [f.copy() for f in dataset.features]
    ctx = dataset.context.copy()
    counts, kept_per = [], []
    for m, frac in enumerate(spec.fractions):
        chosen = rng.choice(n, size=_round_half_up(frac * n), replace=False) if frac > 0 else np.array([], int)
        chosen = np.sort(chosen)
        others = np.delete(ctx, m, axis=1).any(axis=1) if dataset.num_modalities > 1 else np.zeros(n, bool)
        ok = chosen[others[chosen]]
        kept_per.append(int(len(chosen) - len(ok)))
        ctx[ok, m] = 0
        if spec.garbage == "gaussian_noise":
            garbage = spec.sigma * rng.standard_normal((len(ok), features[m].shape[1]))
        else:
            garbage = np.zeros((len(ok), features[m].shape[1]))
        features[m][ok] = garbage
        counts.append(int((ctx[:, m] == 0).sum()))
    out = MultimodalDataset(features, dataset.labels.copy(), ctx, dataset.specs, dataset.num_classes)
    return out, MissingReport(counts, sum(kept_per), kept_per)


# --- MMQF container ---------------------------------------------------------------

def save_features(dataset: MultimodalDataset, path) -> None:
    meta = {
        "modalities": [asdict(s) for s in dataset.specs],
        "num_classes": dataset.num_classes,
        "num_samples": len(dataset),
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    feats = np.concatenate(dataset.features, axis=1).astype("<f8")
    blob = b"".join(
        [
            MAGIC,
            struct.pack("<HI", VERSION, len(meta_bytes)),
            meta_bytes,
            feats.tobytes(),
            dataset.labels.astype("<u4").tobytes(),
            dataset.context.astype(np.uint8).tobytes(),
        ]
    )
    Path(path).write_bytes(blob)


def load_features(path) -> MultimodalDataset:
    """Parse an MMQF file; raises :class:`FormatError` on any defect."""
    blob = Path(path).read_bytes()
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise FormatError("bad magic", 0)
    if len(blob) < 10:
        raise FormatError("truncated preamble", len(blob))
    version, mlen = struct.unpack_from("<HI", blob, 4)
    if version != VERSION:
        raise FormatError(f"unknown version {version}", 4)
    end_meta = 10 + mlen
    if len(blob) < end_meta:
        raise FormatError("truncated metadata", len(blob))
    try:
        meta = json.loads(blob[10:end_meta].decode("utf-8"))
        specs = tuple(ModalitySpec(**s) for s in meta["modalities"])
        num_classes = int(meta["num_classes"])
        n = int(meta["num_samples"])
    except (ValueError, KeyError, TypeError, StructuralError) as exc:
        raise FormatError(f"malformed metadata: {exc}", 10) from exc
    if num_classes < 1:
        raise FormatError("invalid metadata: num_classes must be >= 1", 10)
    if n < 1 or not specs:
        raise FormatError("invalid metadata: need samples and modalities", 10)

    dims = [s.input_dim for s in specs]
    total_dim = sum(dims)
    feat_bytes = 8 * n * total_dim
    expected = end_meta + feat_bytes + 4 * n + n * len(specs)
    if len(blob) != expected:
        off = min(len(blob), expected)
        raise FormatError(f"payload size {len(blob) - end_meta} does not match metadata "
                          f"(expected {expected - end_meta})", off)
    pos = end_meta
    flat = np.frombuffer(blob, dtype="<f8", count=n * total_dim, offset=pos).reshape(n, total_dim)
    pos += feat_bytes
    labels = np.frombuffer(blob, dtype="<u4", count=n, offset=pos).astype(np.int64)
    lab_off = pos
    pos += 4 * n
    ctx = np.frombuffer(blob, dtype=np.uint8, count=n * len(specs), offset=pos).reshape(n, len(specs))
    bad = np.flatnonzero(labels >= num_classes)
    if bad.size:
        raise FormatError(f"label {labels[bad[0]]} >= num_classes", lab_off + 4 * int(bad[0]))
    bad = np.flatnonzero(ctx.reshape(-1) > 1)
    if bad.size:
        raise FormatError("context byte not 0/1", pos + int(bad[0]))
    splits = np.cumsum(dims)[:-1]
    features = [a.astype(np.float64) for a in np.split(flat, splits, axis=1)]
    return MultimodalDataset(features, labels, ctx.copy(), specs, num_classes)


def export_csv(dataset: MultimodalDataset, path) -> None:
    """Labels and context bits, one row per sample."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "label"] + [f"ctx_{s.name}" for s in dataset.specs])
        for i in range(len(dataset)):
            writer.writerow([i, int(dataset.labels[i])] + [int(c) for c in dataset.context[i]])
