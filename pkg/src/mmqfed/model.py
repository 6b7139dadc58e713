"""Multimodal quantum classifier with missing-modality isolation (MMA).

Pipeline per sample: project each modality's features, amplitude-encode
them into that modality's register, run the modality PQC, tensor all
registers together (modality 0 on the lowest qubits), run the fusion ring,
measure <Z> on every qubit and map the expectations to logits with a
linear readout.

With MMA enabled, a modality whose context bit is 0 is never read: its
register stays |0...0>, fusion gates touching it become NOOPs and its
expectations are reported as 0.

Flattened parameter layout::

    theta_0 | theta_1 | ... | theta_{M-1} | theta_fusion | W (n_q x C) | b (C)
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff, qstate
from .circuits import (
    NOISELESS,
    NoiseSpec,
    ParamCircuit,
    build_fusion_circuit,
    build_modality_pqc,
    damp_factor,
    encode_batch,
    run_circuit,
)
from .errors import FormatError, NumericError, StructuralError


@dataclass(frozen=True)
class ModalitySpec:
    name: str
    input_dim: int
    num_qubits: int
    num_layers: int = 1

    def __post_init__(self):
        if self.input_dim < 1 or self.num_qubits < 1 or self.num_layers < 1:
            raise StructuralError(f"modality {self.name!r}: dims, qubits and layers must be >= 1")

    @property
    def encoded_dim(self) -> int:
        return min(self.input_dim, 1 << self.num_qubits)


def make_projection(spec: ModalitySpec, seed: Optional[int]) -> Optional[np.ndarray]:
    """Fixed dimensionality-reduction matrix, or None when the raw features
    already fit the register."""
    if spec.input_dim <= 1 << spec.num_qubits:
        return None
    rng = np.random.default_rng(seed)
    return rng.standard_normal((spec.encoded_dim, spec.input_dim)) / np.sqrt(spec.input_dim)


class MultimodalModel:
    def __init__(
        self,
        specs: Sequence[ModalitySpec],
        num_classes: int,
        fusion_layers: int = 1,
        *,
        projection_seeds: Optional[Sequence[Optional[int]]] = None,
        mma: bool = True,
        params: Optional[np.ndarray] = None,
    ):
        self.specs = tuple(specs)
        if not self.specs:
            raise StructuralError("model needs at least one modality")
        if num_classes < 1:
            raise StructuralError("num_classes must be >= 1")
        self.num_classes = int(num_classes)
        self.fusion_layers = int(fusion_layers)
        self.mma = bool(mma)
        self.projection_seeds = (
            [None] * len(self.specs) if projection_seeds is None else list(projection_seeds)
        )
        if len(self.projection_seeds) != len(self.specs):
            raise StructuralError("one projection seed per modality")
        self.projections = [make_projection(s, seed) for s, seed in zip(self.specs, self.projection_seeds)]

        self.pqcs = [build_modality_pqc(s.num_qubits, s.num_layers) for s in self.specs]
        counts = [s.num_qubits for s in self.specs]
        self.fusion: Optional[ParamCircuit] = (
            build_fusion_circuit(counts, self.fusion_layers) if len(self.specs) > 1 else None
        )
        self.qubit_offsets = np.concatenate([[0], np.cumsum(counts)]).astype(int)
        self.num_qubits = int(self.qubit_offsets[-1])

        blocks, start = [], 0
        for m, pqc in enumerate(self.pqcs):
            blocks.append((f"theta_{m}", start, start + pqc.num_params))
            start += pqc.num_params
        n_fusion = self.fusion.num_params if self.fusion is not None else 0
        blocks.append(("theta_fusion", start, start + n_fusion))
        start += n_fusion
        self.num_quantum = start
        blocks.append(("readout_weights", start, start + self.num_qubits * self.num_classes))
        start += self.num_qubits * self.num_classes
        blocks.append(("readout_bias", start, start + self.num_classes))
        start += self.num_classes
        self.layout = blocks
        self.num_params = start
        self._masked_fusion = {}

        if params is None:
            params = np.zeros(self.num_params)
        self.params = np.asarray(params, dtype=np.float64).copy()
        if self.params.shape != (self.num_params,):
            raise StructuralError(f"expected {self.num_params} parameters, got {self.params.shape}")

    # --- parameter views ----------------------------------------------------

    @property
    def num_modalities(self) -> int:
        return len(self.specs)

    def slot_range(self, name: str) -> slice:
        for block, lo, hi in self.layout:
            if block == name:
                return slice(lo, hi)
        raise KeyError(name)

    def modality_slots(self, m: int) -> slice:
        return self.slot_range(f"theta_{m}")

    @property
    def fusion_slots(self) -> slice:
        return self.slot_range("theta_fusion")

    @property
    def readout_weights(self) -> np.ndarray:
        return self.params[self.slot_range("readout_weights")].reshape(self.num_qubits, self.num_classes)

    @property
    def readout_bias(self) -> np.ndarray:
        return self.params[self.slot_range("readout_bias")]

    def modality_qubits(self, m: int) -> range:
        return range(self.qubit_offsets[m], self.qubit_offsets[m + 1])

    def init_params(self, seed) -> np.ndarray:
        """Angles ~ U(-pi, pi), readout weights ~ U(-0.1, 0.1), bias 0."""
        rng = np.random.default_rng(seed)
        params = np.zeros(self.num_params)
        params[: self.num_quantum] = rng.uniform(-np.pi, np.pi, self.num_quantum)
        w = self.slot_range("readout_weights")
        params[w] = rng.uniform(-0.1, 0.1, w.stop - w.start)
        self.params = params
        return params

    def copy(self) -> "MultimodalModel":
        return MultimodalModel(
            self.specs,
            self.num_classes,
            self.fusion_layers,
            projection_seeds=self.projection_seeds,
            mma=self.mma,
            params=self.params,
        )

    # --- evaluation core ----------------------------------------------------

    def _fusion_for(self, present: frozenset) -> Optional[ParamCircuit]:
        if self.fusion is None:
            return None
        if len(present) == self.num_modalities:
            return self.fusion
        if present not in self._masked_fusion:
            self._masked_fusion[present] = self.fusion.masked(present)
        return self._masked_fusion[present]

    def live_quantum_slots(self, present: frozenset) -> np.ndarray:
        """Quantum slots that influence the output when only ``present``
        modalities are processed."""
        live = np.zeros(self.num_quantum, dtype=bool)
        for m in present:
            live[self.modality_slots(m)] = True
        fusion = self._fusion_for(present)
        if fusion is not None:
            live[self.fusion_slots] = fusion.live_slots()
        return live

    def _groups(self, ctx: np.ndarray, honor_ctx: bool):
        """Yield ``(present, sample_indices)`` grouped by context pattern."""
        b = ctx.shape[0]
        if not (self.mma or honor_ctx):
            yield frozenset(range(self.num_modalities)), np.arange(b)
            return
        patterns, inverse = np.unique(ctx, axis=0, return_inverse=True)
        inverse = np.asarray(inverse).reshape(-1)
        for k, pattern in enumerate(patterns):
            present = frozenset(int(m) for m in np.flatnonzero(pattern))
            if not present:
                raise StructuralError("sample with every modality missing")
            yield present, np.flatnonzero(inverse == k)

    def _encode(self, m: int, x: np.ndarray) -> np.ndarray:
        spec = self.specs[m]
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != spec.input_dim:
            raise StructuralError(
                f"modality {spec.name!r} expects {spec.input_dim} features, got {x.shape[-1]}"
            )
        proj = self.projections[m]
        if proj is not None:
            x = x @ proj.T
        return encode_batch(x, spec.num_qubits)

    def group_expectations(
        self,
        theta_rows: np.ndarray,
        features: Sequence[np.ndarray],
        present: frozenset,
        noise: NoiseSpec = NOISELESS,
        rng: Optional[np.random.Generator] = None,
    ) -> np.ndarray:
        """Expectations ``(rows, batch, n_q)`` for samples sharing ``present``.

        ``features[m]`` is only read for ``m`` in ``present``.
        """
        theta_rows = np.atleast_2d(np.asarray(theta_rows, dtype=np.float64))
        rows = theta_rows.shape[0]
        batch = None
        registers = []
        gate_count = 0
        for m, spec in enumerate(self.specs):
            dim = 1 << spec.num_qubits
            if m not in present:
                reg = np.zeros((1, 1, dim), dtype=np.complex128)
                reg[..., 0] = 1.0
                registers.append(reg)
                continue
            enc = self._encode(m, features[m])
            batch = enc.shape[0]
            psi = np.repeat(enc[None], rows, axis=0)
            pqc = self.pqcs[m]
            run_circuit(pqc, psi, theta_rows[:, self.modality_slots(m)], noise, rng)
            gate_count += pqc.gate_count
            registers.append(psi)
        if batch is None:
            raise StructuralError("at least one modality must be present")

        full = registers[-1]
        for reg in reversed(registers[:-1]):
            full = (full[..., :, None] * reg[..., None, :]).reshape(
                np.broadcast_shapes(full.shape[:-1], reg.shape[:-1]) + (-1,)
            )
        target = (rows, batch, 1 << self.num_qubits)
        if full.shape != target:
            full = np.broadcast_to(full, target).copy()

        fusion = self._fusion_for(present)
        if fusion is not None:
            run_circuit(fusion, full, theta_rows[:, self.fusion_slots], noise, rng)
            gate_count += fusion.gate_count
        ex = qstate.expect_z_all(full)
        for m in range(self.num_modalities):
            if m not in present:
                ex[..., self.modality_qubits(m)] = 0.0
        if noise.mode == "global_damp":
            ex *= damp_factor(noise, gate_count)
        return ex

    def expectations(
        self,
        theta_rows: np.ndarray,
        features: Sequence[np.ndarray],
        ctx: np.ndarray,
        noise: NoiseSpec = NOISELESS,
        rng: Optional[np.random.Generator] = None,
        *,
        honor_ctx: bool = False,
    ) -> np.ndarray:
        """Expectations ``(rows, batch, n_q)`` for a mixed-context batch.

        Context bits are honored when MMA is on (or ``honor_ctx`` forces it,
        as the per-modality ablation does); otherwise every modality is
        encoded from whatever features are supplied.
        """
        theta_rows = np.atleast_2d(theta_rows)
        ctx = np.asarray(ctx).reshape(-1, self.num_modalities)
        out = np.empty((theta_rows.shape[0], ctx.shape[0], self.num_qubits))
        for present, idx in self._groups(ctx, honor_ctx):
            sub = [f[idx] if m in present else None for m, f in enumerate(features)]
            out[:, idx] = self.group_expectations(theta_rows, sub, present, noise, rng)
        return out


# --- public operations --------------------------------------------------------

def _as_batch(model: MultimodalModel, features, ctx):
    feats = [np.atleast_2d(np.asarray(f, dtype=np.float64)) for f in features]
    if len(feats) != model.num_modalities:
        raise StructuralError(f"expected {model.num_modalities} feature arrays, got {len(feats)}")
    ctx = np.asarray(ctx, dtype=np.int64).reshape(-1, model.num_modalities)
    if np.any((ctx != 0) & (ctx != 1)):
        raise StructuralError("context bits must be 0 or 1")
    return feats, ctx


def forward_batch(model, features, ctx, noise: NoiseSpec = NOISELESS, rng=None, *, params=None, honor_ctx=False):
    """Batched forward: returns ``(logits (B, C), expectations (B, n_q))``."""
    params = model.params if params is None else np.asarray(params, dtype=np.float64)
    feats, ctx = _as_batch(model, features, ctx)
    if ctx.sum(axis=1).min(initial=1) == 0 and (model.mma or honor_ctx):
        raise StructuralError("all modalities missing for a sample")
    theta, w, b = autodiff.split_readout(params, model.num_quantum, model.num_qubits, model.num_classes)
    ex = model.expectations(theta[None], feats, ctx, noise, rng, honor_ctx=honor_ctx)[0]
    return ex @ w + b, ex


def forward(model, sample, ctx, noise: NoiseSpec = NOISELESS, rng=None):
    """Single sample: ``sample[m]`` is modality m's feature vector (ignored
    when ``ctx[m] == 0`` and MMA is on)."""
    ctx = np.asarray(ctx, dtype=np.int64)
    if ctx.shape != (model.num_modalities,):
        raise StructuralError("context vector length must equal the number of modalities")
    if not ctx.any():
        raise StructuralError("all modalities missing")
    feats = []
    for m, spec in enumerate(model.specs):
        x = sample[m] if sample[m] is not None else np.zeros(spec.input_dim)
        feats.append(np.asarray(x, dtype=np.float64)[None, :])
    logits, ex = forward_batch(model, feats, ctx[None], noise, rng)
    return logits[0], ex[0]


def predict(logits) -> np.ndarray:
    """Argmax with ties to the lowest class index."""
    logits = np.asarray(logits)
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits")
    out = np.argmax(logits, axis=-1)
    return int(out) if out.ndim == 0 else out


def loss_and_grad(model, params, features, ctx, labels, noise: NoiseSpec = NOISELESS, rng=None):
    """Mean cross-entropy, its gradient and the mask of slots that can move.

    Slots whose modality (or masked fusion gate) is absent from every sample
    of the batch are reported as non-trainable.
    """
    params = np.asarray(params, dtype=np.float64)
    feats, ctx = _as_batch(model, features, ctx)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape[0] == 0:
        raise StructuralError("empty batch")
    loss_sum = 0.0
    grad = np.zeros_like(params)
    trainable = np.zeros(model.num_params, dtype=bool)
    trainable[model.num_quantum :] = True
    for present, idx in model._groups(ctx, honor_ctx=False):
        live = model.live_quantum_slots(present)
        sub = [f[idx] if m in present else None for m, f in enumerate(feats)]

        def expect_fn(rows, sub=sub, present=present):
            return model.group_expectations(rows, sub, present, noise, rng)

        try:
            loss, g = autodiff.full_gradient(
                expect_fn,
                params,
                labels[idx],
                num_quantum=model.num_quantum,
                num_outputs=model.num_qubits,
                num_classes=model.num_classes,
                active=live,
                reduction="sum",
            )
        except NumericError as exc:
            sample = exc.context.get("sample")
            ctx_info = {"sample": int(idx[sample])} if sample is not None else {}
            raise NumericError(str(exc).split(" (")[0], **ctx_info) from exc
        loss_sum += loss
        grad += g
        trainable[: model.num_quantum] |= live
    n = labels.shape[0]
    return loss_sum / n, grad / n, trainable


def _dataset_arrays(data):
    return data.features, data.context, data.labels


def local_loss(model, shard, noise: NoiseSpec = NOISELESS, rng=None, params=None) -> float:
    feats, ctx, labels = _dataset_arrays(shard)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape[0] == 0:
        raise StructuralError("empty shard")
    logits, _ = forward_batch(model, feats, ctx, noise, rng, params=params)
    return float(autodiff.cross_entropy(logits, labels).mean())


def accuracy(model, data, noise: NoiseSpec = NOISELESS, rng=None, params=None, *, ctx=None, honor_ctx=False) -> float:
    feats, base_ctx, labels = _dataset_arrays(data)
    ctx = base_ctx if ctx is None else ctx
    logits, _ = forward_batch(model, feats, ctx, noise, rng, params=params, honor_ctx=honor_ctx)
    return float(np.mean(predict(logits) == np.asarray(labels)))


def modality_accuracies(model, data, noise: NoiseSpec = NOISELESS, rng=None, params=None) -> list:
    """Accuracy with each modality alone (others masked through the context
    vector), over the samples where that modality is present. NaN when a
    modality is absent from every sample."""
    out = []
    feats, ctx, labels = _dataset_arrays(data)
    ctx = np.asarray(ctx)
    for m in range(model.num_modalities):
        keep = np.flatnonzero(ctx[:, m] == 1)
        if keep.size == 0:
            out.append(float("nan"))
            continue
        only = np.zeros((keep.size, model.num_modalities), dtype=np.int64)
        only[:, m] = 1
        sub = [f[keep] for f in feats]
        logits, _ = forward_batch(model, sub, only, noise, rng, params=params, honor_ctx=True)
        out.append(float(np.mean(predict(logits) == np.asarray(labels)[keep])))
    return out


def local_train(
    model,
    shard,
    epochs: int,
    opt: autodiff.OptimizerState,
    noise: NoiseSpec = NOISELESS,
    *,
    batch_size: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    params: Optional[np.ndarray] = None,
):
    """Gradient training on one shard; returns ``(params, loss_trace)``.

    ``loss_trace[e]`` is the mean loss seen during epoch ``e`` (evaluated at
    the pre-update parameters of each step). Mini-batches are drawn from a
    per-epoch shuffle when ``batch_size`` is smaller than the shard.
    """
    if epochs < 1:
        raise StructuralError("epochs must be >= 1")
    feats, ctx, labels = _dataset_arrays(shard)
    feats, ctx = _as_batch(model, feats, ctx)
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.shape[0]
    if n == 0:
        raise StructuralError("empty shard")
    params = (model.params if params is None else np.asarray(params, dtype=np.float64)).copy()
    bs = n if batch_size is None or batch_size >= n else int(batch_size)
    if bs < 1:
        raise StructuralError("batch_size must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    trace = []
    for epoch in range(epochs):
        order = np.arange(n) if bs == n else rng.permutation(n)
        total = 0.0
        for start in range(0, n, bs):
            idx = order[start : start + bs]
            try:
                loss, grad, trainable = loss_and_grad(
                    model, params, [f[idx] for f in feats], ctx[idx], labels[idx], noise, rng
                )
            except NumericError as exc:
                raise NumericError(f"training failed: {exc}", epoch=epoch) from exc
            params, opt = autodiff.optimizer_step(opt, params, grad, trainable)
            total += loss * len(idx)
        trace.append(total / n)
    return params, trace


# --- checkpoint format ----------------------------------------------------------
#
#   offset 0   4 bytes   magic b"MMQC"
#   offset 4   u16 LE    version (1)
#   offset 6   u32 LE    header length H
#   offset 10  H bytes   UTF-8 JSON header
#   offset 10+H          num_params float64 LE, in the flattened layout order

CKPT_MAGIC = b"MMQC"
CKPT_VERSION = 1


def checkpoint_header(model: MultimodalModel, **extra) -> dict:
    header = {
        "modalities": [asdict(s) for s in model.specs],
        "fusion_layers": model.fusion_layers,
        "num_classes": model.num_classes,
        "projection_seeds": model.projection_seeds,
        "mma": model.mma,
        "num_params": model.num_params,
        "layout": [list(b) for b in model.layout],
    }
    header.update(extra)
    return header


def save_checkpoint(model: MultimodalModel, path, **extra) -> None:
    header = json.dumps(checkpoint_header(model, **extra), sort_keys=True).encode("utf-8")
    payload = np.asarray(model.params, dtype="<f8").tobytes()
    blob = CKPT_MAGIC + struct.pack("<HI", CKPT_VERSION, len(header)) + header + payload
    Path(path).write_bytes(blob)


def load_checkpoint(path):
    """Return ``(model, header)``."""
    blob = Path(path).read_bytes()
    if blob[:4] != CKPT_MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    if len(blob) < 10:
        raise FormatError("truncated checkpoint preamble", len(blob))
    version, hlen = struct.unpack_from("<HI", blob, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    if len(blob) < 10 + hlen:
        raise FormatError("truncated checkpoint header", len(blob))
    try:
        header = json.loads(blob[10 : 10 + hlen].decode("utf-8"))
        specs = [ModalitySpec(**s) for s in header["modalities"]]
        num_params = int(header["num_params"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"bad checkpoint header: {exc}", 10) from exc
    body = blob[10 + hlen :]
    if len(body) != 8 * num_params:
        raise FormatError(f"expected {8 * num_params} payload bytes, got {len(body)}", 10 + hlen)
    params = np.frombuffer(body, dtype="<f8").astype(np.float64)
    model = MultimodalModel(
        specs,
        header["num_classes"],
        header["fusion_layers"],
        projection_seeds=header["projection_seeds"],
        mma=header["mma"],
        params=params,
    )
    return model, header
