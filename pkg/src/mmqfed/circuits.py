"""Circuit programs: amplitude encoder, modality PQC, fusion ring, noise."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import qstate
from .errors import StructuralError
from .qstate import GateKind, GateOp, StateVector

NOISE_MODES = ("off", "global_damp", "per_gate_pauli")
NOISE_P_RANGE = (0.001, 0.05)


class ZeroFeatureWarning(UserWarning):
    """An all-zero feature vector was encoded as |0...0>."""


@dataclass(frozen=True)
class ParamCircuit:
    """Immutable gate program over ``num_qubits`` qubits.

    ``gate_modalities`` is only set for fusion circuits: entry ``i`` is the
    frozenset of modality indices owning the qubits gate ``i`` touches.
    """

    num_qubits: int
    gates: tuple
    num_params: int
    gate_modalities: Optional[tuple] = None

    def __post_init__(self):
        object.__setattr__(self, "gates", tuple(self.gates))
        seen = set()
        for gate in self.gates:
            for q in gate.targets:
                if q >= self.num_qubits:
                    raise StructuralError(
                        f"gate {gate.kind.value} on qubit {q} exceeds {self.num_qubits} qubits"
                    )
            if gate.param_slot is not None:
                if not 0 <= gate.param_slot < self.num_params:
                    raise StructuralError(f"param_slot {gate.param_slot} >= {self.num_params}")
                if gate.param_slot in seen:
                    raise StructuralError(f"param_slot {gate.param_slot} used twice")
                seen.add(gate.param_slot)
        if self.gate_modalities is not None and len(self.gate_modalities) != len(self.gates):
            raise StructuralError("gate_modalities must align with gates")

    @property
    def gate_count(self) -> int:
        """Number of gates that actually act (NOOPs excluded)."""
        return sum(g.kind is not GateKind.NOOP for g in self.gates)

    def masked(self, present) -> "ParamCircuit":
        """Replace every gate touching a modality not in ``present`` by NOOP."""
        if self.gate_modalities is None:
            raise StructuralError("circuit carries no modality ownership")
        present = frozenset(present)
        gates = tuple(
            g if mods <= present else GateOp(GateKind.NOOP, (g.targets[0],))
            for g, mods in zip(self.gates, self.gate_modalities)
        )
        return ParamCircuit(self.num_qubits, gates, self.num_params, self.gate_modalities)

    def live_slots(self) -> np.ndarray:
        """Boolean mask over parameter slots referenced by a non-NOOP gate."""
        live = np.zeros(self.num_params, dtype=bool)
        for g in self.gates:
            if g.param_slot is not None:
                live[g.param_slot] = True
        return live


@dataclass(frozen=True)
class NoiseSpec:
    mode: str = "off"
    p: float = 0.0
    seed: int = 0
    allow_out_of_range: bool = False

    def __post_init__(self):
        if self.mode not in NOISE_MODES:
            raise StructuralError(f"unknown noise mode {self.mode!r}")
        if not 0.0 <= self.p <= 1.0:
            raise StructuralError(f"depolarizing probability {self.p} outside [0, 1]")
        lo, hi = NOISE_P_RANGE
        if self.mode != "off" and not self.allow_out_of_range and not lo <= self.p <= hi:
            raise StructuralError(
                f"depolarizing probability {self.p} outside [{lo}, {hi}]; "
                "set allow_out_of_range to override"
            )

    @property
    def active(self) -> bool:
        return self.mode != "off"


NOISELESS = NoiseSpec()


# --- encoding ---------------------------------------------------------------

def encode_batch(features: np.ndarray, n: int) -> np.ndarray:
    """Amplitude-encode each row of ``features`` into ``2**n`` amplitudes.

    Rows are zero-padded, then normalized. All-zero rows fall back to
    |0...0> with a :class:`ZeroFeatureWarning`.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 1:
        features = features[None, :]
    dim = 1 << n
    if features.shape[-1] > dim:
        raise StructuralError(f"{features.shape[-1]} features do not fit {n} qubits")
    amps = np.zeros(features.shape[:-1] + (dim,), dtype=np.complex128)
    norms = np.sqrt(np.sum(features * features, axis=-1))
    zero = norms == 0.0
    safe = np.where(zero, 1.0, norms)
    amps[..., : features.shape[-1]] = features / safe[..., None]
    if np.any(zero):
        amps[zero, 0] = 1.0
        warnings.warn(
            f"{int(zero.sum())} all-zero feature vector(s) encoded as |0...0>",
            ZeroFeatureWarning,
            stacklevel=2,
        )
    return amps


def amplitude_encode(features: Sequence[float], n: int) -> StateVector:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 1:
        raise StructuralError("expected a 1-D feature vector")
    return StateVector(n, encode_batch(features, n)[0])


# --- builders ---------------------------------------------------------------

def build_modality_pqc(n: int, layers: int) -> ParamCircuit:
    """``layers`` x [RX, RY, RZ on every qubit; CNOT ring q -> q+1 mod n]."""
    if n < 1 or layers < 1:
        raise StructuralError("need n >= 1 and layers >= 1")
    gates = []
    slot = 0
    for _ in range(layers):
        for q in range(n):
            for kind in (GateKind.RX, GateKind.RY, GateKind.RZ):
                gates.append(GateOp(kind, (q,), slot))
                slot += 1
        if n > 1:
            gates.extend(GateOp(GateKind.CNOT, (q, (q + 1) % n)) for q in range(n))
    return ParamCircuit(n, gates, slot)


def build_fusion_circuit(qubit_counts: Sequence[int], layers: int = 1) -> ParamCircuit:
    """Entangling circuit over all modality registers.

    Registers are laid out in modality order starting at qubit 0. Each of
    the ``layers`` repetitions is RY, RZ on every qubit followed by one CNOT
    ring over all qubits, which crosses every register boundary.
    """
    counts = [int(c) for c in qubit_counts]
    if len(counts) < 2:
        raise StructuralError("fusion needs at least two modalities")
    if layers < 1 or any(c < 1 for c in counts):
        raise StructuralError("fusion layers and qubit counts must be positive")
    owner = [m for m, c in enumerate(counts) for _ in range(c)]
    n_q = len(owner)
    gates, mods = [], []
    slot = 0
    for _ in range(layers):
        for q in range(n_q):
            for kind in (GateKind.RY, GateKind.RZ):
                gates.append(GateOp(kind, (q,), slot))
                mods.append(frozenset({owner[q]}))
                slot += 1
        for q in range(n_q):
            nxt = (q + 1) % n_q
            gates.append(GateOp(GateKind.CNOT, (q, nxt)))
            mods.append(frozenset({owner[q], owner[nxt]}))
    return ParamCircuit(n_q, gates, slot, tuple(mods))


# --- noise ------------------------------------------------------------------

def damp_factor(spec: NoiseSpec, gate_count: int) -> float:
    if spec.mode != "global_damp":
        return 1.0
    return (1.0 - spec.p) ** gate_count


def inject_pauli(psi: np.ndarray, qubits, p: float, rng: np.random.Generator) -> np.ndarray:
    """With probability ``p`` per sample and per qubit, apply a uniformly
    random X, Y or Z. The axis just before the amplitudes is the sample
    axis; earlier axes share the same draw."""
    sample_shape = psi.shape[-2:-1]
    for q in qubits:
        hit = rng.random(sample_shape) < p
        which = rng.integers(0, 3, size=sample_shape)
        if not hit.any():
            continue
        for k, name in enumerate("XYZ"):
            mask = hit & (which == k)
            if mask.any():
                qstate.apply_pauli_masked(psi, name, q, mask)
    return psi


def apply_noise(value, spec: NoiseSpec, gate_count: int = 0, *, qubits=None, rng=None):
    """Apply ``spec`` to either expectation values or a state.

    * ``off``: returned unchanged.
    * ``global_damp``: expectation values are scaled by ``(1-p)**gate_count``.
    * ``per_gate_pauli``: ``value`` is a state (``StateVector`` or amplitude
      array) and one stochastic Pauli injection round is applied to
      ``qubits`` (default: all), as done after each gate during simulation.
    """
    if spec.mode == "off":
        return value
    if spec.mode == "global_damp":
        return value * damp_factor(spec, gate_count)
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    if isinstance(value, StateVector):
        psi = value.amps.copy()
        inject_pauli(psi, range(value.num_qubits) if qubits is None else qubits, spec.p, rng)
        return StateVector(value.num_qubits, psi)
    psi = np.array(value, dtype=np.complex128)
    n = qstate.num_qubits_of(psi)
    return inject_pauli(psi, range(n) if qubits is None else qubits, spec.p, rng)


# --- execution --------------------------------------------------------------

def run_circuit(
    circuit: ParamCircuit,
    psi: np.ndarray,
    params: np.ndarray,
    noise: NoiseSpec = NOISELESS,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """Evolve ``psi`` in place.

    ``params`` has shape ``(..., num_params)``; its leading axes line up
    with the leading axes of ``psi`` (e.g. ``params`` of shape ``(R, P)``
    against ``psi`` of shape ``(R, B, 2**n)`` evaluates R parameter rows
    over B samples at once).
    """
    if qstate.num_qubits_of(psi) != circuit.num_qubits:
        raise StructuralError(
            f"state has {qstate.num_qubits_of(psi)} qubits, circuit {circuit.num_qubits}"
        )
    params = np.asarray(params, dtype=np.float64)
    if params.shape[-1] < circuit.num_params:
        raise StructuralError(f"need {circuit.num_params} params, got {params.shape[-1]}")
    pauli = noise.mode == "per_gate_pauli"
    if pauli and rng is None:
        rng = np.random.default_rng(noise.seed)
    for gate in circuit.gates:
        kind = gate.kind
        if kind is GateKind.NOOP:
            continue
        if kind is GateKind.CNOT:
            qstate.apply_cnot(psi, *gate.targets)
        else:
            qstate.apply_rotation(psi, kind, gate.targets[0], params[..., gate.param_slot])
        if pauli:
            inject_pauli(psi, gate.targets, noise.p, rng)
    return psi


def simulate(circuit: ParamCircuit, params, initial: Optional[StateVector] = None) -> StateVector:
    """Single-state convenience wrapper around :func:`run_circuit`."""
    state = initial if initial is not None else StateVector.zero(circuit.num_qubits)
    psi = run_circuit(circuit, state.amps.copy(), np.asarray(params, dtype=np.float64))
    return StateVector(circuit.num_qubits, psi)
