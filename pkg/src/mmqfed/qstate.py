"""Dense statevector simulation with in-place gate kernels.

Conventions
-----------
* Qubit 0 is the least-significant bit of the amplitude index, so amplitude
  ``i`` of an n-qubit state has qubit ``q`` in state ``(i >> q) & 1``.
* ``RX(t) = exp(-i t X / 2)`` and likewise for ``RY`` and ``RZ``.
* Amplitudes are ``complex128``.

The batched kernels (``apply_rotation``, ``apply_cnot``, ...) act on arrays
whose *last* axis holds the ``2**n`` amplitudes; any leading axes are batch
axes (parameter rows, samples). Rotation angles may carry leading axes of
their own which broadcast against the leading axes of the state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .errors import NumericError, StructuralError

NORM_TOL = 1e-10
ORACLE_MAX_QUBITS = 6


class GateKind(str, Enum):
    RX = "RX"
    RY = "RY"
    RZ = "RZ"
    CNOT = "CNOT"
    NOOP = "NOOP"

    @property
    def is_rotation(self) -> bool:
        return self in (GateKind.RX, GateKind.RY, GateKind.RZ)


@dataclass(frozen=True)
class GateOp:
    """One gate of a circuit program.

    ``targets`` is ``(qubit,)`` for rotations and NOOP and
    ``(control, target)`` for CNOT.
    """

    kind: GateKind
    targets: tuple
    param_slot: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", GateKind(self.kind))
        object.__setattr__(self, "targets", tuple(int(t) for t in self.targets))
        if any(t < 0 for t in self.targets):
            raise StructuralError(f"negative qubit index in {self.targets}")
        if self.kind is GateKind.CNOT:
            if len(self.targets) != 2 or self.targets[0] == self.targets[1]:
                raise StructuralError("CNOT needs two distinct targets")
            if self.param_slot is not None:
                raise StructuralError("CNOT takes no parameter")
        else:
            if len(self.targets) != 1:
                raise StructuralError(f"{self.kind.value} acts on exactly one qubit")
        if self.kind is GateKind.NOOP and self.param_slot is not None:
            raise StructuralError("NOOP takes no parameter")
        if self.kind.is_rotation and self.param_slot is None:
            raise StructuralError(f"{self.kind.value} needs a param_slot")


@dataclass
class StateVector:
    num_qubits: int
    amps: np.ndarray

    def __post_init__(self):
        self.amps = np.ascontiguousarray(self.amps, dtype=np.complex128)
        if self.num_qubits < 0 or self.amps.shape != (1 << self.num_qubits,):
            raise StructuralError(
                f"amplitude array of shape {self.amps.shape} does not hold "
                f"{self.num_qubits} qubits"
            )
        if not np.all(np.isfinite(self.amps)):
            raise NumericError("non-finite amplitude")
        if abs(self.norm_sq() - 1.0) > NORM_TOL:
            raise NumericError(f"state is not normalized (|psi|^2 = {self.norm_sq()!r})")

    @classmethod
    def zero(cls, num_qubits: int) -> "StateVector":
        return cls.basis(num_qubits, 0)

    @classmethod
    def basis(cls, num_qubits: int, index: int) -> "StateVector":
        amps = np.zeros(1 << num_qubits, dtype=np.complex128)
        amps[index] = 1.0
        return cls(num_qubits, amps)

    def norm_sq(self) -> float:
        return float(np.sum(self.amps.real ** 2 + self.amps.imag ** 2))

    def copy(self) -> "StateVector":
        return StateVector(self.num_qubits, self.amps.copy())


# --- gate constants -------------------------------------------------------
# The only place the rotation convention lives; the kernels below and the
# dense oracle both go through these coefficient functions.

def rotation_coefficients(kind: GateKind, theta):
    """Return ``(u00, u01, u10, u11)`` of the 2x2 rotation matrix."""
    half = np.asarray(theta, dtype=np.float64) * 0.5
    c, s = np.cos(half), np.sin(half)
    if kind is GateKind.RX:
        return c, -1j * s, -1j * s, c
    if kind is GateKind.RY:
        return c, -s, s, c
    if kind is GateKind.RZ:
        return np.exp(-1j * half), 0.0, 0.0, np.exp(1j * half)
    raise StructuralError(f"{kind} is not a rotation")


PAULI = {
    "X": np.array([[0, 1], [1, 0]], dtype=np.complex128),
    "Y": np.array([[0, -1j], [1j, 0]], dtype=np.complex128),
    "Z": np.array([[1, 0], [0, -1]], dtype=np.complex128),
}


def gate_matrix(kind: GateKind, theta: float = 0.0) -> np.ndarray:
    """Small matrix of a gate: 2x2 for rotations/NOOP, 4x4 for CNOT.

    The CNOT matrix is written in the basis ``|control, target>`` with the
    control as the more significant bit.
    """
    kind = GateKind(kind)
    if kind.is_rotation:
        u00, u01, u10, u11 = rotation_coefficients(kind, theta)
        return np.array([[u00, u01], [u10, u11]], dtype=np.complex128)
    if kind is GateKind.NOOP:
        return np.eye(2, dtype=np.complex128)
    return np.array(
        [[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 0, 1], [0, 0, 1, 0]], dtype=np.complex128
    )


# --- batched in-place kernels ----------------------------------------------

def num_qubits_of(psi: np.ndarray) -> int:
    dim = psi.shape[-1]
    n = dim.bit_length() - 1
    if dim != 1 << n:
        raise StructuralError(f"last axis of length {dim} is not a power of two")
    return n


def _pair_views(psi: np.ndarray, qubit: int):
    n = num_qubits_of(psi)
    if not 0 <= qubit < n:
        raise StructuralError(f"qubit {qubit} out of range for {n} qubits")
    view = psi.reshape(psi.shape[:-1] + (1 << (n - qubit - 1), 2, 1 << qubit))
    return view[..., 0, :], view[..., 1, :]


def _lift(coeff, ndim: int):
    coeff = np.asarray(coeff)
    return coeff.reshape(coeff.shape + (1,) * (ndim - coeff.ndim))


def apply_rotation(psi: np.ndarray, kind: GateKind, qubit: int, theta) -> np.ndarray:
    """Rotate ``qubit`` in place; ``theta`` broadcasts over leading axes."""
    theta = np.asarray(theta, dtype=np.float64)
    if not np.all(np.isfinite(theta)):
        raise NumericError("non-finite rotation angle", gate=kind.value, qubit=qubit)
    a0, a1 = _pair_views(psi, qubit)
    ndim = a0.ndim
    if kind is GateKind.RZ:
        u00, _, _, u11 = rotation_coefficients(kind, theta)
        a0 *= _lift(u00, ndim)
        a1 *= _lift(u11, ndim)
        return psi
    u00, u01, u10, u11 = (_lift(u, ndim) for u in rotation_coefficients(kind, theta))
    new0 = u00 * a0 + u01 * a1
    a1[...] = u10 * a0 + u11 * a1
    a0[...] = new0
    return psi


def apply_cnot(psi: np.ndarray, control: int, target: int) -> np.ndarray:
    n = num_qubits_of(psi)
    for q in (control, target):
        if not 0 <= q < n:
            raise StructuralError(f"qubit {q} out of range for {n} qubits")
    lead = psi.ndim - 1
    view = psi.reshape(psi.shape[:-1] + (2,) * n)
    c_axis, t_axis = lead + n - 1 - control, lead + n - 1 - target
    idx = [slice(None)] * view.ndim
    idx[c_axis] = 1
    sub = view[tuple(idx)]
    t_sub = t_axis - 1 if t_axis > c_axis else t_axis
    lo = [slice(None)] * sub.ndim
    hi = [slice(None)] * sub.ndim
    lo[t_sub], hi[t_sub] = 0, 1
    lo, hi = tuple(lo), tuple(hi)
    tmp = sub[lo].copy()
    sub[lo] = sub[hi]
    sub[hi] = tmp
    return psi


def apply_pauli_masked(psi: np.ndarray, pauli: str, qubit: int, mask) -> np.ndarray:
    """Apply X, Y or Z on ``qubit`` wherever ``mask`` (trailing-aligned with
    the leading axes of ``psi``) is True."""
    a0, a1 = _pair_views(psi, qubit)
    m = _lift(np.asarray(mask, dtype=bool), np.asarray(mask).ndim + 2)
    if pauli == "X":
        new0, new1 = a1, a0
    elif pauli == "Y":
        new0, new1 = -1j * a1, 1j * a0
    elif pauli == "Z":
        new0, new1 = a0, -a1
    else:
        raise StructuralError(f"unknown Pauli {pauli!r}")
    out0 = np.where(m, new0, a0)
    out1 = np.where(m, new1, a1)
    a0[...] = out0
    a1[...] = out1
    return psi


def z_sign_table(n: int) -> np.ndarray:
    """``table[i, q]`` is +1 if qubit q of basis state i is 0, else -1."""
    idx = np.arange(1 << n)[:, None]
    bits = (idx >> np.arange(n)[None, :]) & 1
    return (1 - 2 * bits).astype(np.float64)


def expect_z_all(psi: np.ndarray) -> np.ndarray:
    """<Z_q> for every qubit; shape ``psi.shape[:-1] + (n,)``."""
    n = num_qubits_of(psi)
    probs = psi.real ** 2 + psi.imag ** 2
    return probs @ z_sign_table(n)


# --- single-state API -------------------------------------------------------

def _check_targets(gate: GateOp, n: int):
    for q in gate.targets:
        if q >= n:
            raise StructuralError(f"{gate.kind.value} target {q} out of range for {n} qubits")


def apply_gate(state: StateVector, gate: GateOp, params: Sequence[float] = ()) -> StateVector:
    """Return a new state with ``gate`` applied; the input is untouched."""
    _check_targets(gate, state.num_qubits)
    if gate.kind is GateKind.NOOP:
        return state.copy()
    psi = state.amps.copy()
    if gate.kind is GateKind.CNOT:
        apply_cnot(psi, *gate.targets)
    else:
        if gate.param_slot >= len(params):
            raise StructuralError(f"param_slot {gate.param_slot} missing from {len(params)} params")
        theta = float(params[gate.param_slot])
        if not math.isfinite(theta):
            raise NumericError("non-finite rotation angle", slot=gate.param_slot)
        apply_rotation(psi, gate.kind, gate.targets[0], theta)
    return StateVector(state.num_qubits, psi)


def expect_pauli_z(state: StateVector, qubit: int) -> float:
    if not 0 <= qubit < state.num_qubits:
        raise StructuralError(f"qubit {qubit} out of range for {state.num_qubits} qubits")
    probs = state.amps.real ** 2 + state.amps.imag ** 2
    bits = (np.arange(probs.size) >> qubit) & 1
    value = float(np.sum(probs[bits == 0]) - np.sum(probs[bits == 1]))
    return min(1.0, max(-1.0, value))


def tensor_product(a: StateVector, b: StateVector) -> StateVector:
    """``a (x) b``: amplitude ``(i, j)`` sits at index ``i * 2**n_b + j``, so
    ``b`` occupies the low qubits."""
    return StateVector(a.num_qubits + b.num_qubits, np.kron(a.amps, b.amps))


# --- dense oracle -----------------------------------------------------------

def embed_gate(gate: GateOp, n: int, theta: float = 0.0) -> np.ndarray:
    """Full ``2**n x 2**n`` matrix of ``gate`` built from Kronecker products."""
    _check_targets(gate, n)
    eye = np.eye(2, dtype=np.complex128)
    if gate.kind is GateKind.CNOT:
        control, target = gate.targets
        p0 = np.diag([1.0, 0.0]).astype(np.complex128)
        p1 = np.diag([0.0, 1.0]).astype(np.complex128)
        off = [eye] * n
        on = [eye] * n
        off[control] = p0
        on[control] = p1
        on[target] = PAULI["X"]
        return _kron_msb_first(off) + _kron_msb_first(on)
    factors = [eye] * n
    factors[gate.targets[0]] = gate_matrix(gate.kind, theta)
    return _kron_msb_first(factors)


def _kron_msb_first(factors_by_qubit):
    out = np.ones((1, 1), dtype=np.complex128)
    for f in reversed(factors_by_qubit):
        out = np.kron(out, f)
    return out


def dense_unitary_oracle(circuit, params: Sequence[float] = ()) -> np.ndarray:
    """Explicit unitary of ``circuit`` (anything with ``num_qubits`` and
    ``gates``). Test oracle only; refuses more than 6 qubits."""
    n = circuit.num_qubits
    if n > ORACLE_MAX_QUBITS:
        raise StructuralError(f"dense oracle refuses {n} > {ORACLE_MAX_QUBITS} qubits")
    u = np.eye(1 << n, dtype=np.complex128)
    for gate in circuit.gates:
        theta = float(params[gate.param_slot]) if gate.param_slot is not None else 0.0
        u = embed_gate(gate, n, theta) @ u
    return u
