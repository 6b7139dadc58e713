"""Parameter-shift gradients, softmax cross-entropy readout, optimizers.

Flattened parameter layout used by :func:`full_gradient`::

    [ quantum angles (num_quantum) | W (n_out x C, row-major) | b (C) ]

where ``logits = expectations @ W + b``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import NumericError, StructuralError

SHIFT = np.pi / 2


def param_shift_grad(eval_fn: Callable, params, slot: int):
    """Exact derivative of ``eval_fn`` w.r.t. ``params[slot]`` for a
    half-turn rotation generator: ``[f(t + pi/2) - f(t - pi/2)] / 2``."""
    params = np.asarray(params, dtype=np.float64)
    plus, minus = params.copy(), params.copy()
    plus[slot] += SHIFT
    minus[slot] -= SHIFT
    grad = (np.asarray(eval_fn(plus)) - np.asarray(eval_fn(minus))) / 2.0
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite expectation in parameter shift", slot=slot)
    return grad if grad.ndim else float(grad)


def shift_rows(theta: np.ndarray, slots: np.ndarray) -> np.ndarray:
    """Stack ``theta`` with its +/- pi/2 shifts on ``slots``.

    Row 0 is ``theta``; rows ``1..A`` shift slot ``slots[a]`` up and rows
    ``A+1..2A`` shift it down.
    """
    a = len(slots)
    rows = np.repeat(theta[None, :], 1 + 2 * a, axis=0)
    idx = np.arange(a)
    rows[1 + idx, slots] += SHIFT
    rows[1 + a + idx, slots] -= SHIFT
    return rows


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=-1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-sample softmax cross-entropy."""
    z = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    return lse - np.take_along_axis(z, labels[:, None], axis=-1)[:, 0]


def split_readout(params: np.ndarray, num_quantum: int, num_outputs: int, num_classes: int):
    expected = num_quantum + num_outputs * num_classes + num_classes
    if params.shape != (expected,):
        raise StructuralError(f"expected {expected} parameters, got {params.shape}")
    theta = params[:num_quantum]
    w = params[num_quantum : num_quantum + num_outputs * num_classes].reshape(num_outputs, num_classes)
    b = params[num_quantum + num_outputs * num_classes :]
    return theta, w, b


def full_gradient(
    expect_fn: Callable[[np.ndarray], np.ndarray],
    params: np.ndarray,
    labels: np.ndarray,
    *,
    num_quantum: int,
    num_outputs: int,
    num_classes: int,
    active: Optional[np.ndarray] = None,
    reduction: str = "mean",
):
    """Loss and gradient of softmax cross-entropy over a batch.

    ``expect_fn`` maps a ``(rows, num_quantum)`` array of angle vectors to
    expectations of shape ``(rows, batch, num_outputs)``. Quantum slots are
    differentiated by parameter shift and chained through the readout;
    readout slots get their closed-form gradient. Slots outside ``active``
    are not evaluated and get exactly zero.

    Returns ``(loss, grad)``, both averaged over the batch unless
    ``reduction == "sum"``.
    """
    params = np.asarray(params, dtype=np.float64)
    if not np.all(np.isfinite(params)):
        raise NumericError("non-finite parameters")
    labels = np.asarray(labels, dtype=np.int64)
    theta, w, b = split_readout(params, num_quantum, num_outputs, num_classes)
    slots = np.arange(num_quantum) if active is None else np.flatnonzero(active)
    a = len(slots)

    ex = np.asarray(expect_fn(shift_rows(theta, slots)))
    bad = ~np.isfinite(ex).all(axis=(0, 2))
    if bad.any():
        raise NumericError("non-finite expectation", sample=int(np.flatnonzero(bad)[0]))
    base = ex[0]
    logits = base @ w + b
    probs = softmax(logits)
    losses = cross_entropy(logits, labels)
    delta = probs
    delta[np.arange(len(labels)), labels] -= 1.0

    grad = np.zeros_like(params)
    if a:
        d_exp = (ex[1 : 1 + a] - ex[1 + a :]) / 2.0
        dloss_dexp = delta @ w.T
        grad[slots] = np.einsum("abq,bq->a", d_exp, dloss_dexp)
    grad[num_quantum : num_quantum + w.size] = (base.T @ delta).ravel()
    grad[num_quantum + w.size :] = delta.sum(axis=0)

    if reduction == "sum":
        return float(losses.sum()), grad
    n = len(labels)
    return float(losses.sum() / n), grad / n


@dataclass
class OptimizerState:
    kind: str = "adam"
    learning_rate: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: Optional[np.ndarray] = field(default=None, repr=False)
    v: Optional[np.ndarray] = field(default=None, repr=False)
    step: int = 0

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise StructuralError(f"unknown optimizer {self.kind!r}")
        if not self.learning_rate >= 0:
            raise StructuralError("learning rate must be non-negative")


def optimizer_step(state: OptimizerState, params: np.ndarray, grad: np.ndarray, trainable=None):
    """One update. Slots where ``trainable`` is False keep their value and
    (for adam) their moments. Returns ``(new_params, state)``; ``state`` is
    updated in place."""
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if params.shape != grad.shape:
        raise StructuralError(f"params {params.shape} vs grad {grad.shape}")
    mask = np.ones(params.shape, dtype=bool) if trainable is None else np.asarray(trainable, bool)
    if mask.shape != params.shape:
        raise StructuralError("trainable mask shape mismatch")
    lr = state.learning_rate
    new = params.copy()
    if state.kind == "sgd":
        new[mask] = params[mask] - lr * grad[mask]
        state.step += 1
        return new, state

    if state.m is None:
        state.m = np.zeros_like(params)
        state.v = np.zeros_like(params)
    if state.m.shape != params.shape:
        raise StructuralError("optimizer moments do not match parameter shape")
    state.step += 1
    g = grad[mask]
    state.m[mask] = state.beta1 * state.m[mask] + (1 - state.beta1) * g
    state.v[mask] = state.beta2 * state.v[mask] + (1 - state.beta2) * g * g
    m_hat = state.m[mask] / (1 - state.beta1 ** state.step)
    v_hat = state.v[mask] / (1 - state.beta2 ** state.step)
    new[mask] = params[mask] - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new, state
