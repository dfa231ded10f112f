"""Dense float64 math under the caption model.

A single-layer gated recurrent cell (update/reset gates) with hand-derived
gradients, stable softmax / cross-entropy, categorical KL divergence, and a
plain gradient-ascent stepper. Everything is numpy float64; matrices use the
right-multiplication convention (`x @ w` with `w` shaped (in, out)) so the
same code paths handle single vectors (D,) and row batches (B, D).

The backward passes are exact; the test suite and the `gradcheck` CLI command
verify them against central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from .errors import ConfigurationError, InputError, NumericalDomainError

Array = np.ndarray

CELL_TENSOR_NAMES = ("w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_c", "u_c", "b_c")


def sigmoid(x: Array) -> Array:
    """Numerically stable logistic function."""
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(logits: Array, axis: int = -1) -> Array:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=axis, keepdims=True)


def log_softmax(logits: Array, axis: int = -1) -> Array:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def check_finite(name: str, arr: Array) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericalDomainError(f"non-finite values in {name}")


@dataclass
class CellParams:
    """Parameters of one gated recurrent cell (update gate z, reset gate r).

    Shapes: w_* (embed_dim, hidden_dim), u_* (hidden_dim, hidden_dim),
    b_* (hidden_dim,).
    """

    embed_dim: int
    hidden_dim: int
    w_z: Array
    u_z: Array
    b_z: Array
    w_r: Array
    u_r: Array
    b_r: Array
    w_c: Array
    u_c: Array
    b_c: Array

    def __post_init__(self) -> None:
        e, h = self.embed_dim, self.hidden_dim
        for name in ("w_z", "w_r", "w_c"):
            if getattr(self, name).shape != (e, h):
                raise ConfigurationError(f"{name} must be ({e}, {h})")
        for name in ("u_z", "u_r", "u_c"):
            if getattr(self, name).shape != (h, h):
                raise ConfigurationError(f"{name} must be ({h}, {h})")
        for name in ("b_z", "b_r", "b_c"):
            if getattr(self, name).shape != (h,):
                raise ConfigurationError(f"{name} must be ({h},)")

    @classmethod
    def zeros(cls, embed_dim: int, hidden_dim: int) -> "CellParams":
        e, h = embed_dim, hidden_dim
        arrays = []
        for _ in range(3):
            arrays.extend([np.zeros((e, h)), np.zeros((h, h)), np.zeros(h)])
        return cls(e, h, *arrays)

    @classmethod
    def random(
        cls, embed_dim: int, hidden_dim: int, rng: np.random.Generator, scale: float = 0.1
    ) -> "CellParams":
        e, h = embed_dim, hidden_dim
        arrays = []
        for _ in range(3):
            arrays.extend(
                [
                    rng.standard_normal((e, h)) * scale,
                    rng.standard_normal((h, h)) * scale,
                    np.zeros(h),
                ]
            )
        return cls(e, h, *arrays)

    def tensors(self) -> dict[str, Array]:
        return {name: getattr(self, name) for name in CELL_TENSOR_NAMES}

    def copy(self) -> "CellParams":
        return CellParams(
            self.embed_dim,
            self.hidden_dim,
            *(getattr(self, name).copy() for name in CELL_TENSOR_NAMES),
        )


@dataclass
class CellCache:
    """Intermediates from one forward step, enough for exact gradients."""

    x: Array
    h_prev: Array
    z: Array
    r: Array
    rh: Array
    c: Array


def cell_step(cell: CellParams, x: Array, h: Array) -> tuple[Array, CellCache]:
    """One recurrence step.

    z = sigmoid(x w_z + h u_z + b_z)
    r = sigmoid(x w_r + h u_r + b_r)
    c = tanh(x w_c + (r * h) u_c + b_c)
    h' = (1 - z) * h + z * c

    `x` is (..., embed_dim) and `h` (..., hidden_dim); leading axes must
    match and are treated as batch rows.
    """
    if x.shape[-1] != cell.embed_dim:
        raise ConfigurationError(f"input width {x.shape[-1]} != embed_dim {cell.embed_dim}")
    if h.shape[-1] != cell.hidden_dim:
        raise ConfigurationError(f"state width {h.shape[-1]} != hidden_dim {cell.hidden_dim}")
    z = sigmoid(x @ cell.w_z + h @ cell.u_z + cell.b_z)
    r = sigmoid(x @ cell.w_r + h @ cell.u_r + cell.b_r)
    rh = r * h
    c = np.tanh(x @ cell.w_c + rh @ cell.u_c + cell.b_c)
    h_next = (1.0 - z) * h + z * c
    return h_next, CellCache(x=x, h_prev=h, z=z, r=r, rh=rh, c=c)


def _outer_acc(a: Array, b: Array) -> Array:
    """Sum of outer products over batch rows; plain outer for 1-D inputs."""
    if a.ndim == 1:
        return np.outer(a, b)
    return a.T @ b


def _bias_acc(da: Array) -> Array:
    return da if da.ndim == 1 else da.sum(axis=0)


def cell_backward(
    cell: CellParams, cache: CellCache, d_hnext: Array
) -> tuple[dict[str, Array], Array, Array]:
    """Exact gradients of one step given d(loss)/d(h'). Returns
    (parameter grads, d(loss)/dx, d(loss)/dh_prev). Batch rows are summed
    into the parameter grads."""
    z, r, c, h, x, rh = cache.z, cache.r, cache.c, cache.h_prev, cache.x, cache.rh
    dz = d_hnext * (c - h)
    dc = d_hnext * z
    dh = d_hnext * (1.0 - z)

    da_c = dc * (1.0 - c * c)
    d_rh = da_c @ cell.u_c.T
    dr = d_rh * h
    dh = dh + d_rh * r

    da_z = dz * z * (1.0 - z)
    da_r = dr * r * (1.0 - r)

    grads = {
        "w_z": _outer_acc(x, da_z),
        "u_z": _outer_acc(h, da_z),
        "b_z": _bias_acc(da_z),
        "w_r": _outer_acc(x, da_r),
        "u_r": _outer_acc(h, da_r),
        "b_r": _bias_acc(da_r),
        "w_c": _outer_acc(x, da_c),
        "u_c": _outer_acc(rh, da_c),
        "b_c": _bias_acc(da_c),
    }
    dx = da_z @ cell.w_z.T + da_r @ cell.w_r.T + da_c @ cell.w_c.T
    dh = dh + da_z @ cell.u_z.T + da_r @ cell.u_r.T
    return grads, dx, dh


def softmax_xent(logits: Array, target: int) -> tuple[float, Array]:
    """Cross-entropy in nats and its gradient w.r.t. the logits.

    loss = -log softmax(logits)[target]; grad = softmax(logits) - onehot.
    """
    if logits.ndim != 1:
        raise InputError("softmax_xent expects a 1-D logit vector")
    if not 0 <= target < logits.shape[0]:
        raise InputError(f"target {target} out of range for vocab {logits.shape[0]}")
    logp = log_softmax(logits)
    grad = np.exp(logp)
    loss = -float(logp[target])
    grad[target] -= 1.0
    return loss, grad


def kl_categorical(p: Array, q: Array, atol: float = 1e-9) -> float:
    """KL(p || q) in nats for categorical distributions on the same support.

    Terms with p == 0 contribute zero. Raises if q has zero mass where
    p > 0. The result is clamped at 0 to absorb rounding when p is very
    close to q (mathematically KL >= 0 by Gibbs' inequality).
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise InputError("distributions must share a support size")
    if abs(p.sum() - 1.0) > atol or abs(q.sum() - 1.0) > atol:
        raise InputError("distributions must each sum to 1")
    support = p > 0.0
    if np.any(q[support] <= 0.0):
        raise NumericalDomainError("q has zero mass where p > 0")
    val = float(np.sum(p[support] * np.log(p[support] / q[support])))
    return max(val, 0.0)


def ascent_step(
    tensors: Mapping[str, Array],
    grads: Mapping[str, Array],
    rate: float,
    frozen: Iterable[str] = (),
) -> None:
    """In-place gradient ascent: tensor += rate * grad, skipping frozen names."""
    frozen = set(frozen)
    for name, tensor in tensors.items():
        if name in frozen:
            continue
        grad = grads.get(name)
        if grad is None:
            continue
        if grad.shape != tensor.shape:
            raise ConfigurationError(
                f"gradient shape {grad.shape} != parameter shape {tensor.shape} for {name}"
            )
        tensor += rate * grad
        check_finite(name, tensor)


def zero_grads(tensors: Mapping[str, Array]) -> dict[str, Array]:
    return {name: np.zeros_like(arr) for name, arr in tensors.items()}


def accumulate(into: dict[str, Array], grads: Mapping[str, Array], scale: float = 1.0) -> None:
    for name, grad in grads.items():
        into[name] += scale * grad


def finite_difference(f, arr: Array, eps: float = 1e-5) -> Array:
    """Central finite differences of scalar f w.r.t. every entry of arr.

    Mutates entries in place one at a time and restores them; arr must be
    writeable.
    """
    out = np.zeros_like(arr)
    flat = arr.reshape(-1)
    grad = out.reshape(-1)
    for i in range(flat.shape[0]):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = f()
        flat[i] = orig - eps
        f_minus = f()
        flat[i] = orig
        grad[i] = (f_plus - f_minus) / (2.0 * eps)
    return out


def max_relative_error(analytic: Array, numeric: Array, floor: float = 1e-4) -> float:
    """max |a - n| / max(|a|, |n|, floor); the floor guards near-zero entries."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))
