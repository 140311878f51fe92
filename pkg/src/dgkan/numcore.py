"""Dense float64 numerics: Adam, a finite-difference gradient oracle, and
counter-based random streams.

Everything downstream computes gradients analytically, layer by layer; the
central-difference estimator in this module is the independent oracle those
gradients are checked against.  All arrays are float64 throughout -- gradient
checks at 1e-4 relative tolerance are not reliable in float32.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable

import numpy as np


class ContractViolation(ValueError):
    """Raised when a caller breaks a documented precondition."""


def check_finite(a: np.ndarray, name: str = "array") -> np.ndarray:
    """Validate that every entry of ``a`` is finite; returns ``a``."""
    if not np.isfinite(a).all():
        bad = np.argwhere(~np.isfinite(np.atleast_1d(a)))
        raise ContractViolation(f"{name} contains non-finite entries (first at index {tuple(bad[0])})")
    return a


def dense(values, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    """Build a validated float64 matrix from row-major values.

    If ``rows``/``cols`` are given, ``values`` may be flat and is reshaped;
    a length mismatch is a contract violation.
    """
    a = np.asarray(values, dtype=np.float64)
    if rows is not None and cols is not None:
        if a.size != rows * cols:
            raise ContractViolation(f"expected {rows}x{cols}={rows * cols} values, got {a.size}")
        a = a.reshape(rows, cols)
    if a.ndim != 2:
        raise ContractViolation(f"matrix must be 2-D, got ndim={a.ndim}")
    return check_finite(a, "matrix")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Exact dense product with dimension checking."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ContractViolation("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ContractViolation(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


@dataclass
class AdamState:
    """Per-parameter-vector Adam moments plus hyperparameters."""

    m: np.ndarray
    v: np.ndarray
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr: float = 1e-3

    def __post_init__(self):
        self.m = np.asarray(self.m, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        if self.m.shape != self.v.shape:
            raise ContractViolation("Adam moment vectors must have equal length")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ContractViolation("Adam betas must lie in (0, 1)")
        if self.eps <= 0.0 or self.lr <= 0.0:
            raise ContractViolation("Adam eps and lr must be positive")
        if self.step_count < 0:
            raise ContractViolation("Adam step count must be >= 0")

    @classmethod
    def init(cls, n_params: int, lr: float, beta1: float = 0.9, beta2: float = 0.999,
             eps: float = 1e-8) -> "AdamState":
        return cls(m=np.zeros(n_params), v=np.zeros(n_params),
                   beta1=beta1, beta2=beta2, eps=eps, lr=lr)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update; returns fresh (params, state).

    Zero gradients leave the parameters bit-identical (the update term is
    exactly 0.0), so repeated no-op steps only advance the step counter.
    """
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ContractViolation(
            f"adam_step length mismatch: params {params.shape}, grads {grads.shape}, moments {state.m.shape}")
    if not np.isfinite(grads).all():
        bad = int(np.argwhere(~np.isfinite(grads))[0][0])
        raise ContractViolation(f"adam_step rejected non-finite gradient at index {bad}")
    t = state.step_count + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_params = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = AdamState(m=m, v=v, step_count=t, beta1=state.beta1,
                          beta2=state.beta2, eps=state.eps, lr=state.lr)
    return new_params, new_state


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient estimate of a scalar function.

    This is the oracle against which all analytic gradients are checked;
    it must never be replaced by the code paths it validates.
    """
    if h <= 0.0:
        raise ContractViolation("finite_diff_grad requires h > 0")
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        fp = float(f(xp))
        fm = float(f(xm))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ContractViolation(f"finite_diff_grad: non-finite function value at coordinate {i}")
        grad.flat[i] = (fp - fm) / (2.0 * h)
    return grad


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Worst relative disagreement, denominator max(|a|, |g|, 1e-8) per entry."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    g = np.asarray(numeric, dtype=np.float64).ravel()
    if a.shape != g.shape:
        raise ContractViolation("max_rel_err shape mismatch")
    denom = np.maximum(np.maximum(np.abs(a), np.abs(g)), 1e-8)
    return float(np.max(np.abs(a - g) / denom)) if a.size else 0.0


def _key_part(part) -> int:
    """Map a stream path element to a stable 32-bit integer."""
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    digest = hashlib.sha256(str(part).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


class RngStream:
    """Counter-based random stream (Philox) keyed by (seed, path).

    Substreams are derived from the key alone, never from draw position, so
    the sequence seen by any consumer is independent of evaluation order.
    Identical seeds produce identical draws on every platform.
    """

    def __init__(self, seed: int, path: tuple = ()):
        self.seed = int(seed)
        self.path = tuple(_key_part(p) for p in path)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def substream(self, *path) -> "RngStream":
        return RngStream(self.seed, self.path + tuple(path))

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def normal(self, loc: float = 0.0, scale: float = 1.0, size=None) -> np.ndarray:
        return self._gen.normal(loc, scale, size)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, a, size=None, replace: bool = True):
        return self._gen.choice(a, size=size, replace=replace)
