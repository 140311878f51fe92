"""Grouped-RBF KAN layers, the stacked per-domain detector head, the two
non-local baseline heads, and the small trainable feature extractor.

Layer conventions used throughout:

* batches are float64 arrays of shape (N, d_in), single samples (d_in,);
* ``forward`` is read-only; ``forward_cached`` additionally returns the
  cache consumed by ``backward``;
* ``backward(dY, cache)`` returns ``(dX, grad_vec)`` where ``grad_vec``
  lines up with ``param_vector()`` so one Adam state per module suffices.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from .numcore import ContractViolation, RngStream, check_finite

SIGMA_MIN = 1e-3
SIGMA_INIT_LO = 0.05
SIGMA_INIT_HI = 2.0


@dataclass
class RbfParams:
    """Center and width of one shared Gaussian bump (width clamped >= 1e-3)."""

    center: float
    width: float

    def __post_init__(self):
        self.center = float(self.center)
        self.width = max(float(self.width), SIGMA_MIN)


def rbf_eval(x: float, p: RbfParams) -> float:
    """Gaussian response exp(-(x-c)^2 / (2 sigma^2)), in (0, 1]."""
    z = (x - p.center) / p.width
    return float(np.exp(-0.5 * z * z))


def rbf_grad(x: float, p: RbfParams) -> tuple[float, float, float]:
    """Closed-form partials (d/dx, d/dc, d/dsigma); d/dx == -d/dc."""
    z = (x - p.center) / p.width
    phi = np.exp(-0.5 * z * z)
    ddx = -z / p.width * phi
    ddc = z / p.width * phi
    dds = z * z / p.width * phi
    return float(ddx), float(ddc), float(dds)


def group_index_map(d_in: int, groups: int) -> np.ndarray:
    """Dimension -> group assignment; the last group absorbs any remainder."""
    if groups < 1 or groups > d_in:
        raise ContractViolation(f"groups must be in [1, d_in], got g={groups} for d_in={d_in}")
    d_g = d_in // groups
    return np.minimum(np.arange(d_in) // d_g, groups - 1)


class DgLayer:
    """One domain's grouped-RBF layer: y = W @ [phi_group(i)(x_i)]_i.

    Each of the g groups shares a single (center, width) pair across its
    dimensions; W is a dense (d_out, d_in) mixing matrix.  The trainable
    parameter vector is [W.ravel(), centers, widths].
    """

    def __init__(self, task_id: int, d_in: int, d_out: int, groups: int,
                 W: np.ndarray, centers: np.ndarray, widths: np.ndarray,
                 frozen: bool = False):
        if task_id < 1:
            raise ContractViolation("task_id must be >= 1")
        self.task_id = int(task_id)
        self.d_in = int(d_in)
        self.d_out = int(d_out)
        self.groups = int(groups)
        self.group_of = group_index_map(d_in, groups)
        self.W = check_finite(np.asarray(W, dtype=np.float64).reshape(d_out, d_in), "W")
        self.centers = np.asarray(centers, dtype=np.float64).reshape(groups).copy()
        self.widths = np.maximum(np.asarray(widths, dtype=np.float64).reshape(groups), SIGMA_MIN)
        self.frozen = bool(frozen)

    @classmethod
    def from_features(cls, task_id: int, features: np.ndarray, d_out: int, groups: int,
                      rng: RngStream) -> "DgLayer":
        """Initialize a layer over the region occupied by ``features``.

        Centers are per-group feature means, widths per-group feature
        standard deviations clamped to [0.05, 2.0], W uniform in (-0.1, 0.1).
        """
        feats = np.asarray(features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] == 0:
            raise ContractViolation("from_features requires a non-empty (N, d_in) sample")
        d_in = feats.shape[1]
        gmap = group_index_map(d_in, groups)
        centers = np.empty(groups)
        widths = np.empty(groups)
        for g in range(groups):
            block = feats[:, gmap == g]
            centers[g] = block.mean()
            widths[g] = min(max(block.std(), SIGMA_INIT_LO), SIGMA_INIT_HI)
        W = rng.uniform(-0.1, 0.1, size=(d_out, d_in))
        return cls(task_id, d_in, d_out, groups, W, centers, widths)

    # -- parameter plumbing -------------------------------------------------

    def n_params(self) -> int:
        return self.W.size + 2 * self.groups

    def param_vector(self) -> np.ndarray:
        return np.concatenate([self.W.ravel(), self.centers, self.widths])

    def set_param_vector(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.n_params():
            raise ContractViolation("DgLayer parameter vector has wrong length")
        nw = self.W.size
        self.W = vec[:nw].reshape(self.d_out, self.d_in).copy()
        self.centers = vec[nw:nw + self.groups].copy()
        # width clamp keeps every Gaussian well defined after any update
        self.widths = np.maximum(vec[nw + self.groups:], SIGMA_MIN)

    # -- forward / backward -------------------------------------------------

    def _phi(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        c = self.centers[self.group_of]
        s = self.widths[self.group_of]
        z = (X - c) / s
        return np.exp(-0.5 * z * z), z, s

    def forward(self, X: np.ndarray) -> np.ndarray:
        X, squeeze = _as_batch(X, self.d_in, "DgLayer input")
        phi, _, _ = self._phi(X)
        Y = phi @ self.W.T
        return Y[0] if squeeze else Y

    def forward_cached(self, X: np.ndarray):
        X, _ = _as_batch(X, self.d_in, "DgLayer input")
        phi, z, s = self._phi(X)
        return phi @ self.W.T, (X, phi, z, s)

    def backward(self, dY: np.ndarray, cache) -> tuple[np.ndarray, np.ndarray]:
        X, phi, z, s = cache
        dY = np.asarray(dY, dtype=np.float64).reshape(X.shape[0], self.d_out)
        dW = dY.T @ phi
        dphi = dY @ self.W
        common = dphi * phi
        dX = common * (-z / s)
        dc_dim = (common * (z / s)).sum(axis=0)
        ds_dim = (common * (z * z / s)).sum(axis=0)
        dcenters = np.bincount(self.group_of, weights=dc_dim, minlength=self.groups)
        dwidths = np.bincount(self.group_of, weights=ds_dim, minlength=self.groups)
        return dX, np.concatenate([dW.ravel(), dcenters, dwidths])


class DgkdHead:
    """Detector head: elementwise sum of one grouped-RBF layer per domain.

    Layer k carries task-id k; every layer below the active task is frozen,
    so training touches only the newest layer's parameters while the frozen
    Gaussians keep responding in their own regions.
    """

    def __init__(self, d_in: int, d_out: int, groups: int, layers: list[DgLayer] | None = None):
        self.d_in = int(d_in)
        self.d_out = int(d_out)
        self.groups = int(groups)
        self.layers: list[DgLayer] = list(layers) if layers else []
        for k, layer in enumerate(self.layers, start=1):
            if layer.task_id != k:
                raise ContractViolation("head layers must carry consecutive task ids from 1")
            if (layer.d_in, layer.d_out, layer.groups) != (self.d_in, self.d_out, self.groups):
                raise ContractViolation("all head layers must share (d_in, d_out, groups)")

    @property
    def active_task(self) -> int:
        return len(self.layers)

    @property
    def active_layer(self) -> DgLayer:
        self._require_nonempty()
        return self.layers[-1]

    def _require_nonempty(self):
        if not self.layers:
            raise ContractViolation("head has no layers; add a task layer first")

    def forward(self, X: np.ndarray) -> np.ndarray:
        self._require_nonempty()
        X, squeeze = _as_batch(X, self.d_in, "DgkdHead input")
        Y = np.zeros((X.shape[0], self.d_out))
        for layer in self.layers:
            Y += layer.forward(X)
        return Y[0] if squeeze else Y

    def forward_cached(self, X: np.ndarray):
        self._require_nonempty()
        X, _ = _as_batch(X, self.d_in, "DgkdHead input")
        Y = np.zeros((X.shape[0], self.d_out))
        caches = []
        for layer in self.layers:
            yk, ck = layer.forward_cached(X)
            Y += yk
            caches.append(ck)
        return Y, caches

    def backward(self, dY: np.ndarray, caches) -> tuple[np.ndarray, np.ndarray]:
        """Input gradient flows through every layer; parameter gradients are
        returned for the active (unfrozen) layer only."""
        self._require_nonempty()
        dX = None
        active_grads = None
        for layer, cache in zip(self.layers, caches):
            dx_k, g_k = layer.backward(dY, cache)
            dX = dx_k if dX is None else dX + dx_k
            if layer is self.layers[-1]:
                active_grads = g_k
        return dX, active_grads

    def param_vector(self) -> np.ndarray:
        return self.active_layer.param_vector()

    def set_param_vector(self, vec: np.ndarray) -> None:
        if self.active_layer.frozen:
            raise ContractViolation("active layer is frozen")
        self.active_layer.set_param_vector(vec)

    def snapshot(self) -> "DgkdHead":
        return copy.deepcopy(self)


def add_task_layer(head: DgkdHead, features: np.ndarray, rng: RngStream) -> DgkdHead:
    """Freeze every existing layer and append a fresh one for the new domain,
    initialized over the supplied feature sample."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] == 0:
        raise ContractViolation("add_task_layer requires a non-empty feature sample")
    if feats.shape[1] != head.d_in:
        raise ContractViolation(f"feature dim {feats.shape[1]} != head d_in {head.d_in}")
    frozen = []
    for layer in head.layers:
        cp = copy.deepcopy(layer)
        cp.frozen = True
        frozen.append(cp)
    new = DgLayer.from_features(head.active_task + 1, feats, head.d_out, head.groups, rng)
    return DgkdHead(head.d_in, head.d_out, head.groups, frozen + [new])


def dg_layer_forward(x: np.ndarray, layer: DgLayer) -> np.ndarray:
    return layer.forward(x)


def dgkd_forward(x: np.ndarray, head: DgkdHead) -> np.ndarray:
    return head.forward(x)


def activation_profile(head: DgkdHead, group_index: int, xs) -> np.ndarray:
    """Composite activation of one group across the scan points ``xs``.

    Each layer contributes mean(W over the group's columns) * phi_k(x); the
    row-mean weighting is a plotting convention, not a training quantity.
    """
    if group_index < 0 or group_index >= head.groups:
        raise ContractViolation(f"group index {group_index} out of range [0, {head.groups})")
    xs = np.asarray(xs, dtype=np.float64)
    vals = np.zeros_like(xs)
    for layer in head.layers:
        cols = layer.group_of == group_index
        w_bar = layer.W[:, cols].mean()
        z = (xs - layer.centers[group_index]) / layer.widths[group_index]
        vals += w_bar * np.exp(-0.5 * z * z)
    return vals


def _silu(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sigmoid-weighted linear unit and its derivative."""
    sig = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                   np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
    return z * sig, sig * (1.0 + z * (1.0 - sig))


class MlpHead:
    """Non-local baseline: affine -> silu -> affine, one set of global weights."""

    kind = "mlp"

    def __init__(self, W1, b1, W2, b2):
        self.W1 = np.asarray(W1, dtype=np.float64)
        self.b1 = np.asarray(b1, dtype=np.float64)
        self.W2 = np.asarray(W2, dtype=np.float64)
        self.b2 = np.asarray(b2, dtype=np.float64)
        self.hidden, self.d_in = self.W1.shape
        self.d_out = self.W2.shape[0]

    @classmethod
    def init(cls, d_in: int, d_out: int, hidden: int, rng: RngStream) -> "MlpHead":
        a1 = np.sqrt(6.0 / (d_in + hidden))
        a2 = np.sqrt(6.0 / (hidden + d_out))
        return cls(rng.uniform(-a1, a1, (hidden, d_in)), np.zeros(hidden),
                   rng.uniform(-a2, a2, (d_out, hidden)), np.zeros(d_out))

    def n_params(self) -> int:
        return self.W1.size + self.b1.size + self.W2.size + self.b2.size

    def param_vector(self) -> np.ndarray:
        return np.concatenate([self.W1.ravel(), self.b1, self.W2.ravel(), self.b2])

    def set_param_vector(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        i = 0
        for name, arr in (("W1", self.W1), ("b1", self.b1), ("W2", self.W2), ("b2", self.b2)):
            setattr(self, name, vec[i:i + arr.size].reshape(arr.shape).copy())
            i += arr.size

    def forward(self, X: np.ndarray) -> np.ndarray:
        X, squeeze = _as_batch(X, self.d_in, "MlpHead input")
        h, _ = _silu(X @ self.W1.T + self.b1)
        Y = h @ self.W2.T + self.b2
        return Y[0] if squeeze else Y

    def forward_cached(self, X: np.ndarray):
        X, _ = _as_batch(X, self.d_in, "MlpHead input")
        z1 = X @ self.W1.T + self.b1
        h, dh = _silu(z1)
        return h @ self.W2.T + self.b2, (X, h, dh)

    def backward(self, dY: np.ndarray, cache) -> tuple[np.ndarray, np.ndarray]:
        X, h, dh = cache
        dY = np.asarray(dY, dtype=np.float64).reshape(X.shape[0], self.d_out)
        dW2 = dY.T @ h
        db2 = dY.sum(axis=0)
        dz1 = (dY @ self.W2) * dh
        dW1 = dz1.T @ X
        db1 = dz1.sum(axis=0)
        dX = dz1 @ self.W1
        return dX, np.concatenate([dW1.ravel(), db1, dW2.ravel(), db2])


class GroupKanHead:
    """Non-local baseline: per-group shared rational activation, then affine.

    r(x) = P(x)/Q(x) with cubic P and Q = 1 + (q1 x)^2 + (q2 x^2)^2, which is
    strictly positive, so the activation is pole-free by construction.
    """

    kind = "groupkan"

    def __init__(self, W, b, pcoef, qcoef, groups: int):
        self.W = np.asarray(W, dtype=np.float64)
        self.b = np.asarray(b, dtype=np.float64)
        self.pcoef = np.asarray(pcoef, dtype=np.float64).reshape(groups, 4)
        self.qcoef = np.asarray(qcoef, dtype=np.float64).reshape(groups, 2)
        self.d_out, self.d_in = self.W.shape
        self.groups = groups
        self.group_of = group_index_map(self.d_in, groups)

    @classmethod
    def init(cls, d_in: int, d_out: int, groups: int, rng: RngStream) -> "GroupKanHead":
        a = np.sqrt(6.0 / (d_in + d_out))
        W = rng.uniform(-a, a, (d_out, d_in))
        # start near the identity activation so early logits stay tame
        pcoef = np.tile([0.0, 1.0, 0.0, 0.0], (groups, 1)) + rng.uniform(-0.05, 0.05, (groups, 4))
        qcoef = rng.uniform(0.1, 0.4, (groups, 2))
        return cls(W, np.zeros(d_out), pcoef, qcoef, groups)

    def n_params(self) -> int:
        return self.W.size + self.b.size + self.pcoef.size + self.qcoef.size

    def param_vector(self) -> np.ndarray:
        return np.concatenate([self.W.ravel(), self.b, self.pcoef.ravel(), self.qcoef.ravel()])

    def set_param_vector(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        i = 0
        for name, arr in (("W", self.W), ("b", self.b), ("pcoef", self.pcoef), ("qcoef", self.qcoef)):
            setattr(self, name, vec[i:i + arr.size].reshape(arr.shape).copy())
            i += arr.size

    def _rational(self, X: np.ndarray):
        p = self.pcoef[self.group_of]          # (d_in, 4) broadcast per dimension
        q = self.qcoef[self.group_of]          # (d_in, 2)
        x2 = X * X
        P = p[:, 0] + p[:, 1] * X + p[:, 2] * x2 + p[:, 3] * x2 * X
        Q = 1.0 + (q[:, 0] * X) ** 2 + (q[:, 1] * x2) ** 2
        return P, Q

    def forward(self, X: np.ndarray) -> np.ndarray:
        X, squeeze = _as_batch(X, self.d_in, "GroupKanHead input")
        P, Q = self._rational(X)
        Y = (P / Q) @ self.W.T + self.b
        return Y[0] if squeeze else Y

    def forward_cached(self, X: np.ndarray):
        X, _ = _as_batch(X, self.d_in, "GroupKanHead input")
        P, Q = self._rational(X)
        R = P / Q
        return R @ self.W.T + self.b, (X, P, Q, R)

    def backward(self, dY: np.ndarray, cache) -> tuple[np.ndarray, np.ndarray]:
        X, P, Q, R = cache
        dY = np.asarray(dY, dtype=np.float64).reshape(X.shape[0], self.d_out)
        p = self.pcoef[self.group_of]
        q = self.qcoef[self.group_of]
        dW = dY.T @ R
        db = dY.sum(axis=0)
        dR = dY @ self.W                       # (N, d_in)
        x2 = X * X
        # dR/dp_m = x^m / Q, accumulated into the dimension's group
        dp_dim = np.stack([dR / Q, dR * X / Q, dR * x2 / Q, dR * x2 * X / Q], axis=-1).sum(axis=0)
        # dR/dq = -P/Q^2 * dQ/dq
        ratio = dR * (-P / (Q * Q))
        dq_dim = np.stack([(ratio * 2.0 * q[:, 0] * x2).sum(axis=0),
                           (ratio * 2.0 * q[:, 1] * x2 * x2).sum(axis=0)], axis=-1)
        dpcoef = np.zeros_like(self.pcoef)
        dqcoef = np.zeros_like(self.qcoef)
        np.add.at(dpcoef, self.group_of, dp_dim)
        np.add.at(dqcoef, self.group_of, dq_dim)
        Pprime = p[:, 1] + 2.0 * p[:, 2] * X + 3.0 * p[:, 3] * x2
        Qprime = 2.0 * q[:, 0] ** 2 * X + 4.0 * q[:, 1] ** 2 * x2 * X
        dX = dR * (Pprime * Q - P * Qprime) / (Q * Q)
        return dX, np.concatenate([dW.ravel(), db, dpcoef.ravel(), dqcoef.ravel()])


BaselineHead = MlpHead | GroupKanHead


def make_baseline_head(kind: str, d_in: int, d_out: int, rng: RngStream,
                       hidden: int = 32, groups: int = 4) -> BaselineHead:
    if kind == "mlp":
        return MlpHead.init(d_in, d_out, hidden, rng)
    if kind == "groupkan":
        return GroupKanHead.init(d_in, d_out, groups, rng)
    raise ContractViolation(f"unknown baseline head kind: {kind!r}")


def baseline_forward(x: np.ndarray, head: BaselineHead) -> np.ndarray:
    return head.forward(x)


class FeatureExtractor:
    """Two affine layers with a silu in between; the trainable stand-in for a
    large frozen-vision backbone at desk scale."""

    def __init__(self, W1, b1, W2, b2):
        self.W1 = np.asarray(W1, dtype=np.float64)
        self.b1 = np.asarray(b1, dtype=np.float64)
        self.W2 = np.asarray(W2, dtype=np.float64)
        self.b2 = np.asarray(b2, dtype=np.float64)
        self.hidden, self.d_x = self.W1.shape
        self.d_f = self.W2.shape[0]

    @classmethod
    def init(cls, d_x: int, d_f: int, hidden: int, rng: RngStream,
             feature_scale: float = 1.0) -> "FeatureExtractor":
        """Glorot-uniform init; ``feature_scale`` multiplies the output layer
        so the feature magnitude (and with it the balance between absolute
        anchoring losses and direction-based losses) can be set per experiment."""
        a1 = np.sqrt(6.0 / (d_x + hidden))
        a2 = feature_scale * np.sqrt(6.0 / (hidden + d_f))
        return cls(rng.uniform(-a1, a1, (hidden, d_x)), np.zeros(hidden),
                   rng.uniform(-a2, a2, (d_f, hidden)), np.zeros(d_f))

    def n_params(self) -> int:
        return self.W1.size + self.b1.size + self.W2.size + self.b2.size

    def param_vector(self) -> np.ndarray:
        return np.concatenate([self.W1.ravel(), self.b1, self.W2.ravel(), self.b2])

    def set_param_vector(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        i = 0
        for name, arr in (("W1", self.W1), ("b1", self.b1), ("W2", self.W2), ("b2", self.b2)):
            setattr(self, name, vec[i:i + arr.size].reshape(arr.shape).copy())
            i += arr.size

    def forward(self, X: np.ndarray) -> np.ndarray:
        X, squeeze = _as_batch(X, self.d_x, "extractor input")
        h, _ = _silu(X @ self.W1.T + self.b1)
        F = h @ self.W2.T + self.b2
        return F[0] if squeeze else F

    def forward_cached(self, X: np.ndarray):
        X, _ = _as_batch(X, self.d_x, "extractor input")
        z1 = X @ self.W1.T + self.b1
        h, dh = _silu(z1)
        return h @ self.W2.T + self.b2, (X, h, dh)

    def backward(self, dF: np.ndarray, cache) -> tuple[np.ndarray, np.ndarray]:
        X, h, dh = cache
        dF = np.asarray(dF, dtype=np.float64).reshape(X.shape[0], self.d_f)
        dW2 = dF.T @ h
        db2 = dF.sum(axis=0)
        dz1 = (dF @ self.W2) * dh
        dW1 = dz1.T @ X
        db1 = dz1.sum(axis=0)
        dX = dz1 @ self.W1
        return dX, np.concatenate([dW1.ravel(), db1, dW2.ravel(), db2])

    def snapshot(self) -> "FeatureExtractor":
        """Deep, independent copy (used for the frozen teacher)."""
        return FeatureExtractor(self.W1.copy(), self.b1.copy(), self.W2.copy(), self.b2.copy())


def extractor_forward(x: np.ndarray, f: FeatureExtractor) -> np.ndarray:
    return f.forward(x)


def _as_batch(X: np.ndarray, dim: int, what: str) -> tuple[np.ndarray, bool]:
    X = np.asarray(X, dtype=np.float64)
    squeeze = X.ndim == 1
    if squeeze:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != dim:
        raise ContractViolation(f"{what} must have {dim} columns, got shape {X.shape}")
    return X, squeeze
