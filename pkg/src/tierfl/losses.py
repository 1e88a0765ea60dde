"""Loss functions, clipped stochastic gradients, and smoothness estimation.

All losses are convex in the model vector: ridge regression, binary
logistic regression, and hinge SVM (subgradient 0 at the kink).  Gradients
are rescaled to norm <= clip_norm, so the bounded-gradient assumption the
noise calibration relies on holds by construction.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import FederatedDataset, Minibatch
from .errors import DegenerateTrace, DimensionMismatch, EmptyBatch
from .topology import TierTopology

BETA_FLOOR = 1e-6

RIDGE = "ridge_regression"
LOGISTIC = "logistic"
HINGE = "hinge_svm"
KINDS = (RIDGE, LOGISTIC, HINGE)


@dataclass(frozen=True)
class LossSpec:
    kind: str = LOGISTIC
    l2: float = 0.0                 # ridge/weight-decay coefficient
    clip_norm: float = 10.0         # gradient norm cap
    smoothness: float = field(default=0.0, compare=False)  # filled by estimate_beta

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DimensionMismatch(f"unknown loss kind {self.kind!r}")
        if self.clip_norm <= 0 or not np.isfinite(self.clip_norm):
            raise DimensionMismatch("clip_norm must be positive and finite")
        if self.l2 < 0:
            raise DimensionMismatch("l2 must be nonnegative")

    def model_dim(self, feature_dim: int) -> int:
        return feature_dim


def _signed(labels: np.ndarray) -> np.ndarray:
    """Map {0,1} labels to {-1,+1} for margin losses."""
    return 2.0 * labels - 1.0


def point_losses(spec: LossSpec, w: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-point loss values for a feature block x (n, d) and labels y (n,)."""
    if x.shape[1] != w.shape[0]:
        raise DimensionMismatch(f"features of dim {x.shape[1]} vs model of dim {w.shape[0]}")
    reg = 0.5 * spec.l2 * float(w @ w)
    z = x @ w
    if spec.kind == RIDGE:
        return 0.5 * (z - y) ** 2 + reg
    s = _signed(y)
    if spec.kind == LOGISTIC:
        m = s * z
        return np.logaddexp(0.0, -m) + reg
    return np.maximum(0.0, 1.0 - s * z) + reg


def batch_gradient(spec: LossSpec, w: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Mean gradient over a feature block, before clipping."""
    if x.shape[1] != w.shape[0]:
        raise DimensionMismatch(f"features of dim {x.shape[1]} vs model of dim {w.shape[0]}")
    n = x.shape[0]
    z = x @ w
    if spec.kind == RIDGE:
        g = x.T @ (z - y) / n
    elif spec.kind == LOGISTIC:
        s = _signed(y)
        sig = 1.0 / (1.0 + np.exp(s * z))
        g = x.T @ (-s * sig) / n
    else:
        s = _signed(y)
        active = (s * z < 1.0).astype(float)
        g = x.T @ (-s * active) / n
    return g + spec.l2 * w


def clip(g: np.ndarray, clip_norm: float) -> np.ndarray:
    """Rescale g to norm <= clip_norm (no-op inside the ball)."""
    norm = float(np.linalg.norm(g))
    if norm > clip_norm:
        return g * (clip_norm / norm)
    return g


def local_loss(spec: LossSpec, w: np.ndarray, dataset: FederatedDataset, device: int) -> float:
    """Mean per-point loss on one device's dataset."""
    return float(np.mean(point_losses(spec, w, dataset.features[device],
                                      dataset.labels[device])))


def intermediate_loss(spec: LossSpec, w: np.ndarray, dataset: FederatedDataset,
                      topology: TierTopology, layer: int, node: int) -> float:
    """Equal-weight recursive average of the losses below (layer, node)."""
    if layer == topology.num_layers:
        return local_loss(spec, w, dataset, node)
    group = topology.child_ids(layer, node)
    return sum(intermediate_loss(spec, w, dataset, topology, layer + 1, i)
               for i in group) / len(group)


def global_loss(spec: LossSpec, w: np.ndarray, dataset: FederatedDataset,
                topology: TierTopology) -> float:
    """Subnet-weighted global objective (each layer-1 subnet weighs 1/N_1)."""
    if dataset.num_devices != topology.num_devices:
        raise DimensionMismatch("dataset and topology disagree on device count")
    return intermediate_loss(spec, w, dataset, topology, 0, 0)


def global_gradient(spec: LossSpec, w: np.ndarray, dataset: FederatedDataset,
                    topology: TierTopology) -> np.ndarray:
    """Exact gradient of the global objective (unclipped; diagnostics only)."""

    def rec(layer, node):
        if layer == topology.num_layers:
            return batch_gradient(spec, w, dataset.features[node], dataset.labels[node])
        group = topology.child_ids(layer, node)
        return sum(rec(layer + 1, i) for i in group) / len(group)

    return rec(0, 0)


def stochastic_gradient(spec: LossSpec, w: np.ndarray, dataset: FederatedDataset,
                        batch: Minibatch) -> np.ndarray:
    """Clipped minibatch-mean gradient for one device."""
    if len(batch) == 0:
        raise EmptyBatch("minibatch is empty")
    x = dataset.features[batch.device][batch.indices]
    y = dataset.labels[batch.device][batch.indices]
    return clip(batch_gradient(spec, w, x, y), spec.clip_norm)


def estimate_beta(iterate_trace) -> float:
    """Smoothness estimate from consecutive (w, grad) pairs.

    Returns the max gradient-difference to iterate-distance ratio, floored
    at BETA_FLOOR so later step-size formulas never divide by zero.
    """
    pairs = [(np.asarray(w, dtype=float), np.asarray(g, dtype=float))
             for w, g in iterate_trace]
    if len(pairs) < 2:
        raise DegenerateTrace("need at least two iterates")
    best = 0.0
    seen_distinct = False
    for (w_a, g_a), (w_b, g_b) in zip(pairs, pairs[1:]):
        dw = float(np.linalg.norm(w_a - w_b))
        if dw == 0.0:
            continue
        seen_distinct = True
        best = max(best, float(np.linalg.norm(g_a - g_b)) / dw)
    if not seen_distinct:
        raise DegenerateTrace("all iterates identical")
    return max(best, BETA_FLOOR)


def estimate_gradient_noise(spec: LossSpec, dataset: FederatedDataset, w: np.ndarray,
                            q: float, seed: int, draws: int = 50) -> float:
    """Empirical bound on the minibatch-gradient noise variance.

    Worst device-level mean of ||clipped batch gradient - clipped full
    gradient||^2 over `draws` Poisson batches; feeds the optimization term
    of the convergence bound.
    """
    from . import rng as _rng
    from .data import sample_minibatch

    worst = 0.0
    for j in range(dataset.num_devices):
        ref = clip(batch_gradient(spec, w, dataset.features[j], dataset.labels[j]),
                   spec.clip_norm)
        gen = _rng.stream(seed, _rng.BATCH, 0, j)
        total = 0.0
        for _ in range(draws):
            batch = sample_minibatch(dataset, j, q, gen)
            g = stochastic_gradient(spec, w, dataset, batch)
            total += float(np.sum((g - ref) ** 2))
        worst = max(worst, total / draws)
    return worst


def analytic_beta_bound(spec: LossSpec, dataset: FederatedDataset) -> float:
    """Upper bound on the global smoothness constant.

    Per-device curvature is bounded by lam_max(X^T X)/n for ridge and a
    quarter of that for logistic (hinge treated like logistic after
    clipping); the subnet-weighted objective inherits the device maximum.
    """
    worst = 0.0
    for x in dataset.features:
        lam = float(np.linalg.eigvalsh(x.T @ x / x.shape[0])[-1])
        worst = max(worst, lam)
    scale = 1.0 if spec.kind == RIDGE else 0.25
    return max(scale * worst + spec.l2, BETA_FLOOR)
