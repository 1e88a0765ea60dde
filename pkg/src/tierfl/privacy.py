"""Gaussian-mechanism calibration, noise ledger, and protection checks.

Noise standard deviations follow the subsampled-accountant form
sigma = alpha_l * q * Delta_l * sqrt(T * log(1/delta)) / epsilon, with the
layer sensitivity Delta_l instantiated as its closed-form upper bound
2 * eta * K * G / prod(fanouts between the layer and the devices).  Every
draw the engine makes is appended to a ledger, which lets the verifier
recompose the effective noise protecting each insecure node and compare it
against the calibration target.
"""
from __future__ import annotations

import csv
import math
import threading
from dataclasses import dataclass, field

import numpy as np

from . import bounds, rng
from .errors import AccountantPremiseViolated, IncompleteLedger, InvalidLayer
from .topology import TierTopology, TrustStats


@dataclass(frozen=True)
class DPConfig:
    """Privacy budget and accountant constants for one training run."""

    epsilon: float
    delta: float
    sample_rate: float            # per-point minibatch inclusion probability
    rounds: int                   # total global aggregations the budget spans
    alphas: tuple                 # accountant constant per layer 1..L
    premise_c1: float = 1.0       # validity constant: requires epsilon < c1*q*T

    def __post_init__(self):
        if self.epsilon <= 0:
            raise AccountantPremiseViolated("epsilon must be positive")
        if not 0.0 < self.delta < 1.0:
            raise AccountantPremiseViolated("delta must lie in (0, 1)")
        if not 0.0 < self.sample_rate <= 1.0:
            raise AccountantPremiseViolated("sample rate must lie in (0, 1]")
        if self.rounds < 1:
            raise AccountantPremiseViolated("rounds must be >= 1")
        if any(a <= 0 for a in self.alphas):
            raise AccountantPremiseViolated("accountant constants must be positive")
        self.check_premise()

    def check_premise(self):
        limit = self.premise_c1 * self.sample_rate * self.rounds
        if not self.epsilon < limit:
            raise AccountantPremiseViolated(
                f"epsilon {self.epsilon} >= c1*q*T = {limit}; accountant premise broken")

    def alpha(self, layer: int) -> float:
        return float(self.alphas[layer - 1])


def default_alphas(topology: TierTopology) -> tuple:
    """Per-layer accountant constants derived from the tree shape.

    The device layer uses 1.  Interior constants shrink by s_l/sqrt(F_l)
    (min over max fanout at the layer) whenever fanouts are uneven, so the
    noise a node receives from below always covers the noise its own layer
    would have to draw.  Even trees yield all-ones.
    """
    L = topology.num_layers
    alphas = [1.0] * L
    for l in range(L - 1, 0, -1):
        fanouts = [len(topology.child_ids(l, c)) for c in topology.nodes(l)]
        ratio = min(fanouts) / math.sqrt(max(fanouts))
        alphas[l - 1] = alphas[l] * min(1.0, ratio)
    return tuple(alphas)


def sensitivity_bound(layer: int, eta: float, K: int, clip_norm: float,
                      stats: TrustStats) -> float:
    """Closed-form bound on the L2 sensitivity of a layer's upload."""
    L = stats.num_layers
    if not 1 <= layer <= L:
        raise InvalidLayer(f"layer {layer} outside [1, {L}]")
    dilution = math.prod(stats.fanout_min[x] for x in range(layer, L)) if layer < L else 1.0
    return 2.0 * eta * K * clip_norm / dilution


def noise_sigma(dp: DPConfig, sensitivity: float, layer: int) -> float:
    """Noise standard deviation keeping the budget over dp.rounds releases."""
    if sensitivity < 0:
        raise InvalidLayer("sensitivity must be nonnegative")
    dp.check_premise()
    return (dp.alpha(layer) * dp.sample_rate * sensitivity
            * math.sqrt(dp.rounds * math.log(1.0 / dp.delta)) / dp.epsilon)


@dataclass(frozen=True)
class NoiseDraw:
    t: int
    k: int
    layer: int
    node: int
    sigma2: float
    dim: int
    stream: str


@dataclass
class NoiseLedger:
    """Append-only record of every Gaussian draw in a run.

    Appends hold a lock so concurrent device workers keep a consistent
    ordering; reads used for verification take a snapshot.
    """

    draws: list = field(default_factory=list)
    completed_rounds: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def append(self, draw: NoiseDraw):
        with self._lock:
            self.draws.append(draw)

    def mark_round_complete(self, t: int):
        with self._lock:
            self.completed_rounds = max(self.completed_rounds, t)

    def round_draws(self, t: int) -> list:
        if t > self.completed_rounds:
            raise IncompleteLedger(f"round {t} is not fully recorded "
                                   f"(have {self.completed_rounds})")
        return [d for d in self.draws if d.t == t]

    def event_draws(self, t: int, k: int) -> list:
        return [d for d in self.round_draws(t) if d.k == k]

    def __len__(self) -> int:
        return len(self.draws)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "k", "layer", "node", "sigma2", "M", "stream"])
            for d in self.draws:
                writer.writerow([d.t, d.k, d.layer, d.node, repr(d.sigma2), d.dim, d.stream])

    @classmethod
    def read_csv(cls, path, completed_rounds=None) -> "NoiseLedger":
        ledger = cls()
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            for row in reader:
                ledger.draws.append(NoiseDraw(
                    t=int(row["t"]), k=int(row["k"]), layer=int(row["layer"]),
                    node=int(row["node"]), sigma2=float(row["sigma2"]),
                    dim=int(row["M"]), stream=row["stream"]))
        if completed_rounds is None:
            completed_rounds = max((d.t for d in ledger.draws), default=0)
        ledger.completed_rounds = completed_rounds
        return ledger


def draw_noise(sigma: float, dim: int, gen: np.random.Generator,
               ledger: NoiseLedger | None, t: int, k: int, layer: int, node: int,
               stream: str) -> np.ndarray:
    """Sample N(0, sigma^2 I) and record the draw."""
    noise = gen.standard_normal(dim) * sigma if sigma > 0 else np.zeros(dim)
    if ledger is not None:
        ledger.append(NoiseDraw(t=t, k=k, layer=layer, node=node,
                                sigma2=sigma * sigma, dim=dim, stream=stream))
    return noise


def expected_propagated_variance(stats: TrustStats, dp: DPConfig, eta: float,
                                 K: int, clip_norm: float, dim: int,
                                 layer: int) -> float:
    """Upper bound on E||aggregate noise entering `layer`||^2 per event."""
    if not 1 <= layer <= stats.num_layers - 1:
        raise InvalidLayer(f"layer {layer} outside [1, {stats.num_layers - 1}]")
    terms = bounds.layer_noise_terms(stats, dp.alphas)
    pref = (2.0 * eta ** 2 * dim * K ** 2 * dp.rounds * dp.sample_rate ** 2
            * clip_norm ** 2 * math.log(1.0 / dp.delta) / dp.epsilon ** 2)
    return pref * terms[layer - 1].total


def _upload_weight(topology: TierTopology, parent_layer: int, parent: int,
                   participants=None) -> float:
    """Aggregation weight each child of `parent` carries."""
    if participants is not None and parent_layer == topology.num_layers - 1:
        return 1.0 / len(participants[parent])
    return 1.0 / len(topology.child_ids(parent_layer, parent))


def composed_variance(ledger: NoiseLedger, topology: TierTopology, t: int, k: int,
                      layer: int, node: int, participants=None,
                      include_own_upload: bool = False) -> float:
    """Effective per-coordinate noise variance on a node's aggregate.

    Sums path-weight^2 * sigma^2 over the event's draws inside the node's
    subtree.  With include_own_upload, a fresh draw attached to the node's
    own upload (protecting its parent's view) is counted too.
    """
    total = 0.0
    for d in ledger.event_draws(t, k):
        if d.layer == layer and d.node == node:
            if include_own_upload:
                total += d.sigma2
            continue
        if d.layer <= layer:
            continue
        weight = 1.0
        cur_layer, cur_node = d.layer, d.node
        while cur_layer > layer:
            parent = topology.parent[(cur_layer, cur_node)]
            weight *= _upload_weight(topology, cur_layer - 1, parent, participants)
            cur_layer, cur_node = cur_layer - 1, parent
        if cur_node == node:
            total += weight * weight * d.sigma2
    return total


@dataclass(frozen=True)
class ProtectionRow:
    layer: int
    node: int
    event_k: int
    effective_var: float
    required_var: float

    @property
    def passed(self) -> bool:
        return self.effective_var >= self.required_var * (1.0 - 1e-9)


def verify_node_protection(topology: TierTopology, stats: TrustStats, dp: DPConfig,
                           ledger: NoiseLedger, t: int, events: dict, eta: float,
                           K: int, clip_norm: float, participants=None) -> list:
    """Per-insecure-node protection report for round t.

    `events` maps each aggregation iteration k to the highest layer it
    aggregated to (the boundary event maps to 1).  For every insecure
    intermediate node taking part in an event, the noise composed into its
    aggregate must reach the calibration target for its layer.  When the
    cloud is insecure, each layer-1 upload at the boundary event is checked
    the same way.
    """
    L = topology.num_layers
    ledger.round_draws(t)  # raises IncompleteLedger on truncated rounds
    rows = []
    boundary = max(events) if events else None
    for k, event_layer in sorted(events.items()):
        for layer in range(event_layer, L):
            delta_l = sensitivity_bound(layer, eta, K, clip_norm, stats)
            req = noise_sigma(dp, delta_l, layer) ** 2
            for node in topology.nodes(layer):
                if topology.is_secure(layer, node):
                    continue
                eff = composed_variance(ledger, topology, t, k, layer, node,
                                        participants=participants)
                rows.append(ProtectionRow(layer, node, k, eff, req))
        if k == boundary and not topology.is_secure(0, 0):
            req = noise_sigma(dp, sensitivity_bound(1, eta, K, clip_norm, stats), 1) ** 2
            for c in topology.nodes(1):
                eff = composed_variance(ledger, topology, t, k, 1, c,
                                        participants=participants,
                                        include_own_upload=True)
                rows.append(ProtectionRow(0, c, k, eff, req))
    return rows


def simulate_root_noise(topology: TierTopology, stats: TrustStats, dp: DPConfig,
                        eta: float, K: int, clip_norm: float, dim: int,
                        reps: int, seed: int) -> np.ndarray:
    """Monte-Carlo squared norms of the boundary-event noise at the root.

    Mirrors the trust-aware injection rules on zero models, vectorized over
    repetitions; used to check the ledger-composed analytic variance.
    """
    L = topology.num_layers
    gen = rng.stream(seed, rng.NOISE, 0)

    def sigma_for(layer):
        return noise_sigma(dp, sensitivity_bound(layer, eta, K, clip_norm, stats), layer)

    def value(layer, node):
        # noise carried by this node's aggregate, shape (reps, dim)
        if layer == L:
            return np.zeros((reps, dim))
        group = topology.child_ids(layer, node)
        acc = np.zeros((reps, dim))
        secure = topology.is_secure(layer, node)
        for i in group:
            child = value(layer + 1, i)
            if not secure:
                child_clean = layer + 1 == L or topology.is_secure(layer + 1, i)
                if child_clean:
                    child = child + gen.standard_normal((reps, dim)) * sigma_for(layer + 1)
            acc += child
        return acc / len(group)

    root = np.zeros((reps, dim))
    group = topology.child_ids(0, 0)
    cloud_secure = topology.is_secure(0, 0)
    for c in group:
        upload = value(1, c)
        if not cloud_secure and (L == 1 or topology.is_secure(1, c)):
            upload = upload + gen.standard_normal((reps, dim)) * sigma_for(1)
        root += upload
    root /= len(group)
    return np.einsum("ij,ij->i", root, root)
