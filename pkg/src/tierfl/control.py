"""Per-round resource control: step-size tuning and the (K, participation)
search trading energy, delay, and the noise-induced stationarity gap.

The joint problem is a small mixed-integer program; the production solver
searches K x (s_secure, s_insecure) — sample sizes differentiated only by
the trust class of a subnet's layer-1 ancestor — while the unreduced
per-subnet search stays available as a test oracle.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

from . import bounds
from .errors import InfeasibleConstraints, SearchSpaceTooLarge
from .topology import TrustStats


def dbm_to_watts(dbm: float) -> float:
    return 10.0 ** (dbm / 10.0) / 1000.0


@dataclass(frozen=True)
class CostModel:
    """Link and compute costs; powers are given in dBm and held in watts."""

    device_power_dbm: float = 24.0
    cloud_power_dbm: float = 38.0
    wireless_rate_bps: float = 35e6
    cloud_rate_bps: float = 100e6
    bits_per_param: int = 32
    model_dim: int = 7840
    compute_energy: float = 1e-3      # J per device per local update
    compute_delay: float = 0.2        # s per local update

    def __post_init__(self):
        for name in ("wireless_rate_bps", "cloud_rate_bps", "bits_per_param",
                     "model_dim", "compute_energy", "compute_delay"):
            if getattr(self, name) <= 0:
                raise InfeasibleConstraints(f"cost model field {name} must be positive")

    @property
    def device_power_w(self) -> float:
        return dbm_to_watts(self.device_power_dbm)

    @property
    def cloud_power_w(self) -> float:
        return dbm_to_watts(self.cloud_power_dbm)

    @property
    def payload_bits(self) -> float:
        return float(self.model_dim) * self.bits_per_param

    def wireless_upload_delay(self) -> float:
        return self.payload_bits / self.wireless_rate_bps

    def wireless_upload_energy(self) -> float:
        return self.device_power_w * self.wireless_upload_delay()

    def cloud_upload_delay(self) -> float:
        return self.payload_bits / self.cloud_rate_bps

    def cloud_upload_energy(self) -> float:
        return self.cloud_power_w * self.cloud_upload_delay()


@dataclass(frozen=True)
class ObjectiveWeights:
    energy: float = 1.0
    delay: float = 1.0
    gap: float = 1.0

    def __post_init__(self):
        if self.energy < 0 or self.delay < 0 or self.gap < 0:
            raise InfeasibleConstraints("objective weights must be nonnegative")
        if self.energy == self.delay == self.gap == 0:
            raise InfeasibleConstraints("at least one objective weight must be positive")


@dataclass(frozen=True)
class ControlSettings:
    weights: ObjectiveWeights
    k_max: int
    tau: int


@dataclass(frozen=True)
class ControlContext:
    """Structural constants the per-round objectives need."""

    tau_t: int                 # remaining local updates
    n_local_aggs: int          # local aggregation events per round
    subnet_sizes: dict         # layer-(L-1) parent -> child count
    subnet_secure: dict        # layer-(L-1) parent -> ancestor trust class
    interior_uploads: int      # nodes at layers 2..L-1 (upload once per pass)
    num_layer1: int
    num_layers: int


@dataclass(frozen=True)
class ControlDecision:
    K: int
    s_secure: int              # 0 when the class is absent
    s_insecure: int
    objective: float
    energy_j: float
    delay_s: float
    gap: float
    s_map: dict = field(default_factory=dict)


def energy_objective(K: int, s_map: dict, cm: CostModel, ctx: ControlContext) -> float:
    """Projected energy over the remaining tau_t local updates."""
    n_active = sum(s_map.values())
    if ctx.num_layers > 1:
        local_sum = (n_active + ctx.interior_uploads) * cm.wireless_upload_energy()
        e_glob = local_sum + ctx.num_layer1 * cm.cloud_upload_energy()
    else:
        local_sum = 0.0
        e_glob = n_active * cm.cloud_upload_energy()
    rounds_left = ctx.tau_t / K
    return (rounds_left * e_glob
            + rounds_left * (ctx.n_local_aggs * local_sum
                             + K * n_active * cm.compute_energy))


def delay_objective(K: int, s_map: dict, cm: CostModel, ctx: ControlContext) -> float:
    """Projected delay over the remaining tau_t local updates.

    Uplinks inside a subnet run in parallel (equal rates), so one stage
    costs a single payload time; stages serialize up the tree.
    """
    hops = max(ctx.num_layers - 1, 0)
    if ctx.num_layers > 1:
        local_sum = ctx.num_layer1 * hops * cm.wireless_upload_delay()
        g_glob = hops * cm.wireless_upload_delay() + cm.cloud_upload_delay()
    else:
        local_sum = 0.0
        g_glob = cm.cloud_upload_delay()
    rounds_left = ctx.tau_t / K
    return rounds_left * (g_glob + ctx.n_local_aggs * local_sum
                          + K * cm.compute_delay)


def gap_objective(K: int, s_map: dict, dp, stats: TrustStats, model_dim: int) -> float:
    """Stationarity-gap objective with the device-layer fanout sampled."""
    eff = stats.with_device_fanout(min(s_map.values())) if s_map else stats
    return bounds.noise_gap(eff, dp.alphas, model_dim, K, dp.sample_rate,
                            dp.epsilon, dp.delta)


def tune_gamma(beta: float, K_prev: int, tau: int) -> float:
    """Largest step-size scale admissible for the coming round."""
    if beta <= 0 or K_prev < 1 or tau < 1:
        raise InfeasibleConstraints("beta, K_prev and tau must be positive")
    return min(1.0 / K_prev, 1.0 / tau) / beta


def _class_sizes(subnet_sizes: dict, subnet_secure: dict) -> tuple:
    sec = [subnet_sizes[c] for c in subnet_sizes if subnet_secure[c]]
    ins = [subnet_sizes[c] for c in subnet_sizes if not subnet_secure[c]]
    return sec, ins


def _objective(weights, K, s_map, cm, dp, stats, model_dim, ctx, gap_cache):
    e = energy_objective(K, s_map, cm, ctx)
    d = delay_objective(K, s_map, cm, ctx)
    if dp is not None:
        min_s = min(s_map.values())
        if min_s not in gap_cache:
            gap_cache[min_s] = gap_objective(1, s_map, dp, stats, model_dim)
        g = gap_cache[min_s] * float(K) ** 4
    else:
        g = 0.0
    return (weights.energy * e + weights.delay * d + weights.gap * g, e, d, g)


def _make_context(stats, tau_t, n_local_aggs, subnet_sizes, subnet_secure,
                  num_layer1, interior_uploads) -> ControlContext:
    return ControlContext(
        tau_t=tau_t, n_local_aggs=n_local_aggs, subnet_sizes=subnet_sizes,
        subnet_secure=subnet_secure, interior_uploads=interior_uploads,
        num_layer1=num_layer1, num_layers=stats.num_layers)


def solve_control(weights: ObjectiveWeights, cm: CostModel, dp, stats: TrustStats,
                  k_max: int, tau_t: int, subnet_sizes: dict, subnet_secure: dict,
                  model_dim: int, n_local_aggs: int, num_layer1: int = 1,
                  interior_uploads: int = 0) -> ControlDecision:
    """Exhaustive reduced search over K x s_secure x s_insecure.

    Ties break toward smaller K, then smaller s_secure, then smaller
    s_insecure, so concurrent evaluation cannot change the answer.
    """
    if k_max < 1 or tau_t < 1 or not subnet_sizes:
        raise InfeasibleConstraints("k_max, tau_t and subnet sizes must be >= 1")
    if any(n < 1 for n in subnet_sizes.values()):
        raise InfeasibleConstraints("every subnet needs at least one device")
    sec, ins = _class_sizes(subnet_sizes, subnet_secure)
    ctx = _make_context(stats, tau_t, n_local_aggs, subnet_sizes, subnet_secure,
                        num_layer1, interior_uploads)

    k_hi = min(k_max, tau_t)
    sec_range = range(1, min(sec) + 1) if sec else [0]
    ins_range = range(1, min(ins) + 1) if ins else [0]
    gap_cache = {}
    best = None
    for K in range(1, k_hi + 1):
        for ss in sec_range:
            for si in ins_range:
                s_map = {c: (ss if subnet_secure[c] else si) for c in subnet_sizes}
                obj, e, d, g = _objective(weights, K, s_map, cm, dp, stats,
                                          model_dim, ctx, gap_cache)
                key = (obj, K, ss, si)
                if best is None or key < best[0]:
                    best = (key, ControlDecision(K=K, s_secure=ss, s_insecure=si,
                                                 objective=obj, energy_j=e,
                                                 delay_s=d, gap=g, s_map=s_map))
    return best[1]


def brute_force_control(weights: ObjectiveWeights, cm: CostModel, dp,
                        stats: TrustStats, k_max: int, tau_t: int,
                        subnet_sizes: dict, subnet_secure: dict, model_dim: int,
                        n_local_aggs: int, num_layer1: int = 1,
                        interior_uploads: int = 0,
                        guard: int = 10 ** 7) -> ControlDecision:
    """Unreduced argmin over per-subnet sample sizes (test oracle only)."""
    if k_max < 1 or tau_t < 1 or not subnet_sizes:
        raise InfeasibleConstraints("k_max, tau_t and subnet sizes must be >= 1")
    k_hi = min(k_max, tau_t)
    space = k_hi * math.prod(subnet_sizes.values())
    if space > guard:
        raise SearchSpaceTooLarge(f"{space} grid points exceed the {guard} guard")
    ctx = _make_context(stats, tau_t, n_local_aggs, subnet_sizes, subnet_secure,
                        num_layer1, interior_uploads)

    subnets = sorted(subnet_sizes)
    gap_cache = {}
    best = None
    for K in range(1, k_hi + 1):
        for combo in itertools.product(*(range(1, subnet_sizes[c] + 1)
                                         for c in subnets)):
            s_map = dict(zip(subnets, combo))
            obj, e, d, g = _objective(weights, K, s_map, cm, dp, stats,
                                      model_dim, ctx, gap_cache)
            key = (obj, K, combo)
            if best is None or key < best[0]:
                sec = [s_map[c] for c in subnets if subnet_secure[c]]
                ins = [s_map[c] for c in subnets if not subnet_secure[c]]
                best = (key, ControlDecision(
                    K=K, s_secure=min(sec) if sec else 0,
                    s_insecure=min(ins) if ins else 0, objective=obj,
                    energy_j=e, delay_s=d, gap=g, s_map=s_map))
    return best[1]
