"""Hierarchical training loop with trust-aware noise injection.

One round = K local SGD iterations on the devices, local aggregations at
scheduled iterations (bottom-up through the tree, injecting fresh Gaussian
noise exactly where an insecure aggregator would otherwise see a clean
model), and a global aggregation at the round boundary.  Baseline protocols
reuse the same loop with a different injection rule.

Determinism contract: all randomness comes from streams keyed by
(seed, purpose, round, node), device-local work is embarrassingly parallel
between aggregation barriers, and aggregation accumulates children in
descending-index order, so traces are bit-identical across runs and worker
counts.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import bounds, losses, rng
from .control import ControlSettings, CostModel, solve_control, tune_gamma
from .data import FederatedDataset, sample_minibatch
from .errors import (OverlappingAggregationSets, ProtectionViolated, RateOutOfRange,
                     ScheduleViolation, ZeroInterval)
from .privacy import (DPConfig, NoiseLedger, draw_noise, noise_sigma,
                      sensitivity_bound, verify_node_protection)
from .topology import TierTopology, TrustStats, build_topology, derive_trust_stats

M2FDP = "m2fdp"
HFL_NO_DP = "hfl_no_dp"
HFL_DP_LDP = "hfl_dp_ldp"
PEDPFL_STAR = "pedpfl_star"
PROTOCOLS = (M2FDP, HFL_NO_DP, HFL_DP_LDP, PEDPFL_STAR)


@dataclass(frozen=True)
class TrainingSchedule:
    """Round count, per-round local intervals, and aggregation iterations."""

    rounds: int
    local_steps: tuple            # K^t per round
    agg_sets: dict                # layer -> tuple of iterations within [1, K^t]

    @property
    def K_max(self) -> int:
        return max(self.local_steps)

    def events_for(self, K_t: int) -> dict:
        """k -> target layer for the local aggregations of a K_t-step round."""
        events = {}
        for layer, ks in self.agg_sets.items():
            for k in ks:
                if k <= K_t:
                    events[k] = layer
        return events


def build_schedule(T: int, K, local_agg_periods=None, explicit_sets=None) -> TrainingSchedule:
    """Validate and assemble a schedule.

    `local_agg_periods` maps layer -> period; layer l aggregates at every
    multiple of its period.  Distinct layers must not collide on any
    iteration (aggregations at one iteration are dictated by one layer).
    """
    if T < 1:
        raise ZeroInterval("need at least one round")
    steps = tuple(int(k) for k in (K if isinstance(K, (list, tuple)) else [K] * T))
    if len(steps) != T or any(k < 1 for k in steps):
        raise ZeroInterval("every round needs at least one local step")
    K_max = max(steps)

    agg_sets = {}
    if explicit_sets:
        agg_sets = {int(l): tuple(sorted(int(k) for k in ks))
                    for l, ks in explicit_sets.items()}
    elif local_agg_periods:
        for layer, period in local_agg_periods.items():
            period = int(period)
            if period < 1:
                raise ZeroInterval(f"layer {layer}: zero aggregation period")
            agg_sets[int(layer)] = tuple(range(period, K_max + 1, period))

    seen = {}
    for layer, ks in agg_sets.items():
        for k in ks:
            if k < 1:
                raise ZeroInterval(f"layer {layer}: iteration {k} < 1")
            if k in seen:
                raise OverlappingAggregationSets(
                    f"iteration {k} claimed by layers {seen[k]} and {layer}")
            seen[k] = layer
    return TrainingSchedule(rounds=T, local_steps=steps, agg_sets=agg_sets)


@dataclass
class RoundRecord:
    t: int
    k_total: int
    eta: float
    K_t: int
    s_secure: int
    s_insecure: int
    global_loss: float
    global_grad_norm: float
    energy_j: float
    delay_s: float
    noise_draws: int


@dataclass
class TrainingTrace:
    """Per-round records plus run-level metadata."""

    rows: list = field(default_factory=list)
    initial_loss: float = 0.0
    initial_grad_norm: float = 0.0
    gamma: float = 0.0
    beta: float = 0.0
    final_model: np.ndarray | None = None

    COLUMNS = ("t", "k_total", "eta", "K_t", "s_secure", "s_insecure",
               "global_loss", "global_grad_norm", "energy_J", "delay_s",
               "noise_draws")

    def csv_lines(self) -> list:
        lines = [",".join(self.COLUMNS)]
        for r in self.rows:
            lines.append(",".join([
                str(r.t), str(r.k_total), repr(r.eta), str(r.K_t),
                str(r.s_secure), str(r.s_insecure), repr(r.global_loss),
                repr(r.global_grad_norm), repr(r.energy_j), repr(r.delay_s),
                str(r.noise_draws)]))
        return lines

    @property
    def final_loss(self) -> float:
        return self.rows[-1].global_loss

    @property
    def final_grad_norm(self) -> float:
        return self.rows[-1].global_grad_norm


@dataclass(frozen=True)
class RunSpec:
    """Everything one training run needs, pre-validated."""

    topology: TierTopology
    dataset: FederatedDataset
    loss: losses.LossSpec
    schedule: TrainingSchedule
    dp: DPConfig | None = None
    protocol: str = M2FDP
    noise_enabled: bool = True
    seed: int = 0
    gamma: float | None = None          # None: largest admissible scale
    beta: float | None = None           # None: analytic bound from the data
    init_scale: float = 0.0
    cost_model: CostModel | None = None
    control: ControlSettings | None = None
    participation: dict | None = None   # {"secure": n, "insecure": n} per-subnet
    workers: int = 1
    verify_each_round: bool = False


def local_sgd_step(w: np.ndarray, eta: float, grad: np.ndarray) -> np.ndarray:
    """One gradient-descent update."""
    return w - eta * grad


def sample_participants(topology: TierTopology, rates: dict,
                        gen: np.random.Generator) -> dict:
    """Uniform without-replacement device sample per subnet.

    `rates` maps each layer-(L-1) parent to its sample size; the aggregate
    over a sampled subnet is reweighted by 1/size, keeping it unbiased.
    """
    parent_layer = topology.num_layers - 1
    out = {}
    for c in topology.nodes(parent_layer):
        group = topology.child_ids(parent_layer, c)
        s = int(rates[c])
        if not 1 <= s <= len(group):
            raise RateOutOfRange(f"subnet {c}: sample size {s} outside [1, {len(group)}]")
        if s == len(group):
            chosen = list(group)
        else:
            chosen = sorted(gen.choice(len(group), size=s, replace=False))
            chosen = [group[i] for i in chosen]
        out[c] = chosen
    return out


def _subnet_trust_class(topology: TierTopology, subnet: int) -> bool:
    """True when the subnet's layer-1 ancestor is secure."""
    if topology.num_layers == 1:
        return topology.is_secure(0, 0)
    layer, node = topology.num_layers - 1, subnet
    while layer > 1:
        node = topology.parent[(layer, node)]
        layer -= 1
    return topology.is_secure(1, node)


class _Run:
    """Mutable state for one training run."""

    def __init__(self, spec: RunSpec):
        self.spec = spec
        self.topology = spec.topology
        self.stats = derive_trust_stats(spec.topology)
        self.dataset = spec.dataset
        L = self.topology.num_layers
        self.dim = spec.loss.model_dim(spec.dataset.feature_dim)
        self.ledger = NoiseLedger()
        self.draw_count = 0
        self.energy = 0.0
        self.delay = 0.0
        self.k_total = 0
        self.tau_left = spec.control.tau if spec.control else None
        self.beta_trace = []

        if spec.beta is not None:
            self.beta = spec.beta
        else:
            self.beta = losses.analytic_beta_bound(spec.loss, spec.dataset)
        if spec.gamma is not None:
            self.gamma = spec.gamma
        else:
            self.gamma = bounds.max_step_scale(self.beta, spec.schedule.K_max,
                                               spec.schedule.rounds)

        gen = rng.stream(spec.seed, rng.INIT, 0)
        w0 = gen.standard_normal(self.dim) * spec.init_scale
        self.w_global = w0
        self.device_models = np.tile(w0, (self.topology.num_devices, 1))

    # --- noise policy -----------------------------------------------------

    def _sigmas(self, eta: float, eff_stats: TrustStats) -> list:
        """Per-layer calibrated noise std for the current round (index l-1)."""
        spec = self.spec
        if spec.dp is None or not spec.noise_enabled or spec.protocol == HFL_NO_DP:
            return [0.0] * self.topology.num_layers
        K_cal = spec.schedule.K_max
        return [noise_sigma(spec.dp,
                            sensitivity_bound(l, eta, K_cal, spec.loss.clip_norm,
                                              eff_stats), l)
                for l in range(1, self.topology.num_layers + 1)]

    def _device_sigma(self, parent_secure: bool, sigmas: list) -> float:
        if self.spec.protocol == HFL_DP_LDP:
            return sigmas[-1]
        if self.spec.protocol in (M2FDP, PEDPFL_STAR) and not parent_secure:
            return sigmas[-1]
        return 0.0

    def _interior_sigma(self, parent_secure: bool, child_layer: int,
                        child_secure: bool, sigmas: list) -> float:
        if (self.spec.protocol in (M2FDP, PEDPFL_STAR) and not parent_secure
                and child_secure):
            return sigmas[child_layer - 1]
        return 0.0

    # --- aggregation ------------------------------------------------------

    def _noise(self, sigma, t, k, layer, node, gens):
        key = (layer, node)
        if key not in gens:
            gens[key] = rng.stream(self.spec.seed, rng.NOISE, t, layer, node)
        self.draw_count += 1
        return draw_noise(sigma, self.dim, gens[key], self.ledger, t, k, layer,
                          node, rng.stream_name(rng.NOISE, t, layer, node))

    def _aggregate_pass(self, t, k, target_layer, participants, sigmas, gens):
        """Bottom-up aggregation from layer L-1 down to `target_layer`.

        Children accumulate in descending-index order; insecure parents
        receive fresh noise on clean child uploads.
        """
        topo = self.topology
        L = topo.num_layers
        values = {}
        for layer in range(L - 1, target_layer - 1, -1):
            for c in topo.nodes(layer):
                parent_secure = topo.is_secure(layer, c)
                if layer == L - 1:
                    group = participants[c]
                else:
                    group = topo.child_ids(layer, c)
                acc = np.zeros(self.dim)
                for i in sorted(group, reverse=True):
                    if layer == L - 1:
                        value = self.device_models[i]
                        sigma = self._device_sigma(parent_secure, sigmas)
                        if sigma > 0.0:
                            value = value + self._noise(sigma, t, k, L, i, gens)
                    else:
                        value = values[(layer + 1, i)]
                        child_secure = topo.is_secure(layer + 1, i)
                        sigma = self._interior_sigma(parent_secure, layer + 1,
                                                     child_secure, sigmas)
                        if sigma > 0.0:
                            value = value + self._noise(sigma, t, k, layer + 1, i, gens)
                    acc = acc + value
                values[(layer, c)] = acc / len(group)
        return values

    def _broadcast(self, values, layer):
        for c in self.topology.nodes(layer):
            model = values[(layer, c)]
            for j in self.topology.devices_under(layer, c):
                self.device_models[j] = model

    def _global_aggregate(self, t, K_t, participants, sigmas, gens):
        topo = self.topology
        L = topo.num_layers
        k_boundary = K_t + 1
        cloud_secure = topo.is_secure(0, 0)
        if L == 1:
            group = participants[0]
            acc = np.zeros(self.dim)
            for j in sorted(group, reverse=True):
                value = self.device_models[j]
                if self.spec.protocol == HFL_DP_LDP:
                    sigma = sigmas[-1]
                else:
                    sigma = 0.0 if cloud_secure else sigmas[0]
                if sigma > 0.0:
                    value = value + self._noise(sigma, t, k_boundary, 1, j, gens)
                acc = acc + value
            self.w_global = acc / len(group)
        else:
            values = self._aggregate_pass(t, k_boundary, 1, participants, sigmas, gens)
            acc = np.zeros(self.dim)
            group = list(topo.nodes(1))
            for c in sorted(group, reverse=True):
                value = values[(1, c)]
                if (self.spec.protocol in (M2FDP, PEDPFL_STAR) and not cloud_secure
                        and topo.is_secure(1, c) and sigmas[0] > 0.0):
                    value = value + self._noise(sigmas[0], t, k_boundary, 1, c, gens)
                acc = acc + value
            self.w_global = acc / len(group)
        self.device_models[:] = self.w_global

    # --- device work ------------------------------------------------------

    def _sgd_phase(self, t, K_t, eta, active_devices):
        spec = self.spec
        gens = {j: rng.stream(spec.seed, rng.BATCH, t, j) for j in active_devices}

        def step_device(j):
            batch = sample_minibatch(self.dataset, j, spec.dp.sample_rate
                                     if spec.dp else 1.0, gens[j])
            grad = losses.stochastic_gradient(spec.loss, self.device_models[j],
                                              self.dataset, batch)
            self.device_models[j] = local_sgd_step(self.device_models[j], eta, grad)

        return gens, step_device

    # --- cost accounting ----------------------------------------------------

    def _charge_round(self, K_t, events, participants):
        cm = self.spec.cost_model
        if cm is None:
            return
        topo = self.topology
        L = topo.num_layers
        n_active = sum(len(v) for v in participants.values())

        def pass_cost(target_layer):
            uploads = n_active + sum(topo.size(x) for x in range(target_layer + 1, L))
            return (uploads * cm.wireless_upload_energy(),
                    (L - target_layer) * cm.wireless_upload_delay())

        for target in events.values():
            e, d = pass_cost(target)
            self.energy += e
            self.delay += d
        if L > 1:
            e, d = pass_cost(1)
            self.energy += e + topo.size(1) * cm.cloud_upload_energy()
            self.delay += d + cm.cloud_upload_delay()
        else:
            self.energy += n_active * cm.cloud_upload_energy()
            self.delay += cm.cloud_upload_delay()
        self.energy += K_t * n_active * cm.compute_energy
        self.delay += K_t * cm.compute_delay


def run_training(spec: RunSpec) -> tuple:
    """Execute the protocol for spec.schedule.rounds rounds.

    Returns (trace, ledger).  Identical specs produce byte-identical traces
    regardless of spec.workers.
    """
    if spec.protocol not in PROTOCOLS:
        raise ScheduleViolation(f"unknown protocol {spec.protocol!r}")
    state = _Run(spec)
    topo = spec.topology
    L = topo.num_layers
    schedule = spec.schedule
    for layer in schedule.agg_sets:
        if not 1 <= layer <= L - 1:
            raise ScheduleViolation(
                f"aggregation layer {layer} outside [1, {L - 1}]")

    trace = TrainingTrace(gamma=state.gamma, beta=state.beta)
    trace.initial_loss = losses.global_loss(spec.loss, state.w_global, spec.dataset, topo)
    grad0 = losses.global_gradient(spec.loss, state.w_global, spec.dataset, topo)
    trace.initial_grad_norm = float(np.linalg.norm(grad0))
    state.beta_trace.append((state.w_global.copy(), grad0))

    pool = ThreadPoolExecutor(max_workers=spec.workers) if spec.workers > 1 else None
    parent_layer = max(L - 1, 0)
    subnet_sizes = {c: len(topo.child_ids(parent_layer, c))
                    for c in topo.nodes(parent_layer)}
    try:
        for t in range(1, schedule.rounds + 1):
            K_t = schedule.local_steps[t - 1]
            gamma_t = state.gamma
            s_choice = None
            if spec.control is not None:
                gamma_t = tune_gamma(state.beta, K_t if t == 1
                                     else trace.rows[-1].K_t, spec.control.tau)
                decision = solve_control(
                    spec.control.weights, spec.cost_model, spec.dp, state.stats,
                    k_max=spec.control.k_max, tau_t=state.tau_left,
                    subnet_sizes=subnet_sizes,
                    subnet_secure={c: _subnet_trust_class(topo, c)
                                   for c in subnet_sizes},
                    model_dim=state.dim,
                    n_local_aggs=len(schedule.events_for(spec.control.k_max)),
                    num_layer1=topo.size(1) if L > 1 else 0,
                    interior_uploads=sum(topo.size(x) for x in range(2, L)))
                K_t = decision.K
                s_choice = {"secure": decision.s_secure,
                            "insecure": decision.s_insecure}
            elif spec.participation is not None:
                s_choice = spec.participation

            eta = bounds.step_size(gamma_t, t)

            if s_choice is None:
                participants = {c: list(topo.child_ids(parent_layer, c))
                                for c in topo.nodes(parent_layer)}
            else:
                gen_p = rng.stream(spec.seed, rng.PARTICIPATION, t)
                rates = {}
                for c in subnet_sizes:
                    key = "secure" if _subnet_trust_class(topo, c) else "insecure"
                    want = s_choice.get(key) or subnet_sizes[c]
                    rates[c] = min(int(want), subnet_sizes[c])
                participants = sample_participants(topo, rates, gen_p)

            eff_stats = state.stats
            if any(len(participants[c]) < subnet_sizes[c] for c in subnet_sizes):
                eff_stats = state.stats.with_device_fanout(
                    min(len(v) for v in participants.values()))
            sigmas = state._sigmas(eta, eff_stats)

            active = sorted(j for c in participants for j in participants[c])
            events = schedule.events_for(K_t)
            gens_noise = {}

            batch_gens, step_device = state._sgd_phase(t, K_t, eta, active)
            for k in range(1, K_t + 1):
                if pool is not None:
                    list(pool.map(step_device, active))
                else:
                    for j in active:
                        step_device(j)
                if k in events:
                    target = events[k]
                    if target <= L - 1:
                        values = state._aggregate_pass(t, k, target, participants,
                                                       sigmas, gens_noise)
                        state._broadcast(values, target)
                state.k_total = state.k_total + 1

            state._global_aggregate(t, K_t, participants, sigmas, gens_noise)
            state.ledger.mark_round_complete(t)
            if state.tau_left is not None:
                state.tau_left = max(state.tau_left - K_t, 1)

            grad = losses.global_gradient(spec.loss, state.w_global, spec.dataset, topo)
            state.beta_trace.append((state.w_global.copy(), grad))
            if spec.control is not None and len(state.beta_trace) >= 2:
                try:
                    state.beta = losses.estimate_beta(state.beta_trace[-5:])
                except Exception:
                    pass

            state._charge_round(K_t, events, participants)
            sizes_by_class = {"secure": [], "insecure": []}
            for c in subnet_sizes:
                key = "secure" if _subnet_trust_class(topo, c) else "insecure"
                sizes_by_class[key].append(len(participants[c]))
            trace.rows.append(RoundRecord(
                t=t, k_total=state.k_total, eta=eta, K_t=K_t,
                s_secure=min(sizes_by_class["secure"], default=0),
                s_insecure=min(sizes_by_class["insecure"], default=0),
                global_loss=losses.global_loss(spec.loss, state.w_global,
                                               spec.dataset, topo),
                global_grad_norm=float(np.linalg.norm(grad)),
                energy_j=state.energy, delay_s=state.delay,
                noise_draws=state.draw_count))

            if spec.verify_each_round and spec.dp is not None and spec.noise_enabled:
                all_events = dict(events)
                all_events[K_t + 1] = 1
                rows = verify_node_protection(
                    topo, eff_stats, spec.dp, state.ledger, t, all_events, eta,
                    schedule.K_max, spec.loss.clip_norm, participants=participants)
                bad = [r for r in rows if not r.passed]
                if bad and spec.protocol in (M2FDP, PEDPFL_STAR):
                    raise ProtectionViolated(
                        f"round {t}: {len(bad)} protection checks failed")
    finally:
        if pool is not None:
            pool.shutdown()

    trace.final_model = state.w_global.copy()
    return trace, state.ledger


def run_baseline(kind: str, spec: RunSpec) -> tuple:
    """Run one of the comparison protocols on the spec's task.

    hfl_no_dp disables all noise; hfl_dp_ldp keeps the tree but noises every
    device upload; pedpfl_star flattens the tree to one insecure-served
    cluster with device-level noise.
    """
    if kind == PEDPFL_STAR:
        star = build_topology([spec.topology.num_devices], {}, cloud_secure=False)
        flat_schedule = replace(spec.schedule, agg_sets={})
        dp = spec.dp
        if dp is not None and len(dp.alphas) != 1:
            dp = replace(dp, alphas=(dp.alphas[-1],))
        spec = replace(spec, topology=star, protocol=PEDPFL_STAR,
                       schedule=flat_schedule, dp=dp)
    elif kind in (HFL_NO_DP, HFL_DP_LDP, M2FDP):
        spec = replace(spec, protocol=kind)
    else:
        raise ScheduleViolation(f"unknown baseline {kind!r}")
    return run_training(spec)
