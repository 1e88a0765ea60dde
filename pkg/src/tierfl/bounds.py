"""Closed-form convergence-bound evaluation.

Evaluates the sublinear-rate bound for the noisy hierarchical protocol: the
optimization terms, the per-layer noise decomposition, the resulting
stationarity gap, and the secure-prefix specialisation.  Empty products are
1 and empty sums are 0 throughout, which makes the single-layer and
device-layer edge cases well defined.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, asdict

from .errors import InadmissibleStepSize, PreconditionViolated
from .topology import TrustStats


@dataclass(frozen=True)
class LayerNoiseTerms:
    """Per-layer decomposition of DP-noise impact.

    at_layer: noise injected by this layer's own (secure) aggregators.
    midpath:  noise injected strictly between this layer and the devices.
    at_device: noise injected at the edge devices and diluted upward.
    """

    at_layer: float
    midpath: float
    at_device: float

    @property
    def total(self) -> float:
        return self.at_layer + self.midpath + self.at_device


def _prod(values) -> float:
    return math.prod(values) if values else 1.0


def layer_noise_terms(stats: TrustStats, alphas) -> list:
    """The three noise contributions for each layer 1..L.

    `alphas[l-1]` is the accountant constant for layer l.  The midpath sum
    at its first index duplicates the at_layer term under the literal
    empty-product convention; that overlap is kept as stated.
    """
    L = stats.num_layers
    s = stats.fanout_min
    p_min, p_max = stats.p_min, stats.p_max
    a = [float(alphas[l - 1]) for l in range(1, L + 1)]

    out = []
    for l in range(1, L + 1):
        sq = _prod([s[x] ** 2 for x in range(l, L)])
        at_layer = p_max[l] * a[l - 1] ** 2 / sq

        midpath = 0.0
        for m in range(l, L):
            carried = _prod([(1.0 - p_min[x]) for x in range(l, m)]) * p_max[m]
            denom = _prod([s[x] for x in range(l, m)]) * _prod([s[x] ** 2 for x in range(m, L)])
            midpath += carried * a[m - 1] ** 2 / denom

        lin = _prod([s[x] for x in range(l, L)])
        at_device = _prod([(1.0 - p_min[x]) for x in range(l, L)]) * a[L - 1] ** 2 / lin

        out.append(LayerNoiseTerms(at_layer, midpath, at_device))
    return out


def gap_prefactor(M: int, K_max: int, q: float, epsilon: float, delta: float,
                  num_layers: int) -> float:
    return (8.0 * num_layers * M * K_max ** 4 * q ** 2
            * math.log(1.0 / delta) / epsilon ** 2)


def noise_gap(stats: TrustStats, alphas, M: int, K_max: int, q: float,
              epsilon: float, delta: float, terms=None) -> float:
    """Stationarity gap: the non-vanishing bound term caused by DP noise."""
    if terms is None:
        terms = layer_noise_terms(stats, alphas)
    weighted = sum((1.0 - stats.p_min[l - 1]) ** 2 * terms[l - 1].total
                   for l in range(1, stats.num_layers + 1))
    return gap_prefactor(M, K_max, q, epsilon, delta, stats.num_layers) * weighted


def max_step_scale(beta: float, K_max: int, T: int) -> float:
    """Largest admissible step-size scale: min(1/K_max, 1/T) / beta."""
    return min(1.0 / K_max, 1.0 / T) / beta


def step_size(gamma: float, t: int) -> float:
    """Decaying schedule: gamma / sqrt(t + 1), with t counted from 1."""
    return gamma / math.sqrt(t + 1)


def convergence_bound(beta: float, clip_norm: float, sgd_noise_var: float,
                      loss_drop: float, T: int, K_max: int, gap: float,
                      gamma: float | None = None) -> dict:
    """Full right-hand side of the cumulative-gradient bound.

    Returns the optimization terms and their sum with the supplied gap.
    Raises InadmissibleStepSize when gamma exceeds the admissible scale.
    """
    limit = max_step_scale(beta, K_max, T)
    if gamma is None:
        gamma = limit
    if gamma > limit * (1.0 + 1e-12):
        raise InadmissibleStepSize(f"gamma {gamma} exceeds admissible {limit}")
    opt_a1 = 2.0 * beta / math.sqrt(T + 1) * loss_drop
    opt_a2 = K_max * (clip_norm ** 2 * (1.0 + 1.0 / beta) + sgd_noise_var) / T
    return {"opt_a1": opt_a1, "opt_a2": opt_a2, "gap": gap,
            "rhs": opt_a1 + opt_a2 + gap, "gamma": gamma}


@dataclass(frozen=True)
class SecurePrefixBound:
    """Bound specialisation when every layer below `m` is fully secure."""

    lowest_insecure_layer: int
    secure_part: float          # prefactor times the squared-dilution sum
    residual_part: float        # prefactor times the linear-dilution sum (term c)
    residual_prev: float        # same sum evaluated at m-1, for the ratio
    ratio_to_prev: float        # residual_part / residual_prev
    rhs: float


def _residual_sum(stats: TrustStats, alpha_primes, m: int) -> float:
    L = stats.num_layers
    s = stats.fanout_min
    total = 0.0
    for l in range(1, m + 1):
        denom = (_prod([s[x] for x in range(l, m + 1)])
                 * _prod([s[x] ** 2 for x in range(m + 1, L)]))
        total += ((1.0 - stats.p_min[l - 1]) ** 2 * (1.0 - stats.p_min[l])
                  * float(alpha_primes[l - 1]) ** 2 / denom)
    return total


def secure_prefix_bound(stats: TrustStats, alphas, m: int, M: int, K_max: int,
                        q: float, epsilon: float, delta: float, beta: float,
                        clip_norm: float, sgd_noise_var: float, loss_drop: float,
                        T: int, alpha_primes=None) -> SecurePrefixBound:
    """Evaluate the bound under the secure-prefix condition.

    Requires every intermediate layer strictly below m (indices m+1..L) to be
    fully secure.  `alpha_primes` default to `alphas`.  The residual term is
    also evaluated at m-1 so callers can check how much one extra secure
    layer shrinks it.
    """
    L = stats.num_layers
    if not 0 <= m <= L - 1:
        raise PreconditionViolated(f"lowest insecure layer {m} outside [0, {L - 1}]")
    for l in range(m + 1, L + 1):
        if abs(stats.p_min[l] - 1.0) > 1e-12 or abs(stats.p_max[l] - 1.0) > 1e-12:
            raise PreconditionViolated(
                f"layer {l} is not fully secure (p_min={stats.p_min[l]})")
    if alpha_primes is None:
        alpha_primes = alphas

    pref = gap_prefactor(M, K_max, q, epsilon, delta, L)
    s = stats.fanout_min
    secure_sum = 0.0
    for l in range(1, m + 1):
        denom = _prod([s[x] ** 2 for x in range(l, L)])
        secure_sum += ((1.0 - stats.p_min[l - 1]) ** 2 * stats.p_max[l]
                       * float(alphas[l - 1]) ** 2 / denom)

    residual = pref * _residual_sum(stats, alpha_primes, m)
    residual_prev = pref * _residual_sum(stats, alpha_primes, m - 1) if m >= 1 else 0.0
    ratio = residual / residual_prev if residual_prev > 0 else math.inf

    opt = convergence_bound(beta, clip_norm, sgd_noise_var, loss_drop, T, K_max, gap=0.0)
    rhs = opt["opt_a1"] + opt["opt_a2"] + pref * secure_sum + residual
    return SecurePrefixBound(lowest_insecure_layer=m, secure_part=pref * secure_sum,
                             residual_part=residual, residual_prev=residual_prev,
                             ratio_to_prev=ratio, rhs=rhs)


@dataclass(frozen=True)
class BoundReport:
    """Everything the bound evaluator saw and produced, for artifact output."""

    num_layers: int
    model_dim: int
    K_max: int
    q: float
    epsilon: float
    delta: float
    T: int
    beta: float
    clip_norm: float
    sgd_noise_var: float
    loss_drop: float
    gamma: float
    p_min: tuple
    p_max: tuple
    fanout_min: tuple
    alphas: tuple
    terms: tuple                # per-layer (at_layer, midpath, at_device)
    prefactor: float
    gap: float
    gap_log10: float
    opt_a1: float
    opt_a2: float
    rhs: float

    def to_dict(self) -> dict:
        return asdict(self)


def bound_report(stats: TrustStats, alphas, M: int, K_max: int, q: float,
                 epsilon: float, delta: float, T: int, beta: float,
                 clip_norm: float, sgd_noise_var: float, loss_drop: float,
                 gamma: float | None = None) -> BoundReport:
    """Assemble the full report behind the `bound-report` CLI output."""
    terms = layer_noise_terms(stats, alphas)
    gap = noise_gap(stats, alphas, M, K_max, q, epsilon, delta, terms=terms)
    opt = convergence_bound(beta, clip_norm, sgd_noise_var, loss_drop, T, K_max,
                            gap=gap, gamma=gamma)
    return BoundReport(
        num_layers=stats.num_layers, model_dim=M, K_max=K_max, q=q,
        epsilon=epsilon, delta=delta, T=T, beta=beta, clip_norm=clip_norm,
        sgd_noise_var=sgd_noise_var, loss_drop=loss_drop, gamma=opt["gamma"],
        p_min=stats.p_min, p_max=stats.p_max, fanout_min=stats.fanout_min,
        alphas=tuple(float(a) for a in alphas),
        terms=tuple((x.at_layer, x.midpath, x.at_device) for x in terms),
        prefactor=gap_prefactor(M, K_max, q, epsilon, delta, stats.num_layers),
        gap=gap, gap_log10=math.log10(gap) if gap > 0 else -math.inf,
        opt_a1=opt["opt_a1"], opt_a2=opt["opt_a2"], rhs=opt["rhs"])
