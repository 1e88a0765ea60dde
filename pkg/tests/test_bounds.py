import math

import numpy as np
import pytest

from tierfl.bounds import (bound_report, convergence_bound, gap_prefactor,
                           layer_noise_terms, max_step_scale, noise_gap,
                           secure_prefix_bound, step_size)
from tierfl.errors import InadmissibleStepSize, PreconditionViolated
from tierfl.topology import TrustStats

from conftest import assert_close


def make_stats(p_min, p_max, fanouts):
    L = len(p_min) - 1
    return TrustStats(num_layers=L, p={}, p_min=tuple(p_min), p_max=tuple(p_max),
                      fanout_min=tuple(fanouts))


WORKED = make_stats([0.0, 0.5, 1.0], [0.0, 0.5, 1.0], [1, 5, 1])


def test_worked_two_layer_terms():
    terms = layer_noise_terms(WORKED, [1.0, 1.0])
    assert_close(terms[0].at_layer, 0.02)
    assert_close(terms[0].midpath, 0.02)
    assert_close(terms[0].at_device, 0.10)
    assert_close(terms[1].at_layer, 1.0)
    assert terms[1].midpath == 0.0
    assert_close(terms[1].at_device, 1.0)


def test_fully_trusted_prefactors_vanish():
    stats = make_stats([1.0, 1.0, 1.0], [1.0, 1.0, 1.0], [1, 5, 1])
    assert noise_gap(stats, [1.0, 1.0], M=10, K_max=5, q=0.1, epsilon=1.0,
                     delta=1e-5) == 0.0


def test_alpha_quadratic_scaling():
    base = layer_noise_terms(WORKED, [1.0, 1.0])
    doubled = layer_noise_terms(WORKED, [2.0, 2.0])
    for a, b in zip(base, doubled):
        assert_close(b.at_layer, 4 * a.at_layer if a.at_layer else 0.0)
        assert_close(b.total, 4 * a.total)


def test_worked_gap_value():
    # 8*2*10*5^4*0.01*ln(1e5)*0.64, chained from the worked layer terms
    gap = noise_gap(WORKED, [1.0, 1.0], M=10, K_max=5, q=0.1, epsilon=1.0, delta=1e-5)
    expected = 8 * 2 * 10 * 5 ** 4 * 0.01 * math.log(1e5) * 0.64
    assert_close(gap, expected)
    assert abs(gap - 7368.272297580947) < 0.1


def test_gap_epsilon_and_k_scaling():
    kw = dict(M=10, K_max=5, q=0.1, delta=1e-5)
    g1 = noise_gap(WORKED, [1.0, 1.0], epsilon=1.0, **kw)
    g2 = noise_gap(WORKED, [1.0, 1.0], epsilon=2.0, **kw)
    assert_close(g2, g1 / 4)
    g16 = noise_gap(WORKED, [1.0, 1.0], M=10, K_max=10, q=0.1, epsilon=1.0, delta=1e-5)
    assert_close(g16, g1 * 16)


def test_gap_invariant_to_m_q2_rescaling():
    g1 = noise_gap(WORKED, [1.0, 1.0], M=16, K_max=5, q=0.2, epsilon=1.0, delta=1e-5)
    g2 = noise_gap(WORKED, [1.0, 1.0], M=64, K_max=5, q=0.1, epsilon=1.0, delta=1e-5)
    assert_close(g1, g2)


def test_gap_monotone_in_fanout_and_trust():
    # nonincreasing when any fanout grows or a layer's (coupled) ratio grows
    gen = np.random.default_rng(17)
    for _ in range(40):
        L = int(gen.integers(2, 5))
        p = [float(gen.integers(0, 3)) / 2 for _ in range(L - 1)]
        p_min = [0.0] + p + [1.0]
        fan = [1] + [int(gen.integers(2, 7)) for _ in range(L - 1)] + [1]
        alphas = [1.0] * L
        stats = make_stats(p_min, p_min, fan)
        base = noise_gap(stats, alphas, M=8, K_max=4, q=0.2, epsilon=1.0, delta=1e-5)
        layer = int(gen.integers(1, L))
        grown = list(fan)
        grown[layer] += 1
        assert noise_gap(make_stats(p_min, p_min, grown), alphas, M=8, K_max=4,
                         q=0.2, epsilon=1.0, delta=1e-5) <= base + 1e-12
        bumped = list(p_min)
        if bumped[layer] < 1.0:
            bumped[layer] = min(1.0, bumped[layer] + 0.5)
            higher = noise_gap(make_stats(bumped, bumped, fan), alphas, M=8,
                               K_max=4, q=0.2, epsilon=1.0, delta=1e-5)
            assert higher <= base + 1e-12


def test_convergence_bound_arithmetic():
    out = convergence_bound(1.0, 1.0, 0.0, 1.0, 100, 1, gap=0.0)
    assert_close(out["rhs"], 2.0 / math.sqrt(101.0) + 0.02)


def test_bound_asymptote_is_gap():
    gap = 3.5
    for T in (10 ** 4, 10 ** 6, 10 ** 8):
        out = convergence_bound(1.0, 1.0, 0.1, 1.0, T, 1, gap=gap)
        assert out["rhs"] >= gap
    assert abs(convergence_bound(1.0, 1.0, 0.1, 1.0, 10 ** 10, 1, gap=gap)["rhs"]
               - gap) < 1e-4


def test_bound_gap_term_composes():
    gap = noise_gap(WORKED, [1.0, 1.0], M=10, K_max=5, q=0.1, epsilon=1.0, delta=1e-5)
    out = convergence_bound(2.0, 1.0, 0.5, 1.0, 50, 5, gap=gap)
    assert out["rhs"] == out["opt_a1"] + out["opt_a2"] + gap


def test_inadmissible_step_rejected():
    with pytest.raises(InadmissibleStepSize):
        convergence_bound(2.0, 1.0, 0.0, 1.0, 100, 10, gap=0.0, gamma=0.006)


def test_max_step_scale_and_schedule():
    assert max_step_scale(2.0, 10, 100) == 0.005
    assert step_size(0.4, 0) == 0.4
    etas = [step_size(0.4, t) for t in range(1, 30)]
    assert all(a > b for a, b in zip(etas, etas[1:]))


def test_secure_prefix_m0_residual_zero():
    stats = make_stats([1.0, 1.0, 1.0], [1.0, 1.0, 1.0], [1, 5, 1])
    out = secure_prefix_bound(stats, [1.0, 1.0], 0, M=10, K_max=5, q=0.1,
                              epsilon=1.0, delta=1e-5, beta=1.0, clip_norm=1.0,
                              sgd_noise_var=0.0, loss_drop=1.0, T=100)
    assert out.residual_part == 0.0
    assert out.secure_part == 0.0


def test_secure_prefix_ratio_uniform():
    stats = make_stats([0.0, 0.5, 1.0, 1.0, 1.0], [0.0, 0.5, 1.0, 1.0, 1.0],
                       [1, 4, 4, 4, 1])
    for m in (2, 3):
        out = secure_prefix_bound(stats, [1.0] * 4, m, M=10, K_max=5, q=0.1,
                                  epsilon=1.0, delta=1e-5, beta=1.0, clip_norm=1.0,
                                  sgd_noise_var=0.0, loss_drop=1.0, T=100)
        assert_close(out.ratio_to_prev, 4.0)


def test_secure_prefix_ratio_heterogeneous_fanouts():
    stats = make_stats([0.0, 0.5, 1.0, 1.0, 1.0], [0.0, 0.5, 1.0, 1.0, 1.0],
                       [1, 3, 5, 7, 1])
    for m, expected in ((2, 5.0), (3, 7.0)):
        out = secure_prefix_bound(stats, [1.0] * 4, m, M=10, K_max=5, q=0.1,
                                  epsilon=1.0, delta=1e-5, beta=1.0, clip_norm=1.0,
                                  sgd_noise_var=0.0, loss_drop=1.0, T=100)
        assert_close(out.ratio_to_prev, expected)


def test_secure_prefix_precondition():
    stats = make_stats([0.0, 0.5, 0.5, 1.0], [0.0, 0.5, 0.5, 1.0], [1, 4, 4, 1])
    with pytest.raises(PreconditionViolated):
        secure_prefix_bound(stats, [1.0] * 3, 1, M=10, K_max=5, q=0.1,
                            epsilon=1.0, delta=1e-5, beta=1.0, clip_norm=1.0,
                            sgd_noise_var=0.0, loss_drop=1.0, T=100)


def test_secure_prefix_matches_device_terms_when_fully_insecure():
    # boundary at the deepest layer: the residual equals the device-noise
    # contributions of the full evaluator for layers below L
    stats = make_stats([0.0, 0.0, 0.0, 1.0], [0.0, 0.0, 0.0, 1.0], [1, 3, 4, 1])
    alphas = [1.0, 1.0, 1.0]
    out = secure_prefix_bound(stats, alphas, 2, M=10, K_max=5, q=0.1,
                              epsilon=1.0, delta=1e-5, beta=1.0, clip_norm=1.0,
                              sgd_noise_var=0.0, loss_drop=1.0, T=100)
    terms = layer_noise_terms(stats, alphas)
    pref = gap_prefactor(10, 5, 0.1, 1.0, 1e-5, 3)
    device_part = pref * sum((1.0 - stats.p_min[l - 1]) ** 2 * terms[l - 1].at_device
                             for l in (1, 2))
    assert_close(out.residual_part, device_part)
    assert out.secure_part == 0.0


def test_bound_report_roundtrip():
    report = bound_report(WORKED, [1.0, 1.0], M=10, K_max=5, q=0.1, epsilon=1.0,
                          delta=1e-5, T=100, beta=1.0, clip_norm=1.0,
                          sgd_noise_var=0.0, loss_drop=1.0)
    doc = report.to_dict()
    assert doc["gap"] == report.gap
    assert doc["rhs"] == report.opt_a1 + report.opt_a2 + report.gap
    assert len(doc["terms"]) == 2
