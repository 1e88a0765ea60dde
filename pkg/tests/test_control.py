import pytest

from tierfl import (CostModel, DPConfig, ObjectiveWeights, brute_force_control,
                    delay_objective, energy_objective, gap_objective,
                    solve_control, tune_gamma)
from tierfl.control import ControlContext, dbm_to_watts
from tierfl.errors import InfeasibleConstraints, SearchSpaceTooLarge
from tierfl.topology import TrustStats

from conftest import assert_close


def make_stats(p_min, fanouts):
    return TrustStats(num_layers=len(p_min) - 1, p={}, p_min=tuple(p_min),
                      p_max=tuple(p_min), fanout_min=tuple(fanouts))


COST = CostModel()  # paper-style radio parameters


def _ctx(tau=1000, aggs=4, sizes=None, secure=None, layers=2, n1=4, interior=0):
    sizes = sizes or {0: 8, 1: 8, 2: 8, 3: 8}
    secure = secure if secure is not None else {c: c < 2 for c in sizes}
    return ControlContext(tau_t=tau, n_local_aggs=aggs, subnet_sizes=sizes,
                          subnet_secure=secure, interior_uploads=interior,
                          num_layer1=n1, num_layers=layers)


def _dp(L=2):
    return DPConfig(epsilon=1.0, delta=1e-5, sample_rate=0.5, rounds=200,
                    alphas=(1.0,) * L)


def test_dbm_conversion_and_link_costs():
    assert_close(dbm_to_watts(24.0), 0.251188643150958)
    assert_close(COST.wireless_upload_delay(), 7840 * 32 / 35e6)
    assert_close(COST.wireless_upload_energy(),
                 dbm_to_watts(24.0) * 7840 * 32 / 35e6)
    assert abs(COST.wireless_upload_energy() - 1.8006e-3) < 1e-6
    assert_close(COST.cloud_upload_delay(), 2.5088e-3)


def test_energy_objective_structure():
    ctx = _ctx()
    s_map = {c: 4 for c in ctx.subnet_sizes}
    e1 = energy_objective(10, s_map, COST, ctx)
    e2 = energy_objective(20, s_map, COST, ctx)
    # compute part tau * sum(s) * E_iter survives unchanged; comm part halves
    compute = ctx.tau_t * 16 * COST.compute_energy
    assert_close(e2 - compute, (e1 - compute) / 2)


def test_delay_objective_flat_in_s():
    ctx = _ctx()
    d_small = delay_objective(10, {c: 1 for c in ctx.subnet_sizes}, COST, ctx)
    d_big = delay_objective(10, {c: 8 for c in ctx.subnet_sizes}, COST, ctx)
    assert d_small == d_big
    assert delay_objective(20, {c: 1 for c in ctx.subnet_sizes}, COST, ctx) < d_small


def test_gap_objective_scalings():
    stats = make_stats([0.0, 0.5, 1.0], [1, 8, 1])
    dp = _dp()
    s4 = {0: 4, 1: 4, 2: 4, 3: 4}
    s8 = {0: 8, 1: 8, 2: 8, 3: 8}
    g4 = gap_objective(5, s4, dp, stats, 10)
    g8 = gap_objective(5, s8, dp, stats, 10)
    assert g8 < g4
    assert_close(gap_objective(10, s4, dp, stats, 10), g4 * 16)
    trusted = make_stats([1.0, 1.0, 1.0], [1, 8, 1])
    assert gap_objective(5, s4, _dp(), trusted, 10) == 0.0


def test_tune_gamma():
    assert tune_gamma(2.0, 10, 100) == 0.005
    assert tune_gamma(2.0, 200, 100) == 1 / (200 * 2.0)
    with pytest.raises(InfeasibleConstraints):
        tune_gamma(0.0, 10, 100)


def _solve(weights, stats, sizes, secure, k_max=20, tau=1000, dp=None, aggs=4):
    return solve_control(weights, COST, dp if dp is not None else _dp(stats.num_layers),
                         stats, k_max=k_max, tau_t=tau, subnet_sizes=sizes,
                         subnet_secure=secure, model_dim=10, n_local_aggs=aggs,
                         num_layer1=4, interior_uploads=0)


def test_resource_only_weights_pick_extremes():
    stats = make_stats([0.0, 0.5, 1.0], [1, 8, 1])
    sizes = {c: 8 for c in range(4)}
    secure = {0: True, 1: True, 2: False, 3: False}
    out = _solve(ObjectiveWeights(1.0, 1.0, 0.0), stats, sizes, secure)
    assert out.K == 20 and out.s_secure == 1 and out.s_insecure == 1


def test_gap_only_weights_pick_opposite_extremes():
    stats = make_stats([0.0, 0.5, 1.0], [1, 8, 1])
    sizes = {c: 8 for c in range(4)}
    secure = {0: True, 1: True, 2: False, 3: False}
    out = _solve(ObjectiveWeights(0.0, 0.0, 1.0), stats, sizes, secure)
    assert out.K == 1 and out.s_secure == 8 and out.s_insecure == 8


def test_fully_trusted_gap_ties_break_small():
    stats = make_stats([1.0, 1.0, 1.0], [1, 8, 1])
    sizes = {c: 8 for c in range(4)}
    secure = {c: True for c in range(4)}
    out = _solve(ObjectiveWeights(0.0, 0.0, 1.0), stats, sizes, secure)
    assert out.K == 1 and out.s_secure == 1


def test_objective_recomputes_at_returned_point():
    stats = make_stats([0.0, 0.5, 1.0], [1, 8, 1])
    sizes = {c: 8 for c in range(4)}
    secure = {0: True, 1: True, 2: False, 3: False}
    weights = ObjectiveWeights(2.0, 0.5, 1e-4)
    out = _solve(weights, stats, sizes, secure)
    ctx = _ctx(sizes=sizes, secure=secure)
    e = energy_objective(out.K, out.s_map, COST, ctx)
    d = delay_objective(out.K, out.s_map, COST, ctx)
    g = gap_objective(out.K, out.s_map, _dp(), stats, 10)
    recomputed = weights.energy * e + weights.delay * d + weights.gap * g
    assert abs(recomputed - out.objective) <= 1e-9 * max(abs(recomputed), 1.0)


@pytest.mark.parametrize("secure_class", [True, False])
def test_reduced_matches_brute_force_on_homogeneous(secure_class):
    stats = make_stats([0.0, 0.0 if not secure_class else 1.0, 1.0], [1, 8, 1])
    sizes = {c: 8 for c in range(4)}
    secure = {c: secure_class for c in range(4)}
    weights = ObjectiveWeights(1.0, 1.0, 2e-5)
    kwargs = dict(k_max=20, tau_t=1000, subnet_sizes=sizes, subnet_secure=secure,
                  model_dim=10, n_local_aggs=4, num_layer1=4, interior_uploads=0)
    fast = solve_control(weights, COST, _dp(), stats, **kwargs)
    slow = brute_force_control(weights, COST, _dp(), stats, **kwargs)
    assert fast.objective == slow.objective
    assert (fast.K, fast.s_secure, fast.s_insecure) == \
        (slow.K, slow.s_secure, slow.s_insecure)


def test_brute_force_never_worse_on_mixed_instance():
    stats = make_stats([0.0, 0.5, 1.0], [1, 6, 1])
    sizes = {0: 6, 1: 6, 2: 6}
    secure = {0: True, 1: False, 2: False}
    weights = ObjectiveWeights(1.0, 1.0, 1e-4)
    kwargs = dict(k_max=10, tau_t=500, subnet_sizes=sizes, subnet_secure=secure,
                  model_dim=10, n_local_aggs=4, num_layer1=3, interior_uploads=0)
    fast = solve_control(weights, COST, _dp(), stats, **kwargs)
    slow = brute_force_control(weights, COST, _dp(), stats, **kwargs)
    assert slow.objective <= fast.objective + 1e-12
    # the reduction's optimality loss on this instance stays tiny
    assert fast.objective <= slow.objective * 1.05


def test_search_space_guard():
    stats = make_stats([0.0, 0.5, 1.0], [1, 40, 1])
    sizes = {c: 40 for c in range(5)}
    secure = {c: True for c in range(5)}
    with pytest.raises(SearchSpaceTooLarge):
        brute_force_control(ObjectiveWeights(1, 1, 1), COST, _dp(), stats,
                            k_max=40, tau_t=10 ** 6, subnet_sizes=sizes,
                            subnet_secure=secure, model_dim=10, n_local_aggs=4)


def test_infeasible_constraints():
    stats = make_stats([0.0, 0.5, 1.0], [1, 8, 1])
    with pytest.raises(InfeasibleConstraints):
        solve_control(ObjectiveWeights(1, 1, 1), COST, _dp(), stats, k_max=0,
                      tau_t=10, subnet_sizes={0: 4}, subnet_secure={0: True},
                      model_dim=10, n_local_aggs=4)
    with pytest.raises(InfeasibleConstraints):
        ObjectiveWeights(0.0, 0.0, 0.0)


def test_weight_sweep_monotone_trends():
    # L=2 fully-insecure instance keeps the gap's s-dependence mild, so the
    # direct weight effects dominate and the trends are clean.  Resource
    # sweeps keep the gap weight negligible: a rising K discounts the upload
    # energy of extra devices by tau/K, so a competitive gap weight can pull
    # participation back up and blur the trend.
    stats = make_stats([0.0, 0.0, 1.0], [1, 8, 1])
    sizes = {c: 8 for c in range(4)}
    secure = {c: False for c in range(4)}
    grid = [0.125, 0.5, 2.0, 8.0, 32.0]

    for axis in ("energy", "delay"):
        outs = []
        for v in grid:
            w = {"energy": 1.0, "delay": 1.0, "gap": 1e-8}
            w[axis] = w[axis] * v
            outs.append(_solve(ObjectiveWeights(w["energy"], w["delay"], w["gap"]),
                               stats, sizes, secure))
        ks = [o.K for o in outs]
        ss = [o.s_insecure for o in outs]
        assert all(a <= b for a, b in zip(ks, ks[1:])), (axis, ks)
        assert all(a >= b for a, b in zip(ss, ss[1:])), (axis, ss)

    outs = [_solve(ObjectiveWeights(1.0, 1.0, g), stats, sizes, secure)
            for g in (2e-9, 2e-7, 2e-5, 2e-3, 2e-1, 2e1)]
    ks = [o.K for o in outs]
    ss = [o.s_insecure for o in outs]
    assert all(a >= b for a, b in zip(ks, ks[1:])), ks
    assert all(a <= b for a, b in zip(ss, ss[1:])), ss
    assert ss[-1] > ss[0]  # participation really rises once the gap dominates


def test_compute_energy_sweep_shrinks_participation():
    stats = make_stats([0.0, 0.0, 1.0], [1, 8, 1])
    sizes = {c: 8 for c in range(4)}
    secure = {c: False for c in range(4)}
    weights = ObjectiveWeights(1.0, 1.0, 2e-5)
    chosen = []
    for scale in (0.01, 0.1, 1.0, 10.0, 100.0):
        cm = CostModel(compute_energy=1e-3 * scale)
        out = solve_control(weights, cm, _dp(), stats, k_max=20, tau_t=1000,
                            subnet_sizes=sizes, subnet_secure=secure,
                            model_dim=10, n_local_aggs=4, num_layer1=4)
        chosen.append(out.s_insecure)
    assert all(a >= b for a, b in zip(chosen, chosen[1:])), chosen
