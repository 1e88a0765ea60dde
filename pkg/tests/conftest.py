import pytest

from tierfl import (DPConfig, LossSpec, build_topology, default_alphas,
                    derive_trust_stats, generate_synthetic)
from tierfl.topology import trust_from_layer_ratios


def make_topology(layer_sizes, ratios, cloud_secure=False):
    trust = trust_from_layer_ratios(layer_sizes, ratios, cloud_secure=cloud_secure)
    return build_topology(layer_sizes, trust, cloud_secure=cloud_secure)


@pytest.fixture
def default_topology():
    """Two-tier tree: 4 subnets x 5 devices, half the subnets secure."""
    return make_topology([4, 20], [0.5])


@pytest.fixture
def default_stats(default_topology):
    return derive_trust_stats(default_topology)


@pytest.fixture
def small_dataset():
    return generate_synthetic(20, 30, 5, 2, heterogeneity=0.5, seed=1)


@pytest.fixture
def logistic_spec():
    return LossSpec(kind="logistic", l2=0.05, clip_norm=5.0)


def make_dp(topology, rounds, epsilon=1.0, q=0.5, c1=100.0):
    # c1 loosened so short unit-test horizons satisfy the accountant premise
    return DPConfig(epsilon=epsilon, delta=1e-5, sample_rate=q, rounds=rounds,
                    alphas=default_alphas(topology), premise_c1=c1)


def rel_err(a, b):
    denom = max(abs(b), 1e-300)
    return abs(a - b) / denom


def assert_close(a, b, tol=1e-9):
    assert rel_err(a, b) <= tol, f"{a} vs {b} (rel {rel_err(a, b):.2e})"
