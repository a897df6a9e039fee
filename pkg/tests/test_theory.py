import math

import numpy as np
import pytest

from ftrobust import theory
from ftrobust.errors import ConfigError, ContractError


def phi(z):
    return 0.5 * (1 + math.erf(z / math.sqrt(2)))


def phi_inv(p):
    lo, hi = -10.0, 10.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if phi(mid) < p else (lo, mid)
    return 0.5 * (lo + hi)


def test_eta_bound_value():
    assert theory.eta_lower_bound(0, 100) == pytest.approx(0.2326, abs=5e-5)
    assert theory.eta_lower_bound(0, 100) == pytest.approx(phi_inv(0.99) / 10, rel=1e-9)


@pytest.mark.parametrize("d,k", [(10, 0), (100, 50), (500, 500), (37, 20)])
def test_closed_forms_against_erf(d, k):
    eta = theory.eta_lower_bound(k, d)
    p = theory.TheoryParams(d=d, k=k, eta=eta)
    assert theory.ft_accuracy_closed(p) == pytest.approx(0.99, abs=1e-12)
    assert theory.adv_accuracy_closed(p, 0.05) == pytest.approx(phi(math.sqrt(k + d) * (eta - 0.05)), abs=1e-12)
    assert theory.ft_accuracy_overlap_closed(p) == pytest.approx(
        phi((d + k) * eta / math.sqrt(d + 3 * k)), abs=1e-12)


def test_params_validation():
    with pytest.raises(ConfigError):
        theory.TheoryParams(d=0)
    with pytest.raises(ConfigError):
        theory.TheoryParams(d=5, k=6)
    with pytest.raises(ConfigError):
        theory.TheoryParams(d=5, eta=-1)
    with pytest.raises(ConfigError):
        theory.eta_lower_bound(0, 10, 1.0)


def test_mc_needs_enough_samples():
    p = theory.TheoryParams(d=10)
    with pytest.raises(ContractError):
        theory.monte_carlo_accuracy(theory.LinearFtClassifier.for_params(p), p, 999)


def test_fused_and_materialised_paths_agree():
    p = theory.TheoryParams(d=20, k=10, eta=0.3)
    clf = theory.LinearFtClassifier.for_params(p)
    a = theory.monte_carlo_accuracy(clf, p, 20_000, seed=5)
    b = theory.monte_carlo_accuracy(clf, p, 20_000, seed=5, fused=False)
    assert a.accuracy == b.accuracy


def test_sample_matches_kernel_stream():
    p = theory.TheoryParams(d=8, k=4, eta=0.4)
    x, y = theory.sample(p, 5000, seed=3)
    clf = theory.LinearFtClassifier.for_params(p)
    manual = np.count_nonzero(clf.scores(x) * y > 0) / 5000
    assert manual == theory.monte_carlo_accuracy(clf, p, 5000, seed=3).accuracy


def test_sample_statistics():
    p = theory.TheoryParams(d=5, k=0, eta=0.5, p=0.9)
    x, y = theory.sample(p, 200_000, seed=0)
    assert abs(np.mean(x[:, 0] == y) - 0.9) < 0.005
    assert abs(np.mean(x[:, 1:] * y[:, None]) - 0.5) < 0.01
    assert abs(np.mean(y == 1) - 0.5) < 0.005


@pytest.mark.parametrize("d,k", [(100, 0), (100, 100), (40, 15)])
def test_mc_hits_target(d, k):
    p = theory.TheoryParams(d=d, k=k, eta=theory.eta_lower_bound(k, d))
    est = theory.monte_carlo_accuracy(theory.LinearFtClassifier.for_params(p), p, 200_000, seed=d + k)
    assert est.within(0.99)


def test_overlap_layout_mc():
    d, k = 50, 50
    p = theory.TheoryParams(d=d, k=k, eta=theory.eta_lower_bound(k, d))
    clf = theory.LinearFtClassifier.for_params(p, layout="overlap")
    est = theory.monte_carlo_accuracy(clf, p, 200_000, seed=1)
    assert est.within(theory.ft_accuracy_overlap_closed(p))
    assert not est.within(0.99)


def test_support_permutation_invariance():
    d, k = 30, 10
    p = theory.TheoryParams(d=d, k=k, eta=0.3)
    rng = np.random.default_rng(0)
    perm = rng.permutation(np.arange(1, d + k + 1))
    clf = theory.LinearFtClassifier(d, k, support0=perm[:d], support_delta=perm[d:])
    est = theory.monte_carlo_accuracy(clf, p, 100_000, seed=2)
    assert est.within(theory.ft_accuracy_closed(p))


def test_supports_validated():
    with pytest.raises(ConfigError):
        theory.LinearFtClassifier(3, 2, support0=[1, 2, 3], support_delta=[3, 4])
    with pytest.raises(ConfigError):
        theory.LinearFtClassifier(3, 2, layout="diagonal")


def test_adversarial_mc_matches_closed_form():
    p = theory.TheoryParams(d=60, k=30, eta=0.25)
    clf = theory.LinearFtClassifier.for_params(p)
    est = theory.monte_carlo_accuracy(clf, p, 50_000, epsilon=0.1, seed=4, steps=3)
    assert est.within(theory.adv_accuracy_closed(p, 0.1))


def test_grid_rows():
    rows = theory.theory_grid([20], [0, 20], ["auto"], [0.0, 0.05], n=2000)
    assert len(rows) == 4
    assert {r["k"] for r in rows} == {0, 20}
    assert all(r["closed_acc"] == pytest.approx(0.99) for r in rows)
