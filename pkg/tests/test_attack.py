import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ftrobust import model as vit
from ftrobust.attack import AttackConfig, VitOracle, pgd, robust_accuracy
from ftrobust.errors import AttackError, ConfigError, DataError


def linear_oracle(w):
    def loss_grad(x, y):
        return -float((y * (x @ w)).sum()), -y[:, None] * w[None, :]
    return loss_grad


def test_default_budget():
    cfg = AttackConfig()
    assert cfg.epsilon == 1 / 255 and cfg.alpha == 0.25 / 255 and cfg.steps == 15


def test_config_validation():
    with pytest.raises(ConfigError):
        AttackConfig(epsilon=-1)
    with pytest.raises(ConfigError):
        AttackConfig(epsilon=0.1, alpha=0.2)
    with pytest.raises(ConfigError):
        AttackConfig(steps=0)
    with pytest.raises(ConfigError) as e:
        AttackConfig(clamp=(1, 0))
    assert e.value.field == "attack.clamp"
    assert AttackConfig.from_dict(AttackConfig().to_dict()) == AttackConfig()


def test_zero_epsilon_is_identity():
    x = np.random.default_rng(0).uniform(0, 1, (4, 3))
    out = pgd(linear_oracle(np.ones(3)), x, np.ones(4), AttackConfig(epsilon=0, alpha=0))
    np.testing.assert_array_equal(out, x)


def test_linear_worst_case_reached_in_one_step():
    rng = np.random.default_rng(1)
    w = rng.standard_normal(5)
    x = rng.standard_normal((8, 5))
    y = np.where(rng.random(8) < 0.5, 1.0, -1.0)
    out = pgd(linear_oracle(w), x, y, AttackConfig(epsilon=0.3, alpha=0.3, steps=1, clamp=None))
    np.testing.assert_allclose(out, x - 0.3 * y[:, None] * np.sign(w)[None, :])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.001, 0.2), st.integers(1, 6))
def test_iterates_stay_in_ball_and_box(seed, eps, steps):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal(6)
    x = rng.uniform(0, 1, (5, 6))
    y = np.where(rng.random(5) < 0.5, 1.0, -1.0)
    trace = []
    cfg = AttackConfig(epsilon=eps, alpha=eps / 2, steps=steps, random_start=True)
    out = pgd(linear_oracle(w), x, y, cfg, rng=rng, trace=trace)
    assert len(trace) == steps
    for xa, _ in trace + [(out, 0)]:
        assert np.all(np.abs(xa - x) <= eps + 1e-15)
        assert np.all((xa >= 0) & (xa <= 1))


def test_loss_non_decreasing_on_linear_model():
    rng = np.random.default_rng(2)
    w = rng.standard_normal(4)
    x = rng.uniform(0.2, 0.8, (6, 4))
    y = np.ones(6)
    trace = []
    pgd(linear_oracle(w), x, y, AttackConfig(epsilon=0.1, alpha=0.02, steps=6), trace=trace)
    losses = [l for _, l in trace]
    assert losses == sorted(losses)


def test_out_of_range_input():
    with pytest.raises(DataError):
        pgd(linear_oracle(np.ones(2)), np.array([[1.5, 0.0]]), np.ones(1), AttackConfig())


def test_non_finite_gradient():
    def bad(x, y):
        return 0.0, np.full_like(x, np.nan)
    with pytest.raises(AttackError):
        pgd(bad, np.zeros((1, 2)), np.ones(1), AttackConfig())


def test_random_start_needs_rng():
    with pytest.raises(ConfigError):
        pgd(linear_oracle(np.ones(2)), np.zeros((1, 2)), np.ones(1), AttackConfig(random_start=True))


def test_vit_oracle_gradient_matches_fd(small_cfg, small_params, images):
    oracle = VitOracle(small_cfg, small_params)
    y = np.arange(6) % 5
    _, g = oracle.loss_grad(images, y)
    rng = np.random.default_rng(0)
    for _ in range(5):
        idx = tuple(rng.integers(0, s) for s in images.shape)
        up, down = images.copy(), images.copy()
        up[idx] += 1e-6
        down[idx] -= 1e-6
        fd = (oracle.loss_grad(up, y)[0] - oracle.loss_grad(down, y)[0]) / 2e-6
        assert fd == pytest.approx(g[idx], rel=1e-4, abs=1e-9)


def test_attack_does_not_raise_accuracy(small_cfg, small_params, images):
    oracle = VitOracle(small_cfg, small_params)
    y = oracle.predict(images)  # every sample starts correct
    rob = robust_accuracy(oracle, images, y, AttackConfig(epsilon=0.1, alpha=0.02, steps=5), batch_size=4)
    assert 0 <= rob <= 1
    assert rob <= vit.accuracy(small_cfg, small_params, images, y)
