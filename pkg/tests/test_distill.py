import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import dkd_ref, finite_difference, kl, rel_err, soft_kd_ref, tempered_softmax
from ppgdistill.distill import (
    DistillConfig,
    Projector,
    dkd_components,
    dkd_loss,
    feature_loss,
    hard_loss,
    soft_loss,
    total_loss,
)
from ppgdistill.errors import ConfigError, ShapeError
from ppgdistill.numcore import softmax_cross_entropy


def _pair(rng, B=4, K=7, scale=2.0):
    return rng.normal(0, scale, (B, K)), rng.normal(0, scale, (B, K)), rng.integers(0, K, B)


# ---------------------------------------------------------------- worked examples


def test_hard_uniform_student_is_ln3():
    loss, _ = hard_loss(np.zeros((1, 3)), np.array([[2.0, 1.0, 0.5]]))
    assert abs(loss - math.log(3)) < 1e-12


def test_hard_tie_breaks_to_lowest_index():
    _, g = hard_loss(np.zeros((1, 3)), np.array([[1.0, 1.0, 0.0]]))
    assert g[0, 0] < 0 and g[0, 1] > 0


def test_hard_concentrated_student_near_zero():
    loss, _ = hard_loss(np.array([[40.0, 0.0, 0.0]]), np.array([[2.0, 1.0, 0.5]]))
    assert loss < 1e-12


def test_soft_two_class_example():
    loss, _ = soft_loss(np.zeros((1, 2)), np.array([[math.log(2), 0.0]]), temperature=1.0)
    expected = (2 / 3) * math.log(4 / 3) + (1 / 3) * math.log(2 / 3)
    assert abs(loss - expected) < 1e-12
    assert abs(loss - 0.056633) < 1e-6


def test_feature_example_is_exactly_2_5():
    proj = Projector(2, 2)
    loss, _ = feature_loss(np.array([[1.0, 2.0]]), np.zeros((1, 2)), proj)
    assert loss == 2.5


def test_feature_identity_equal_is_zero():
    proj = Projector(3, 3)
    f = np.arange(6.0).reshape(2, 3)
    loss, g = feature_loss(f, f.copy(), proj)
    assert loss == 0.0 and not g.any()


def test_feature_dimension_mismatch():
    with pytest.raises(ShapeError):
        feature_loss(np.zeros((2, 3)), np.zeros((2, 4)), Projector(3, 5))


def test_equal_logits_give_zero(rng):
    s, _, y = _pair(rng)
    assert soft_loss(s, s.copy())[0] == pytest.approx(0, abs=1e-14)
    assert dkd_loss(s, s.copy(), y)[0] == pytest.approx(0, abs=1e-14)


def test_soft_large_temperature_limit(rng):
    # KL itself vanishes like 1/τ², so the τ²-scaled loss settles at half the
    # per-row class variance of (t - s) rather than at zero.
    s, t, _ = _pair(rng)
    d = t - s
    limit = 0.5 * d.var(axis=1).mean()
    for tau in (1e2, 1e3):
        loss = soft_loss(s, t, tau)[0]
        assert loss / tau**2 < 1e-3
        assert abs(loss - limit) < 50 * limit / tau


def test_soft_matches_plain_kl_oracle(rng):
    s, t, _ = _pair(rng, B=5, K=9)
    for tau in (1.0, 2.0, 4.5):
        assert abs(soft_loss(s, t, tau)[0] - soft_kd_ref(s.tolist(), t.tolist(), tau)) < 1e-12


def test_dkd_matches_plain_oracle(rng):
    s, t, y = _pair(rng, B=6, K=11)
    ref = np.mean([dkd_ref(a.tolist(), b.tolist(), int(c), 1.0, 8.0, 2.0) for a, b, c in zip(s, t, y)]) * 4
    assert abs(dkd_loss(s, t, y)[0] - ref) < 1e-10


def test_dkd_default_weights_nckd_eight_times():
    cfg = DistillConfig()
    assert (cfg.alpha, cfg.beta, cfg.temperature, cfg.ce_weight) == (1.0, 8.0, 2.0, 1.0)
    assert cfg.beta / cfg.alpha == 8
    s, t, y = _pair(np.random.default_rng(3))
    tckd, nckd = dkd_components(s, t, y, 2.0)
    assert dkd_loss(s, t, y)[0] == pytest.approx(4 * (tckd + 8 * nckd).mean(), rel=1e-12)


def test_dkd_rejects_single_class():
    with pytest.raises(ShapeError):
        dkd_loss(np.zeros((2, 1)), np.zeros((2, 1)), np.zeros(2, dtype=int))


def test_dkd_rejects_bad_target():
    with pytest.raises(ValueError):
        dkd_loss(np.zeros((2, 3)), np.zeros((2, 3)), np.array([0, 3]))


# ---------------------------------------------------------------- decoupling identity


@pytest.mark.parametrize("K", [2, 5, 37, 180])
def test_decoupling_identity(K):
    rng = np.random.default_rng(K)
    s, t, y = _pair(rng, B=16, K=K, scale=3.0)
    tau = 2.0
    pt = np.array([tempered_softmax(row, tau)[c] for row, c in zip(t.tolist(), y)])
    loss, _ = dkd_loss(s, t, y, alpha=1.0, beta=1.0 - pt, temperature=tau)
    classic = tau**2 * np.mean([kl(tempered_softmax(b, tau), tempered_softmax(a, tau)) for a, b in zip(s.tolist(), t.tolist())])
    assert abs(loss - classic) < 1e-9


def test_decoupling_identity_per_row_with_extreme_logits():
    rng = np.random.default_rng(0)
    s, t, y = _pair(rng, B=8, K=180, scale=15.0)
    tckd, nckd = dkd_components(s, t, y, 1.0)
    pt = np.exp(t - t.max(1, keepdims=True))
    pt = (pt / pt.sum(1, keepdims=True))[np.arange(8), y]
    full, _ = soft_loss(s, t, 1.0)
    assert abs((tckd + (1 - pt) * nckd).mean() - full) < 1e-9


# ---------------------------------------------------------------- gradients


def _fd_logits(fn, s):
    return finite_difference(lambda: fn(s)[0], s).reshape(s.shape)


@pytest.mark.parametrize("seed", range(5))
def test_loss_gradients_match_fd(seed):
    rng = np.random.default_rng(seed)
    s, t, y = _pair(rng, B=3, K=6)
    cases = {
        "hard": lambda z: hard_loss(z, t),
        "soft": lambda z: soft_loss(z, t, 2.0),
        "dkd": lambda z: dkd_loss(z, t, y, 1.0, 8.0, 2.0),
        "dkd_perrow": lambda z: dkd_loss(z, t, y, 0.5, rng_beta, 1.5),
        "ce": lambda z: softmax_cross_entropy(z, y),
    }
    rng_beta = np.random.default_rng(seed + 100).uniform(0, 3, 3)
    for name, fn in cases.items():
        g = fn(s)[1]
        assert rel_err(g, _fd_logits(fn, s)) < 1e-4, name


def test_feature_gradients_match_fd(rng):
    fs, ft = rng.normal(size=(4, 3)), rng.normal(size=(4, 5))
    proj = Projector(3, 5, seed=2)
    W = proj.params["weight"]
    W.zero_grad()
    _, g = feature_loss(fs, ft, proj, weight=1.7)
    gw = W.grad.copy()

    def f():
        return 1.7 * feature_loss(fs, ft, proj)[0]

    assert rel_err(g, finite_difference(f, fs).reshape(fs.shape)) < 1e-4
    assert rel_err(gw, finite_difference(f, W.data).reshape(W.data.shape)) < 1e-4


# ---------------------------------------------------------------- total_loss


def test_scratch_equals_ce(rng):
    s, _, y = _pair(rng)
    r = total_loss(DistillConfig("scratch"), s, y)
    ce, g = softmax_cross_entropy(s, y)
    assert r.loss == ce and np.array_equal(r.logit_grad, g)


def test_dkd_zero_weights_reduce_to_ce(rng):
    s, t, y = _pair(rng)
    r = total_loss(DistillConfig("dkd", alpha=0, beta=0, ce_weight=0.7), s, y, t)
    ce, g = softmax_cross_entropy(s, y)
    assert r.loss == pytest.approx(0.7 * ce, abs=1e-15)
    assert np.allclose(r.logit_grad, 0.7 * g, atol=1e-15)


def test_soft_without_ce_is_pure_kl(rng):
    s, t, y = _pair(rng, B=5, K=8)
    r = total_loss(DistillConfig("soft", temperature=1.0, ce_weight=0.0), s, y, t)
    assert abs(r.loss - soft_kd_ref(s.tolist(), t.tolist(), 1.0)) < 1e-9


def test_hard_ignores_ground_truth(rng):
    s, t, y = _pair(rng)
    a = total_loss(DistillConfig("hard"), s, y, t)
    b = total_loss(DistillConfig("hard"), s, (y + 1) % s.shape[1], t)
    assert a.loss == b.loss


def test_feature_weight_is_linear(rng):
    s, t, y = _pair(rng)
    fs, ft = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    parts = []
    for w in (1.0, 2.0):
        proj = Projector(3, 3)
        r = total_loss(DistillConfig("feature", feature_weight=w, ce_weight=0.0), s, y, t, fs, ft, proj)
        parts.append((r.loss, r.feature_grad, proj.params["weight"].grad.copy()))
    assert parts[1][0] == 2 * parts[0][0]
    assert np.array_equal(parts[1][1], 2 * parts[0][1])
    assert np.array_equal(parts[1][2], 2 * parts[0][2])


@pytest.mark.parametrize("strategy", ["hard", "soft", "dkd", "feature"])
def test_missing_teacher_is_config_error(strategy, rng):
    s, _, y = _pair(rng)
    with pytest.raises(ConfigError):
        total_loss(DistillConfig(strategy), s, y)


def test_config_validation():
    with pytest.raises(ConfigError):
        DistillConfig("kd")
    with pytest.raises(ConfigError):
        DistillConfig(temperature=0)
    with pytest.raises(ConfigError):
        DistillConfig(beta=-1)
    with pytest.raises(ConfigError):
        DistillConfig.from_dict({"strategy": "dkd", "gamma": 1})
    cfg = DistillConfig("soft", temperature=3.0)
    assert DistillConfig.from_dict(cfg.to_dict()) == cfg


def test_projector_identity_init():
    p = Projector(4, 4)
    x = np.arange(8.0).reshape(2, 4)
    assert np.array_equal(p.forward(x), x)
    assert set(p.named_parameters()) == {"projector.weight", "projector.bias"}


# ---------------------------------------------------------------- properties

logit_rows = st.integers(2, 12).flatmap(
    lambda k: st.tuples(
        st.lists(st.floats(-20, 20), min_size=k, max_size=k),
        st.lists(st.floats(-20, 20), min_size=k, max_size=k),
        st.integers(0, k - 1),
    )
)


@settings(max_examples=60, deadline=None)
@given(logit_rows, st.floats(-50, 50), st.floats(0.5, 5))
def test_teacher_shift_invariance(row, shift, tau):
    s, t, y = np.array([row[0]]), np.array([row[1]]), np.array([row[2]])
    top2 = np.sort(t[0])[-2:]
    if top2[1] - top2[0] > 1e-9 * (1 + abs(shift)):  # rounding can turn a near-tie into a tie
        assert abs(hard_loss(s, t)[0] - hard_loss(s, t + shift)[0]) < 1e-9
    for fn in (
        lambda tt: soft_loss(s, tt, tau)[0],
        lambda tt: dkd_loss(s, tt, y, 1.0, 8.0, tau)[0],
    ):
        assert abs(fn(t) - fn(t + shift)) < 1e-9
    proj = Projector(3, 3)
    ft = np.array([row[1][:1] * 3])
    assert feature_loss(np.zeros((1, 3)), ft, proj)[0] >= 0


@settings(max_examples=60, deadline=None)
@given(logit_rows, st.floats(0.5, 5))
def test_losses_nonnegative(row, tau):
    s, t, y = np.array([row[0]]), np.array([row[1]]), np.array([row[2]])
    assert hard_loss(s, t)[0] >= 0
    assert soft_loss(s, t, tau)[0] >= -1e-12
    tckd, nckd = dkd_components(s, t, y, tau)
    assert tckd[0] >= -1e-12 and nckd[0] >= -1e-12


@settings(max_examples=40, deadline=None)
@given(logit_rows, st.floats(0.5, 4))
def test_decoupling_identity_property(row, tau):
    s, t, y = np.array([row[0]]), np.array([row[1]]), np.array([row[2]])
    pt = tempered_softmax(row[1], tau)[row[2]]
    loss, _ = dkd_loss(s, t, y, 1.0, np.array([1.0 - pt]), tau)
    assert abs(loss - soft_loss(s, t, tau)[0]) < 1e-9
