import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedora_vfl.data import gen_tabular, vertical_partition
from fedora_vfl.exceptions import ConfigError, DimensionError, ValidationError
from fedora_vfl.fedora import (DualState, UnlearnConfig, adapt_steps, dual_update, fedora_unlearn, primal_update,
                               proximal_loss, remaining_schedule, schedule_length, unlearning_loss,
                               unlearning_loss_from_logits)
from fedora_vfl.grad import finite_diff_check, softmax
from fedora_vfl.vfl import build_split_model, even_party_specs, predict_proba, vfl_train


def entropy_identity(p, w):
    """Reference: w * (2 H(p) - ln C) summed row by row with math.fsum."""
    total = []
    for row in p:
        h = -math.fsum(x * math.log(x) for x in row if x > 0)
        total.append(w * (2.0 * h - math.log(len(row))))
    return math.fsum(total)


@pytest.fixture(scope="module")
def small_setup():
    data = gen_tabular(3, 40, 6, 3.0, seed=0)
    specs = even_party_specs(6, 2, embed_dim=4, hidden=(8,))
    data = vertical_partition(data, specs)
    model = build_split_model(specs, 3, top_hidden=(8,), seed=0)
    model, _ = vfl_train(model, data, 20, 0.1, 16, seed=0)
    return data, model


def test_uniform_row_loss():
    loss, _ = unlearning_loss(np.full((1, 4), 0.25), 2.0)
    assert loss == pytest.approx(2 * math.log(4), abs=1e-12)


def test_one_hot_row_loss():
    loss, _ = unlearning_loss(np.array([[1.0, 0.0, 0.0, 0.0]]), 2.0)
    assert loss == pytest.approx(-2 * math.log(4), abs=1e-12)


def test_skewed_row_loss_matches_identity_oracle():
    p = np.array([[0.7, 0.1, 0.1, 0.1]])
    loss, _ = unlearning_loss(p, 1.0)
    assert loss == pytest.approx(entropy_identity(p, 1.0), abs=1e-12)
    assert loss == pytest.approx(0.4946, abs=5e-5)


def test_loss_rejects_non_distributions():
    with pytest.raises(ValidationError):
        unlearning_loss(np.array([[0.5, 0.4]]), 1.0)
    with pytest.raises(ValidationError):
        unlearning_loss(np.array([[1.2, -0.2]]), 1.0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=2, max_size=7).filter(lambda v: sum(v) > 1e-3),
       st.floats(0.1, 5.0))
def test_loss_identity_property(weights, w):
    p = np.array(weights) / sum(weights)
    p = p[None, :] / p.sum()
    loss, _ = unlearning_loss(p, w)
    assert loss == pytest.approx(entropy_identity(p, w), abs=1e-9)


def test_uniform_maximizes_loss_on_simplex_grid():
    best = unlearning_loss(np.full((1, 3), 1 / 3), 1.0)[0]
    steps = 100
    for i, j in itertools.product(range(steps + 1), repeat=2):
        if i + j > steps:
            continue
        p = np.array([[i, j, steps - i - j]]) / steps
        assert unlearning_loss(p, 1.0)[0] <= best + 1e-12


def test_prob_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    p = rng.dirichlet(np.full(4, 5.0), size=3)

    # derivative of the loss extended to the positive orthant (no renormalisation)
    def loss_fn(tensors):
        q = tensors[0]
        value = float(2.0 * np.sum(-2.0 * q * np.log(q)) - 2.0 * q.shape[0] * np.log(q.shape[1]))
        return value, [unlearning_loss(q / q.sum(axis=1, keepdims=True), 2.0)[1]]
    assert finite_diff_check(loss_fn, [p]) < 1e-6


def test_logit_gradient_matches_finite_differences():
    z = np.random.default_rng(1).normal(size=(5, 4))

    def loss_fn(tensors):
        loss, g = unlearning_loss_from_logits(tensors[0], 2.0)
        return loss, [g]
    assert finite_diff_check(loss_fn, [z]) < 1e-6
    assert unlearning_loss_from_logits(z, 2.0)[0] == pytest.approx(unlearning_loss(softmax(z), 2.0)[0], abs=1e-10)


def test_dual_update_examples():
    assert dual_update(np.array([0.5]), np.array([1.0]), 0.2, 0.1)[0] == pytest.approx(0.42, abs=1e-15)
    assert dual_update(np.array([0.05]), np.array([1.0]), 0.0, 0.1)[0] == 0.0
    omega = np.array([0.3, 0.7])
    np.testing.assert_array_equal(dual_update(omega, np.array([0.4, 0.4]), 0.4, 0.5), omega)
    with pytest.raises(DimensionError):
        dual_update(np.zeros(2), np.zeros(3), 0.0, 0.1)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=6), st.floats(-10, 10), st.floats(0, 1))
def test_dual_update_non_negative(g, gamma, sigma):
    g = np.array(g)
    omega = dual_update(np.abs(g) * 0.1, g, gamma, sigma)
    assert np.all(omega >= 0)


def test_primal_update_examples():
    out = primal_update(np.array(1.0), np.array(0.5), np.array(0.2), np.array(0.3), 0.01, np.array(1.0), 0.1)
    assert float(out) == pytest.approx(0.956, abs=1e-15)
    theta, g = np.array([1.0, -2.0]), np.array([0.3, 0.1])
    np.testing.assert_allclose(primal_update(theta, g, g, np.zeros(2), 0.0, theta, 0.5), theta - 0.5 * g)
    gu, om = np.array([0.5, 2.0]), np.array([0.4, 0.1])
    np.testing.assert_array_equal(primal_update(theta, gu * om, gu, om, 0.3, theta, 0.2), theta)
    with pytest.raises(DimensionError):
        primal_update(np.zeros(2), np.zeros(3), np.zeros(2), np.zeros(2), 0.0, np.zeros(2), 0.1)
    with pytest.raises(ValidationError):
        primal_update(np.zeros(2), np.zeros(2), np.zeros(2), np.zeros(2), 0.0, np.zeros(2), 0.0)


def test_proximal_loss_examples_and_gradient():
    theta, anchor = [np.array([1.0, 2.0]), np.array([[3.0]])], [np.zeros(2), np.array([[1.0]])]
    value, grads = proximal_loss(theta, anchor, 0.5)
    assert value == pytest.approx(0.25 * (1 + 4 + 4), abs=1e-15)
    np.testing.assert_array_equal(grads[0], [0.5, 1.0])
    stepped = primal_update(theta[0], np.zeros(2), np.zeros(2), np.zeros(2), 0.5, anchor[0], 1.0)
    np.testing.assert_array_equal(theta[0] - stepped, grads[0])
    assert finite_diff_check(lambda t: proximal_loss(t, anchor, 0.5), theta) < 1e-9
    with pytest.raises(DimensionError):
        proximal_loss(theta, anchor[:1], 0.5)


def _state(tau, prev, curr, sigma=0.01):
    return DualState([], tau, sigma, prev, curr)


def test_adapt_steps_examples():
    cfg = UnlearnConfig()
    tau, _ = adapt_steps(_state(0.01, 1.0, 0.3), cfg)
    assert tau == pytest.approx(0.011, abs=1e-15)
    tau, _ = adapt_steps(_state(0.049, 1.0, 0.3), cfg)
    assert tau == 0.05
    assert adapt_steps(_state(0.02, 1.0, 1.0, 0.03), cfg) == (0.02, 0.03)
    tau, sigma = adapt_steps(_state(0.02, 1.0, 2.0, 0.03), cfg)
    assert (tau, sigma) == pytest.approx((0.014, 0.021))
    # no previous change recorded: adaptation skipped
    assert adapt_steps(_state(0.02, 0.0, 5.0), cfg) == (0.02, 0.01)


def test_schedule_lengths():
    assert schedule_length(0.05, 45000, 128) == 18
    assert len(remaining_schedule(0.05, 45000, 128, 0)) == 18
    assert len(remaining_schedule(1.0, 1000, 1000, 0)) == 1
    assert remaining_schedule(0.0, 1000, 32, 0) == []
    with pytest.raises(ValidationError):
        remaining_schedule(0.5, 100, 0, 0)


def test_schedule_batches_without_replacement():
    batches = remaining_schedule(1.0, 50, 8, 3)
    flat = np.concatenate(batches)
    assert len(batches) == 7 and all(len(b) <= 8 for b in batches)
    assert sorted(flat.tolist()) == list(range(50))


def test_config_validation():
    with pytest.raises(ConfigError):
        UnlearnConfig(alpha=0.5, beta=0.6)
    with pytest.raises(ConfigError):
        UnlearnConfig(kappa_i=0.9)
    with pytest.raises(ConfigError):
        UnlearnConfig(tau0=0.1, tau_max=0.05)
    with pytest.raises(ConfigError):
        UnlearnConfig(delta=1.5)
    with pytest.raises(ConfigError):
        UnlearnConfig(sigma_max=1.0, tau_max=1.0).check_step_condition(2.0)
    UnlearnConfig().check_step_condition(1.0)


def test_zero_iterations_is_identity(small_setup):
    data, model = small_setup
    out, trace = fedora_unlearn(model, data, np.arange(10), np.arange(10, 120), UnlearnConfig(iterations=0))
    for a, b in zip(model.tensors(), out.tensors()):
        assert a.tobytes() == b.tobytes()
    assert list(trace.rows()) == []


def test_no_forces_leaves_model_unchanged(small_setup):
    data, model = small_setup
    cfg = UnlearnConfig(iterations=5, sigma0=0.0, gamma=0.0, delta=0.0, rho=0.0)
    out, _ = fedora_unlearn(model, data, np.arange(10), np.arange(10, 120), cfg)
    for a, b in zip(model.tensors(), out.tensors()):
        np.testing.assert_array_equal(a, b)


def test_rejects_bad_partitions(small_setup):
    data, model = small_setup
    with pytest.raises(ValidationError):
        fedora_unlearn(model, data, np.array([], dtype=int), np.arange(10), UnlearnConfig(iterations=1))
    with pytest.raises(ValidationError):
        fedora_unlearn(model, data, np.arange(5), np.arange(3, 20), UnlearnConfig(iterations=1))


def test_invariants_asserted_each_round(small_setup):
    data, model = small_setup
    seen = []

    def check(k, m, state):
        seen.append(k)
        assert all(np.all(o >= 0) for o in state.omega)
        assert 0 < state.tau <= 0.05 and 0 < state.sigma <= 0.05

    fedora_unlearn(model, data, np.arange(20), np.arange(20, 120), UnlearnConfig(iterations=15, sigma0=1e-3),
                   callback=check)
    assert seen == list(range(15))


def test_forget_everything_converges_to_uniform(small_setup):
    data, model = small_setup
    rows = np.arange(data.n_samples)
    cfg = UnlearnConfig(iterations=300, delta=0.0, sigma0=1e-3, sigma_max=1e-2, rho=0.0)
    out, trace = fedora_unlearn(model, data, rows, np.array([], dtype=np.int64), cfg)
    assert predict_proba(out, data).max(axis=1).mean() <= 1 / 3 + 0.05
    assert trace.mean_max_prob[-1] <= trace.mean_max_prob[0]


def test_trace_records_rounds(small_setup):
    data, model = small_setup
    _, trace = fedora_unlearn(model, data, np.arange(10), np.arange(10, 120), UnlearnConfig(iterations=4))
    rows = list(trace.rows())
    assert [r["round"] for r in rows] == [0, 1, 2, 3]
    assert set(rows[0]) == {"round", "L_u", "L_r", "tau", "sigma", "delta_theta"}
    assert all(np.isfinite(r["L_r"]) for r in rows)


def test_anchor_frozen_at_entry(small_setup):
    data, model = small_setup
    captured = []
    fedora_unlearn(model, data, np.arange(10), np.arange(10, 120), UnlearnConfig(iterations=3),
                   callback=lambda k, m, s: captured.append(m.anchor))
    for anchor in captured:
        for a, t in zip(anchor, model.tensors()):
            np.testing.assert_array_equal(a, t)


def test_deterministic_given_seed(small_setup):
    data, model = small_setup
    cfg = UnlearnConfig(iterations=5, seed=3)
    a, _ = fedora_unlearn(model, data, np.arange(10), np.arange(10, 120), cfg)
    b, _ = fedora_unlearn(model, data, np.arange(10), np.arange(10, 120), cfg)
    for x, y in zip(a.tensors(), b.tensors()):
        assert x.tobytes() == y.tobytes()
