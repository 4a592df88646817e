import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gradcheck import max_relative_error, random_instance
from gridnav.net import (
    AdamConfig,
    AdamState,
    BCLoss,
    Checkpoint,
    NetworkSpec,
    NonFiniteError,
    SequenceBatch,
    adam_step,
    clip_by_global_norm,
    entropy,
    forward,
    init_params,
    initial_state,
    layout,
    log_prob,
    param_count,
    sample_action,
    sequence_gradient,
    softmax,
    unroll,
)

finite_logits = arrays(np.float64, 4, elements=st.floats(-50, 50))


def small_spec(**kw) -> NetworkSpec:
    return NetworkSpec(**{"patch_size": 3, "encoder_widths": (6,), "hidden_size": 5, **kw})


@pytest.mark.parametrize(
    "spec",
    [NetworkSpec(), small_spec(), small_spec(value_head=False), NetworkSpec(7, (32, 16), 8), NetworkSpec(1, (1,), 1)],
)
def test_param_count_closed_form(spec):
    d, widths, h = spec.patch_size**2 + 7, spec.encoder_widths, spec.hidden_size
    dims = (d,) + widths
    expected = sum(a * b + b for a, b in zip(dims, dims[1:]))
    expected += 3 * h * (widths[-1] + h + 1) + 4 * h + 4 + (h + 1 if spec.value_head else 0)
    assert param_count(spec) == expected == layout(spec).size
    assert init_params(spec, np.random.default_rng(0)).shape == (expected,)


def test_spec_validation_and_input_dim():
    assert NetworkSpec().input_dim == 25 + 3 + 4
    with pytest.raises(ValueError):
        NetworkSpec(encoder_widths=(0,))
    with pytest.raises(ValueError):
        NetworkSpec(hidden_size=0)


def test_init_scales():
    spec = NetworkSpec()
    p = layout(spec).views(init_params(spec, np.random.default_rng(1)))
    assert np.abs(p["enc0_W"]).max() <= 1 / math.sqrt(spec.input_dim)
    assert np.abs(p["pi_W"]).max() <= 0.01 / math.sqrt(spec.hidden_size)
    assert not p["gru_b"].any() and not p["pi_b"].any()


def test_zero_network_is_uniform():
    spec = small_spec()
    out = forward(np.zeros(param_count(spec)), spec, np.ones(spec.input_dim), initial_state(spec))
    assert np.array_equal(out.logits, np.zeros(4))
    assert np.allclose(softmax(out.logits), 0.25)


def test_forward_deterministic_and_unroll_identity():
    spec = small_spec()
    rng = np.random.default_rng(3)
    theta = init_params(spec, rng) * 5
    x = rng.normal(size=(7, 2, spec.input_dim))
    u = unroll(theta, spec, x)
    h = initial_state(spec, 2)
    for t in range(7):
        out = forward(theta, spec, x[t], h)
        again = forward(theta, spec, x[t], h)
        assert np.array_equal(out.logits, again.logits)
        assert np.allclose(out.logits, u.logits[t], rtol=0, atol=1e-13)
        assert np.allclose(out.value, u.values[t], rtol=0, atol=1e-13)
        h = out.next_hidden


def test_forward_rejects_bad_input():
    spec = small_spec()
    theta = init_params(spec, np.random.default_rng(0))
    with pytest.raises(ValueError):
        forward(theta, spec, np.zeros(spec.input_dim + 1), initial_state(spec))
    with pytest.raises(ValueError):
        forward(theta[:-1], spec, np.zeros(spec.input_dim), initial_state(spec))


# ------------------------------------------------------------ distributions


def test_distribution_examples():
    assert entropy(np.zeros(4)) == pytest.approx(math.log(4))
    for a in range(4):
        assert log_prob(np.zeros(4), a) == pytest.approx(math.log(0.25))
    rng = np.random.default_rng(0)
    draws = [sample_action(np.array([10.0, -10, -10, -10]), rng) for _ in range(5000)]
    assert draws.count(0) / len(draws) > 0.999
    assert softmax(np.array([10.0, -10, -10, -10]))[0] > 0.999


@given(finite_logits, st.floats(-100, 100))
def test_softmax_normalised_and_shift_invariant(logits, c):
    p = softmax(logits)
    assert abs(p.sum() - 1) <= 1e-9
    assert np.allclose(softmax(logits + c), p, atol=1e-12)
    assert entropy(logits + c) == pytest.approx(entropy(logits), abs=1e-9)


def test_sampling_matches_softmax():
    logits = np.array([0.3, -1.0, 1.2, 0.0])
    rng = np.random.default_rng(5)
    n = 40_000
    counts = np.bincount([sample_action(logits, rng) for _ in range(n)], minlength=4) / n
    p = softmax(logits)
    assert np.all(np.abs(counts - p) < 4 * np.sqrt(p * (1 - p) / n))


# ---------------------------------------------------------------- gradients


@pytest.mark.parametrize("loss", ["bc", "ppo"])
@pytest.mark.parametrize("seed", range(10))
def test_gradient_matches_finite_differences(loss, seed):
    spec, theta, batch, loss_spec = random_instance(np.random.default_rng([11, seed]), loss)
    assert max_relative_error(spec, theta, batch, loss_spec) < 1e-4


def test_zero_weight_gives_zero_gradient():
    spec, theta, batch, loss_spec = random_instance(np.random.default_rng(2), "ppo")
    batch.weights[...] = 0
    loss, grad, _ = sequence_gradient(theta, spec, batch, loss_spec)
    assert loss == 0 and not grad.any()


def test_bc_optimum_has_zero_loss_and_policy_gradient():
    spec = small_spec(value_head=False)
    theta = np.zeros(param_count(spec))
    p = layout(spec).views(theta)
    p["pi_b"][...] = [800.0, 0, 0, 0]  # deterministic on action 0
    batch = SequenceBatch.from_episodes([np.ones((5, spec.input_dim))], [np.zeros(5, dtype=int)])
    loss, grad, _ = sequence_gradient(theta, spec, batch, BCLoss())
    assert loss == 0
    lay = layout(spec)
    assert not grad[lay.slices["pi_W"]].any() and not grad[lay.slices["pi_b"]].any()


def test_uniform_policy_nll_is_log4():
    spec = small_spec(value_head=False)
    theta = init_params(spec, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    batch = SequenceBatch.from_episodes(
        [rng.normal(size=(9, spec.input_dim)) for _ in range(4)], [rng.integers(0, 4, 9) for _ in range(4)]
    )
    loss, _, _ = sequence_gradient(theta, spec, batch, BCLoss())
    assert loss == pytest.approx(math.log(4), abs=0.05)


def test_padding_does_not_change_gradient():
    spec = small_spec(value_head=False)
    theta = init_params(spec, np.random.default_rng(0)) * 4
    rng = np.random.default_rng(2)
    f = [rng.normal(size=(n, spec.input_dim)) for n in (3, 6)]
    a = [rng.integers(0, 4, n) for n in (3, 6)]
    both = sequence_gradient(theta, spec, SequenceBatch.from_episodes(f, a), BCLoss())
    l0, g0, _ = sequence_gradient(theta, spec, SequenceBatch.from_episodes(f[:1], a[:1]), BCLoss())
    l1, g1, _ = sequence_gradient(theta, spec, SequenceBatch.from_episodes(f[1:], a[1:]), BCLoss())
    assert both[0] == pytest.approx((3 * l0 + 6 * l1) / 9, abs=1e-12)
    assert np.allclose(both[1], (3 * g0 + 6 * g1) / 9, atol=1e-13)


def test_nonfinite_loss_raises():
    spec, theta, batch, loss_spec = random_instance(np.random.default_rng(4), "bc")
    batch.features[0, 0, 0] = np.inf
    with pytest.raises(NonFiniteError):
        sequence_gradient(theta, spec, batch, loss_spec)


# ---------------------------------------------------------------- optimizer


def test_adam_zero_grad_keeps_params():
    theta = np.arange(5.0)
    st0 = AdamState(np.ones(5), np.ones(5), 3)
    new, st1 = adam_step(theta, np.zeros(5), st0)
    assert np.array_equal(st1.m, 0.9 * np.ones(5)) and np.array_equal(st1.v, 0.999 * np.ones(5))
    assert st1.step == 4
    assert np.all(np.abs(new - theta) <= 2.5e-4 * 1.01)


def test_adam_first_step_closed_form():
    g = np.array([3.0, -0.5, 1e-3, 0.0])
    hyper = AdamConfig()
    new, _ = adam_step(np.zeros(4), g, AdamState.zeros_like(np.zeros(4)), hyper)
    expected = -hyper.lr * g / (np.abs(g) + hyper.eps)
    assert np.allclose(new, expected, rtol=1e-12, atol=0)


def test_adam_constant_gradient_step_bound():
    theta = np.zeros(3)
    state = AdamState.zeros_like(theta)
    g = np.array([0.7, -2.0, 1e-4])
    for _ in range(500):
        prev = theta
        theta, state = adam_step(theta, g, state)
        assert np.all(np.abs(theta - prev) <= 2.5e-4 * (1 + 1e-6))


def test_adam_rejects_nonfinite_and_does_not_mutate():
    theta, state = np.zeros(2), AdamState.zeros_like(np.zeros(2))
    with pytest.raises(NonFiniteError):
        adam_step(theta, np.array([np.nan, 0]), state)
    adam_step(theta, np.ones(2), state)
    assert not state.m.any() and state.step == 0


def test_clip_by_global_norm():
    g = np.array([3.0, 4.0])
    clipped, norm = clip_by_global_norm(g, 0.5)
    assert norm == 5 and np.allclose(clipped, [0.3, 0.4])
    same, _ = clip_by_global_norm(np.array([0.1, 0.1]), 0.5)
    assert np.array_equal(same, [0.1, 0.1])


# -------------------------------------------------------------- checkpoints


def test_checkpoint_roundtrip_is_bit_exact(tmp_path):
    spec = small_spec()
    rng = np.random.default_rng(8)
    theta = init_params(spec, rng) + rng.normal(size=param_count(spec))
    adam = AdamState(rng.normal(size=theta.size), rng.random(theta.size), 17)
    Checkpoint(spec, theta, adam, 123, {"seed": 1}, {"agent": "ppo"}).save(tmp_path / "c.json")
    back = Checkpoint.load(tmp_path / "c.json")
    assert back.spec == spec and back.global_step == 123 and back.meta == {"agent": "ppo"}
    assert np.array_equal(back.theta, theta) and np.array_equal(back.adam.m, adam.m) and back.adam.step == 17
    x = rng.normal(size=(5, 1, spec.input_dim))
    assert np.array_equal(unroll(theta, spec, x).logits, unroll(back.theta, spec, x).logits)


def test_checkpoint_rejects_wrong_format(tmp_path):
    (tmp_path / "x.json").write_text('{"format": "other", "version": 1}')
    with pytest.raises(ValueError):
        Checkpoint.load(tmp_path / "x.json")
