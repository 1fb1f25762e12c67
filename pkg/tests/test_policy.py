import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from evrlab.policy import (
    N_ACTIONS,
    PolicyModel,
    RewardWeights,
    RunningMean,
    box_raster,
    log_prob,
    recognition_reward,
    reinforce_loss,
    reinforce_update,
    returns,
    sample_actions,
    shaped_rewards,
)
from evrlab.tensor import core as T
from evrlab.tensor.optim import ParamStore

from gradcheck import coordinate_check


def _obs(rng, n=2):
    bm = box_raster([[10, 5, 30, 40], [0, 0, 79, 63]][:n], (64, 80))[:, None]
    return bm, rng.random((n, 3, 64, 80)), rng.random((n, 3, 64, 80))


# -- rewards ---------------------------------------------------------------------
def test_reward_hand_example():
    assert recognition_reward(True, 0.5, 0.4) == pytest.approx(0.1 + 5 + 8, abs=1e-12)
    assert recognition_reward(True, 0.5, 0.4) == pytest.approx(13.1, abs=1e-12)


def test_reward_maximum_and_zero():
    assert recognition_reward(True, 1.0, 1.0) == pytest.approx(30.1, abs=1e-12)
    assert recognition_reward(False, 0.0, 0.0) == 0.0


def test_negative_weights_rejected():
    with pytest.raises(ValueError):
        RewardWeights(mask=-1)


@settings(max_examples=100)
@given(st.booleans(), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
def test_reward_monotone_in_iou(correct, b, m, db, dm):
    base = recognition_reward(correct, b * (1 - db), m * (1 - dm))
    assert recognition_reward(correct, b, m) >= base


def test_shaped_examples():
    np.testing.assert_array_equal(shaped_rewards([1, 3, 2]), [2, -1])
    np.testing.assert_array_equal(shaped_rewards([4, 4, 4, 4]), [0, 0, 0])


def test_telescoping_on_random_sequences():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        r = rng.normal(size=rng.integers(2, 20)) * 30
        assert abs(shaped_rewards(r).sum() - (r[-1] - r[0])) <= 1e-12 * max(1.0, np.abs(r).max())


def test_returns_reward_to_go():
    np.testing.assert_allclose(returns([[1.0, 2.0, 3.0]]), [[6.0, 5.0, 3.0]])


# -- model ------------------------------------------------------------------------
def test_distribution_is_valid_and_deterministic():
    rng = np.random.default_rng(0)
    pol = PolicyModel(rng).eval()
    bm, i0, it = _obs(rng)
    z1 = pol.encode(bm, i0, it).data
    z2 = pol.encode(bm, i0, it).data
    np.testing.assert_array_equal(z1, z2)
    probs, h = pol.act(pol.initial_state(2), T.Tensor(z1), [6, 6])
    assert probs.shape == (2, N_ACTIONS)
    np.testing.assert_allclose(probs.data.sum(axis=1), 1.0, atol=1e-12)
    assert (probs.data >= 0).all()


def test_self_pair_at_t0_encodes():
    rng = np.random.default_rng(1)
    pol = PolicyModel(rng).eval()
    bm, i0, _ = _obs(rng)
    assert np.isfinite(pol.encode(bm, i0, i0).data).all()


def test_observation_shape_mismatch():
    rng = np.random.default_rng(1)
    pol = PolicyModel(rng)
    bm, i0, it = _obs(rng)
    with pytest.raises(T.ShapeError):
        pol.encode(bm, i0, it[:, :, :32])


def test_uniform_logits_give_uniform_distribution():
    rng = np.random.default_rng(2)
    pol = PolicyModel(rng)
    pol.out.weight.data[:] = 0
    pol.out.bias.data[:] = 0
    probs, _ = pol.act(pol.initial_state(1), T.Tensor(np.ones((1, pol.z_dim))), [6])
    np.testing.assert_allclose(probs.data, 1 / 6, atol=1e-15)


def test_greedy_returns_argmax():
    p = np.array([[0.1, 0.5, 0.1, 0.1, 0.1, 0.1], [0.3, 0.0, 0.0, 0.0, 0.0, 0.7]])
    np.testing.assert_array_equal(sample_actions(p, np.random.default_rng(0), greedy=True), [1, 5])


def test_sampling_frequencies_match():
    p = np.array([0.05, 0.3, 0.1, 0.25, 0.2, 0.1])
    rng = np.random.default_rng(3)
    draws = sample_actions(np.tile(p, (10_000, 1)), rng)
    freq = np.bincount(draws, minlength=6) / 10_000
    assert np.abs(freq - p).max() <= 0.02


@pytest.mark.parametrize("seed", range(5))
def test_encoder_gradient(seed):
    rng = np.random.default_rng(seed)
    pol = PolicyModel(rng, channels=(4, 4, 4, 4))
    bm, i0, it = _obs(rng)
    x = T.Tensor(it, requires_grad=True)

    def loss():
        return T.mean(pol.encode(bm, i0, x))
    assert coordinate_check(loss, [x] + pol.parameters(), seed=seed) < 1e-3


@pytest.mark.parametrize("seed", range(5))
def test_full_policy_gradient(seed):
    rng = np.random.default_rng(seed)
    pol = PolicyModel(rng, channels=(4, 4, 4, 4), embed=3, hidden=5)
    bm, i0, it = _obs(rng)

    def loss():
        h = pol.initial_state(2)
        z = pol.encode(bm, i0, it)
        p1, h = pol.act(h, z, [6, 6])
        p2, h = pol.act(h, z, [0, 3])
        lp = [log_prob(p1, [2, 4]), log_prob(p2, [1, 5])]
        return reinforce_loss(lp, np.array([[0.5, -1.0], [2.0, 0.3]]), 0.2)
    assert coordinate_check(loss, pol.parameters(), seed=seed) < 1e-3


# -- REINFORCE -----------------------------------------------------------------------
def _single_step(pol, z, action, shaped, baseline):
    probs, _ = pol.act(pol.initial_state(1), z, [6])
    store = ParamStore.from_module(pol)
    return reinforce_update(store, [log_prob(probs, [action])], np.array([[shaped]]), baseline, lr=1e-3)


def test_zero_advantage_leaves_parameters():
    rng = np.random.default_rng(4)
    pol = PolicyModel(rng)
    z = T.Tensor(rng.normal(size=(1, pol.z_dim)))
    before = {k: v.copy() for k, v in pol.state_dict().items()}
    base = RunningMean(1.5)
    _single_step(pol, z, 2, 1.5, base)
    for k, v in pol.state_dict().items():
        np.testing.assert_array_equal(v, before[k])


def test_positive_advantage_raises_taken_action():
    rng = np.random.default_rng(5)
    pol = PolicyModel(rng)
    z = T.Tensor(rng.normal(size=(1, pol.z_dim)))
    p0 = pol.act(pol.initial_state(1), z, [6])[0].data[0, 3]
    _single_step(pol, z, 3, 1.0, RunningMean(0.0))
    p1 = pol.act(pol.initial_state(1), z, [6])[0].data[0, 3]
    assert p1 > p0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_gradient_skips_update():
    rng = np.random.default_rng(6)
    pol = PolicyModel(rng)
    z = T.Tensor(rng.normal(size=(1, pol.z_dim)))
    before = pol.state_dict()
    assert not _single_step(pol, z, 0, np.inf, RunningMean(0.0))
    for k, v in pol.state_dict().items():
        np.testing.assert_array_equal(v, before[k])


def test_running_mean():
    m = RunningMean()
    m.update([1.0, 2.0, 6.0])
    assert m.value == pytest.approx(3.0)


def bandit(seed: int, episodes: int = 500, favoured: int = 2, lr: float = 4e-5) -> float:
    """Train on a one-step bandit (reward 1 for ``favoured``); return the final P(favoured)."""
    rng = np.random.default_rng(seed)
    pol = PolicyModel(rng)
    z = T.Tensor(rng.normal(size=(1, pol.z_dim)))
    store = ParamStore.from_module(pol)
    base = RunningMean()
    p = 0.0
    for _ in range(episodes):
        probs, _ = pol.act(pol.initial_state(1), z, [6])
        p = probs.data[0, favoured]
        a = int(sample_actions(probs.data, rng)[0])
        r = np.array([0.0, float(a == favoured)])
        reinforce_update(store, [log_prob(probs, [a])], shaped_rewards(r)[None], base, lr=lr)
        if p > 0.9:
            break
    return float(pol.act(pol.initial_state(1), z, [6])[0].data[0, favoured])


def test_bandit_converges():
    assert bandit(0) > 0.9
