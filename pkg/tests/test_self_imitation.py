import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from autodiff import ContractViolation, finite_diff_check, init_mlp
from self_imitation import (DELTA_CLIP, Discriminator, clamp_probability, js_estimate, js_from_probabilities,
                            logistic_loss, pairs_of, shaped_reward, sigmoid, train_discriminator)


@pytest.mark.parametrize("seed", range(20))
def test_logistic_loss_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    net = init_mlp(3, 1, rng, hidden=(4,))
    positives = rng.standard_normal((5, 3)) + 0.5
    negatives = rng.standard_normal((7, 3)) - 0.5

    def loss_fn(weights):
        return logistic_loss(type(net)(net.sizes, weights), positives, negatives)

    assert finite_diff_check(loss_fn, net.weights) < 1e-4


@given(st.floats(min_value=-800, max_value=800, allow_nan=False))
def test_sigmoid_is_stable_and_bounded(x):
    p = float(sigmoid(np.array([x]))[0])
    assert 0.0 <= p <= 1.0
    assert math.isfinite(p)


def test_probability_is_clamped():
    p = clamp_probability(np.array([0.0, 0.5, 1.0]))
    np.testing.assert_array_equal(p, [DELTA_CLIP, 0.5, 1.0 - DELTA_CLIP])


def test_shaped_reward_is_minus_log_probability():
    disc = Discriminator.create(3, np.random.default_rng(0), hidden=(4,))
    state, action = np.array([0.1, 0.2]), np.array([0.3])
    p = disc.probability(pairs_of(state, action))[0]
    assert shaped_reward(disc, state, action) == pytest.approx(-math.log(p))
    batch = shaped_reward(disc, np.zeros((4, 2)), np.zeros((4, 1)))
    assert batch.shape == (4,)
    assert np.all(batch > 0)


def test_pairs_of_rejects_length_mismatch():
    with pytest.raises(ContractViolation):
        pairs_of(np.zeros((3, 2)), np.zeros((2, 1)))


def test_js_from_probabilities_extremes():
    half = np.full(10, 0.5)
    assert js_from_probabilities(half, half) == pytest.approx(0.0, abs=1e-12)
    confident = js_from_probabilities(np.full(10, 1.0 - DELTA_CLIP), np.full(10, DELTA_CLIP))
    assert confident == pytest.approx(math.log(2.0), abs=1e-5)
    assert confident <= math.log(2.0)
    # a worse-than-chance discriminator is clipped at zero
    assert js_from_probabilities(np.full(10, 0.1), np.full(10, 0.9)) == 0.0


def test_training_separates_policy_from_replay():
    rng = np.random.default_rng(0)
    disc = Discriminator.create(2, rng, hidden=(16,), lr=3e-3)
    policy_pairs = rng.normal(1.0, 0.3, size=(256, 2))
    replay_pairs = rng.normal(-1.0, 0.3, size=(256, 2))
    trace = train_discriminator(disc, policy_pairs, replay_pairs, epochs=100, rng=rng, minibatch=32)
    assert trace[-1] < trace[0]
    assert disc.probability(policy_pairs).mean() > 0.8
    assert disc.probability(replay_pairs).mean() < 0.2
    assert js_estimate(disc, policy_pairs, replay_pairs) > 0.4


def test_empty_replay_batch_skips_update():
    disc = Discriminator.create(2, np.random.default_rng(0), hidden=(4,))
    before = disc.copy()
    trace = train_discriminator(disc, np.ones((5, 2)), np.zeros((0, 2)), epochs=3, rng=np.random.default_rng(1))
    assert trace == []
    for k in before.net.weights:
        np.testing.assert_array_equal(before.net.weights[k], disc.net.weights[k])


def test_zero_epochs_leaves_discriminator_unchanged():
    disc = Discriminator.create(2, np.random.default_rng(0), hidden=(4,))
    before = disc.copy()
    train_discriminator(disc, np.ones((5, 2)), np.zeros((5, 2)), epochs=0, rng=np.random.default_rng(1))
    for k in before.net.weights:
        np.testing.assert_array_equal(before.net.weights[k], disc.net.weights[k])


def _fit(first, second, seed=0, epochs=30, lr=3e-3):
    rng = np.random.default_rng(seed)
    disc = Discriminator.create(first.shape[1], rng, hidden=(16,), lr=lr)
    train_discriminator(disc, first, second, epochs=epochs, rng=rng, minibatch=128)
    return disc


def _gaussian_pairs(rng, mu, n=2000):
    return rng.normal(mu, 1.0, (n, 1))


def test_same_distribution_gives_chance_probability_and_no_divergence():
    rng = np.random.default_rng(21)
    first, second = _gaussian_pairs(rng, 0.0), _gaussian_pairs(rng, 0.0)
    forward = _fit(first, second)
    backward = _fit(second, first)
    held_first, held_second = _gaussian_pairs(rng, 0.0), _gaussian_pairs(rng, 0.0)
    both = np.concatenate([held_first, held_second])
    assert abs(forward.probability(both).mean() - 0.5) < 0.05
    js_forward = js_estimate(forward, held_first, held_second)
    js_backward = js_estimate(backward, held_second, held_first)
    assert js_forward <= 0.1 * math.log(2.0)
    assert js_backward <= 0.1 * math.log(2.0)
    assert abs(js_forward - js_backward) < 0.05


def test_estimate_grows_with_separation():
    estimates = []
    for mu in (0.0, 1.0, 2.0, 3.0, 4.0):
        rng = np.random.default_rng(5)
        disc = _fit(_gaussian_pairs(rng, 0.0), _gaussian_pairs(rng, mu))
        estimates.append(js_estimate(disc, _gaussian_pairs(rng, 0.0), _gaussian_pairs(rng, mu)))
    assert all(later >= earlier for earlier, later in zip(estimates, estimates[1:]))
    assert estimates[-1] > estimates[0] + 0.3


def test_well_separated_batches_are_classified_accurately():
    rng = np.random.default_rng(8)
    disc = _fit(_gaussian_pairs(rng, 0.0), _gaussian_pairs(rng, 4.0), epochs=40, lr=1e-2)
    held_policy, held_replay = _gaussian_pairs(rng, 0.0), _gaussian_pairs(rng, 4.0)
    correct = np.sum(disc.probability(held_policy) > 0.5) + np.sum(disc.probability(held_replay) <= 0.5)
    assert correct / (len(held_policy) + len(held_replay)) > 0.95
