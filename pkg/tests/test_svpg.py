import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

import jsonlog
from autodiff import ContractViolation
from policy_opt import SelfImitationAgent, train_self_imitation
from svpg import (BaselineBank, DensityConfigError, DensityModel, EnsembleConfig, ReferenceBox, exploration_reward,
                  fit_density_model, kernel_from_gaps, kernel_matrix, pair_ratio, ratio_from_gap, rbf_svgd_delta,
                  select_best_agent, svpg_delta, train_ensemble)
from self_imitation import DELTA_CLIP
from helpers import chain_factory, flat_equal, small_ppo


def _ensemble(n_agents, **overrides):
    base = dict(n_agents=n_agents, ppo=small_ppo(), density_hidden=(8,), density_minibatch=16, density_epochs=1)
    base.update(overrides)
    return EnsembleConfig(**base)


@given(st.floats(min_value=-1e6, max_value=1e6, allow_nan=False))
def test_ratio_is_antisymmetric(gap):
    forward = ratio_from_gap(np.array([gap]))[0]
    backward = ratio_from_gap(np.array([-gap]))[0]
    assert forward + backward == 1.0
    assert 0.0 < forward < 1.0


def test_ratio_is_clamped_away_from_one():
    assert ratio_from_gap(np.array([50.0]))[0] == 1.0 - DELTA_CLIP
    assert ratio_from_gap(np.array([-50.0]))[0] == pytest.approx(DELTA_CLIP)


def test_identical_models_give_even_ratio():
    model = DensityModel.create(3, np.random.default_rng(0), hidden=(4,))
    states, actions = np.random.default_rng(1).standard_normal((6, 2)), np.zeros((6, 1))
    np.testing.assert_allclose(pair_ratio(model, model, states, actions), 0.5)
    np.testing.assert_allclose(exploration_reward(model, model, states, actions), math.log(0.5))


def test_kernel_matches_hand_computed_divergence():
    # batch k is tagged by its first coordinate; the gap favours whichever agent owns the batch
    g = math.log(9.0)

    def gap(i, j, pairs):
        return np.where(pairs[:, 0] == i, g, -g)

    batches = [np.full((5, 2), float(k)) for k in range(3)]
    temperature = math.log(1.8) / math.log(4.0)
    kernel = kernel_from_gaps(gap, batches, temperature)
    expected = np.full((3, 3), 0.25)
    np.fill_diagonal(expected, 1.0)
    np.testing.assert_allclose(kernel, expected, atol=1e-12)


def test_kernel_of_identical_models_is_all_ones():
    model = DensityModel.create(2, np.random.default_rng(0), hidden=(4,))
    batches = [np.random.default_rng(k).standard_normal((8, 2)) for k in range(3)]
    kernel = kernel_matrix([model, model, model], batches, 0.5)
    np.testing.assert_allclose(kernel, np.ones((3, 3)), atol=1e-12)


def test_density_model_ranks_concentrated_data_above_background():
    rng = np.random.default_rng(0)
    agent_pairs = rng.normal(0.5, 0.05, size=(512, 2))
    reference = ReferenceBox(2, margin=0.0)
    reference.update([rng.uniform(0.0, 1.0, size=(64, 2))])
    model = DensityModel.create(2, rng, hidden=(16,), lr=1e-2)
    trace = fit_density_model(model, agent_pairs, reference, epochs=30, rng=rng, minibatch=64)
    assert len(trace) == 30 * 8
    inside, outside = model.log_density(np.array([[0.5, 0.5], [0.05, 0.95]]))
    assert inside > outside + 1.0


def test_density_fit_with_zero_epochs_is_a_no_op():
    model = DensityModel.create(2, np.random.default_rng(0), hidden=(4,))
    before = dict(model.net.weights)
    reference = ReferenceBox(2)
    reference.update([np.zeros((2, 2)), np.ones((2, 2))])
    assert fit_density_model(model, np.ones((4, 2)), reference, 0, np.random.default_rng(1)) == []
    assert flat_equal(before, model.net.weights)


def _unit_box():
    box = ReferenceBox(2, margin=0.0)
    box.update([np.array([[0.0, 0.0], [1.0, 1.0]])])
    return box


def test_density_fit_on_reference_data_stays_flat():
    rng = np.random.default_rng(4)
    box = _unit_box()
    model = DensityModel.create(2, rng, hidden=(8,), lr=3e-3)
    fit_density_model(model, box.sample(4000, rng), box, epochs=25, rng=rng, minibatch=128)
    assert np.mean(np.abs(model.log_density(box.sample(2000, rng)))) < 0.2


def test_exploration_reward_penalises_the_peer_territory():
    rng = np.random.default_rng(6)
    box = _unit_box()
    models = []
    for center in (0.2, 0.8):
        model = DensityModel.create(2, rng, hidden=(16,), lr=1e-2)
        fit_density_model(model, rng.normal(center, 0.05, size=(512, 2)), box, epochs=40, rng=rng, minibatch=64)
        models.append(model)
    own = exploration_reward(models[0], models[1], np.array([[0.2]]), np.array([[0.2]]))
    peer = exploration_reward(models[0], models[1], np.array([[0.8]]), np.array([[0.8]]))
    assert -0.1 < own[0] <= 0.0
    assert peer[0] < -2.0


def test_reference_box_rejects_missing_or_degenerate_data():
    with pytest.raises(DensityConfigError):
        ReferenceBox(2).bounds()
    flat = ReferenceBox(2, min_width=0.0)
    flat.update([np.zeros((3, 2))])
    with pytest.raises(DensityConfigError):
        flat.bounds()
    broken = ReferenceBox(1)
    broken.update([np.array([[np.inf]])])
    with pytest.raises(DensityConfigError):
        broken.sample(3, np.random.default_rng(0))


def test_reference_box_pads_narrow_dimensions():
    box = ReferenceBox(2, margin=0.0, min_width=0.5)
    box.update([np.array([[0.0, 0.0], [2.0, 0.0]])])
    low, high = box.bounds()
    np.testing.assert_allclose(low, [0.0, -0.25])
    np.testing.assert_allclose(high, [2.0, 0.25])


def test_alpha_schedule_decays_linearly_to_zero():
    cfg = EnsembleConfig(alpha0=10.0, alpha_decay_end=0.5)
    assert cfg.alpha(0, 100) == 10.0
    assert cfg.alpha(25, 100) == pytest.approx(5.0)
    assert cfg.alpha(50, 100) == 0.0
    assert cfg.alpha(80, 100) == 0.0
    assert EnsembleConfig(alpha_decay_end=0.0).alpha(0, 100) == 0.0


def test_svpg_delta_combines_kernel_and_repulsion():
    driving = np.array([[1.0, 0.0], [0.0, 2.0]])
    repulsion = np.zeros((2, 2, 2))
    repulsion[0, 1] = [3.0, 3.0]
    repulsion[1, 0] = [-1.0, 0.0]
    kernel = np.array([[1.0, 0.5], [0.5, 1.0]])
    deltas = svpg_delta(driving, repulsion, kernel, alpha=2.0, temperature=0.5)
    np.testing.assert_allclose(deltas[0], (driving[0] + 0.5 * driving[1] + 2.0 * 0.5 / 0.5 * repulsion[0, 1]) / 2)
    np.testing.assert_allclose(deltas[1], (0.5 * driving[0] + driving[1] + 2.0 * 0.5 / 0.5 * repulsion[1, 0]) / 2)


def test_svpg_delta_degenerate_cases():
    g = np.array([[0.3, -0.7]])
    np.testing.assert_array_equal(svpg_delta(g, np.zeros((1, 1, 2)), np.ones((1, 1)), 5.0, 0.5), g)
    driving = np.array([[1.0, 1.0], [3.0, -1.0]])
    kernel = np.array([[1.0, 0.2], [0.2, 1.0]])
    no_alpha = svpg_delta(driving, np.ones((2, 2, 2)), kernel, 0.0, 0.5)
    np.testing.assert_allclose(no_alpha, kernel.T @ driving / 2)


def test_svpg_delta_rejects_mismatched_shapes():
    with pytest.raises(ContractViolation):
        svpg_delta(np.zeros((3, 2)), None, np.ones((2, 2)), 1.0, 0.5)
    with pytest.raises(ContractViolation):
        svpg_delta(np.zeros((2, 2)), np.zeros((2, 2, 3)), np.ones((2, 2)), 1.0, 0.5)


def test_rbf_repulsion_pushes_particles_apart():
    thetas = np.array([[0.0, 0.0], [1.0, 0.5]])
    deltas, kernel = rbf_svgd_delta(np.zeros_like(thetas), thetas, alpha=1.0)
    assert kernel[0, 1] == pytest.approx(kernel[1, 0]) and kernel[0, 0] == 1.0
    assert float(np.dot(deltas[0] - deltas[1], thetas[0] - thetas[1])) > 0


def test_select_best_agent_uses_final_window():
    metrics = [{'agents': [{'env_return_mean': 5.0}, {'env_return_mean': 0.0}]}] * 9
    metrics.append({'agents': [{'env_return_mean': 0.0}, {'env_return_mean': 1.0}]})
    assert select_best_agent(metrics, window_frac=0.1) == 1
    assert select_best_agent(metrics, window_frac=1.0) == 0


def test_baseline_bank_has_one_exploration_baseline_per_peer():
    agents = [SelfImitationAgent(chain_factory(), small_ppo(), seed=s, rank=s) for s in range(3)]
    bank = BaselineBank.create(agents, np.random.default_rng(0), with_exploration=True)
    assert [bank.count(i) for i in range(3)] == [4, 4, 4]
    assert sorted(bank.exploration[1]) == [0, 2]
    assert BaselineBank.create(agents, np.random.default_rng(0), with_exploration=False).count(0) == 2


def test_single_agent_ensemble_is_the_single_agent_learner():
    ensemble = train_ensemble(chain_factory(), _ensemble(1), seed=4)
    single = train_self_imitation(chain_factory(), small_ppo(), seed=4)
    assert flat_equal(ensemble.policies[0].flat(), single.policy.flat())
    assert [m['agents'][0] for m in ensemble.metrics] == single.metrics
    assert ensemble.metrics[0]['kernel_mean_offdiag'] is None


def test_independent_ensemble_matches_separate_runs():
    ensemble = train_ensemble(chain_factory(), _ensemble(2, kernel="independent"), seed=7)
    for i in range(2):
        alone = train_self_imitation(chain_factory(), small_ppo(), seed=7 + i)
        assert flat_equal(ensemble.policies[i].flat(), alone.policy.flat())
    assert len(ensemble.kernels) == 3 and ensemble.kernels[0].shape == (2, 2)


def test_js_ensemble_reports_symmetric_kernel():
    seen = []
    result = train_ensemble(chain_factory(), _ensemble(3), seed=0,
                            on_iteration=lambda record, kernel, ms: seen.append(kernel.copy()))
    assert len(seen) == 3
    for kernel in result.kernels:
        assert kernel.shape == (3, 3)
        np.testing.assert_array_equal(np.diag(kernel), 1.0)
        np.testing.assert_allclose(kernel, kernel.T)
        assert np.all((kernel > 0) & (kernel <= 1))
    alphas = [m['alpha'] for m in result.metrics]
    assert alphas == sorted(alphas, reverse=True)
    assert 0 <= result.best_agent < 3
    assert all(len(m['agents']) == 3 for m in result.metrics)


def test_ensemble_does_not_depend_on_worker_count():
    serial = train_ensemble(chain_factory(), _ensemble(3), seed=2, workers=1)
    threaded = train_ensemble(chain_factory(), _ensemble(3), seed=2, workers=3)
    for a, b in zip(serial.policies, threaded.policies):
        assert flat_equal(a.flat(), b.flat())
    for a, b in zip(serial.kernels, threaded.kernels):
        np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("overrides", [dict(kernel="rbf"), dict(ratio_mode="pairwise")])
def test_alternative_kernels_train(overrides):
    result = train_ensemble(chain_factory(), _ensemble(2, **overrides), seed=1)
    assert len(result.metrics) == 3
    for policy in result.policies:
        assert all(np.all(np.isfinite(v)) for v in policy.flat().values())


def test_invalid_ensemble_config_is_rejected():
    with pytest.raises(ContractViolation):
        train_ensemble(chain_factory(), _ensemble(2, kernel="cosine"), seed=0)


def test_non_finite_agent_gradient_is_zeroed(monkeypatch, tmp_path):
    original = SelfImitationAgent.driving_gradient

    def poisoned(self, plan, idx, surrogate=None):
        grads = original(self, plan, idx, surrogate)
        if self.rank == 1:
            return {k: np.full_like(v, np.nan) for k, v in grads.items()}
        return grads

    monkeypatch.setattr(SelfImitationAgent, "driving_gradient", poisoned)
    handler = jsonlog.attach_run_log(str(tmp_path / "events.jsonl"))
    try:
        result = train_ensemble(chain_factory(), _ensemble(3), seed=3)
    finally:
        jsonlog.detach_run_log(handler)
    for policy in result.policies:
        assert all(np.all(np.isfinite(v)) for v in policy.flat().values())
    events = [json.loads(line) for line in (tmp_path / "events.jsonl").read_text().splitlines()]
    zeroed = [e for e in events if e.get("event") == "ensemble_gradient_zeroed"]
    assert len(zeroed) == 3
    assert {e["rank"] for e in zeroed} == {1}
