"""
Policy optimisation: rollouts, GAE, the clipped-surrogate PPO update with the
nu-interpolated self-imitation gradient, the single-agent training loop and a
cross-entropy-method baseline.
"""

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

import jsonlog
from autodiff import (AdamState, ContractViolation, GaussianPolicyParams, MlpParams, Params, adam_init, adam_step,
                      combine, flatten_params, gaussian_log_prob, gaussian_log_prob_grad, gaussian_sample,
                      init_gaussian_policy, init_mlp, mlp_backward, mlp_forward, unflatten_params)
from environments import Env
from replay import EmptyReplayError, PriorityReplay, Trajectory
from self_imitation import Discriminator, js_estimate, shaped_reward, train_discriminator

logger = jsonlog.setup_logger("policy_opt")

EnvFactory = Callable[[], Env]


@dataclass
class PPOConfig:
    """Per-agent optimisation settings (PPO, self-imitation interpolation, elite replay, discriminator)."""
    gamma: float = 0.99
    lam: float = 0.95
    clip_eps: float = 0.2
    epochs: int = 5
    minibatch: int = 64
    lr: float = 1e-4
    value_lr: float = 1e-3
    nu: float = 0.8
    iterations: int = 200
    batch_episodes: int = 8
    replay_capacity: int = 10
    disc_epochs: int = 3
    disc_minibatch: int = 64
    disc_lr: float = 1e-4
    hidden: Tuple[int, ...] = (64, 64)
    init_log_std: float = 0.0
    self_imitation: bool = True

    def validate(self) -> List[str]:
        problems = []
        if not (0.0 < self.gamma <= 1.0):
            problems.append(f"PPO_GAMMA must be in (0, 1], got {self.gamma}")
        if not (0.0 <= self.lam <= 1.0):
            problems.append(f"PPO_LAMBDA must be in [0, 1], got {self.lam}")
        if not (0.0 <= self.nu <= 1.0):
            problems.append(f"SI_NU must be in [0, 1], got {self.nu}")
        if self.clip_eps <= 0:
            problems.append(f"PPO_CLIP must be positive, got {self.clip_eps}")
        for name, value in (("PPO_EPOCHS", self.epochs), ("PPO_MINIBATCH", self.minibatch),
                            ("RUN_ITERATIONS", self.iterations), ("PPO_BATCH_EPISODES", self.batch_episodes),
                            ("SI_CAPACITY", self.replay_capacity), ("SI_DISC_MINIBATCH", self.disc_minibatch)):
            if value < 1:
                problems.append(f"{name} must be >= 1, got {value}")
        if self.disc_epochs < 0:
            problems.append(f"SI_DISC_EPOCHS must be >= 0, got {self.disc_epochs}")
        if self.lr <= 0 or self.value_lr <= 0 or self.disc_lr <= 0:
            problems.append("learning rates must be positive")
        if not self.hidden or min(self.hidden) < 1:
            problems.append(f"PPO_HIDDEN needs at least one positive layer width, got {list(self.hidden)}")
        return problems


# ===== Value functions =====

@dataclass
class ValueNet:
    """State-value baseline for one reward stream, with its own Adam state."""
    net: MlpParams
    opt: AdamState

    @classmethod
    def create(cls, obs_dim: int, rng: np.random.Generator, hidden: Sequence[int] = (64, 64),
               lr: float = 1e-3) -> "ValueNet":
        net = init_mlp(obs_dim, 1, rng, hidden=hidden)
        return cls(net, adam_init(net.weights, lr=lr))

    def predict(self, states: np.ndarray) -> np.ndarray:
        return mlp_forward(self.net, np.atleast_2d(states))[:, 0]

    def loss(self, states: np.ndarray, targets: np.ndarray) -> Tuple[float, Params]:
        """0.5 * mean squared error and its gradient."""
        pred = self.predict(states)
        diff = pred - targets
        grads = mlp_backward(self.net, np.atleast_2d(states), (diff / len(diff))[:, None])
        return float(0.5 * np.mean(diff ** 2)), grads

    def regress(self, states: np.ndarray, targets: np.ndarray) -> float:
        loss, grads = self.loss(states, targets)
        weights, self.opt = adam_step(self.opt, self.net.weights, grads)
        self.net = MlpParams(self.net.sizes, weights)
        return loss


@dataclass
class ValueFunctionPair:
    """Separate baselines for the environment-reward and shaped-reward streams."""
    env: ValueNet
    shaped: ValueNet


# ===== Rollouts =====

@dataclass
class RolloutBatch:
    """One iteration's episodes plus the shaped reward -log r of every step."""
    trajectories: List[Trajectory]
    shaped_rewards: List[np.ndarray]

    @property
    def states(self) -> np.ndarray:
        return np.concatenate([t.states for t in self.trajectories])

    @property
    def actions(self) -> np.ndarray:
        return np.concatenate([t.actions for t in self.trajectories])

    @property
    def log_probs(self) -> np.ndarray:
        return np.concatenate([t.log_probs for t in self.trajectories])

    @property
    def pairs(self) -> np.ndarray:
        return np.concatenate([t.pairs() for t in self.trajectories])

    @property
    def env_rewards(self) -> List[np.ndarray]:
        return [t.rewards for t in self.trajectories]

    @property
    def true_returns(self) -> np.ndarray:
        return np.array([t.info.get('true_return', t.total_return) for t in self.trajectories])

    @property
    def success_rate(self) -> float:
        return float(np.mean([bool(t.info.get('success', False)) for t in self.trajectories]))

    def __len__(self) -> int:
        return sum(t.length for t in self.trajectories)


def rollout_episode(env: Env, policy: GaussianPolicyParams, rng: np.random.Generator,
                    deterministic: bool = False) -> Trajectory:
    """Run one episode to completion; behaviour log-probs are stored with the trajectory."""
    obs = env.reset(rng)
    states, actions, rewards, dones = [], [], [], []
    true_return = 0.0
    success = False
    while True:
        if deterministic:
            action = mlp_forward(policy.mean_net, obs)
        else:
            action = gaussian_sample(policy, obs, rng)
        result = env.step(action)
        states.append(obs)
        actions.append(action)
        rewards.append(result.reward)
        dones.append(result.done)
        true_return += float(result.info.get('raw_reward', result.reward))
        success = success or bool(result.info.get('success', False))
        obs = result.observation
        if result.done:
            break
    states_arr = np.asarray(states, dtype=np.float64)
    actions_arr = np.asarray(actions, dtype=np.float64)
    return Trajectory(states_arr, actions_arr, np.asarray(rewards), np.asarray(dones),
                      log_probs=gaussian_log_prob(policy, states_arr, actions_arr),
                      info={'true_return': true_return, 'success': success})


def collect_rollouts(env_factory: EnvFactory, policy: GaussianPolicyParams, n_episodes: int,
                     seed_seq: np.random.SeedSequence, workers: int = 1,
                     deterministic: bool = False) -> List[Trajectory]:
    """
    Episodes run on fresh environment instances with per-episode generators
    spawned from ``seed_seq``; results come back in episode-index order.
    """
    children = seed_seq.spawn(n_episodes)

    def run(k: int) -> Trajectory:
        return rollout_episode(env_factory(), policy, np.random.default_rng(children[k]), deterministic)

    if workers > 1 and n_episodes > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(run, range(n_episodes)))
    return [run(k) for k in range(n_episodes)]


# ===== Advantages =====

def compute_gae(rewards, values, bootstrap_value: float, gamma: float, lam: float) -> Tuple[np.ndarray, np.ndarray]:
    """Generalised advantage estimates and return targets (advantage + value)."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if rewards.shape != values.shape:
        raise ContractViolation(f"rewards {rewards.shape} and values {values.shape} differ")
    advantages = np.zeros_like(rewards)
    last = 0.0
    next_value = float(bootstrap_value)
    for t in reversed(range(len(rewards))):
        delta = rewards[t] + gamma * next_value - values[t]
        last = delta + gamma * lam * last
        advantages[t] = last
        next_value = values[t]
    return advantages, advantages + values


def stream_advantages(trajectories: Sequence[Trajectory], rewards: Sequence[np.ndarray], value_net: ValueNet,
                      gamma: float, lam: float) -> Tuple[np.ndarray, np.ndarray]:
    """GAE for one reward stream over a batch of episodes, concatenated in episode order."""
    states = np.concatenate([t.states for t in trajectories])
    values = value_net.predict(states)
    advantages, targets = [], []
    offset = 0
    for trajectory, stream in zip(trajectories, rewards):
        n = trajectory.length
        # every episode ends at a terminal or the horizon, both bootstrap to 0
        adv, tgt = compute_gae(stream, values[offset:offset + n], 0.0, gamma, lam)
        advantages.append(adv)
        targets.append(tgt)
        offset += n
    return np.concatenate(advantages), np.concatenate(targets)


def normalize_advantages(advantages: np.ndarray) -> np.ndarray:
    std = float(np.std(advantages))
    if std < 1e-8:
        return advantages
    return (advantages - np.mean(advantages)) / std


# ===== Clipped surrogate =====

def clipped_surrogate(ratio: np.ndarray, advantages: np.ndarray, clip_eps: float) -> Tuple[float, np.ndarray]:
    """
    Mean of min(ratio * A, clip(ratio) * A) and the per-sample weights w with
    d(objective) = sum_n w_n * d log pi_n (zero where the clipped branch binds).
    """
    unclipped = ratio * advantages
    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * advantages
    active = unclipped <= clipped
    n = len(ratio)
    return float(np.mean(np.minimum(unclipped, clipped))), np.where(active, advantages * ratio, 0.0) / n


class SurrogateGradient:
    """Clipped-surrogate policy gradients on one minibatch, for any advantage stream."""

    def __init__(self, policy: GaussianPolicyParams, states: np.ndarray, actions: np.ndarray,
                 old_log_probs: np.ndarray, clip_eps: float):
        self.policy = policy
        self.states = states
        self.actions = actions
        self.clip_eps = clip_eps
        self.ratio = np.exp(gaussian_log_prob(policy, states, actions) - old_log_probs)

    def objective(self, advantages: np.ndarray) -> float:
        return clipped_surrogate(self.ratio, advantages, self.clip_eps)[0]

    def gradient(self, advantages: np.ndarray) -> Params:
        """Ascent direction of the clipped surrogate, keyed like policy.flat()."""
        _, weights = clipped_surrogate(self.ratio, advantages, self.clip_eps)
        return gaussian_log_prob_grad(self.policy, self.states, self.actions, weights)

    @property
    def clip_fraction(self) -> float:
        return float(np.mean(np.abs(self.ratio - 1.0) > self.clip_eps))


def interpolated_policy_gradient(surrogate: SurrogateGradient, adv_env: np.ndarray,
                                 adv_shaped: Optional[np.ndarray], nu: float) -> Tuple[Params, Optional[Params], Optional[Params]]:
    """(1 - nu) * g1 + nu * g2; the endpoints evaluate only the stream they keep."""
    if nu == 0.0 or adv_shaped is None:
        g1 = surrogate.gradient(adv_env)
        return g1, g1, None
    if nu == 1.0:
        g2 = surrogate.gradient(adv_shaped)
        return g2, None, g2
    g1 = surrogate.gradient(adv_env)
    g2 = surrogate.gradient(adv_shaped)
    return combine(g1, g2, 1.0 - nu, nu), g1, g2


@dataclass
class UpdatePlan:
    """Flattened batch, normalised advantages and value targets for every reward stream."""
    states: np.ndarray
    actions: np.ndarray
    old_log_probs: np.ndarray
    advantages: Dict[str, np.ndarray]
    targets: Dict[str, np.ndarray]
    baselines: Dict[str, ValueNet]

    def __len__(self) -> int:
        return len(self.states)


# ===== Agent =====

class SelfImitationAgent:
    """
    One learner: Gaussian policy, two value baselines, discriminator and elite
    replay, each randomness consumer with its own generator so that turning
    self-imitation off does not shift any other random stream.
    """

    def __init__(self, env_factory: EnvFactory, cfg: PPOConfig, seed: int, rank: int = 0):
        self.env_factory = env_factory
        self.cfg = cfg
        self.seed = seed
        self.rank = rank
        probe = env_factory()
        self.obs_dim, self.act_dim = probe.obs_dim, probe.act_dim

        init_seq, rollout_seq, disc_seq, ppo_seq = np.random.SeedSequence(seed).spawn(4)
        init_rng = np.random.default_rng(init_seq)
        self.policy = init_gaussian_policy(self.obs_dim, self.act_dim, init_rng, cfg.hidden, cfg.init_log_std)
        self.policy_opt = adam_init(self.policy.flat(), lr=cfg.lr)
        self.values = ValueFunctionPair(env=ValueNet.create(self.obs_dim, init_rng, cfg.hidden, cfg.value_lr),
                                        shaped=ValueNet.create(self.obs_dim, init_rng, cfg.hidden, cfg.value_lr))
        self.discriminator: Optional[Discriminator] = None
        if cfg.self_imitation:
            self.discriminator = Discriminator.create(self.obs_dim + self.act_dim, init_rng, cfg.hidden, cfg.disc_lr)
        self.replay = PriorityReplay(cfg.replay_capacity)
        self._rollout_seq = rollout_seq
        self.disc_rng = np.random.default_rng(disc_seq)
        self.ppo_rng = np.random.default_rng(ppo_seq)
        self.logger = logger

    @property
    def uses_shaped_stream(self) -> bool:
        return self.discriminator is not None and self.cfg.nu > 0.0

    def collect(self, workers: int = 1) -> RolloutBatch:
        iteration_seq = self._rollout_seq.spawn(1)[0]
        trajectories = collect_rollouts(self.env_factory, self.policy, self.cfg.batch_episodes, iteration_seq, workers)
        if self.discriminator is not None:
            shaped = [shaped_reward(self.discriminator, t.states, t.actions) for t in trajectories]
        else:
            shaped = [np.zeros(t.length) for t in trajectories]
        return RolloutBatch(trajectories, shaped)

    def update_replay(self, batch: RolloutBatch) -> int:
        return sum(1 for t in batch.trajectories if self.replay.offer(t))

    def update_discriminator(self, batch: RolloutBatch) -> Dict[str, Any]:
        """Log-loss epochs on (current rollouts vs replay); returns the loss trace and JS estimate."""
        if self.discriminator is None:
            return {}
        policy_pairs = batch.pairs
        try:
            states, actions = self.replay.sample_pairs(len(policy_pairs), self.disc_rng)
        except EmptyReplayError:
            self.logger.warning("Replay empty, discriminator update skipped",
                                extra={"event": "discriminator_skipped", "rank": self.rank})
            return {"loss": [], "js_estimate": None}
        replay_pairs = np.concatenate([states, actions], axis=1)
        trace = train_discriminator(self.discriminator, policy_pairs, replay_pairs, self.cfg.disc_epochs,
                                    self.disc_rng, self.cfg.disc_minibatch)
        # the PPO update always sees rewards from the discriminator it just trained
        batch.shaped_rewards = [shaped_reward(self.discriminator, t.states, t.actions) for t in batch.trajectories]
        return {"loss": trace, "js_estimate": js_estimate(self.discriminator, policy_pairs, replay_pairs)}

    def prepare_update(self, batch: RolloutBatch,
                       extra_streams: Optional[Dict[str, Tuple[Sequence[np.ndarray], ValueNet]]] = None) -> UpdatePlan:
        streams: Dict[str, Tuple[Sequence[np.ndarray], ValueNet]] = {"env": (batch.env_rewards, self.values.env)}
        if self.discriminator is not None:
            streams["shaped"] = (batch.shaped_rewards, self.values.shaped)
        streams.update(extra_streams or {})

        advantages, targets, baselines = {}, {}, {}
        for name, (rewards, value_net) in streams.items():
            adv, tgt = stream_advantages(batch.trajectories, rewards, value_net, self.cfg.gamma, self.cfg.lam)
            advantages[name] = normalize_advantages(adv)
            targets[name] = tgt
            baselines[name] = value_net
        if "shaped" in advantages and len(self.replay) == 0:
            advantages["shaped"] = np.zeros_like(advantages["shaped"])
        return UpdatePlan(batch.states, batch.actions, batch.log_probs, advantages, targets, baselines)

    def minibatches(self, plan: UpdatePlan) -> Iterator[np.ndarray]:
        n = len(plan)
        for _ in range(self.cfg.epochs):
            order = self.ppo_rng.permutation(n)
            for start in range(0, n, self.cfg.minibatch):
                yield order[start:start + self.cfg.minibatch]

    def surrogate(self, plan: UpdatePlan, idx: np.ndarray) -> SurrogateGradient:
        return SurrogateGradient(self.policy, plan.states[idx], plan.actions[idx], plan.old_log_probs[idx],
                                 self.cfg.clip_eps)

    def driving_gradient(self, plan: UpdatePlan, idx: np.ndarray,
                         surrogate: Optional[SurrogateGradient] = None) -> Params:
        """Interpolated ascent direction (1 - nu) g_env + nu g_shaped on one minibatch."""
        surrogate = surrogate or self.surrogate(plan, idx)
        shaped = plan.advantages["shaped"][idx] if self.uses_shaped_stream else None
        g, _, _ = interpolated_policy_gradient(surrogate, plan.advantages["env"][idx], shaped, self.cfg.nu)
        return g

    def stream_gradient(self, plan: UpdatePlan, name: str, idx: np.ndarray,
                        surrogate: Optional[SurrogateGradient] = None) -> Params:
        surrogate = surrogate or self.surrogate(plan, idx)
        return surrogate.gradient(plan.advantages[name][idx])

    def apply_gradient(self, ascent: Params) -> bool:
        """Adam ascent step on the policy; False when the update was rejected."""
        rejected_before = self.policy_opt.rejected
        descent = {k: -v for k, v in ascent.items()}
        new_flat, self.policy_opt = adam_step(self.policy_opt, self.policy.flat(), descent)
        self.policy = GaussianPolicyParams.from_flat(new_flat)
        return self.policy_opt.rejected == rejected_before

    def apply_flat_gradient(self, ascent: np.ndarray) -> bool:
        return self.apply_gradient(unflatten_params(ascent, self.policy.flat()))

    def flat_policy(self) -> np.ndarray:
        return flatten_params(self.policy.flat())

    def regress_values(self, plan: UpdatePlan, idx: np.ndarray) -> Dict[str, float]:
        return {name: net.regress(plan.states[idx], plan.targets[name][idx]) for name, net in plan.baselines.items()}

    def value_losses(self, plan: UpdatePlan) -> Dict[str, float]:
        return {name: net.loss(plan.states, plan.targets[name])[0] for name, net in plan.baselines.items()}

    def iteration_record(self, iteration: int, batch: RolloutBatch, disc_info: Dict[str, Any]) -> Dict[str, Any]:
        returns = batch.true_returns
        threshold = self.replay.admission_threshold
        record = {
            'iteration': iteration,
            'env_return_mean': float(np.mean(returns)),
            'env_return_std': float(np.std(returns)),
            'success_rate': batch.success_rate,
            'replay_threshold': float(threshold) if np.isfinite(threshold) else None,
            'replay_size': len(self.replay),
        }
        if self.discriminator is not None:
            js = disc_info.get('js_estimate')
            record['js_estimate'] = float(js) if js is not None else None
            record['shaped_reward_mean'] = float(np.mean(np.concatenate(batch.shaped_rewards)))
        return record


def ppo_interpolated_update(agent: SelfImitationAgent, batch: RolloutBatch) -> Dict[str, Any]:
    """
    PPO epochs over the batch: every minibatch applies Adam to
    (1 - nu) g_env + nu g_shaped and regresses both baselines.
    """
    if len(batch) == 0:
        raise ContractViolation("empty rollout batch")
    plan = agent.prepare_update(batch)
    initial_losses = agent.value_losses(plan)
    objectives, clip_fractions = [], []
    for idx in agent.minibatches(plan):
        surrogate = agent.surrogate(plan, idx)
        objectives.append(surrogate.objective(plan.advantages["env"][idx]))
        clip_fractions.append(surrogate.clip_fraction)
        agent.apply_gradient(agent.driving_gradient(plan, idx, surrogate))
        agent.regress_values(plan, idx)
    final_losses = agent.value_losses(plan)
    return {
        'surrogate_env': float(np.mean(objectives)),
        'clip_fraction': float(np.mean(clip_fractions)),
        'value_loss_initial': initial_losses,
        'value_loss_final': final_losses,
    }


@dataclass
class TrainingResult:
    policy: GaussianPolicyParams
    metrics: List[Dict[str, Any]]
    agent: Optional[SelfImitationAgent] = None
    last_batch: Optional[RolloutBatch] = None


IterationCallback = Callable[[Dict[str, Any], float], None]


def train_self_imitation(env_factory: EnvFactory, cfg: PPOConfig, seed: int, workers: int = 1,
                         on_iteration: Optional[IterationCallback] = None) -> TrainingResult:
    """
    Single-agent loop: roll out b episodes, offer them to the elite replay,
    train the discriminator, then run the interpolated PPO update.
    With ``cfg.self_imitation`` off this is plain PPO on environment rewards.
    """
    problems = cfg.validate()
    if problems:
        raise ContractViolation("; ".join(problems))
    agent = SelfImitationAgent(env_factory, cfg, seed)
    metrics: List[Dict[str, Any]] = []
    batch = None
    for iteration in range(cfg.iterations):
        started = time.perf_counter()
        batch = agent.collect(workers)
        agent.update_replay(batch)
        disc_info = agent.update_discriminator(batch)
        ppo_interpolated_update(agent, batch)
        record = agent.iteration_record(iteration, batch, disc_info)
        metrics.append(record)
        wall_ms = (time.perf_counter() - started) * 1000.0
        logger.debug(f"Iteration {iteration} done", extra={**record, 'wall_ms': wall_ms})
        if on_iteration:
            on_iteration(record, wall_ms)
    return TrainingResult(agent.policy, metrics, agent, batch)


# ===== Cross-entropy method baseline =====

@dataclass
class CemConfig:
    population: int = 20
    elite_frac: float = 0.2
    init_std: float = 0.5
    episodes: int = 1
    iterations: int = 50
    hidden: Tuple[int, ...] = (64, 64)

    def validate(self) -> List[str]:
        problems = []
        if self.population < 4:
            problems.append(f"CEM_POPULATION must be >= 4, got {self.population}")
        if not (0.0 < self.elite_frac <= 1.0):
            problems.append(f"CEM_ELITE_FRAC must be in (0, 1], got {self.elite_frac}")
        if self.init_std <= 0:
            problems.append(f"CEM_INIT_STD must be positive, got {self.init_std}")
        if self.episodes < 1:
            problems.append(f"CEM_EPISODES must be >= 1, got {self.episodes}")
        if not self.hidden or min(self.hidden) < 1:
            problems.append(f"PPO_HIDDEN needs at least one positive layer width, got {list(self.hidden)}")
        return problems


GenerationCallback = Callable[[Dict[str, float], float], None]


def cross_entropy_search(objective: Callable[[np.ndarray], float], init_mean: np.ndarray, init_std: float,
                         population: int, elite_frac: float, iterations: int, rng: np.random.Generator,
                         on_generation: Optional[GenerationCallback] = None) -> Tuple[np.ndarray, List[Dict[str, float]]]:
    """Diagonal-Gaussian CEM maximising ``objective``; returns the best sample seen and the per-generation trace."""
    if population < 4:
        raise ContractViolation(f"population must be >= 4, got {population}")
    if not (0.0 < elite_frac <= 1.0):
        raise ContractViolation(f"elite_frac must be in (0, 1], got {elite_frac}")
    mean = np.asarray(init_mean, dtype=np.float64).copy()
    var = np.full_like(mean, float(init_std) ** 2)
    n_elite = max(1, int(round(elite_frac * population)))
    best_vec, best_score = mean.copy(), -np.inf
    trace: List[Dict[str, float]] = []
    for generation in range(iterations):
        started = time.perf_counter()
        samples = mean + np.sqrt(var) * rng.standard_normal((population, mean.size))
        scores = np.array([objective(sample) for sample in samples])
        order = np.argsort(-scores, kind='stable')
        elite = samples[order[:n_elite]]
        if scores[order[0]] > best_score:
            best_score, best_vec = float(scores[order[0]]), samples[order[0]].copy()
        mean = elite.mean(axis=0)
        var = elite.var(axis=0)
        collapsed = var < 1e-12
        if np.any(collapsed):
            logger.warning("CEM variance collapsed, re-inflating",
                           extra={"event": "cem_variance_reinflated", "generation": generation,
                                  "dims": int(collapsed.sum())})
            var = np.where(collapsed, 1e-6, var)
        record = {
            'generation': generation,
            'best_return': float(scores[order[0]]),
            'elite_return_mean': float(scores[order[:n_elite]].mean()),
            'population_return_mean': float(scores.mean()),
        }
        trace.append(record)
        if on_generation:
            on_generation(record, (time.perf_counter() - started) * 1000.0)
    return best_vec, trace


def cem_baseline(env_factory: EnvFactory, population: int, elite_frac: float, iterations: int, seed: int,
                 episodes: int = 1, hidden: Sequence[int] = (64, 64), init_std: float = 0.5,
                 on_generation: Optional[GenerationCallback] = None) -> Tuple[GaussianPolicyParams, List[Dict[str, float]]]:
    """CEM over the policy mean-network weights, candidates scored by mean return of deterministic rollouts."""
    init_seq, search_seq, eval_seq = np.random.SeedSequence(seed).spawn(3)
    probe = env_factory()
    template = init_gaussian_policy(probe.obs_dim, probe.act_dim, np.random.default_rng(init_seq), hidden)
    weights_template = template.mean_net.weights

    def to_policy(vector: np.ndarray) -> GaussianPolicyParams:
        return GaussianPolicyParams(MlpParams(template.mean_net.sizes, unflatten_params(vector, weights_template)),
                                    template.log_std.copy())

    def objective(vector: np.ndarray) -> float:
        trajectories = collect_rollouts(env_factory, to_policy(vector), episodes, eval_seq.spawn(1)[0],
                                        deterministic=True)
        return float(np.mean([t.total_return for t in trajectories]))

    best, trace = cross_entropy_search(objective, flatten_params(weights_template), init_std, population,
                                       elite_frac, iterations, np.random.default_rng(search_seq), on_generation)
    return to_policy(best), trace
