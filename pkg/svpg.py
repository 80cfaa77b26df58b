"""
Stein variational ensemble training with a Jensen-Shannon kernel.

Each agent runs the self-imitation inner loop on its own; at a barrier the
agents exchange rollouts, per-agent visitation density models are refreshed
against a shared uniform reference, and the kernel k(i, j) = exp(-JS/T) plus
the log r_ij exploration rewards couple the policy updates.
"""

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import zip_longest
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

import jsonlog
from autodiff import AdamState, ContractViolation, MlpParams, adam_init, flatten_params, init_mlp, mlp_forward
from policy_opt import EnvFactory, PPOConfig, RolloutBatch, SelfImitationAgent, ValueNet
from self_imitation import DELTA_CLIP, js_from_probabilities, sigmoid, train_logistic

logger = jsonlog.setup_logger("svpg")

KERNEL_MODES = ("js", "rbf", "independent")
RATIO_MODES = ("density", "pairwise")
# entropy tag separating the ensemble's own stream from the agents' seeds
ENSEMBLE_STREAM = 0x5E7


class DensityConfigError(ValueError):
    """Raised when the density reference cannot be built (degenerate or non-finite box)."""


@dataclass
class EnsembleConfig:
    n_agents: int = 8
    temperature: float = 0.5
    alpha0: float = 10.0
    alpha_decay_end: float = 0.8
    kernel: str = "js"
    ratio_mode: str = "density"
    density_epochs: int = 3
    density_minibatch: int = 64
    density_lr: float = 1e-3
    density_hidden: Tuple[int, ...] = (64, 64)
    reference_margin: float = 0.1
    reference_min_width: float = 0.1
    ppo: PPOConfig = field(default_factory=PPOConfig)
    seeds: Optional[List[int]] = None

    def validate(self) -> List[str]:
        problems = list(self.ppo.validate())
        if self.n_agents < 1:
            problems.append(f"SVPG_AGENTS must be >= 1, got {self.n_agents}")
        if self.temperature <= 0:
            problems.append(f"SVPG_TEMPERATURE must be positive, got {self.temperature}")
        if self.alpha0 < 0:
            problems.append(f"SVPG_ALPHA0 must be >= 0, got {self.alpha0}")
        if not (0.0 <= self.alpha_decay_end <= 1.0):
            problems.append(f"SVPG_ALPHA_DECAY_END must be in [0, 1], got {self.alpha_decay_end}")
        if self.kernel not in KERNEL_MODES:
            problems.append(f"SVPG_KERNEL must be one of {KERNEL_MODES}, got {self.kernel!r}")
        if self.ratio_mode not in RATIO_MODES:
            problems.append(f"SVPG_RATIO_MODE must be one of {RATIO_MODES}, got {self.ratio_mode!r}")
        if self.density_epochs < 0:
            problems.append(f"SVPG_DENSITY_EPOCHS must be >= 0, got {self.density_epochs}")
        if self.reference_min_width < 0 or self.reference_margin < 0:
            problems.append("SVPG_REFERENCE_MARGIN and SVPG_REFERENCE_MIN_WIDTH must be >= 0")
        if self.seeds is not None and len(self.seeds) != self.n_agents:
            problems.append(f"{len(self.seeds)} seeds given for {self.n_agents} agents")
        return problems

    def alpha(self, iteration: int, total: int) -> float:
        """Repulsion weight, linear from alpha0 down to 0 at alpha_decay_end of training."""
        horizon = self.alpha_decay_end * total
        if horizon <= 0:
            return 0.0
        return self.alpha0 * max(0.0, 1.0 - iteration / horizon)

    def agent_seeds(self, seed: int) -> List[int]:
        return list(self.seeds) if self.seeds is not None else [seed + i for i in range(self.n_agents)]


# ===== Density models =====

@dataclass
class DensityModel:
    """Logistic model of agent pairs against the shared reference; its logit is log density up to a common constant."""
    net: MlpParams
    opt: AdamState

    @classmethod
    def create(cls, in_dim: int, rng: np.random.Generator, hidden: Sequence[int] = (64, 64),
               lr: float = 1e-3) -> "DensityModel":
        net = init_mlp(in_dim, 1, rng, hidden=hidden)
        return cls(net, adam_init(net.weights, lr=lr))

    def log_density(self, pairs: np.ndarray) -> np.ndarray:
        return mlp_forward(self.net, np.atleast_2d(pairs))[:, 0]


class ReferenceBox:
    """Uniform reference over the running bounding box of every agent's (state, action) pairs."""

    def __init__(self, dim: int, margin: float = 0.1, min_width: float = 0.1):
        self.dim = dim
        self.margin = margin
        self.min_width = min_width
        self.low: Optional[np.ndarray] = None
        self.high: Optional[np.ndarray] = None

    def update(self, batches: Sequence[np.ndarray]) -> None:
        points = np.concatenate([np.atleast_2d(b) for b in batches])
        low, high = points.min(axis=0), points.max(axis=0)
        self.low = low if self.low is None else np.minimum(self.low, low)
        self.high = high if self.high is None else np.maximum(self.high, high)

    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        self.validate()
        width = np.maximum(self.high - self.low, self.min_width)
        center = 0.5 * (self.high + self.low)
        half = 0.5 * width * (1.0 + 2.0 * self.margin)
        return center - half, center + half

    def validate(self) -> None:
        if self.low is None:
            raise DensityConfigError("reference box has not seen any data")
        if not (np.all(np.isfinite(self.low)) and np.all(np.isfinite(self.high))):
            raise DensityConfigError("reference box bounds are not finite")
        if np.any(np.maximum(self.high - self.low, self.min_width) <= 0):
            raise DensityConfigError("reference box has zero volume; set SVPG_REFERENCE_MIN_WIDTH > 0")

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        low, high = self.bounds()
        return rng.uniform(low, high, size=(n, self.dim))


def fit_density_model(model: DensityModel, agent_pairs: np.ndarray, reference: ReferenceBox, epochs: int,
                      rng: np.random.Generator, minibatch: int = 64) -> List[float]:
    """Logistic discrimination of agent pairs (label 1) against fresh reference samples (label 0)."""
    if len(agent_pairs) == 0:
        raise ContractViolation("density model needs a nonempty agent batch")
    if epochs == 0:
        return []
    negatives = reference.sample(len(agent_pairs), rng)
    net, opt, trace = train_logistic(model.net, model.opt, np.asarray(agent_pairs, dtype=np.float64), negatives,
                                     epochs, rng, minibatch)
    model.net, model.opt = net, opt
    return trace


# ===== Ratios, kernel and rewards =====

def ratio_from_gap(gap: np.ndarray, delta: float = DELTA_CLIP) -> np.ndarray:
    """
    Clamped sigmoid of a log-density gap. Evaluated on |gap| and mirrored so
    that ratio(g) + ratio(-g) == 1 holds exactly in floating point.
    """
    gap = np.asarray(gap, dtype=np.float64)
    p = np.clip(sigmoid(np.abs(gap)), delta, 1.0 - delta)
    return np.where(gap >= 0, p, 1.0 - p)


def pair_ratio(model_i: DensityModel, model_j: DensityModel, state, action) -> np.ndarray:
    """r_ij = rho_i / (rho_i + rho_j) at the given (state, action) pairs."""
    pairs = np.concatenate([np.atleast_2d(state), np.atleast_2d(action)], axis=1)
    return ratio_from_gap(model_i.log_density(pairs) - model_j.log_density(pairs))


def exploration_reward(model_i: DensityModel, model_j: DensityModel, state, action) -> np.ndarray:
    return np.log(pair_ratio(model_i, model_j, state, action))


GapFn = Callable[[int, int, np.ndarray], np.ndarray]


def density_gap_fn(models: Sequence[DensityModel]) -> GapFn:
    def gap(i: int, j: int, pairs: np.ndarray) -> np.ndarray:
        return models[i].log_density(pairs) - models[j].log_density(pairs)
    return gap


def kernel_from_gaps(gap: GapFn, batches: Sequence[np.ndarray], temperature: float) -> np.ndarray:
    """Symmetrised half-JS estimates D(i, j) and k = exp(-D / T) with unit diagonal."""
    n = len(batches)
    divergence = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            r_on_i = ratio_from_gap(gap(i, j, batches[i]))
            r_on_j = ratio_from_gap(gap(i, j, batches[j]))
            divergence[i, j] = js_from_probabilities(r_on_i, r_on_j)
    divergence = 0.5 * (divergence + divergence.T)
    kernel = np.exp(-divergence / temperature)
    np.fill_diagonal(kernel, 1.0)
    return kernel


def kernel_matrix(models: Sequence[DensityModel], batches: Sequence[np.ndarray], temperature: float) -> np.ndarray:
    return kernel_from_gaps(density_gap_fn(models), batches, temperature)


def off_diagonal(kernel: np.ndarray) -> np.ndarray:
    return kernel[~np.eye(len(kernel), dtype=bool)]


class PairwiseRatios:
    """One discriminator per unordered agent pair, trained on batch_i (label 1) vs batch_j."""

    def __init__(self, n: int, in_dim: int, rng: np.random.Generator, hidden: Sequence[int], lr: float):
        self.nets: Dict[Tuple[int, int], DensityModel] = {}
        for i in range(n):
            for j in range(i + 1, n):
                self.nets[(i, j)] = DensityModel.create(in_dim, rng, hidden, lr)

    def fit(self, batches: Sequence[np.ndarray], epochs: int, rng: np.random.Generator, minibatch: int) -> None:
        for (i, j), model in self.nets.items():
            net, opt, _ = train_logistic(model.net, model.opt, batches[i], batches[j], epochs, rng, minibatch)
            model.net, model.opt = net, opt

    def gap(self, i: int, j: int, pairs: np.ndarray) -> np.ndarray:
        if i < j:
            return self.nets[(i, j)].log_density(pairs)
        return -self.nets[(j, i)].log_density(pairs)


# ===== Ensemble update =====

def rbf_kernel(thetas: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Parameter-space RBF kernel with median-heuristic bandwidth.
    Returns K and grad_K with grad_K[j, i] = d k(theta_j, theta_i) / d theta_j.
    """
    thetas = np.asarray(thetas, dtype=np.float64)
    n = len(thetas)
    diff = thetas[:, None, :] - thetas[None, :, :]
    sq = np.sum(diff ** 2, axis=-1)
    med = float(np.median(sq)) if n > 1 else 0.0
    h = med / np.log(n) if n > 1 and med > 0 else 1.0
    kernel = np.exp(-sq / h)
    grad = -2.0 / h * diff * kernel[:, :, None]
    return kernel, grad


def svpg_delta(driving: np.ndarray, repulsion: Optional[np.ndarray], kernel: np.ndarray, alpha: float,
               temperature: float) -> np.ndarray:
    """
    delta_i = (1/n) sum_j [k(j, i) g_j + alpha k(j, i) / T R_ij], where R_ij is
    the exploration-reward policy gradient of agent i against agent j (R_ii unused).
    """
    driving = np.asarray(driving, dtype=np.float64)
    n, d = driving.shape
    if kernel.shape != (n, n):
        raise ContractViolation(f"kernel shape {kernel.shape} does not match {n} agents")
    if repulsion is not None and repulsion.shape != (n, n, d):
        raise ContractViolation(f"repulsion shape {repulsion.shape} != {(n, n, d)}")
    deltas = kernel.T @ driving
    if repulsion is not None and alpha != 0.0:
        scale = kernel.T / temperature
        np.fill_diagonal(scale, 0.0)
        deltas = deltas + alpha * np.einsum('ij,ijd->id', scale, repulsion)
    return deltas / n


def rbf_svgd_delta(driving: np.ndarray, thetas: np.ndarray, alpha: float) -> Tuple[np.ndarray, np.ndarray]:
    kernel, grad = rbf_kernel(thetas)
    n = len(thetas)
    deltas = (kernel.T @ driving + alpha * grad.sum(axis=0)) / n
    return deltas, kernel


@dataclass
class BaselineBank:
    """Per agent: env and shaped baselines (owned by the agent) plus one per exploration stream."""
    agents: List[SelfImitationAgent]
    exploration: List[Dict[int, ValueNet]]

    @classmethod
    def create(cls, agents: List[SelfImitationAgent], rng: np.random.Generator, with_exploration: bool) -> "BaselineBank":
        exploration = []
        for i, agent in enumerate(agents):
            nets = {}
            if with_exploration:
                for j in range(len(agents)):
                    if j != i:
                        nets[j] = ValueNet.create(agent.obs_dim, rng, agent.cfg.hidden, agent.cfg.value_lr)
            exploration.append(nets)
        return cls(agents, exploration)

    def count(self, i: int) -> int:
        return 2 + len(self.exploration[i])


@dataclass
class EnsembleResult:
    agents: List[SelfImitationAgent]
    metrics: List[Dict[str, Any]]
    kernels: List[np.ndarray]
    best_agent: int
    density_models: List[DensityModel]
    last_batches: List[RolloutBatch]

    @property
    def policies(self):
        return [agent.policy for agent in self.agents]


def select_best_agent(metrics: Sequence[Dict[str, Any]], window_frac: float = 0.1) -> int:
    """Agent with the highest mean return over the final window of iterations."""
    if not metrics:
        return 0
    window = max(1, int(round(window_frac * len(metrics))))
    tail = metrics[-window:]
    n = len(tail[0]['agents'])
    scores = [np.mean([record['agents'][i]['env_return_mean'] for record in tail]) for i in range(n)]
    return int(np.argmax(scores))


def _local_phase(agent: SelfImitationAgent) -> Tuple[RolloutBatch, Dict[str, Any]]:
    batch = agent.collect(1)
    agent.update_replay(batch)
    return batch, agent.update_discriminator(batch)


def train_ensemble(env_factory: EnvFactory, cfg: EnsembleConfig, seed: int, workers: int = 1,
                   on_iteration: Optional[Callable[[Dict[str, Any], np.ndarray, float], None]] = None) -> EnsembleResult:
    """
    Lockstep ensemble training. Each iteration: local self-imitation steps per
    agent (optionally concurrent), then a rank-ordered exchange that refreshes
    density models and the kernel, then PPO minibatches where every agent's
    update is the SVPG combination of all agents' gradients.
    """
    problems = cfg.validate()
    if problems:
        raise ContractViolation("; ".join(problems))
    n = cfg.n_agents
    agents = [SelfImitationAgent(env_factory, cfg.ppo, s, rank=i) for i, s in enumerate(cfg.agent_seeds(seed))]
    in_dim = agents[0].obs_dim + agents[0].act_dim
    dim = agents[0].flat_policy().size

    ens_init_seq, ens_seq = np.random.SeedSequence([seed, ENSEMBLE_STREAM]).spawn(2)
    ens_init_rng = np.random.default_rng(ens_init_seq)
    ens_rng = np.random.default_rng(ens_seq)
    densities = [DensityModel.create(in_dim, ens_init_rng, cfg.density_hidden, cfg.density_lr) for _ in range(n)]
    pairwise = (PairwiseRatios(n, in_dim, ens_init_rng, cfg.density_hidden, cfg.density_lr)
                if cfg.ratio_mode == "pairwise" and n > 1 else None)
    bank = BaselineBank.create(agents, ens_init_rng, with_exploration=cfg.kernel == "js" and n > 1)
    reference = ReferenceBox(in_dim, cfg.reference_margin, cfg.reference_min_width)

    iterations = cfg.ppo.iterations
    metrics: List[Dict[str, Any]] = []
    kernels: List[np.ndarray] = []
    batches: List[RolloutBatch] = []
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for iteration in range(iterations):
            started = time.perf_counter()
            alpha = cfg.alpha(iteration, iterations)

            if pool is not None:
                local = list(pool.map(_local_phase, agents))
            else:
                local = [_local_phase(agent) for agent in agents]
            batches = [batch for batch, _ in local]

            # exchange: every agent sees the same snapshot, merged by rank
            pair_batches = [batch.pairs for batch in batches]
            kernel = np.ones((1, 1))
            gap: Optional[GapFn] = None
            if n > 1:
                reference.update(pair_batches)
                for i in range(n):
                    fit_density_model(densities[i], pair_batches[i], reference, cfg.density_epochs, ens_rng,
                                      cfg.density_minibatch)
                if pairwise is not None:
                    pairwise.fit(pair_batches, cfg.density_epochs, ens_rng, cfg.density_minibatch)
                    gap = pairwise.gap
                else:
                    gap = density_gap_fn(densities)
                kernel = kernel_from_gaps(gap, pair_batches, cfg.temperature)

            use_repulsion = cfg.kernel == "js" and n > 1 and alpha > 0.0
            plans = []
            for i, (agent, batch) in enumerate(zip(agents, batches)):
                extra = None
                if use_repulsion:
                    extra = {}
                    for j, value_net in bank.exploration[i].items():
                        rewards = [np.log(ratio_from_gap(gap(i, j, t.pairs()))) for t in batch.trajectories]
                        extra[f"explore/{j}"] = (rewards, value_net)
                plans.append(agent.prepare_update(batch, extra))

            zeroed = set()
            for step in zip_longest(*[agent.minibatches(plan) for agent, plan in zip(agents, plans)]):
                driving = np.zeros((n, dim))
                repulsion = np.zeros((n, n, dim)) if use_repulsion else None
                for i, (agent, plan, idx) in enumerate(zip(agents, plans, step)):
                    if idx is None or i in zeroed:
                        continue
                    surrogate = agent.surrogate(plan, idx)
                    driving[i] = flatten_params(agent.driving_gradient(plan, idx, surrogate))
                    if use_repulsion:
                        for j in bank.exploration[i]:
                            repulsion[i, j] = flatten_params(agent.stream_gradient(plan, f"explore/{j}", idx, surrogate))
                    finite = np.all(np.isfinite(driving[i])) and (repulsion is None or np.all(np.isfinite(repulsion[i])))
                    if not finite:
                        logger.warning(f"Agent {i} produced a non-finite gradient, contribution zeroed",
                                       extra={"event": "ensemble_gradient_zeroed", "rank": i, "iteration": iteration})
                        zeroed.add(i)
                        driving[i] = 0.0
                        if repulsion is not None:
                            repulsion[i] = 0.0

                if n == 1 or cfg.kernel == "independent":
                    deltas = driving
                elif cfg.kernel == "rbf":
                    thetas = np.stack([agent.flat_policy() for agent in agents])
                    deltas, _ = rbf_svgd_delta(driving, thetas, alpha)
                else:
                    deltas = svpg_delta(driving, repulsion, kernel, alpha, cfg.temperature)

                for i, (agent, plan, idx) in enumerate(zip(agents, plans, step)):
                    if idx is None:
                        continue
                    agent.apply_flat_gradient(deltas[i])
                    agent.regress_values(plan, idx)

            offdiag = off_diagonal(kernel)
            record = {
                'iteration': iteration,
                'alpha': float(alpha),
                'kernel_min_offdiag': float(offdiag.min()) if offdiag.size else None,
                'kernel_mean_offdiag': float(offdiag.mean()) if offdiag.size else None,
                'agents': [agent.iteration_record(iteration, batch, info)
                           for agent, (batch, info) in zip(agents, local)],
            }
            metrics.append(record)
            kernels.append(kernel)
            wall_ms = (time.perf_counter() - started) * 1000.0
            logger.debug(f"Ensemble iteration {iteration} done",
                         extra={'iteration': iteration, 'alpha': alpha, 'wall_ms': wall_ms,
                                'kernel_mean_offdiag': record['kernel_mean_offdiag']})
            if on_iteration:
                on_iteration(record, kernel, wall_ms)
    finally:
        if pool is not None:
            pool.shutdown()

    best = select_best_agent(metrics)
    logger.info(f"Ensemble finished, best agent {best}", extra={'best_agent': best, 'n_agents': n})
    return EnsembleResult(agents, metrics, kernels, best, densities, batches)
