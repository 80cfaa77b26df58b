"""
Desk-scale environments: deceptive maze, two-armed bandit, sparse chain,
plus episodic / noisy reward wrappers and visitation instrumentation.
"""

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

import jsonlog
from autodiff import ContractViolation, GaussianPolicyParams, mlp_forward

logger = jsonlog.setup_logger("environments")

REWARD_MODES = ("dense", "episodic", "noisy")
ENV_NAMES = ("maze", "bandit", "chain")


@dataclass
class StepResult:
    """Outcome of one environment step."""
    observation: np.ndarray
    reward: float
    done: bool
    info: Dict[str, Any] = field(default_factory=dict)


class Env:
    """Base class: single-owner, reset(rng) → observation, step(action) → StepResult."""

    obs_dim: int = 0
    act_dim: int = 0
    horizon: int = 1

    def __init__(self):
        self._t = 0
        self._done = True
        self._rng: Optional[np.random.Generator] = None

    @property
    def t(self) -> int:
        return self._t

    @property
    def done(self) -> bool:
        return self._done

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        self._rng = rng
        self._t = 0
        self._done = False
        return self._reset_state(rng)

    def step(self, action) -> StepResult:
        if self._done:
            raise ContractViolation("step called on a finished episode; call reset first")
        action = np.asarray(action, dtype=np.float64).reshape(-1)
        if action.shape != (self.act_dim,):
            raise ContractViolation(f"action shape {action.shape} does not match action dim {self.act_dim}")
        obs, reward, terminal, info = self._advance(action)
        self._t += 1
        self._done = terminal or self._t >= self.horizon
        info.setdefault("raw_reward", reward)
        return StepResult(obs, float(reward), self._done, info)

    def _reset_state(self, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def _advance(self, action: np.ndarray) -> Tuple[np.ndarray, float, bool, Dict[str, Any]]:
        raise NotImplementedError


# ===== Maze =====

@dataclass
class MazeSpec:
    """Unit-square arena split by a vertical wall with a gap near the top."""
    wall_x: float = 0.5
    wall_top: float = 0.7
    start: Tuple[float, float] = (0.25, 0.25)
    red_center: Tuple[float, float] = (0.25, 0.6)
    red_radius: float = 0.1
    red_reward: float = 1.0
    green_center: Tuple[float, float] = (0.75, 0.25)
    green_radius: float = 0.1
    green_reward: float = 10.0
    horizon: int = 250
    max_speed: float = 0.05
    motion_noise: float = 0.005
    start_noise: float = 0.0


def in_disc(position, center, radius) -> bool:
    return float(np.hypot(position[0] - center[0], position[1] - center[1])) <= radius


class MazeEnv(Env):
    """Point particle with velocity actions; red disc pays 1 per step, green disc (behind the wall) 10."""

    obs_dim = 2
    act_dim = 2

    def __init__(self, spec: Optional[MazeSpec] = None):
        super().__init__()
        self.spec = spec or MazeSpec()
        self.horizon = self.spec.horizon
        self.position = np.array(self.spec.start, dtype=np.float64)

    def _reset_state(self, rng):
        start = np.array(self.spec.start, dtype=np.float64)
        if self.spec.start_noise > 0:
            start = start + self.spec.start_noise * rng.standard_normal(2)
        self.position = self._project(np.array(self.spec.start, dtype=np.float64), np.clip(start, 0.0, 1.0))
        return self.position.copy()

    def _project(self, old: np.ndarray, new: np.ndarray) -> np.ndarray:
        """Stop a move that would cross the wall segment at the wall surface."""
        x0, x1 = old[0], new[0]
        wall = self.spec.wall_x
        if (x0 - wall) * (x1 - wall) < 0 or (x0 != wall and x1 == wall):
            frac = (wall - x0) / (x1 - x0)
            y_cross = old[1] + frac * (new[1] - old[1])
            if y_cross <= self.spec.wall_top:
                side = -1.0 if x0 < wall else 1.0
                return np.array([wall + side * 1e-6, new[1]])
        return new

    def _advance(self, action):
        velocity = np.clip(action, -self.spec.max_speed, self.spec.max_speed)
        noise = self.spec.motion_noise * self._rng.standard_normal(2) if self.spec.motion_noise > 0 else 0.0
        proposed = np.clip(self.position + velocity + noise, 0.0, 1.0)
        self.position = self._project(self.position, proposed)

        reward = 0.0
        region = None
        if in_disc(self.position, self.spec.green_center, self.spec.green_radius):
            reward, region = self.spec.green_reward, "green"
        elif in_disc(self.position, self.spec.red_center, self.spec.red_radius):
            reward, region = self.spec.red_reward, "red"
        return self.position.copy(), reward, False, {"region": region, "success": region == "green"}


# ===== Bandit =====

@dataclass
class BanditSpec:
    """Two Bernoulli arms with success probabilities p and p + eps."""
    p: float = 0.45
    eps: float = 0.1

    def validate(self):
        if not (0.0 <= self.p <= self.p + self.eps <= 1.0):
            raise ContractViolation(f"bandit probabilities invalid: p={self.p}, eps={self.eps}")


class BanditEnv(Env):
    """One-step bandit; action[0] > 0 pulls arm 2 (p + eps), otherwise arm 1 (p)."""

    obs_dim = 1
    act_dim = 1
    horizon = 1

    def __init__(self, spec: Optional[BanditSpec] = None):
        super().__init__()
        self.spec = spec or BanditSpec()
        self.spec.validate()

    def _reset_state(self, rng):
        return np.ones(1)

    def _advance(self, action):
        arm = 2 if action[0] > 0 else 1
        prob = self.spec.p + self.spec.eps if arm == 2 else self.spec.p
        reward = 1.0 if self._rng.random() < prob else 0.0
        return np.ones(1), reward, True, {"arm": arm, "success": arm == 2}


def arm_preference(policy: GaussianPolicyParams) -> float:
    """Probability that the policy pulls arm 2 (action > 0) at the constant bandit observation."""
    mean = float(mlp_forward(policy.mean_net, np.ones(1))[0])
    std = math.exp(float(policy.log_std[0]))
    return 0.5 * (1.0 + math.erf(mean / (std * math.sqrt(2.0))))


# ===== Sparse chain =====

@dataclass
class SparseChainSpec:
    """1-dim walk from 0; reward only once the position passes the goal distance."""
    distance: float = 1.0
    goal_reward: float = 1.0
    action_cost: float = 0.001
    horizon: int = 100
    max_step: float = 0.1
    shaping: str = "none"  # "none" | "progress"


class SparseChainEnv(Env):
    obs_dim = 1
    act_dim = 1

    def __init__(self, spec: Optional[SparseChainSpec] = None):
        super().__init__()
        self.spec = spec or SparseChainSpec()
        self.horizon = self.spec.horizon
        self.position = 0.0
        self.reached = False

    def _reset_state(self, rng):
        self.position = 0.0
        self.reached = False
        return np.array([self.position])

    def _advance(self, action):
        move = float(np.clip(action[0], -self.spec.max_step, self.spec.max_step))
        previous = self.position
        self.position += move
        reward = -self.spec.action_cost * float(action @ action)
        if self.position >= self.spec.distance:
            reward += self.spec.goal_reward
            self.reached = True
        if self.spec.shaping == "progress":
            reward += self.position - previous
        return np.array([self.position]), reward, False, {"success": self.reached}


# ===== Reward wrappers =====

class RewardWrapper(Env):
    """Delegates dynamics to an inner environment and rewrites only the reward."""

    def __init__(self, env: Env):
        super().__init__()
        self.env = env
        self.obs_dim = env.obs_dim
        self.act_dim = env.act_dim
        self.horizon = env.horizon

    @property
    def t(self) -> int:
        return self.env.t

    @property
    def done(self) -> bool:
        return self.env.done

    def reset(self, rng):
        self._rng = rng
        return self.env.reset(rng)

    def step(self, action) -> StepResult:
        result = self.env.step(action)
        return StepResult(result.observation, self._rewrite(result), result.done, result.info)

    def _rewrite(self, result: StepResult) -> float:
        raise NotImplementedError


class EpisodicReward(RewardWrapper):
    """Withholds rewards and pays the accumulated sum at the final step."""

    def reset(self, rng):
        self._accumulated = 0.0
        return super().reset(rng)

    def _rewrite(self, result):
        self._accumulated += result.reward
        return self._accumulated if result.done else 0.0


class NoisyReward(RewardWrapper):
    """Zeroes each step's reward independently with probability p_m."""

    def __init__(self, env: Env, p_m: float, rng: Optional[np.random.Generator] = None):
        super().__init__(env)
        if not (0.0 <= p_m <= 1.0):
            raise ContractViolation(f"masking probability {p_m} outside [0, 1]")
        self.p_m = p_m
        self._mask_rng = rng

    def reset(self, rng):
        self._episode_rng = self._mask_rng if self._mask_rng is not None else rng
        return super().reset(rng)

    def _rewrite(self, result):
        keep = self._episode_rng.random() >= self.p_m
        return result.reward if keep else 0.0


def wrap_episodic(env: Env) -> Env:
    return EpisodicReward(env)


def wrap_noisy(env: Env, p_m: float, rng: Optional[np.random.Generator] = None) -> Env:
    return NoisyReward(env, p_m, rng)


def env_reset(env: Env, rng: np.random.Generator) -> np.ndarray:
    return env.reset(rng)


def env_step(env: Env, action) -> StepResult:
    return env.step(action)


# ===== Environment selection =====

@dataclass
class EnvSpec:
    """Which environment to build and how its rewards are delivered."""
    name: str = "chain"
    reward_mode: str = "dense"
    mask_prob: float = 0.0
    maze: MazeSpec = field(default_factory=MazeSpec)
    bandit: BanditSpec = field(default_factory=BanditSpec)
    chain: SparseChainSpec = field(default_factory=SparseChainSpec)

    def validate(self) -> List[str]:
        problems = []
        if self.name not in ENV_NAMES:
            problems.append(f"ENV_NAME must be one of {ENV_NAMES}, got {self.name!r}")
        if self.reward_mode not in REWARD_MODES:
            problems.append(f"ENV_REWARD_MODE must be one of {REWARD_MODES}, got {self.reward_mode!r}")
        if not (0.0 <= self.mask_prob <= 1.0):
            problems.append(f"ENV_MASK_PROB must be in [0, 1], got {self.mask_prob}")
        if self.chain.shaping not in ("none", "progress"):
            problems.append(f"ENV_CHAIN_SHAPING must be none or progress, got {self.chain.shaping!r}")
        if not (0.0 <= self.bandit.p <= self.bandit.p + self.bandit.eps <= 1.0):
            problems.append("ENV_BANDIT_P / ENV_BANDIT_EPS must satisfy 0 <= p <= p+eps <= 1")
        return problems

    def make(self) -> Env:
        if self.name == "maze":
            env: Env = MazeEnv(self.maze)
        elif self.name == "bandit":
            env = BanditEnv(self.bandit)
        elif self.name == "chain":
            env = SparseChainEnv(self.chain)
        else:
            raise ContractViolation(f"unknown environment {self.name!r}")
        if self.reward_mode == "episodic":
            env = wrap_episodic(env)
        elif self.reward_mode == "noisy":
            env = wrap_noisy(env, self.mask_prob)
        return env

    def factory(self) -> Callable[[], Env]:
        return self.make


# ===== Visitation instrumentation =====

def _project_2d(states: np.ndarray) -> np.ndarray:
    if states.shape[1] >= 2:
        return states[:, :2]
    return np.concatenate([states, np.zeros((states.shape[0], 1))], axis=1)


def visitation_histogram(trajectories: Sequence, grid_resolution: int,
                         bounds: Tuple[Tuple[float, float], Tuple[float, float]] = ((0.0, 1.0), (0.0, 1.0)),
                         project: Optional[Callable[[np.ndarray], np.ndarray]] = None) -> np.ndarray:
    """Normalised occupancy grid, row = y index, column = x index; sums to 1."""
    if not trajectories:
        raise ContractViolation("visitation histogram needs at least one trajectory")
    project = project or _project_2d
    points = np.concatenate([project(np.atleast_2d(np.asarray(t.states, dtype=np.float64))) for t in trajectories])
    if points.shape[0] == 0:
        raise ContractViolation("visitation histogram needs at least one state")
    (x_lo, x_hi), (y_lo, y_hi) = bounds
    cols = np.clip(((points[:, 0] - x_lo) / (x_hi - x_lo) * grid_resolution).astype(int), 0, grid_resolution - 1)
    rows = np.clip(((points[:, 1] - y_lo) / (y_hi - y_lo) * grid_resolution).astype(int), 0, grid_resolution - 1)
    grid = np.zeros((grid_resolution, grid_resolution))
    np.add.at(grid, (rows, cols), 1.0)
    return grid / grid.sum()


def region_mass(trajectories: Sequence, center, radius: float) -> float:
    """Fraction of visited states inside a disc."""
    points = np.concatenate([np.atleast_2d(t.states) for t in trajectories])
    inside = np.hypot(points[:, 0] - center[0], points[:, 1] - center[1]) <= radius
    return float(inside.mean()) if len(points) else 0.0


def write_heatmap_csv(grid: np.ndarray, path: str) -> None:
    np.savetxt(path, grid, delimiter=",", fmt="%.10g")
