"""Small builders shared by the test modules."""

import numpy as np

from environments import EnvSpec, MazeSpec, SparseChainSpec
from policy_opt import PPOConfig


def small_ppo(**overrides) -> PPOConfig:
    base = dict(iterations=3, batch_episodes=2, epochs=1, minibatch=16, hidden=(8, 8), disc_epochs=1,
                disc_minibatch=16, lr=1e-3, disc_lr=1e-3)
    base.update(overrides)
    return PPOConfig(**base)


def chain_factory(horizon: int = 20, reward_mode: str = "dense", shaping: str = "none", mask_prob: float = 0.0):
    spec = EnvSpec(name="chain", reward_mode=reward_mode, mask_prob=mask_prob,
                   chain=SparseChainSpec(horizon=horizon, shaping=shaping))
    return spec.factory()


def maze_factory(horizon: int = 15):
    return EnvSpec(name="maze", maze=MazeSpec(horizon=horizon)).factory()


def flat_equal(a, b) -> bool:
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)
