"""
Self-imitation discriminator.

The discriminator separates current-policy (state, action) pairs (label 1)
from elite-replay pairs (label 0). Its clamped output is the density ratio
r = d_pi / (d_pi + d_E); -log r is the shaped reward and the trained
log-loss yields a Jensen-Shannon estimate.
"""

import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

import jsonlog
from autodiff import (AdamState, ContractViolation, MlpParams, Params, adam_init, adam_step, init_mlp,
                      mlp_backward, mlp_forward)

logger = jsonlog.setup_logger("self_imitation")

DELTA_CLIP = 1e-6
LOG_2 = math.log(2.0)
LOG_4 = math.log(4.0)


@dataclass
class Discriminator:
    """MLP on concatenated (state, action) → one logit; probability clamped to [delta, 1 - delta]."""
    net: MlpParams
    opt: AdamState
    delta_clip: float = DELTA_CLIP

    @classmethod
    def create(cls, in_dim: int, rng: np.random.Generator, hidden: Sequence[int] = (64, 64),
               lr: float = 1e-4) -> "Discriminator":
        net = init_mlp(in_dim, 1, rng, hidden=hidden)
        return cls(net=net, opt=adam_init(net.weights, lr=lr))

    def logits(self, pairs: np.ndarray) -> np.ndarray:
        return mlp_forward(self.net, np.atleast_2d(pairs))[:, 0]

    def probability(self, pairs: np.ndarray) -> np.ndarray:
        return clamp_probability(sigmoid(self.logits(pairs)), self.delta_clip)

    def copy(self) -> "Discriminator":
        return Discriminator(self.net.copy(), self.opt, self.delta_clip)


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def clamp_probability(p: np.ndarray, delta: float = DELTA_CLIP) -> np.ndarray:
    return np.clip(p, delta, 1.0 - delta)


def pairs_of(states: np.ndarray, actions: np.ndarray) -> np.ndarray:
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
    if states.shape[0] != actions.shape[0]:
        raise ContractViolation("state and action batches differ in length")
    return np.concatenate([states, actions], axis=1)


def logistic_loss(net: MlpParams, positives: np.ndarray, negatives: np.ndarray) -> Tuple[float, Params]:
    """
    Balanced binary log-loss, positives labelled 1 and negatives 0:
    -mean log sigmoid(z+) - mean log(1 - sigmoid(z-)), with its weight gradient.
    """
    if len(positives) == 0 or len(negatives) == 0:
        raise ContractViolation("log-loss needs both classes")
    z_pos = mlp_forward(net, positives)[:, 0]
    z_neg = mlp_forward(net, negatives)[:, 0]
    # -log sigmoid(z) = logaddexp(0, -z); -log(1 - sigmoid(z)) = logaddexp(0, z)
    loss = float(np.mean(np.logaddexp(0.0, -z_pos)) + np.mean(np.logaddexp(0.0, z_neg)))
    g_pos = mlp_backward(net, positives, ((sigmoid(z_pos) - 1.0) / len(z_pos))[:, None])
    g_neg = mlp_backward(net, negatives, (sigmoid(z_neg) / len(z_neg))[:, None])
    return loss, {k: g_pos[k] + g_neg[k] for k in g_pos}


def train_logistic(net: MlpParams, opt: AdamState, positives: np.ndarray, negatives: np.ndarray,
                   epochs: int, rng: np.random.Generator, minibatch: int = 64) -> Tuple[MlpParams, AdamState, List[float]]:
    """
    Adam on the balanced log-loss. Each epoch walks the shuffled positives in
    minibatches and pairs every chunk with an equally sized chunk of shuffled negatives.
    """
    trace: List[float] = []
    weights = net.weights
    n_pos, n_neg = len(positives), len(negatives)
    for _ in range(epochs):
        pos_order = rng.permutation(n_pos)
        neg_order = rng.permutation(n_neg)
        cursor = 0
        for start in range(0, n_pos, minibatch):
            pos_idx = pos_order[start:start + minibatch]
            neg_idx = np.take(neg_order, np.arange(cursor, cursor + len(pos_idx)), mode='wrap')
            cursor += len(pos_idx)
            loss, grads = logistic_loss(MlpParams(net.sizes, weights), positives[pos_idx], negatives[neg_idx])
            weights, opt = adam_step(opt, weights, grads)
            trace.append(loss)
    return MlpParams(net.sizes, weights), opt, trace


def train_discriminator(disc: Discriminator, policy_pairs: np.ndarray, replay_pairs: np.ndarray,
                        epochs: int, rng: np.random.Generator, minibatch: int = 64) -> List[float]:
    """
    Update the discriminator in place: policy pairs are the "current policy"
    class (high probability), replay pairs the "expert" class. Returns the
    per-minibatch loss trace; an empty replay batch skips the update.
    """
    if len(replay_pairs) == 0:
        logger.warning("Discriminator update skipped: empty replay batch",
                       extra={"event": "discriminator_skipped"})
        return []
    if len(policy_pairs) == 0:
        raise ContractViolation("policy batch is empty")
    net, opt, trace = train_logistic(disc.net, disc.opt, np.asarray(policy_pairs, dtype=np.float64),
                                      np.asarray(replay_pairs, dtype=np.float64), epochs, rng, minibatch)
    disc.net, disc.opt = net, opt
    return trace


def shaped_reward(disc: Discriminator, state, action):
    """-log r for each pair; scalar for a single pair."""
    single = np.ndim(state) == 1
    rewards = -np.log(disc.probability(pairs_of(state, action)))
    return float(rewards[0]) if single else rewards


def js_from_probabilities(p_first: np.ndarray, p_second: np.ndarray) -> float:
    """0.5 * (log 4 + mean log p over the first batch + mean log(1 - p) over the second), clipped to [0, log 2]."""
    value = 0.5 * (LOG_4 + float(np.mean(np.log(p_first))) + float(np.mean(np.log(1.0 - p_second))))
    return float(np.clip(value, 0.0, LOG_2))


def js_estimate(disc: Discriminator, policy_pairs: np.ndarray, replay_pairs: np.ndarray) -> float:
    """Variational Jensen-Shannon estimate between the two batches under a trained discriminator."""
    return js_from_probabilities(disc.probability(policy_pairs), disc.probability(replay_pairs))
