"""
Dense math core for the workbench.

A fixed-architecture tanh MLP with hand-written backpropagation, diagonal
Gaussian policy utilities and an Adam optimizer. Parameter sets are plain
``Dict[str, np.ndarray]`` mappings (float64) so optimizers, checkpoints and
ensemble updates can treat every network the same way.
"""

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np

import jsonlog

logger = jsonlog.setup_logger("autodiff")

Params = Dict[str, np.ndarray]

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
LOG_2PI = math.log(2.0 * math.pi)
DEFAULT_HIDDEN = (64, 64)


class ContractViolation(ValueError):
    """Raised when a caller breaks an operation's preconditions (shapes, ranges, state)."""


# ===== MLP =====

@dataclass
class MlpParams:
    """Weights of an input → hidden... → output MLP, tanh on hidden layers, linear output.

    ``weights`` holds ``w{k}`` with shape (fan_in, fan_out) and ``b{k}`` with shape (fan_out,).
    """
    sizes: Tuple[int, ...]
    weights: Params

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def copy(self) -> "MlpParams":
        return MlpParams(self.sizes, {k: v.copy() for k, v in self.weights.items()})

    @classmethod
    def from_weights(cls, weights: Params) -> "MlpParams":
        """Rebuild from a flat weight dict, inferring the layer sizes from the shapes."""
        n_layers = len([k for k in weights if k.startswith("w")])
        if n_layers == 0:
            raise ContractViolation("no weight matrices found")
        sizes = [int(weights["w0"].shape[0])]
        for layer in range(n_layers):
            w = weights[f"w{layer}"]
            b = weights[f"b{layer}"]
            if w.ndim != 2 or w.shape[0] != sizes[-1] or b.shape != (w.shape[1],):
                raise ContractViolation(f"layer {layer} shapes do not chain: {w.shape}, {b.shape}")
            sizes.append(int(w.shape[1]))
        return cls(tuple(sizes), {k: np.asarray(v, dtype=np.float64) for k, v in weights.items()})


def init_mlp(in_dim: int, out_dim: int, rng: np.random.Generator,
             hidden: Sequence[int] = DEFAULT_HIDDEN, out_scale: float = 1.0) -> MlpParams:
    """Scaled-normal initialisation (std 1/sqrt(fan_in)), zero biases, output layer scaled by out_scale."""
    sizes = (int(in_dim),) + tuple(int(h) for h in hidden) + (int(out_dim),)
    weights: Params = {}
    for layer in range(len(sizes) - 1):
        fan_in, fan_out = sizes[layer], sizes[layer + 1]
        w = rng.standard_normal((fan_in, fan_out)) / math.sqrt(fan_in)
        if layer == len(sizes) - 2:
            w *= out_scale
        weights[f"w{layer}"] = w
        weights[f"b{layer}"] = np.zeros(fan_out)
    return MlpParams(sizes, weights)


def _as_batch(params: MlpParams, x) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    batch = x[None, :] if single else x
    if batch.ndim != 2 or batch.shape[1] != params.in_dim:
        raise ContractViolation(f"input shape {x.shape} does not match input dim {params.in_dim}")
    return batch, single


def _forward_cache(params: MlpParams, batch: np.ndarray):
    activations = [batch]
    h = batch
    for layer in range(params.n_layers):
        h = h @ params.weights[f"w{layer}"] + params.weights[f"b{layer}"]
        if layer < params.n_layers - 1:
            h = np.tanh(h)
        activations.append(h)
    return activations


def mlp_forward(params: MlpParams, x) -> np.ndarray:
    """Forward pass for a single input vector or a (N, in_dim) batch."""
    batch, single = _as_batch(params, x)
    out = _forward_cache(params, batch)[-1]
    return out[0] if single else out


def mlp_backward(params: MlpParams, x, out_grad) -> Params:
    """Gradient of sum(out_grad * mlp_forward(x)) with respect to every weight (summed over the batch)."""
    batch, single = _as_batch(params, x)
    g = np.asarray(out_grad, dtype=np.float64)
    if single:
        g = g[None, :]
    if g.shape != (batch.shape[0], params.out_dim):
        raise ContractViolation(f"out_grad shape {np.shape(out_grad)} does not match output dim {params.out_dim}")

    activations = _forward_cache(params, batch)
    grads: Params = {}
    delta = g
    for layer in reversed(range(params.n_layers)):
        h_in = activations[layer]
        grads[f"w{layer}"] = h_in.T @ delta
        grads[f"b{layer}"] = delta.sum(axis=0)
        if layer > 0:
            # activations[layer] is tanh output of the previous layer
            delta = (delta @ params.weights[f"w{layer}"].T) * (1.0 - h_in ** 2)
    return {k: grads[k] for k in params.weights}


# ===== Gaussian policy =====

@dataclass
class GaussianPolicyParams:
    """Diagonal Gaussian policy: MLP mean, state-independent log-std clamped to [-5, 2]."""
    mean_net: MlpParams
    log_std: np.ndarray

    def __post_init__(self):
        self.log_std = np.clip(np.asarray(self.log_std, dtype=np.float64), LOG_STD_MIN, LOG_STD_MAX)

    @property
    def obs_dim(self) -> int:
        return self.mean_net.in_dim

    @property
    def act_dim(self) -> int:
        return self.mean_net.out_dim

    def flat(self) -> Params:
        """Flat view keyed ``mean_net/<w>`` and ``log_std`` (arrays are shared, not copied)."""
        out = {f"mean_net/{k}": v for k, v in self.mean_net.weights.items()}
        out["log_std"] = self.log_std
        return out

    @classmethod
    def from_flat(cls, flat: Params) -> "GaussianPolicyParams":
        mean = {k.split("/", 1)[1]: np.array(v, dtype=np.float64) for k, v in flat.items() if k.startswith("mean_net/")}
        return cls(MlpParams.from_weights(mean), np.array(flat["log_std"], dtype=np.float64))

    def copy(self) -> "GaussianPolicyParams":
        return GaussianPolicyParams(self.mean_net.copy(), self.log_std.copy())


def init_gaussian_policy(obs_dim: int, act_dim: int, rng: np.random.Generator,
                         hidden: Sequence[int] = DEFAULT_HIDDEN, init_log_std: float = 0.0) -> GaussianPolicyParams:
    mean_net = init_mlp(obs_dim, act_dim, rng, hidden=hidden, out_scale=0.01)
    return GaussianPolicyParams(mean_net, np.full(act_dim, float(init_log_std)))


def _check_actions(policy: GaussianPolicyParams, actions, batch_len: int, single: bool) -> np.ndarray:
    a = np.asarray(actions, dtype=np.float64)
    a = a[None, :] if single else a
    if a.shape != (batch_len, policy.act_dim):
        raise ContractViolation(f"action shape {np.shape(actions)} does not match action dim {policy.act_dim}")
    return a


def gaussian_log_prob(policy: GaussianPolicyParams, state, action):
    """Exact diagonal-Gaussian log density; scalar for a single pair, (N,) for a batch."""
    batch, single = _as_batch(policy.mean_net, state)
    a = _check_actions(policy, action, batch.shape[0], single)
    mean = _forward_cache(policy.mean_net, batch)[-1]
    z = (a - mean) * np.exp(-policy.log_std)
    logp = -0.5 * np.sum(z ** 2, axis=1) - np.sum(policy.log_std) - 0.5 * policy.act_dim * LOG_2PI
    return float(logp[0]) if single else logp


def gaussian_log_prob_grad(policy: GaussianPolicyParams, states, actions, weights) -> Params:
    """Gradient of sum_n weights[n] * log pi(actions[n] | states[n]) keyed like policy.flat()."""
    batch, single = _as_batch(policy.mean_net, states)
    a = _check_actions(policy, actions, batch.shape[0], single)
    w = np.atleast_1d(np.asarray(weights, dtype=np.float64))
    if w.shape != (batch.shape[0],):
        raise ContractViolation(f"weights shape {w.shape} does not match batch {batch.shape[0]}")
    mean = _forward_cache(policy.mean_net, batch)[-1]
    inv_var = np.exp(-2.0 * policy.log_std)
    diff = a - mean
    mean_grads = mlp_backward(policy.mean_net, batch, w[:, None] * diff * inv_var)
    grads = {f"mean_net/{k}": v for k, v in mean_grads.items()}
    grads["log_std"] = np.sum(w[:, None] * (diff ** 2 * inv_var - 1.0), axis=0)
    return grads


def gaussian_sample(policy: GaussianPolicyParams, state, rng: np.random.Generator) -> np.ndarray:
    """mean + exp(log_std) * standard normal draw."""
    mean = mlp_forward(policy.mean_net, state)
    return mean + np.exp(policy.log_std) * rng.standard_normal(mean.shape)


# ===== Parameter-set helpers =====

def zeros_like(params: Params) -> Params:
    return {k: np.zeros_like(v) for k, v in params.items()}


def flatten_params(params: Params) -> np.ndarray:
    if not params:
        return np.zeros(0)
    return np.concatenate([np.ravel(v) for v in params.values()])


def unflatten_params(vector: np.ndarray, template: Params) -> Params:
    vector = np.asarray(vector, dtype=np.float64)
    total = sum(v.size for v in template.values())
    if vector.shape != (total,):
        raise ContractViolation(f"vector of length {vector.size} does not match {total} parameters")
    out: Params = {}
    offset = 0
    for k, v in template.items():
        out[k] = vector[offset:offset + v.size].reshape(v.shape).copy()
        offset += v.size
    return out


def combine(a: Params, b: Params, wa: float, wb: float) -> Params:
    """wa * a + wb * b keyed like a."""
    if a.keys() != b.keys():
        raise ContractViolation("parameter sets have different keys")
    return {k: wa * a[k] + wb * b[k] for k in a}


def _check_same_shapes(params: Params, other: Params, what: str) -> None:
    if params.keys() != other.keys():
        raise ContractViolation(f"{what} keys do not match parameters")
    for k in params:
        if np.shape(params[k]) != np.shape(other[k]):
            raise ContractViolation(f"{what}[{k}] shape {np.shape(other[k])} != {np.shape(params[k])}")


# ===== Adam =====

@dataclass
class AdamState:
    """Adam hyperparameters, step count and moment accumulators keyed like the parameters."""
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)
    rejected: int = 0


def adam_init(params: Params, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    return AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps, step=0,
                     m=zeros_like(params), v=zeros_like(params))


def adam_step(opt: AdamState, params: Params, grads: Params) -> Tuple[Params, AdamState]:
    """
    One Adam descent step on ``grads``; returns new parameter arrays and a new state.

    Non-finite gradients are rejected: parameters and moments stay as they were
    and ``rejected`` is incremented. An all-zero gradient leaves the parameters
    untouched while the moments decay.
    """
    _check_same_shapes(params, grads, "grads")
    _check_same_shapes(params, opt.m, "adam moments")

    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        logger.warning("Adam update rejected: non-finite gradient",
                       extra={"event": "adam_rejected", "step": opt.step})
        return {k: v.copy() for k, v in params.items()}, replace(opt, rejected=opt.rejected + 1)

    step = opt.step + 1
    m = {k: opt.beta1 * opt.m[k] + (1.0 - opt.beta1) * grads[k] for k in params}
    v = {k: opt.beta2 * opt.v[k] + (1.0 - opt.beta2) * grads[k] ** 2 for k in params}
    new_state = replace(opt, step=step, m=m, v=v)

    if all(not np.any(g) for g in grads.values()):
        return {k: p.copy() for k, p in params.items()}, new_state

    bias1 = 1.0 - opt.beta1 ** step
    bias2 = 1.0 - opt.beta2 ** step
    new_params = {}
    for k, p in params.items():
        m_hat = m[k] / bias1
        v_hat = v[k] / bias2
        new_params[k] = p - opt.lr * m_hat / (np.sqrt(v_hat) + opt.eps)
    return new_params, new_state


# ===== Gradient checking =====

def finite_diff_check(loss_fn: Callable[[Params], Tuple[float, Params]], params: Params,
                      eps: float = 1e-6, analytic: Optional[Params] = None) -> float:
    """
    Worst elementwise relative error between ``analytic`` (or the gradient
    returned by loss_fn) and central differences; denominator max(|a|, |b|, 1e-8).
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ContractViolation(f"eps {eps} outside [1e-7, 1e-3]")
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    if analytic is None:
        _, analytic = loss_fn(base)
    worst = 0.0
    for key, value in base.items():
        flat = value.reshape(-1)
        grad = np.asarray(analytic[key], dtype=np.float64).reshape(-1)
        for idx in range(flat.size):
            original = flat[idx]
            flat[idx] = original + eps
            plus, _ = loss_fn(base)
            flat[idx] = original - eps
            minus, _ = loss_fn(base)
            flat[idx] = original
            numeric = (plus - minus) / (2.0 * eps)
            a = grad[idx]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
