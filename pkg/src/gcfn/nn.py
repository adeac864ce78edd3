"""Dense ReLU networks with hand-written backprop, Adam, and a minibatch driver.

Weights are stored ``(out, in)`` so a single layer reads ``y = W @ x + b``;
batched code works on row-major ``(batch, features)`` arrays.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigError, DomainError, TrainingError
from .kernels import log_softmax_rows, outer_relu, relu_mask

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class MlpParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ConfigError("need one bias per weight matrix and at least one layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ConfigError(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ConfigError(
                    f"layer {i} expects {w.shape[1]} inputs, previous layer emits "
                    f"{self.weights[i - 1].shape[0]}"
                )

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def sizes(self) -> list[int]:
        return [self.in_dim] + [w.shape[0] for w in self.weights]

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def to_json(self) -> dict:
        return {
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "MlpParams":
        return cls(
            [np.array(w, dtype=np.float64).reshape(len(w), -1) for w in doc["weights"]],
            [np.array(b, dtype=np.float64) for b in doc["biases"]],
        )


def init_mlp(sizes, rng: np.random.Generator) -> MlpParams:
    """Glorot-uniform weights, zero biases."""
    if len(sizes) < 2 or any(int(s) < 1 for s in sizes):
        raise ConfigError(f"bad layer sizes {sizes}")
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases)


def zeros_mlp(sizes) -> MlpParams:
    return MlpParams(
        [np.zeros((o, i)) for i, o in zip(sizes[:-1], sizes[1:])],
        [np.zeros(o) for o in sizes[1:]],
    )


# ---------------------------------------------------------------- forward/backward


def mlp_forward(params: MlpParams, x: np.ndarray | None = None, first_act: np.ndarray | None = None):
    """Batched forward pass.

    Either pass the raw input ``x`` of shape ``(batch, in_dim)`` or, for callers
    that assemble the first layer themselves, its post-ReLU activation
    ``first_act`` of shape ``(batch, hidden)``.  Returns ``(output, cache)``.
    The cache holds the input of every layer; ReLU masks are read back from
    the activations, so pre-activations are never stored.
    """
    if first_act is None:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != params.in_dim:
            raise ConfigError(f"input width {x.shape[-1]} != network input {params.in_dim}")
        z = x @ params.weights[0].T + params.biases[0]
        if len(params.weights) == 1:
            return z, [x]
        a = np.maximum(z, 0.0, out=z)
    else:
        a = first_act
    inputs = [x, a]
    n_layers = len(params.weights)
    for layer in range(1, n_layers):
        z = a @ params.weights[layer].T
        z += params.biases[layer]
        if layer == n_layers - 1:
            return z, inputs
        a = np.maximum(z, 0.0, out=z)
        inputs.append(a)
    raise ConfigError("first_act given for a single-layer network")


def mlp_backward(params: MlpParams, cache, upstream: np.ndarray):
    """Reverse pass for ``sum(upstream * output)``.

    Returns ``(grads, d_first)`` where ``d_first`` is the gradient with respect
    to the first layer's pre-activation.  ``grads.weights[0]`` is zeros when the
    forward pass was fed ``first_act`` (the caller owns that layer).
    """
    inputs = cache
    n_layers = len(params.weights)
    gw = [None] * n_layers
    gb = [None] * n_layers
    dz = np.asarray(upstream, dtype=np.float64)
    if dz.ndim != 2 or dz.shape[1] != params.out_dim or dz.shape[0] != inputs[-1].shape[0]:
        raise ConfigError(f"upstream shape {dz.shape} does not match the network output")
    for layer in range(n_layers - 1, 0, -1):
        act = inputs[layer]
        w = params.weights[layer]
        gw[layer] = dz.T @ act
        gb[layer] = dz.sum(axis=0)
        if w.shape[0] == 1:
            dz = outer_relu(np.ascontiguousarray(dz[:, 0]), w[0], act)
        else:
            dz = relu_mask(dz @ w, act)
    gb[0] = dz.sum(axis=0)
    if inputs[0] is not None:
        gw[0] = dz.T @ inputs[0]
    else:
        gw[0] = np.zeros_like(params.weights[0])
    return MlpParams(gw, gb), dz


def mlp_apply(params: MlpParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.shape[0] != params.in_dim:
        raise ConfigError(f"input dimension {x.shape[0]} != {params.in_dim}")
    out, _ = mlp_forward(params, x[None, :])
    return out[0]


def mlp_gradient(params: MlpParams, x, upstream) -> MlpParams:
    """Gradient of ``upstream . mlp_apply(params, x)`` with respect to all parameters."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    upstream = np.asarray(upstream, dtype=np.float64).reshape(-1)
    if upstream.shape[0] != params.out_dim:
        raise ConfigError(f"upstream dimension {upstream.shape[0]} != {params.out_dim}")
    _, cache = mlp_forward(params, x[None, :])
    grads, _ = mlp_backward(params, cache, upstream[None, :])
    return grads


# ------------------------------------------------------------------ likelihoods


def softmax_logprobs(logits) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim == 1:
        return log_softmax_rows(np.ascontiguousarray(logits[None, :]))[0]
    return log_softmax_rows(np.ascontiguousarray(logits))


def softmax(logits) -> np.ndarray:
    return np.exp(softmax_logprobs(logits))


def gaussian_loglik(x, mean, variance=1.0):
    variance = np.asarray(variance, dtype=np.float64)
    if np.any(variance <= 0):
        raise DomainError("variance must be positive")
    diff = np.asarray(x, dtype=np.float64) - mean
    out = -0.5 * (LOG_2PI + np.log(variance)) - diff * diff / (2.0 * variance)
    return float(out) if np.ndim(out) == 0 else out


# ------------------------------------------------------------------- param trees
# A "tree" is an MlpParams, an ndarray, or a dict of trees.  Adam and the
# training driver only need to walk it in a fixed order.


def tree_leaves(tree) -> list[np.ndarray]:
    if isinstance(tree, MlpParams):
        return [*tree.weights, *tree.biases]
    if isinstance(tree, dict):
        out = []
        for key in sorted(tree):
            out.extend(tree_leaves(tree[key]))
        return out
    return [tree]


def tree_rebuild(template, leaves):
    it = iter(leaves)

    def build(node):
        if isinstance(node, MlpParams):
            n = len(node.weights)
            ws = [next(it) for _ in range(n)]
            bs = [next(it) for _ in range(n)]
            return MlpParams(ws, bs)
        if isinstance(node, dict):
            return {key: build(node[key]) for key in sorted(node)}
        return next(it)

    return build(template)


def tree_zeros(tree):
    return tree_rebuild(tree, [np.zeros_like(a) for a in tree_leaves(tree)])


# ------------------------------------------------------------------------ Adam


@dataclass
class AdamState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0
    learning_rate: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon_hat: float = 1e-8

    @classmethod
    def for_params(cls, params, learning_rate: float = 1e-2, **kw) -> "AdamState":
        leaves = tree_leaves(params)
        if learning_rate <= 0:
            raise ConfigError("learning rate must be positive")
        return cls(
            [np.zeros_like(a) for a in leaves],
            [np.zeros_like(a) for a in leaves],
            learning_rate=float(learning_rate),
            **kw,
        )


def adam_update(state: AdamState, params, grads):
    """One bias-corrected Adam step; returns ``(new_state, new_params)``."""
    p_leaves = tree_leaves(params)
    g_leaves = tree_leaves(grads)
    if len(p_leaves) != len(g_leaves) or any(p.shape != g.shape for p, g in zip(p_leaves, g_leaves)):
        raise ConfigError("gradient tree does not match parameter tree")
    for g in g_leaves:
        if not np.all(np.isfinite(g)):
            raise TrainingError("non-finite gradient")
    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    step = state.learning_rate / (1.0 - b1**t)
    c2 = 1.0 / (1.0 - b2**t)
    new_m, new_v, new_p = [], [], []
    for p, g, m, v in zip(p_leaves, g_leaves, state.first_moment, state.second_moment):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        new_m.append(m)
        new_v.append(v)
        new_p.append(p - step * m / (np.sqrt(v * c2) + state.epsilon_hat))
    new_state = AdamState(new_m, new_v, t, state.learning_rate, b1, b2, state.epsilon_hat)
    return new_state, tree_rebuild(params, new_p)


@dataclass
class HalvingSchedule:
    """Halve the rate when a window's mean training loss exceeds the previous window's."""

    window: int = 10
    epoch_losses: list[float] = field(default_factory=list)
    halvings: int = 0

    def end_epoch(self, loss: float, state: AdamState) -> None:
        self.epoch_losses.append(float(loss))
        n = len(self.epoch_losses)
        if n % self.window or n < 2 * self.window:
            return
        cur = np.mean(self.epoch_losses[n - self.window:])
        prev = np.mean(self.epoch_losses[n - 2 * self.window: n - self.window])
        if cur > prev:
            state.learning_rate *= 0.5
            self.halvings += 1


LossFn = Callable[[object, np.ndarray], tuple[float, object]]


def fit_minibatch(
    params,
    loss_and_grad: LossFn,
    n: int,
    *,
    epochs: int,
    batch_size: int,
    learning_rate: float,
    rng: np.random.Generator,
    window: int = 10,
):
    """Minibatch Adam over ``n`` rows with a seeded per-epoch shuffle.

    ``loss_and_grad(params, idx)`` returns the mean loss over rows ``idx`` and
    a gradient tree shaped like ``params``.  Returns ``(params, epoch_losses)``.
    """
    if n < 1:
        raise TrainingError("empty dataset")
    if epochs < 1 or batch_size < 1:
        raise ConfigError("epochs and batch_size must be positive")
    state = AdamState.for_params(params, learning_rate)
    sched = HalvingSchedule(window)
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, batch_size)):
            idx = order[start:start + batch_size]
            loss, grads = loss_and_grad(params, idx)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            try:
                state, params = adam_update(state, params, grads)
            except TrainingError as exc:
                raise TrainingError(f"{exc} at epoch {epoch}, batch {b}") from None
            total += loss * len(idx)
        sched.end_epoch(total / n, state)
    return params, sched.epoch_losses
