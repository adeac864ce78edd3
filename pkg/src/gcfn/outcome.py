"""Outcome stage: regress y on (t, zhat) under the control-function posterior.

The fitted mean f(t, k) is a ReLU net on ``[t, onehot(k)]``; training
minimises ``mean_i sum_k q_ik (y_i - f(t_i, k))**2`` with the posterior
``q`` from a trained VDE held fixed.  Effects average f over the
control-function marginal.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import ConfigError, DataError, DomainError
from .kernels import pair_reduce, pair_relu
from .simgen import Dataset, atomic_write_text
from .vde import VdeModel


@dataclass
class OutcomeModel:
    net: nn.MlpParams
    k_categories: int
    partially_linear: bool = False
    slope: float = 0.0
    noise_variance: float = 1.0
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        want = self.k_categories if self.partially_linear else 1 + self.k_categories
        if self.net.in_dim != want:
            raise ConfigError(f"outcome net input width {self.net.in_dim} != {want}")

    def params(self) -> dict:
        return {"net": self.net, "slope": np.array([self.slope])}

    def predict_all(self, t) -> np.ndarray:
        """f(t_i, k) for every row and category, shape (n, K)."""
        out, _ = _forward(self.params(), self.k_categories, self.partially_linear, np.atleast_1d(t))
        return out

    def predict(self, t, k) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        k = np.broadcast_to(np.asarray(k), t.shape)
        return self.predict_all(t)[np.arange(t.shape[0]), k]

    def to_json(self) -> dict:
        return {
            "format": "gcfn-outcome/1",
            "k_categories": self.k_categories,
            "partially_linear": self.partially_linear,
            "slope": self.slope,
            "noise_variance": self.noise_variance,
            "net": self.net.to_json(),
            "metadata": self.metadata,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)

    @classmethod
    def from_json(cls, doc: dict) -> "OutcomeModel":
        return cls(
            nn.MlpParams.from_json(doc["net"]), int(doc["k_categories"]),
            bool(doc.get("partially_linear", False)), float(doc.get("slope", 0.0)),
            float(doc.get("noise_variance", 1.0)), doc.get("metadata", {}),
        )


@dataclass
class EffectCurve:
    grid: np.ndarray
    tau_hat: np.ndarray
    tau_true: np.ndarray | None = None

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        self.tau_hat = np.asarray(self.tau_hat, dtype=np.float64)
        if self.tau_true is not None:
            self.tau_true = np.asarray(self.tau_true, dtype=np.float64)
        if self.grid.shape != self.tau_hat.shape or (
            self.tau_true is not None and self.tau_true.shape != self.grid.shape
        ):
            raise ConfigError("grid and effect vectors must have equal length")
        if self.grid.size > 1 and not np.all(np.diff(self.grid) > 0):
            raise ConfigError("grid must be strictly increasing")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        has_true = self.tau_true is not None
        w.writerow(["t", "tau_hat"] + (["tau_true"] if has_true else []))
        for i in range(self.grid.size):
            row = ["%.17g" % self.grid[i], "%.17g" % self.tau_hat[i]]
            if has_true:
                row.append("%.17g" % self.tau_true[i])
            w.writerow(row)
        return buf.getvalue()

    def save(self, path) -> None:
        atomic_write_text(path, self.to_csv())

    @classmethod
    def load(cls, path) -> "EffectCurve":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        cols = {name: np.array([float(r[i]) for r in body]) for i, name in enumerate(header)}
        return cls(cols["t"], cols["tau_hat"], cols.get("tau_true"))


def default_grid(lo: float = -1.0, hi: float = 1.0, count: int = 200) -> np.ndarray:
    return np.linspace(lo, hi, count)


# --------------------------------------------------------------------- model


def _forward(params: dict, k: int, partially_linear: bool, t: np.ndarray):
    net = params["net"]
    t = np.asarray(t, dtype=np.float64)
    if partially_linear:
        hk, cache = nn.mlp_forward(net, np.eye(k))
        out = params["slope"][0] * t[:, None] + hk[:, 0][None, :]
        return out, cache
    w1 = net.weights[0]
    row_part = t[:, None] * w1[:, 0][None, :] + net.biases[0]
    act = pair_relu(row_part, np.ascontiguousarray(w1[:, 1:].T))
    out, cache = nn.mlp_forward(net, first_act=act)
    return out.reshape(t.shape[0], k), cache


def objective(params: dict, k: int, partially_linear: bool, t, y, q, with_grad: bool = True):
    """``mean_i sum_k q_ik (y_i - f(t_i, k))^2`` and its gradient tree."""
    t = np.asarray(t, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = t.shape[0]
    f, cache = _forward(params, k, partially_linear, t)
    resid = y[:, None] - f
    loss = float(np.sum(q * resid * resid) / n)
    if not with_grad:
        return loss, None
    df = -2.0 * q * resid / n
    net = params["net"]
    if partially_linear:
        grads, _ = nn.mlp_backward(net, cache, df.sum(axis=0)[:, None])
        return loss, {"net": grads, "slope": np.array([np.sum(df * t[:, None])])}
    grads, d_pre = nn.mlp_backward(net, cache, df.reshape(-1, 1))
    per_cat, weighted, total = pair_reduce(d_pre, t, k)
    gw0 = np.empty_like(net.weights[0])
    gw0[:, 0] = weighted
    gw0[:, 1:] = per_cat.T
    grads.weights[0] = gw0
    grads.biases[0] = total
    return loss, {"net": grads, "slope": np.zeros(1)}


def init_outcome(k: int, hidden: int, rng: np.random.Generator, partially_linear: bool = False) -> OutcomeModel:
    sizes = [k, hidden, hidden, 1] if partially_linear else [1 + k, hidden, hidden, 1]
    return OutcomeModel(nn.init_mlp(sizes, rng), k, partially_linear)


def fit_outcome_q(
    t, y, q, *, epochs: int = 100, batch_size: int = 500, lr: float = 1e-2,
    seed: int = 0, hidden: int = 50, partially_linear: bool = False,
) -> OutcomeModel:
    """Fit the outcome net given precomputed posteriors ``q`` of shape (n, K)."""
    t = np.asarray(t, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    n, k = q.shape
    if t.shape != (n,) or y.shape != (n,):
        raise ConfigError("t, y and q disagree on the number of rows")
    rng = np.random.default_rng(seed)
    model = init_outcome(k, hidden, rng, partially_linear)
    params = model.params()

    def step(p, idx):
        return objective(p, k, partially_linear, t[idx], y[idx], q[idx])

    params, history = nn.fit_minibatch(
        params, step, n, epochs=epochs, batch_size=min(batch_size, n), learning_rate=lr, rng=rng,
    )
    final, _ = objective(params, k, partially_linear, t, y, q, with_grad=False)
    meta = {
        "epochs": epochs, "batch_size": batch_size, "lr": lr, "seed": seed, "hidden": hidden,
        "n_train": n, "final_loss": final, "epoch_losses": history,
    }
    return OutcomeModel(params["net"], k, partially_linear, float(params["slope"][0]), 1.0, meta)


def fit_outcome(
    data: Dataset, vde: VdeModel, epochs: int = 100, batch_size: int = 500, lr: float = 1e-2,
    seed: int = 0, hidden: int = 50, partially_linear: bool = False,
) -> OutcomeModel:
    if data.y is None or len(data) == 0:
        raise DataError("outcome stage needs a non-empty y column")
    q = vde.posterior(data.t, data.eps)
    return fit_outcome_q(
        data.t, data.y, q, epochs=epochs, batch_size=batch_size, lr=lr, seed=seed,
        hidden=hidden, partially_linear=partially_linear,
    )


def marginal_control(data: Dataset, vde: VdeModel) -> np.ndarray:
    if len(data) == 0:
        raise DataError("empty dataset")
    return vde.posterior(data.t, data.eps).mean(axis=0)


def estimate_effect(outcome: OutcomeModel, marginal, grid) -> EffectCurve:
    marginal = np.asarray(marginal, dtype=np.float64)
    if marginal.shape != (outcome.k_categories,):
        raise ConfigError(
            f"marginal has length {marginal.shape[0]}, outcome model expects {outcome.k_categories}"
        )
    if np.any(marginal < 0) or abs(marginal.sum() - 1.0) > 1e-9:
        raise DomainError("marginal must be a probability vector")
    grid = np.asarray(grid, dtype=np.float64)
    return EffectCurve(grid, outcome.predict_all(grid) @ marginal)


def outcome_loglik(outcome: OutcomeModel, t, y, q) -> float:
    """Mean over rows of E_q log N(y; f(t, zhat), 1)."""
    f = outcome.predict_all(t)
    resid = np.asarray(y)[:, None] - f
    ll = -0.5 * nn.LOG_2PI - 0.5 * resid * resid
    return float(np.mean(np.sum(q * ll, axis=1)))
