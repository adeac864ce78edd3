"""Classical comparators: linear 2SLS and the residual control-function estimator."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import EstimationError
from .outcome import EffectCurve
from .simgen import Dataset


@dataclass
class LinearFit:
    intercept: float
    slope: float
    slope_se: float
    r2: float

    def predict(self, x) -> np.ndarray:
        return self.intercept + self.slope * np.asarray(x, dtype=np.float64)


@dataclass
class TwoSlsFit:
    first_stage: LinearFit
    second_stage: LinearFit
    weak_instrument: bool

    @property
    def first_stage_coeffs(self):
        return (self.first_stage.intercept, self.first_stage.slope)

    @property
    def second_stage_coeffs(self):
        return (self.second_stage.intercept, self.second_stage.slope)

    @property
    def first_stage_r2(self) -> float:
        return self.first_stage.r2

    def to_json(self) -> dict:
        return {
            "method": "2sls",
            "first_stage_coeffs": list(self.first_stage_coeffs),
            "first_stage_slope_se": self.first_stage.slope_se,
            "first_stage_r2": self.first_stage_r2,
            "second_stage_coeffs": list(self.second_stage_coeffs),
            "weak_instrument": self.weak_instrument,
        }


@dataclass
class CfnFit:
    first_stage: LinearFit
    residuals: np.ndarray
    outcome_net: nn.MlpParams
    rho: float
    metadata: dict = field(default_factory=dict)

    def effect(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
        out, _ = nn.mlp_forward(self.outcome_net, t)
        return out[:, 0]

    def to_json(self) -> dict:
        return {
            "method": "cfn",
            "first_stage_coeffs": [self.first_stage.intercept, self.first_stage.slope],
            "rho": self.rho,
            "outcome_net": self.outcome_net.to_json(),
            "metadata": self.metadata,
        }


def ols(x, y) -> LinearFit:
    """Simple regression of y on (1, x) with an HC0 robust slope standard error."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = x.shape[0]
    if n < 3:
        raise EstimationError(f"need at least 3 rows, got {n}")
    xc = x - x.mean()
    sxx = float(xc @ xc)
    if not sxx > 1e-12 * n * max(1.0, float(np.mean(x * x))):
        raise EstimationError("degenerate design: regressor has zero sample variance")
    slope = float(xc @ (y - y.mean())) / sxx
    intercept = float(y.mean() - slope * x.mean())
    resid = y - intercept - slope * x
    se = float(np.sqrt(np.sum(xc * xc * resid * resid))) / sxx
    yc = y - y.mean()
    tss = float(yc @ yc)
    r2 = 0.0 if tss == 0.0 else min(max(1.0 - float(resid @ resid) / tss, 0.0), 1.0)
    return LinearFit(intercept, slope, se, r2)


def fit_2sls(data: Dataset) -> TwoSlsFit:
    first = ols(data.eps, data.t)
    t_hat = first.predict(data.eps)
    try:
        second = ols(t_hat, data.y)
    except EstimationError:
        # fitted values are constant only if the first-stage slope is exactly 0
        second = LinearFit(float(np.mean(data.y)), 0.0, float("inf"), 0.0)
    weak = abs(first.slope) < 2.0 * first.slope_se
    return TwoSlsFit(first, second, bool(weak))


def _cfn_objective(params: dict, t, v, y, with_grad: bool = True):
    out, cache = nn.mlp_forward(params["net"], t[:, None])
    pred = out[:, 0] + params["rho"][0] * v
    resid = pred - y
    n = t.shape[0]
    loss = float(resid @ resid) / n
    if not with_grad:
        return loss, None
    d = 2.0 * resid / n
    grads, _ = nn.mlp_backward(params["net"], cache, d[:, None])
    return loss, {"net": grads, "rho": np.array([float(d @ v)])}


def fit_cfn(
    data: Dataset, epochs: int = 100, seed: int = 0, batch_size: int = 500,
    lr: float = 1e-2, hidden: int = 50,
) -> CfnFit:
    """Linear first stage t ~ eps, then y ~ f(t) + rho * v jointly by least squares."""
    first = ols(data.eps, data.t)
    v = data.t - first.predict(data.eps)
    rng = np.random.default_rng(seed)
    params = {"net": nn.init_mlp([1, hidden, hidden, 1], rng), "rho": np.zeros(1)}
    t, y = data.t, data.y
    n = t.shape[0]

    def step(p, idx):
        return _cfn_objective(p, t[idx], v[idx], y[idx])

    params, history = nn.fit_minibatch(
        params, step, n, epochs=epochs, batch_size=min(batch_size, n), learning_rate=lr, rng=rng,
    )
    final, _ = _cfn_objective(params, t, v, y, with_grad=False)
    meta = {"epochs": epochs, "seed": seed, "batch_size": batch_size, "lr": lr,
            "final_loss": final, "epoch_losses": history}
    return CfnFit(first, v, params["net"], float(params["rho"][0]), meta)


def baseline_effect(fit: TwoSlsFit | CfnFit, grid) -> EffectCurve:
    grid = np.asarray(grid, dtype=np.float64)
    if isinstance(fit, TwoSlsFit):
        return EffectCurve(grid, fit.second_stage.predict(grid))
    return EffectCurve(grid, fit.effect(grid))


def dumps_fit(fit: TwoSlsFit | CfnFit) -> str:
    return json.dumps(fit.to_json(), sort_keys=True)
