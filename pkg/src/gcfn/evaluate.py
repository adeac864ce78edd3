"""Scoring and diagnostics for fitted control functions.

Covers effect RMSE on a treatment grid, kappa selection by held-out outcome
likelihood, a permutation test of zhat against eps, reconstruction error and
an audit of the additive-process error bound.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import ConfigError, DataError, DomainError, GcfnError
from .kernels import mi_codes, weighted_w1
from .outcome import EffectCurve, OutcomeModel, estimate_effect, fit_outcome_q, outcome_loglik
from .simgen import Dataset
from .vde import VdeConfig, VdeModel, kl_to_marginal, train_vde


def effect_rmse(curve: EffectCurve, truth) -> float:
    grid = np.asarray(curve.grid, dtype=np.float64)
    if grid.size == 0:
        raise ConfigError("empty grid")
    order = np.argsort(grid, kind="mergesort")
    err = np.asarray(curve.tau_hat)[order] - np.asarray(truth(grid[order]), dtype=np.float64)
    return float(np.sqrt(np.mean(err * err)))


def rmse_values(tau_hat, tau_true) -> float:
    err = np.sort(np.asarray(tau_hat, dtype=np.float64) - np.asarray(tau_true, dtype=np.float64))
    return float(np.sqrt(np.mean(err * err)))


# -------------------------------------------------------------- kappa search


@dataclass
class KappaEntry:
    kappa: float
    ok: bool
    heldout_loglik: float | None = None
    error: str | None = None


@dataclass
class KappaSelection:
    best_kappa: float
    table: list[KappaEntry]
    train_index: np.ndarray
    holdout_index: np.ndarray
    # fitted (vde, outcome) per successful kappa, kept for callers that reuse them
    models: dict = field(default_factory=dict, repr=False)

    def to_csv(self) -> str:
        lines = ["kappa,status,heldout_loglik,error"]
        for e in self.table:
            ll = "" if e.heldout_loglik is None else "%.17g" % e.heldout_loglik
            err = "" if e.error is None else e.error.replace(",", ";").replace("\n", " ")
            lines.append(f"{e.kappa!r},{'ok' if e.ok else 'failed'},{ll},{err}")
        return "\n".join(lines) + "\n"


def split_indices(n: int, holdout_fraction: float, seed: int):
    if not 0.0 < holdout_fraction < 1.0:
        raise ConfigError("holdout_fraction must lie in (0, 1)")
    n_hold = int(round(n * holdout_fraction))
    if n_hold < 1 or n_hold >= n:
        raise DataError(f"cannot hold out {holdout_fraction} of {n} rows")
    perm = np.random.default_rng(seed).permutation(n)
    return np.sort(perm[n_hold:]), np.sort(perm[:n_hold])


def select_kappa(
    data: Dataset, kappa_grid, config: VdeConfig, holdout_fraction: float = 0.2,
    outcome_epochs: int | None = None, outcome_batch_size: int | None = None,
    outcome_lr: float | None = None, outcome_hidden: int = 50,
) -> KappaSelection:
    """Train a VDE and outcome model per kappa and score the held-out log-likelihood.

    The best kappa maximises the held-out mean of E_q log N(y; f(t, zhat), 1).
    Ties go to the smallest kappa.  Failed fits are recorded and skipped.
    """
    kappas = [float(k) for k in kappa_grid]
    if not kappas:
        raise ConfigError("kappa grid is empty")
    train_idx, hold_idx = split_indices(len(data), holdout_fraction, config.seed)
    train, hold = data.subset(train_idx), data.subset(hold_idx)
    table, models = [], {}
    for kappa in kappas:
        try:
            cfg = replace(config, kappa=kappa, batch_size=min(config.batch_size, len(train)))
            vde = train_vde(train, cfg)
            q_train = vde.posterior(train.t, train.eps)
            outcome = fit_outcome_q(
                train.t, train.y, q_train,
                epochs=outcome_epochs or cfg.epochs, batch_size=outcome_batch_size or cfg.batch_size,
                lr=outcome_lr or cfg.learning_rate, seed=cfg.seed, hidden=outcome_hidden,
            )
            ll = outcome_loglik(outcome, hold.t, hold.y, vde.posterior(hold.t, hold.eps))
            if not math.isfinite(ll):
                raise GcfnError("held-out log-likelihood is not finite")
        except (GcfnError, ValueError, FloatingPointError) as exc:
            table.append(KappaEntry(kappa, False, None, f"{type(exc).__name__}: {exc}"))
            continue
        table.append(KappaEntry(kappa, True, ll))
        models[kappa] = (vde, outcome, q_train)
    good = [e for e in table if e.ok]
    if not good:
        raise GcfnError("every kappa in the grid failed to train")
    best = min(good, key=lambda e: (-e.heldout_loglik, e.kappa))
    return KappaSelection(best.kappa, table, train_idx, hold_idx, models)


# ---------------------------------------------------------- independence test


@dataclass
class DiagnosticsReport:
    reconstruction_mse: float | None
    mi_estimate: float
    permutation_p_value: float
    kl_term_value: float | None = None
    eps_bins: int = 10
    n_permutations: int = 199
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.mi_estimate < 0 or not 0.0 <= self.permutation_p_value <= 1.0:
            raise ValueError("mi must be >= 0 and p-value in [0, 1]")

    def to_json(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"


def equal_frequency_bins(x, n_bins: int) -> np.ndarray:
    """Bin index per value so that every bin holds floor or ceil of n/n_bins rows."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    ranks = np.empty(n, dtype=np.int64)
    ranks[np.argsort(x, kind="mergesort")] = np.arange(n)
    return ranks * n_bins // n


def sample_categories(q: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One draw per row from categorical rows of ``q`` by inverse CDF."""
    cdf = np.cumsum(q, axis=1)
    u = rng.random(q.shape[0]) * cdf[:, -1]
    idx = (cdf < u[:, None]).sum(axis=1)
    return np.minimum(idx, q.shape[1] - 1).astype(np.int64)


def permutation_mi_test(codes, eps, eps_bins: int = 10, n_permutations: int = 199, seed: int = 0):
    """Plug-in MI between integer codes and binned eps, with a permutation p-value.

    Returns ``(mi, p_value, warnings)``.
    """
    if eps_bins < 2:
        raise ConfigError("eps_bins must be >= 2")
    if n_permutations < 99:
        raise ConfigError("n_permutations must be >= 99")
    codes = np.asarray(codes, dtype=np.int64)
    eps = np.asarray(eps, dtype=np.float64)
    n = codes.shape[0]
    if n == 0 or eps.shape != codes.shape:
        raise DataError("codes and eps must be non-empty and of equal length")
    if codes.min() < 0:
        raise DataError("codes must be non-negative")
    # compact the code alphabet so the table has no empty rows
    _, a = np.unique(codes, return_inverse=True)
    a = a.astype(np.int64)
    na = int(a.max()) + 1
    b = equal_frequency_bins(eps, eps_bins)
    mi = float(mi_codes(a, b, na, eps_bins))
    warnings = []
    row = np.bincount(a, minlength=na)
    col = np.bincount(b, minlength=eps_bins)
    if (row.min() * col.min()) / n < 1.0:
        warnings.append("some expected cell counts are below 1; the plug-in MI is biased upward")
    rng = np.random.default_rng(seed)
    exceed = 0
    tol = 1e-12 * max(1.0, mi)
    for _ in range(n_permutations):
        if float(mi_codes(rng.permutation(a), b, na, eps_bins)) >= mi - tol:
            exceed += 1
    return mi, (1 + exceed) / (1 + n_permutations), warnings


def independence_diagnostic(
    vde: VdeModel, data: Dataset, eps_bins: int = 10, n_permutations: int = 199, seed: int = 0,
) -> DiagnosticsReport:
    if len(data) == 0:
        raise DataError("empty dataset")
    q = vde.posterior(data.t, data.eps)
    rng = np.random.default_rng(seed)
    codes = sample_categories(q, rng)
    mi, p, warnings = permutation_mi_test(codes, data.eps, eps_bins, n_permutations, seed + 1)
    r = np.exp(vde.marginal_logits - vde.marginal_logits.max())
    r /= r.sum()
    kl = float(np.mean(kl_to_marginal(q, r)))
    recon = None if vde.structure == "categorical" else reconstruction_error(vde, data)
    return DiagnosticsReport(recon, mi, p, kl, eps_bins, n_permutations, warnings)


def reconstruction_error(vde: VdeModel, data: Dataset) -> float:
    """Posterior-weighted squared error of the structural decoder mean."""
    if vde.structure == "categorical":
        raise DomainError("reconstruction error needs an additive or multiplicative decoder")
    q = vde.posterior(data.t, data.eps)
    mean = vde.decoder_mean(data.eps)
    r = data.t[:, None] - mean
    return float(np.mean(np.sum(q * r * r, axis=1)))


# ---------------------------------------------------------------- bound audit


@dataclass
class BoundReport:
    lhs: float
    rhs: float
    gamma_hat: float
    delta_hat: float
    lipschitz_L: float
    lipschitz_Lg: float
    zhat_centered_mean_abs: float
    satisfied: bool
    note: str = ""

    def __post_init__(self):
        vals = (self.lhs, self.rhs, self.gamma_hat, self.delta_hat, self.lipschitz_L,
                self.lipschitz_Lg, self.zhat_centered_mean_abs)
        if any(v < 0 for v in vals):
            raise ValueError("bound report components must be non-negative")

    def to_json(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"


def bound_rhs(L: float, delta: float, gamma: float, Lg: float, zc_abs: float) -> float:
    return L * math.sqrt(delta + 4.0 * gamma * Lg * zc_abs)


def category_gamma(q: np.ndarray, eps: np.ndarray) -> float:
    """Largest W1 between eps weighted by q[:, k] and the plain eps sample.

    Only categories with average mass above 1/(2K) take part.
    """
    n, k = q.shape
    qbar = q.mean(axis=0)
    ones = np.ones(n)
    gamma = 0.0
    for c in range(k):
        if qbar[c] > 1.0 / (2 * k):
            gamma = max(gamma, float(weighted_w1(eps, np.ascontiguousarray(q[:, c]), eps, ones)))
    return gamma


def bound_check_additive(
    vde: VdeModel, outcome: OutcomeModel, data: Dataset, L: float, L_g: float,
    truth=None,
) -> BoundReport:
    """Audit E|tau_hat - tau| against L * sqrt(delta + 4 gamma L_g E|zhat_c|).

    ``truth`` defaults to tau(t) = t.  The scalar zhat is the centred decoder
    table value; callers using t = (z + eps)/sqrt(2) should pass constants for
    the rescaled confounder z/sqrt(2).
    """
    if vde.structure != "additive":
        raise DomainError("the bound audit needs an additive decoder")
    if data.z is None:
        raise DataError("the bound audit needs ground-truth z")
    truth = truth or (lambda t: np.asarray(t, dtype=np.float64))
    q = vde.posterior(data.t, data.eps)
    qbar = q.mean(axis=0)
    h = vde.decoder["h"]
    zc = np.abs(h - qbar @ h)
    zc_abs = float(np.mean(q @ zc))
    delta = reconstruction_error(vde, data)
    gamma = category_gamma(q, data.eps)
    tau_hat = outcome.predict_all(data.t) @ qbar
    lhs = float(np.mean(np.abs(tau_hat - truth(data.t))))
    rhs = bound_rhs(L, delta, gamma, L_g, zc_abs)
    note = "scalar zhat is the centred additive-decoder table value; z rescaled by 1/sqrt(2) for t = (z + eps)/sqrt(2)"
    return BoundReport(lhs, rhs, gamma, delta, float(L), float(L_g), zc_abs, bool(lhs <= rhs), note)


def gcfn_effect(vde: VdeModel, outcome: OutcomeModel, data: Dataset, grid) -> EffectCurve:
    """Effect curve using the control-function marginal estimated on ``data``."""
    return estimate_effect(outcome, vde.posterior(data.t, data.eps).mean(axis=0), grid)
