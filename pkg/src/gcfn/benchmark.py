"""Simulation sweep: GCFN against 2SLS, CFN and, for the semi scenario, a supervised fit.

Each (alpha, seed) cell generates its own data and owns every RNG it uses, so
cells may run in worker processes; rows are merged in sorted key order.
"""
from __future__ import annotations

import csv
import io
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .baselines import baseline_effect, fit_2sls, fit_cfn
from .evaluate import effect_rmse, gcfn_effect, select_kappa
from .outcome import default_grid, estimate_effect, fit_outcome_q
from .simgen import ScenarioSpec, generate, normalize_kind, true_effect_fn
from .vde import TreatmentBins, VdeConfig

THREADS_ENV = "GCFN_THREADS"

DECODER_FOR = {
    "mult_outcome": "additive",
    "mult_treatment": "multiplicative",
    "semi": "categorical",
    "cfn_violation": "categorical",
}

COLUMNS = ("scenario", "alpha", "kappa", "seed", "method", "rmse")


@dataclass
class BenchmarkConfig:
    scenario: str
    alphas: list = field(default_factory=lambda: [0.5, 1.0, 2.0])
    kappas: list = field(default_factory=lambda: [0.1, 0.2, 0.3])
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    n: int = 5000
    rho: float = 0.05
    epochs: int = 100
    batch_size: int = 500
    learning_rate: float = 1e-2
    k_categories: int = 50
    zeta: float = 0.5
    holdout: float = 0.2
    grid: tuple = (-1.0, 1.0, 200)
    baselines: bool = True

    def __post_init__(self):
        self.scenario = normalize_kind(self.scenario)
        if self.scenario == "counterexample":
            raise ValueError("the counterexample scenario has no effect curve to benchmark")


def default_workers() -> int:
    raw = os.environ.get(THREADS_ENV, "").strip()
    if not raw:
        return 1
    try:
        return max(1, int(raw))
    except ValueError:
        raise ValueError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None


def _vde_template(cfg: BenchmarkConfig, seed: int) -> VdeConfig:
    semi = cfg.scenario == "semi"
    return VdeConfig(
        k_categories=cfg.k_categories, kappa=cfg.kappas[0], decoder_structure=DECODER_FOR[cfg.scenario],
        zeta=cfg.zeta, semi_supervised=semi, epochs=cfg.epochs, batch_size=cfg.batch_size,
        learning_rate=cfg.learning_rate, seed=seed,
    )


def supervised_effect(data, grid, epochs: int, batch_size: int, lr: float, seed: int, bins=None):
    """Outcome regression on (t, bin(z)) using only rows with the confounder observed."""
    bins = bins or TreatmentBins()
    lab = np.flatnonzero(data.m == 1)
    if lab.size == 0:
        raise ValueError("no rows with an observed confounder")
    k = bins.n_bins
    codes = bins.index(data.z[lab])
    q = np.zeros((lab.size, k))
    q[np.arange(lab.size), codes] = 1.0
    model = fit_outcome_q(
        data.t[lab], data.y[lab], q, epochs=epochs, batch_size=min(batch_size, lab.size), lr=lr, seed=seed,
    )
    return estimate_effect(model, q.mean(axis=0), grid)


def run_cell(cfg: BenchmarkConfig, alpha: float, seed: int) -> list[dict]:
    spec = ScenarioSpec(cfg.scenario, alpha=alpha, rho=cfg.rho, n=cfg.n, seed=seed)
    data = generate(spec)
    truth = true_effect_fn(spec)
    grid = default_grid(*cfg.grid)
    rows = []

    def add(method, kappa, curve):
        rows.append({"scenario": cfg.scenario, "alpha": float(alpha), "kappa": kappa, "seed": int(seed),
                     "method": method, "rmse": effect_rmse(curve, truth)})

    template = _vde_template(cfg, seed)
    sel = select_kappa(data, cfg.kappas, template, cfg.holdout)
    train = data.subset(sel.train_index)
    for entry in sel.table:
        if not entry.ok:
            rows.append({"scenario": cfg.scenario, "alpha": float(alpha), "kappa": entry.kappa,
                         "seed": int(seed), "method": "gcfn", "rmse": float("nan")})
            continue
        vde, outcome, _ = sel.models[entry.kappa]
        curve = gcfn_effect(vde, outcome, train, grid)
        add("gcfn", entry.kappa, curve)
        if entry.kappa == sel.best_kappa:
            add("gcfn_selected", entry.kappa, curve)
    if cfg.baselines:
        add("2sls", None, baseline_effect(fit_2sls(data), grid))
        add("cfn", None, baseline_effect(
            fit_cfn(data, epochs=cfg.epochs, seed=seed, batch_size=cfg.batch_size, lr=cfg.learning_rate), grid))
    if cfg.scenario == "semi":
        add("supervised", None, supervised_effect(
            data, grid, cfg.epochs, cfg.batch_size, cfg.learning_rate, seed))
    return rows


def _sort_key(row):
    kappa = -1.0 if row["kappa"] is None else row["kappa"]
    return (row["alpha"], row["seed"], row["method"], kappa)


def _cell_job(args):
    cfg, alpha, seed = args
    return run_cell(cfg, alpha, seed)


def run_benchmark(cfg: BenchmarkConfig, workers: int | None = None) -> list[dict]:
    workers = default_workers() if workers is None else max(1, int(workers))
    jobs = [(cfg, float(a), int(s)) for a in cfg.alphas for s in cfg.seeds]
    if workers == 1 or len(jobs) == 1:
        results = [_cell_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_cell_job, jobs))
    rows = [r for cell in results for r in cell]
    return sorted(rows, key=_sort_key)


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for r in rows:
        w.writerow([
            r["scenario"], repr(r["alpha"]), "" if r["kappa"] is None else repr(r["kappa"]),
            r["seed"], r["method"], "%.17g" % r["rmse"],
        ])
    return buf.getvalue()


def summarize(rows: list[dict]) -> dict:
    """Mean and standard deviation of RMSE per method, over all cells."""
    out = {}
    for method in sorted({r["method"] for r in rows}):
        vals = np.array([r["rmse"] for r in rows if r["method"] == method], dtype=np.float64)
        vals = vals[np.isfinite(vals)]
        if vals.size:
            out[method] = {"mean": float(vals.mean()), "std": float(vals.std()), "count": int(vals.size)}
    return out


def with_overrides(cfg: BenchmarkConfig, **kw) -> BenchmarkConfig:
    return replace(cfg, **kw)
