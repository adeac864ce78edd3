"""Seeded scenario generators and CSV dataset I/O.

All generators draw from ``numpy.random.default_rng(seed)`` (PCG64) and produce
normal variates with numpy's ziggurat sampler.  A Gaussian written N(m, v)
below takes ``v`` as a variance; the convention is stamped into every
dataset's metadata.
"""
from __future__ import annotations

import csv
import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, DomainError, ParseError

NOISE_VARIANCE = 0.1
VARIANCE_CONVENTION = "second Gaussian argument is a variance"

KINDS = ("mult_outcome", "mult_treatment", "semi", "cfn_violation", "counterexample")


@dataclass
class Dataset:
    t: np.ndarray
    eps: np.ndarray
    y: np.ndarray
    z: np.ndarray | None = None
    m: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64)
        self.eps = np.asarray(self.eps, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        n = self.t.shape[0]
        if self.z is not None:
            self.z = np.asarray(self.z, dtype=np.float64)
        if self.m is None:
            self.m = np.zeros(n, dtype=np.int64) if self.z is None else np.ones(n, dtype=np.int64)
        self.m = np.asarray(self.m, dtype=np.int64)
        for name in ("eps", "y", "m") + (("z",) if self.z is not None else ()):
            if getattr(self, name).shape != (n,):
                raise DataError(f"column {name} has length {getattr(self, name).shape[0]}, expected {n}")
        if not np.all(np.isin(self.m, (0, 1))):
            raise DataError("mask m must be 0/1")
        if self.z is None and np.any(self.m == 1):
            raise DataError("rows with m=1 need a z value")
        cols = [self.t, self.eps, self.y] + ([self.z] if self.z is not None else [])
        for c in cols:
            if not np.all(np.isfinite(c)):
                raise DataError("non-finite value in dataset")

    def __len__(self):
        return self.t.shape[0]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(
            self.t[idx], self.eps[idx], self.y[idx],
            None if self.z is None else self.z[idx], self.m[idx], dict(self.metadata),
        )


@dataclass(frozen=True)
class ScenarioSpec:
    kind: str
    alpha: float = 1.0
    rho: float = 0.05
    n: int = 5000
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", normalize_kind(self.kind))
        if self.n < 1:
            raise DomainError("n must be >= 1")
        if self.kind == "semi" and not 0.0 <= self.rho <= 1.0:
            raise DomainError("rho must lie in [0, 1]")


def normalize_kind(kind: str) -> str:
    k = kind.strip().lower().replace("-", "_")
    if k not in KINDS:
        raise DomainError(f"unknown scenario kind {kind!r}; expected one of {', '.join(KINDS)}")
    return k


def generate(spec: ScenarioSpec) -> Dataset:
    rng = np.random.default_rng(spec.seed)
    n = spec.n
    if spec.kind == "counterexample":
        a, b, c = generate_counterexample(n, spec.seed)
        # a plays the instrument, b the confounder, c the treatment; y reveals b
        return Dataset(c, a, b.copy(), b, np.ones(n, dtype=np.int64), _meta(spec))
    z = rng.standard_normal(n)
    eps = rng.standard_normal(n)
    noise = rng.standard_normal(n) * math.sqrt(NOISE_VARIANCE)
    m = np.ones(n, dtype=np.int64)
    if spec.kind == "mult_outcome":
        t = (z + eps) / math.sqrt(2.0)
        y = t + spec.alpha * t * t * z + noise
    elif spec.kind == "mult_treatment":
        t = z * eps
        y = t + spec.alpha * z + noise
    elif spec.kind == "semi":
        t = eps * z
        y = t + t * z + noise
        m = (rng.random(n) < spec.rho).astype(np.int64)
    else:  # cfn_violation
        t = (z + eps) / math.sqrt(2.0)
        y = t * t + spec.alpha * z * z + noise
    return Dataset(t, eps, y, z, m, _meta(spec))


def _meta(spec: ScenarioSpec) -> dict:
    return {
        "scenario": spec.kind,
        "alpha": spec.alpha,
        "rho": spec.rho if spec.kind == "semi" else None,
        "n": spec.n,
        "seed": spec.seed,
        "noise_variance": NOISE_VARIANCE,
        "variance_convention": VARIANCE_CONVENTION,
        "prng": "numpy PCG64 via default_rng; normals by ziggurat",
    }


def true_effect_fn(spec: ScenarioSpec):
    """Ground-truth dose response t -> E[y | do(t)] for a scenario."""
    if spec.kind in ("mult_outcome", "mult_treatment", "semi"):
        return lambda t: np.asarray(t, dtype=np.float64) * 1.0
    if spec.kind == "cfn_violation":
        alpha = spec.alpha
        # E_z[t^2 + alpha z^2] with Var z = 1
        return lambda t: np.asarray(t, dtype=np.float64) ** 2 + alpha
    raise DomainError("the counterexample scenario has no scalar effect function")


_GRID = 2**52


def generate_counterexample(n: int, seed: int = 0):
    """a, b ~ U(0,1) independent and c = (a + b) mod 1; returns (a, b, c)."""
    if n < 1:
        raise DomainError("n must be >= 1")
    rng = np.random.default_rng(seed)
    # draws on the 2^-52 grid keep a + b, c - a and c - a + 1 exact in float64
    a = rng.integers(0, _GRID, size=n) / _GRID
    b = rng.integers(0, _GRID, size=n) / _GRID
    s = a + b
    c = np.where(s > 1.0, s - 1.0, s)
    return a, b, c


def invert_counterexample(a, c):
    """Recover b from (a, c): c - a when c > a, else c - a + 1."""
    a = np.asarray(a)
    c = np.asarray(c)
    return np.where(c > a, c - a, c - a + 1.0)


# ----------------------------------------------------------------------- I/O

COLUMNS = ("t", "eps", "y", "z", "m")


def meta_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".meta.json")


def _fmt(x: float) -> str:
    return "%.17g" % x


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_csv(data: Dataset, path) -> None:
    lines = [",".join(COLUMNS)]
    z = data.z
    for i in range(len(data)):
        zs = "" if z is None else _fmt(z[i])
        lines.append(f"{_fmt(data.t[i])},{_fmt(data.eps[i])},{_fmt(data.y[i])},{zs},{int(data.m[i])}")
    atomic_write_text(path, "\n".join(lines) + "\n")
    atomic_write_text(meta_path(path), json.dumps(data.metadata, indent=2, sort_keys=True) + "\n")


def load_csv(path) -> Dataset:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError(f"{path}: line 1: empty file") from None
        for col in ("t", "eps", "y"):
            if col not in header:
                raise ParseError(f"{path}: line 1: missing required column {col!r}")
        pos = {c: header.index(c) for c in COLUMNS if c in header}
        t, eps, y, z, m = [], [], [], [], []
        has_z = "z" in pos
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                t.append(float(row[pos["t"]]))
                eps.append(float(row[pos["eps"]]))
                y.append(float(row[pos["y"]]))
                zval = row[pos["z"]].strip() if has_z else ""
                mval = int(row[pos["m"]]) if "m" in pos else (1 if zval else 0)
            except ValueError as exc:
                raise ParseError(f"{path}: line {lineno}: {exc}") from None
            if mval == 1 and not zval:
                raise ParseError(f"{path}: line {lineno}: m=1 but z is empty")
            z.append(float(zval) if zval else math.nan)
            m.append(mval)
    z_arr = np.array(z) if has_z else None
    if z_arr is not None and np.all(np.isnan(z_arr)):
        z_arr = None
    elif z_arr is not None and np.any(np.isnan(z_arr)):
        # partially missing z: keep the column, zero-fill the unobserved rows
        z_arr = np.where(np.isnan(z_arr), 0.0, z_arr)
    meta = {}
    mp = meta_path(path)
    if mp.exists():
        meta = json.loads(mp.read_text())
    try:
        return Dataset(np.array(t), np.array(eps), np.array(y), z_arr, np.array(m, dtype=np.int64), meta)
    except DataError as exc:
        raise ParseError(f"{path}: {exc}") from None
