"""Exact enumeration over finite structural causal models.

An SCM here has independent finite factors z, eps and delta, a deterministic
treatment t = g(z, eps, delta) and a table of conditional means E[y | t, z].
A control function is a table q(zhat | t, eps).  Everything is computed from
the full joint p(z, eps, delta, t, zhat), held as a dense array.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, DomainError

PROB_TOL = 1e-12


class PositivityError(DomainError):
    """A control-function value has zero mass at the requested treatment."""


def _prob(vec, name: str) -> np.ndarray:
    p = np.asarray(vec, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ConfigError(f"{name} must be a non-empty vector")
    if np.any(p < 0) or abs(p.sum() - 1.0) > PROB_TOL:
        raise ConfigError(f"{name} must be non-negative and sum to 1")
    return p


@dataclass
class DiscreteScm:
    """Supports are label lists; ``g_table[iz, ie, id]`` is an index into ``t_support``
    and ``outcome_table[it, iz]`` is E[y | t, z]."""

    z_support: list
    eps_support: list
    delta_support: list
    pz: np.ndarray
    peps: np.ndarray
    pdelta: np.ndarray
    t_support: list
    g_table: np.ndarray
    outcome_table: np.ndarray

    def __post_init__(self):
        self.pz = _prob(self.pz, "pz")
        self.peps = _prob(self.peps, "peps")
        self.pdelta = _prob(self.pdelta, "pdelta")
        self.g_table = np.asarray(self.g_table, dtype=np.int64)
        self.outcome_table = np.asarray(self.outcome_table, dtype=np.float64)
        shape = (len(self.z_support), len(self.eps_support), len(self.delta_support))
        if self.pz.size != shape[0] or self.peps.size != shape[1] or self.pdelta.size != shape[2]:
            raise ConfigError("probability vectors must match their supports")
        if self.g_table.shape != shape:
            raise ConfigError(f"g_table must have shape {shape}, got {self.g_table.shape}")
        nt = len(self.t_support)
        if self.g_table.min() < 0 or self.g_table.max() >= nt:
            raise ConfigError("g_table refers to an unknown treatment label")
        if self.outcome_table.shape != (nt, shape[0]):
            raise ConfigError(f"outcome_table must have shape {(nt, shape[0])}")

    @property
    def n_t(self) -> int:
        return len(self.t_support)

    def base_joint(self) -> np.ndarray:
        """p(z, eps, delta, t) with shape (nz, ne, nd, nt)."""
        p = self.pz[:, None, None] * self.peps[None, :, None] * self.pdelta[None, None, :]
        joint = np.zeros(p.shape + (self.n_t,))
        iz, ie, idl = np.indices(p.shape)
        joint[iz, ie, idl, self.g_table] = p
        return joint

    def t_marginal(self) -> np.ndarray:
        return self.base_joint().sum(axis=(0, 1, 2))

    def to_json(self) -> dict:
        return {
            "z_support": self.z_support, "eps_support": self.eps_support,
            "delta_support": self.delta_support, "t_support": self.t_support,
            "pz": self.pz.tolist(), "peps": self.peps.tolist(), "pdelta": self.pdelta.tolist(),
            "g_table": self.g_table.tolist(), "outcome_table": self.outcome_table.tolist(),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "DiscreteScm":
        keys = {"z_support", "eps_support", "delta_support", "t_support", "pz", "peps", "pdelta",
                "g_table", "outcome_table"}
        missing = keys - set(doc)
        if missing:
            raise ConfigError(f"SCM document is missing {sorted(missing)}")
        return cls(**{k: doc[k] for k in keys})


@dataclass
class DiscreteControlFunction:
    """``q_table[it, ie]`` is a probability vector over ``zhat_support``."""

    zhat_support: list
    q_table: np.ndarray

    def __post_init__(self):
        self.q_table = np.asarray(self.q_table, dtype=np.float64)
        if self.q_table.ndim != 3 or self.q_table.shape[2] != len(self.zhat_support):
            raise ConfigError("q_table must have shape (n_t, n_eps, n_zhat)")
        if np.any(self.q_table < 0) or np.max(np.abs(self.q_table.sum(axis=2) - 1.0)) > PROB_TOL:
            raise ConfigError("each q_table row must be a probability vector")

    @classmethod
    def deterministic(cls, zhat_support, index_table) -> "DiscreteControlFunction":
        idx = np.asarray(index_table, dtype=np.int64)
        q = np.zeros(idx.shape + (len(zhat_support),))
        it, ie = np.indices(idx.shape)
        q[it, ie, idx] = 1.0
        return cls(list(zhat_support), q)

    def to_json(self) -> dict:
        return {"zhat_support": self.zhat_support, "q_table": self.q_table.tolist()}

    @classmethod
    def from_json(cls, doc: dict) -> "DiscreteControlFunction":
        return cls(doc["zhat_support"], doc["q_table"])


def full_joint(scm: DiscreteScm, cf: DiscreteControlFunction) -> np.ndarray:
    """p(z, eps, delta, t, zhat), shape (nz, ne, nd, nt, nzh)."""
    if cf.q_table.shape[:2] != (scm.n_t, len(scm.eps_support)):
        raise ConfigError("control function table does not match the SCM supports")
    base = scm.base_joint()
    # q_table is indexed (t, eps); move it to (eps, t) for broadcasting
    q = np.transpose(cf.q_table, (1, 0, 2))
    return base[..., None] * q[None, :, None, :, :]


# ------------------------------------------------------------ premise checks


def check_reconstruction(scm: DiscreteScm, cf: DiscreteControlFunction):
    """True iff every positive-mass (zhat, eps) pins down a single t.

    Returns ``(ok, witness)`` where the witness is ``(zhat, eps, t1, t2)`` labels.
    """
    p = full_joint(scm, cf).sum(axis=(0, 2))  # (ne, nt, nzh)
    for ie in range(p.shape[0]):
        for izh in range(p.shape[2]):
            ts = np.flatnonzero(p[ie, :, izh] > 0)
            if ts.size > 1:
                return False, (cf.zhat_support[izh], scm.eps_support[ie],
                               scm.t_support[ts[0]], scm.t_support[ts[1]])
    return True, None


def check_joint_independence(scm: DiscreteScm, cf: DiscreteControlFunction, tol: float = 1e-12):
    """eps independent of (z, zhat, delta): returns ``(ok, max_deviation)``."""
    p = full_joint(scm, cf).sum(axis=3)  # (nz, ne, nd, nzh)
    pe = p.sum(axis=(0, 2, 3))
    rest = p.sum(axis=1)
    dev = float(np.max(np.abs(p - pe[None, :, None, None] * rest[:, None, :, :])))
    return dev <= tol, dev


def _pair_deviation(pxy: np.ndarray) -> float:
    return float(np.max(np.abs(pxy - np.outer(pxy.sum(axis=1), pxy.sum(axis=0)))))


def check_marginal_independence(scm: DiscreteScm, cf: DiscreteControlFunction, tol: float = 1e-12):
    """The pairwise checks zhat vs eps and zhat vs z.

    Returns ``(ok, {"zhat_eps": dev, "zhat_z": dev})``.
    """
    p = full_joint(scm, cf)
    dev = {
        "zhat_eps": _pair_deviation(p.sum(axis=(0, 2, 3)).T),
        "zhat_z": _pair_deviation(p.sum(axis=(1, 2, 3)).T),
    }
    return all(v <= tol for v in dev.values()), dev


def check_positivity(scm: DiscreteScm, cf: DiscreteControlFunction | None = None):
    """min over positive-mass t and all (z, delta) of P(t | z, delta); ok iff > 0."""
    base = scm.base_joint()  # (nz, ne, nd, nt)
    pzd = base.sum(axis=(1, 3))
    cond = base.sum(axis=1) / np.where(pzd > 0, pzd, 1.0)[:, :, None]
    live_t = base.sum(axis=(0, 1, 2)) > 0
    live_zd = pzd > 0
    c_min = float(np.min(cond[live_zd][:, live_t]))
    return c_min > 0.0, c_min


# ------------------------------------------------------------------ effects


def _t_index(scm: DiscreteScm, t) -> int:
    try:
        return scm.t_support.index(t)
    except ValueError:
        raise DomainError(f"treatment {t!r} is not in the support") from None


def true_effect(scm: DiscreteScm, t) -> float:
    return float(scm.pz @ scm.outcome_table[_t_index(scm, t)])


def cf_effect(scm: DiscreteScm, cf: DiscreteControlFunction, t) -> float:
    """sum_zhat q(zhat) E[y | t, zhat] from the exact joint."""
    it = _t_index(scm, t)
    p = full_joint(scm, cf).sum(axis=(1, 2))  # (nz, nt, nzh)
    q_marg = p.sum(axis=(0, 1))
    p_t = p[:, it, :]  # (nz, nzh)
    mass = p_t.sum(axis=0)
    live = q_marg > 0
    if np.any(live & (mass <= 0)):
        bad = cf.zhat_support[int(np.flatnonzero(live & (mass <= 0))[0])]
        raise PositivityError(f"t={t!r} has zero probability given zhat={bad!r}")
    cond_mean = (scm.outcome_table[it] @ p_t)[live] / mass[live]
    return float(q_marg[live] @ cond_mean)


@dataclass
class TheoremReport:
    reconstruction_ok: bool
    reconstruction_witness: list | None
    joint_independence_ok: bool
    joint_max_deviation: float
    marginal_independence_ok: bool
    marginal_deviations: dict
    positivity_ok: bool
    c_min: float
    effects_match: bool
    max_effect_gap: float
    tolerance: float
    per_t: list = field(default_factory=list)

    @property
    def premises_ok(self) -> bool:
        return self.reconstruction_ok and self.joint_independence_ok and self.positivity_ok

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["premises_ok"] = self.premises_ok
        return doc

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"


def verify_theorem1(scm: DiscreteScm, cf: DiscreteControlFunction, tol: float = 1e-9) -> TheoremReport:
    """Run the premise checks and compare the control-function effect to the truth.

    Effect gaps are reported whatever the premises say; a t where the control
    function effect is undefined gets an infinite gap.
    """
    rec_ok, witness = check_reconstruction(scm, cf)
    joint_ok, joint_dev = check_joint_independence(scm, cf)
    marg_ok, marg_dev = check_marginal_independence(scm, cf)
    pos_ok, c_min = check_positivity(scm, cf)
    rows = []
    gap = 0.0
    t_mass = scm.t_marginal()
    for it, label in enumerate(scm.t_support):
        if t_mass[it] <= 0:
            continue
        truth = true_effect(scm, label)
        try:
            est = cf_effect(scm, cf, label)
            g = abs(est - truth)
        except PositivityError:
            est, g = None, float("inf")
        gap = max(gap, g)
        rows.append({"t": label, "true_effect": truth, "cf_effect": est, "gap": g})
    return TheoremReport(
        rec_ok, None if witness is None else list(witness), joint_ok, joint_dev, marg_ok, marg_dev,
        pos_ok, c_min, gap <= tol, gap, tol, rows,
    )


# ------------------------------------------------------------- constructions


def build_mod_counterexample(n: int):
    """Modular analogue of the marginal-but-not-joint independence construction.

    eps = a and z = b are uniform on {0..n-1}; the treatment is t = b and the
    control function is zhat = (eps + t) mod n.  zhat is uniform given eps and
    given z, t is recovered from (zhat, eps), yet (z, zhat) determines eps.
    The outcome mean is E[y | t, z] = z, so the true effect is (n-1)/2 for every
    t while the control-function effect equals t.
    """
    if n < 3:
        raise DomainError("n must be >= 3")
    labels = list(range(n))
    uniform = np.full(n, 1.0 / n)
    g = np.repeat(np.arange(n)[:, None, None], n, axis=1)  # t = z
    outcome = np.tile(np.arange(n, dtype=np.float64), (n, 1))  # E[y | t, z] = z
    scm = DiscreteScm(labels, labels, [0], uniform, uniform, [1.0], labels, g, outcome)
    it, ie = np.indices((n, n))
    cf = DiscreteControlFunction.deterministic(labels, (it + ie) % n)
    return scm, cf


def mod_sum_scm(n: int) -> DiscreteScm:
    """t = (eps + z) mod n with uniform eps and z; outcome mean z."""
    if n < 2:
        raise DomainError("n must be >= 2")
    labels = list(range(n))
    uniform = np.full(n, 1.0 / n)
    iz, ie = np.indices((n, n))
    g = ((iz + ie) % n)[:, :, None]
    outcome = np.tile(np.arange(n, dtype=np.float64), (n, 1))
    return DiscreteScm(labels, labels, [0], uniform, uniform, [1.0], labels, g, outcome)


def identity_cf(scm: DiscreteScm) -> DiscreteControlFunction:
    """zhat = z, written as a table over (t, eps).

    Needs z to be a function of (t, eps) on the positive-mass set; raises
    otherwise.
    """
    base = scm.base_joint().sum(axis=2)  # (nz, ne, nt)
    nz, ne, nt = base.shape
    q = np.zeros((nt, ne, nz))
    for it in range(nt):
        for ie in range(ne):
            zs = np.flatnonzero(base[:, ie, it] > 0)
            if zs.size > 1:
                raise DomainError("z is not a function of (t, eps); zhat = z is not a valid table")
            q[it, ie, zs[0] if zs.size else 0] = 1.0
    return DiscreteControlFunction(list(scm.z_support), q)


def random_scm(rng: np.random.Generator, max_states: int = 5) -> DiscreteScm:
    """A random SCM with singleton delta where t = g(z, eps) is injective in z per eps.

    Injectivity keeps zhat = z a function of (t, eps); the eps columns cycle
    through every shift, so each t is reachable from each z (positivity).
    """
    nz = int(rng.integers(2, max_states + 1))
    # at least as many eps states as t labels so every t is reachable from every z
    ne = int(rng.integers(nz, max_states + 1))
    nt = nz
    pz = rng.dirichlet(np.ones(nz))
    peps = rng.dirichlet(np.ones(ne))
    base = rng.permutation(nt)
    # column eps is a cyclic shift of one permutation of the labels
    g = np.stack([np.roll(base, ie % nt) for ie in range(ne)], axis=1)[:, :, None]
    outcome = rng.normal(size=(nt, nz))
    return DiscreteScm(list(range(nz)), list(range(ne)), [0], pz, peps, [1.0], list(range(nt)), g, outcome)


def random_trials(trials: int = 100, max_states: int = 5, seed: int = 0, tol: float = 1e-9) -> list[TheoremReport]:
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(trials):
        scm = random_scm(rng, max_states)
        out.append(verify_theorem1(scm, identity_cf(scm), tol))
    return out


def load_problem(path):
    with open(path) as fh:
        doc = json.load(fh)
    return DiscreteScm.from_json(doc["scm"]), DiscreteControlFunction.from_json(doc["cf"])
