"""Variational decoupling: learn a categorical control function from (t, eps).

The encoder q(zhat | t, eps) is a softmax over ``k_categories`` logits.  The
decoder p(t | zhat, eps) carries the assumed structure of the treatment
process:

* ``additive``        t ~ N(h[zhat] + g(eps), 1)
* ``multiplicative``  t ~ N(h[zhat] * g(eps), 1)
* ``categorical``     t binned into 50 classes, logits from a net on (onehot zhat, eps)

``h`` is a lookup table with one entry per category and ``g`` a small ReLU
net.  The training objective, per row, is

    sum_k q_k log p(t | k, eps) - kappa * KL(q || r) + zeta * m * log q[bin(z)]

with the expectation over zhat taken exactly over all categories and ``r``
a free categorical marginal.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .errors import ConfigError, DataError, DomainError
from .kernels import log_softmax_pick, log_softmax_rows, pair_reduce, pair_relu, pick_grad
from .simgen import Dataset

STRUCTURES = ("additive", "multiplicative", "categorical")


@dataclass(frozen=True)
class TreatmentBins:
    """``n_inner`` equal-width bins on [lo, hi] plus one open bin per tail."""

    lo: float = -3.5
    hi: float = 3.5
    n_inner: int = 48

    @property
    def n_bins(self) -> int:
        return self.n_inner + 2

    @property
    def edges(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.n_inner + 1)

    def index(self, values) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        if not np.all(np.isfinite(values)):
            raise DomainError("cannot bin non-finite values")
        idx = np.searchsorted(self.edges, values, side="right")
        # x == hi belongs to the top tail, matching the [hi, inf) convention
        return idx.astype(np.int64)

    def centers(self) -> np.ndarray:
        e = self.edges
        mid = 0.5 * (e[:-1] + e[1:])
        w = e[1] - e[0]
        return np.concatenate([[e[0] - 0.5 * w], mid, [e[-1] + 0.5 * w]])


@dataclass
class VdeConfig:
    k_categories: int = 50
    kappa: float = 0.1
    decoder_structure: str = "additive"
    zeta: float = 0.5
    semi_supervised: bool = False
    epochs: int = 100
    batch_size: int = 500
    learning_rate: float = 1e-2
    seed: int = 0
    hidden: int = 100
    treatment_bins: TreatmentBins = field(default_factory=TreatmentBins)

    def __post_init__(self):
        if isinstance(self.treatment_bins, dict):
            self.treatment_bins = TreatmentBins(**self.treatment_bins)
        self.validate()

    def validate(self):
        if not 0.0 <= self.kappa < 1.0:
            raise ConfigError(f"kappa must lie in [0, 1), got {self.kappa}")
        if self.k_categories < 2:
            raise ConfigError("k_categories must be >= 2")
        if self.decoder_structure not in STRUCTURES:
            raise ConfigError(f"decoder_structure must be one of {STRUCTURES}")
        if self.zeta < 0:
            raise ConfigError("zeta must be non-negative")
        if self.semi_supervised and self.k_categories != self.treatment_bins.n_bins:
            raise ConfigError(
                "semi-supervision bins z like t, so k_categories must equal "
                f"{self.treatment_bins.n_bins}"
            )
        if self.epochs < 1 or self.batch_size < 1 or self.hidden < 1:
            raise ConfigError("epochs, batch_size and hidden must be positive")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "VdeConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown VDE config keys: {sorted(unknown)}")
        return cls(**doc)


@dataclass
class VdeModel:
    config: VdeConfig
    params: dict
    metadata: dict = field(default_factory=dict)

    @property
    def encoder(self) -> nn.MlpParams:
        return self.params["enc"]

    @property
    def decoder(self) -> dict:
        return self.params["dec"]

    @property
    def marginal_logits(self) -> np.ndarray:
        return self.params["marg"]

    @property
    def structure(self) -> str:
        return self.config.decoder_structure

    @property
    def k(self) -> int:
        return self.config.k_categories

    # -------------------------------------------------------------- queries

    def posterior(self, t, eps) -> np.ndarray:
        """Encoder probabilities, shape (n, K)."""
        x = np.column_stack([np.atleast_1d(t), np.atleast_1d(eps)]).astype(np.float64)
        logits, _ = nn.mlp_forward(self.encoder, x)
        return np.exp(log_softmax_rows(logits))

    def decoder_mean(self, eps) -> np.ndarray:
        """Structural mean of t for every (row, category), shape (n, K)."""
        if self.structure == "categorical":
            raise DomainError("the categorical decoder has no scalar mean")
        eps = np.atleast_1d(np.asarray(eps, dtype=np.float64))
        g, _ = nn.mlp_forward(self.decoder["g"], eps[:, None])
        h = self.decoder["h"]
        if self.structure == "additive":
            return h[None, :] + g
        return h[None, :] * g

    def decoder_logdensity(self, t, eps) -> np.ndarray:
        """log p(t | k, eps) for every (row, category), shape (n, K)."""
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        eps = np.atleast_1d(np.asarray(eps, dtype=np.float64))
        lp, _ = _decoder_forward(self.params["dec"], self.config, t, eps)
        return lp

    # ------------------------------------------------------------ checkpoint

    def to_json(self) -> dict:
        dec = self.decoder
        if self.structure == "categorical":
            dec_doc = {"net": dec["net"].to_json()}
        else:
            dec_doc = {"h": dec["h"].tolist(), "g": dec["g"].to_json()}
        doc = {
            "format": "gcfn-vde/1",
            "config": self.config.to_json(),
            "encoder": self.encoder.to_json(),
            "decoder": {"structure": self.structure, **dec_doc},
            "marginal_logits": self.marginal_logits.tolist(),
            "metadata": self.metadata,
        }
        if self.structure == "categorical":
            doc["bin_edges"] = self.config.treatment_bins.edges.tolist()
        return doc

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)

    @classmethod
    def from_json(cls, doc: dict) -> "VdeModel":
        config = VdeConfig.from_json(doc["config"])
        dec = doc["decoder"]
        if dec["structure"] != config.decoder_structure:
            raise ConfigError("decoder structure tag disagrees with config")
        if dec["structure"] == "categorical":
            dec_params = {"net": nn.MlpParams.from_json(dec["net"])}
        else:
            dec_params = {"h": np.array(dec["h"], dtype=np.float64), "g": nn.MlpParams.from_json(dec["g"])}
        params = {
            "enc": nn.MlpParams.from_json(doc["encoder"]),
            "dec": dec_params,
            "marg": np.array(doc["marginal_logits"], dtype=np.float64),
        }
        return cls(config, params, doc.get("metadata", {}))

    @classmethod
    def loads(cls, text: str) -> "VdeModel":
        return cls.from_json(json.loads(text))


# ---------------------------------------------------------------- construction


def init_params(config: VdeConfig, rng: np.random.Generator) -> dict:
    k, h = config.k_categories, config.hidden
    enc = nn.init_mlp([2, h, h, k], rng)
    if config.decoder_structure == "categorical":
        dec = {"net": nn.init_mlp([k + 1, h, h, config.treatment_bins.n_bins], rng)}
    else:
        g = nn.init_mlp([1, h, h, 1], rng)
        if config.decoder_structure == "additive":
            table = rng.uniform(-1.0, 1.0, size=k)
        else:
            # spread over both signs so sign(t) is representable from the start
            table = rng.uniform(-1.5, 1.5, size=k)
        dec = {"h": table, "g": g}
    return {"enc": enc, "dec": dec, "marg": np.zeros(k)}


def init_model(config: VdeConfig, seed: int | None = None) -> VdeModel:
    rng = np.random.default_rng(config.seed if seed is None else seed)
    return VdeModel(config, init_params(config, rng))


# -------------------------------------------------------------------- decoder


def _decoder_forward(dec: dict, config: VdeConfig, t: np.ndarray, eps: np.ndarray):
    """log p(t | k, eps), shape (n, K), plus a cache for the backward pass."""
    structure = config.decoder_structure
    k = config.k_categories
    if structure == "categorical":
        net = dec["net"]
        bins = config.treatment_bins.index(t)
        w1 = net.weights[0]
        row_part = eps[:, None] * w1[:, k][None, :] + net.biases[0]
        act = pair_relu(row_part, np.ascontiguousarray(w1[:, :k].T))
        logits, cache = nn.mlp_forward(net, first_act=act)
        idx = np.repeat(bins, k)
        picked, lse = log_softmax_pick(logits, idx)
        return picked.reshape(-1, k), (logits, cache, idx, lse)
    g, gcache = nn.mlp_forward(dec["g"], eps[:, None])
    h = dec["h"]
    mu = h[None, :] + g if structure == "additive" else h[None, :] * g
    resid = t[:, None] - mu
    lp = -0.5 * nn.LOG_2PI - 0.5 * resid * resid
    return lp, (g, gcache, resid)


def _decoder_backward(dec: dict, config: VdeConfig, eps: np.ndarray, cache, d_lp: np.ndarray) -> dict:
    """Gradient of sum(d_lp * log p) with respect to decoder parameters."""
    structure = config.decoder_structure
    k = config.k_categories
    if structure == "categorical":
        net = dec["net"]
        logits, ncache, idx, lse = cache
        d_logits = pick_grad(logits, lse, idx, np.ascontiguousarray(d_lp.reshape(-1)))
        grads, d_pre = nn.mlp_backward(net, ncache, d_logits)
        per_cat, weighted, total = pair_reduce(d_pre, eps, k)
        gw0 = np.empty_like(net.weights[0])
        gw0[:, :k] = per_cat.T
        gw0[:, k] = weighted
        grads.weights[0] = gw0
        grads.biases[0] = total
        return {"net": grads}
    g, gcache, resid = cache
    v = d_lp * resid  # d/dmu
    h = dec["h"]
    if structure == "additive":
        dh = v.sum(axis=0)
        dg = v.sum(axis=1, keepdims=True)
    else:
        dh = (v * g).sum(axis=0)
        dg = (v * h[None, :]).sum(axis=1, keepdims=True)
    ggrads, _ = nn.mlp_backward(dec["g"], gcache, dg)
    return {"g": ggrads, "h": dh}


# ----------------------------------------------------------------------- loss


def _z_bins(config: VdeConfig, z, m):
    if not config.semi_supervised or config.zeta == 0.0:
        return None, None
    if m is None or not np.any(m == 1):
        return None, None
    if z is None:
        raise DataError("rows with m=1 need a confounder value")
    zz = np.where(m == 1, z, 0.0)
    if not np.all(np.isfinite(zz)):
        raise DataError("rows with m=1 need a finite confounder value")
    return config.treatment_bins.index(zz), m.astype(np.float64)


def loss_terms(params: dict, config: VdeConfig, t, eps, z=None, m=None, with_grad: bool = True):
    """Mean negative objective over the rows and, optionally, its gradient tree.

    Returns ``(loss, grads, parts)`` where ``parts`` holds the per-batch means of
    the reconstruction, KL and supervision terms.
    """
    t = np.asarray(t, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    n = t.shape[0]
    if n == 0:
        raise DataError("empty batch")
    kappa, zeta = config.kappa, config.zeta
    if not 0.0 <= kappa < 1.0:
        raise ConfigError(f"kappa must lie in [0, 1), got {kappa}")
    zbins, mask = _z_bins(config, z, m)

    x = np.column_stack([t, eps])
    a, enc_cache = nn.mlp_forward(params["enc"], x)
    logq = log_softmax_rows(a)
    q = np.exp(logq)
    logr = nn.softmax_logprobs(params["marg"])
    lp, dcache = _decoder_forward(params["dec"], config, t, eps)

    recon = np.sum(q * lp, axis=1)
    kl_rows = np.sum(q * (logq - logr[None, :]), axis=1)
    obj = recon - kappa * kl_rows
    sup = 0.0
    if zbins is not None:
        sup_rows = mask * logq[np.arange(n), zbins]
        obj = obj + zeta * sup_rows
        sup = float(np.mean(sup_rows))
    loss = -float(np.mean(obj))
    parts = {"recon": float(np.mean(recon)), "kl": float(np.mean(kl_rows)), "sup": sup}
    if not with_grad:
        return loss, None, parts

    scale = -1.0 / n
    gq = lp - kappa * (logq - logr[None, :])
    da = q * (gq - np.sum(q * gq, axis=1, keepdims=True))
    if zbins is not None:
        onehot = np.zeros_like(q)
        onehot[np.arange(n), zbins] = 1.0
        da += zeta * mask[:, None] * (onehot - q)
    enc_grads, _ = nn.mlp_backward(params["enc"], enc_cache, da * scale)
    dec_grads = _decoder_backward(params["dec"], config, eps, dcache, q * scale)
    r = np.exp(logr)
    dmarg = scale * kappa * (q.sum(axis=0) - n * r)
    return loss, {"enc": enc_grads, "dec": dec_grads, "marg": dmarg}, parts


def vde_loss(model: VdeModel, batch: Dataset, config: VdeConfig | None = None):
    """Loss and gradients of the objective on a dataset slice."""
    config = config or model.config
    loss, grads, _ = loss_terms(model.params, config, batch.t, batch.eps, batch.z, batch.m)
    return loss, grads


def kl_to_marginal(q: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Row-wise KL(q || r) with 0 log 0 = 0."""
    q = np.asarray(q, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(q > 0, q * (np.log(q) - np.log(r)), 0.0)
    return terms.sum(axis=-1)


# ------------------------------------------------------------------ training


def train_vde(data: Dataset, config: VdeConfig) -> VdeModel:
    config.validate()
    n = len(data)
    if n == 0:
        raise DataError("empty dataset")
    if config.batch_size > n:
        raise ConfigError(f"batch_size {config.batch_size} exceeds dataset size {n}")
    if config.semi_supervised and data.z is None and np.any(data.m == 1):
        raise DataError("semi-supervised VDE needs a z column")
    rng = np.random.default_rng(config.seed)
    params = init_params(config, rng)
    t, eps, z, m = data.t, data.eps, data.z, data.m

    def step(p, idx):
        loss, grads, _ = loss_terms(
            p, config, t[idx], eps[idx], None if z is None else z[idx], m[idx]
        )
        return loss, grads

    params, history = nn.fit_minibatch(
        params, step, n,
        epochs=config.epochs, batch_size=config.batch_size,
        learning_rate=config.learning_rate, rng=rng,
    )
    final, _, parts = loss_terms(params, config, t, eps, z, m, with_grad=False)
    meta = {
        "n_train": n,
        "final_loss": final,
        "final_recon": parts["recon"],
        "final_kl": parts["kl"],
        "epoch_losses": history,
    }
    if not math.isfinite(final):
        raise DataError("final loss is not finite")
    return VdeModel(config, params, meta)
