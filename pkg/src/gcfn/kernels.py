"""Hot numeric kernels.

Every kernel has a numba implementation (``*_nb``) and a numpy one (``*_np``).
The public name is bound to the numba version unless numba is missing or
``GCFN_DISABLE_NUMBA`` is set.  Both paths are deterministic; they may differ
in the last ulp because summation order differs.
"""
import numpy as np

from ._accel import HAVE_NUMBA, njit

# ---------------------------------------------------------------- log-softmax


def log_softmax_rows_np(x):
    m = x.max(axis=1, keepdims=True)
    s = x - m
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


@njit
def log_softmax_rows_nb(x):
    n, k = x.shape
    out = np.empty_like(x)
    for i in range(n):
        m = x[i, 0]
        for j in range(1, k):
            if x[i, j] > m:
                m = x[i, j]
        acc = 0.0
        for j in range(k):
            acc += np.exp(x[i, j] - m)
        lse = m + np.log(acc)
        for j in range(k):
            out[i, j] = x[i, j] - lse
    return out


# ------------------------------------------- categorical pick and its gradient


def log_softmax_pick_np(logits, idx):
    """Per row: (logits[idx] - logsumexp(logits), logsumexp(logits))."""
    m = logits.max(axis=1)
    lse = m + np.log(np.exp(logits - m[:, None]).sum(axis=1))
    return logits[np.arange(logits.shape[0]), idx] - lse, lse


@njit
def log_softmax_pick_nb(logits, idx):
    n, k = logits.shape
    picked = np.empty(n)
    lse = np.empty(n)
    for i in range(n):
        m = logits[i, 0]
        for j in range(1, k):
            if logits[i, j] > m:
                m = logits[i, j]
        acc = 0.0
        for j in range(k):
            acc += np.exp(logits[i, j] - m)
        lse[i] = m + np.log(acc)
        picked[i] = logits[i, idx[i]] - lse[i]
    return picked, lse


def pick_grad_np(logits, lse, idx, weight):
    """d/dlogits of sum_i weight[i] * log_softmax(logits[i])[idx[i]]."""
    g = -np.exp(logits - lse[:, None])
    g[np.arange(logits.shape[0]), idx] += 1.0
    return g * weight[:, None]


@njit
def pick_grad_nb(logits, lse, idx, weight):
    n, k = logits.shape
    g = np.empty_like(logits)
    for i in range(n):
        w = weight[i]
        for j in range(k):
            g[i, j] = -np.exp(logits[i, j] - lse[i]) * w
        g[i, idx[i]] += w
    return g


# --------------------------------------------------------- ReLU layer pieces


def pair_relu_np(row_part, cat_part):
    """relu(row_part[i] + cat_part[k]) laid out as rows i*K + k."""
    n, h = row_part.shape
    k = cat_part.shape[0]
    return np.maximum(row_part[:, None, :] + cat_part[None, :, :], 0.0).reshape(n * k, h)


@njit
def pair_relu_nb(row_part, cat_part):
    n, h = row_part.shape
    k = cat_part.shape[0]
    act = np.empty((n * k, h))
    for i in range(n):
        for c in range(k):
            r = i * k + c
            for j in range(h):
                v = row_part[i, j] + cat_part[c, j]
                act[r, j] = v if v > 0.0 else 0.0
    return act


def relu_mask_np(d, act):
    """Zero ``d`` where the forward activation was clipped (in place)."""
    d *= act > 0.0
    return d


@njit
def relu_mask_nb(d, act):
    n, h = d.shape
    for r in range(n):
        for j in range(h):
            if act[r, j] <= 0.0:
                d[r, j] = 0.0
    return d


def outer_relu_np(col, row, act):
    """(col[:, None] * row[None, :]) masked by act > 0."""
    return np.multiply.outer(col, row) * (act > 0.0)


@njit
def outer_relu_nb(col, row, act):
    n, h = act.shape
    d = np.empty((n, h))
    for r in range(n):
        c = col[r]
        for j in range(h):
            d[r, j] = c * row[j] if act[r, j] > 0.0 else 0.0
    return d


def pair_reduce_np(d, x, k):
    """For d laid out as rows i*K + c: (sum_i d[i, c], sum_{i,c} x_i d[i, c], sum_{i,c} d)."""
    h = d.shape[1]
    d3 = d.reshape(-1, k, h)
    per_cat = d3.sum(axis=0)
    per_row = d3.sum(axis=1)
    return per_cat, x @ per_row, per_cat.sum(axis=0)


@njit
def pair_reduce_nb(d, x, k):
    h = d.shape[1]
    n = d.shape[0] // k
    per_cat = np.zeros((k, h))
    weighted = np.zeros(h)
    total = np.zeros(h)
    row_sum = np.empty(h)
    for i in range(n):
        for j in range(h):
            row_sum[j] = 0.0
        for c in range(k):
            r = i * k + c
            for j in range(h):
                v = d[r, j]
                per_cat[c, j] += v
                row_sum[j] += v
        for j in range(h):
            weighted[j] += x[i] * row_sum[j]
    for c in range(k):
        for j in range(h):
            total[j] += per_cat[c, j]
    return per_cat, weighted, total


# -------------------------------------------------------- contingency and MI


def contingency_np(a, b, na, nb):
    return np.bincount(a * nb + b, minlength=na * nb).reshape(na, nb)


@njit
def contingency_nb(a, b, na, nb):
    table = np.zeros((na, nb), dtype=np.int64)
    for i in range(a.shape[0]):
        table[a[i], b[i]] += 1
    return table


def plugin_mi_np(table):
    # count-ratio form: a degenerate margin gives log(1) = 0 exactly
    table = np.asarray(table, dtype=np.float64)
    n = table.sum()
    if n <= 0:
        return 0.0
    ra = table.sum(axis=1)
    rb = table.sum(axis=0)
    nz = table > 0
    c = table[nz]
    outer = np.outer(ra, rb)[nz]
    return max(float(np.sum(c * np.log(c * n / outer)) / n), 0.0)


@njit
def plugin_mi_nb(table):
    na, nb = table.shape
    n = 0.0
    ra = np.zeros(na)
    rb = np.zeros(nb)
    for i in range(na):
        for j in range(nb):
            n += table[i, j]
            ra[i] += table[i, j]
            rb[j] += table[i, j]
    if n <= 0.0:
        return 0.0
    mi = 0.0
    for i in range(na):
        for j in range(nb):
            c = table[i, j]
            if c > 0:
                mi += c * np.log(c * n / (ra[i] * rb[j]))
    mi /= n
    return mi if mi > 0.0 else 0.0


@njit
def _mi_codes_nb(a, b, na, nb):
    return plugin_mi_nb(contingency_nb(a, b, na, nb).astype(np.float64))


def _mi_codes_np(a, b, na, nb):
    return plugin_mi_np(contingency_np(a, b, na, nb))


# ------------------------------------------------------------ 1-D Wasserstein


def weighted_w1_np(x, wx, y, wy):
    """W1 between two weighted empirical measures on the real line (CDF integral)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    wx = np.asarray(wx, dtype=np.float64) / np.sum(wx)
    wy = np.asarray(wy, dtype=np.float64) / np.sum(wy)
    pts = np.concatenate([x, y])
    w = np.concatenate([wx, -wy])
    order = np.argsort(pts, kind="mergesort")
    pts = pts[order]
    cdf_gap = np.cumsum(w[order])[:-1]
    return float(np.sum(np.abs(cdf_gap) * np.diff(pts)))


@njit
def weighted_w1_nb(x, wx, y, wy):
    sx = wx.sum()
    sy = wy.sum()
    n = x.shape[0]
    m = y.shape[0]
    pts = np.empty(n + m)
    w = np.empty(n + m)
    for i in range(n):
        pts[i] = x[i]
        w[i] = wx[i] / sx
    for j in range(m):
        pts[n + j] = y[j]
        w[n + j] = -wy[j] / sy
    order = np.argsort(pts, kind="mergesort")
    total = 0.0
    gap = 0.0
    for r in range(n + m - 1):
        gap += w[order[r]]
        total += abs(gap) * (pts[order[r + 1]] - pts[order[r]])
    return total


if HAVE_NUMBA:
    log_softmax_rows = log_softmax_rows_nb
    log_softmax_pick = log_softmax_pick_nb
    pair_relu = pair_relu_nb
    relu_mask = relu_mask_nb
    outer_relu = outer_relu_nb
    pair_reduce = pair_reduce_nb
    pick_grad = pick_grad_nb
    contingency = contingency_nb
    plugin_mi = plugin_mi_nb
    mi_codes = _mi_codes_nb
    weighted_w1 = weighted_w1_nb
else:
    log_softmax_rows = log_softmax_rows_np
    log_softmax_pick = log_softmax_pick_np
    pair_relu = pair_relu_np
    relu_mask = relu_mask_np
    outer_relu = outer_relu_np
    pair_reduce = pair_reduce_np
    pick_grad = pick_grad_np
    contingency = contingency_np
    plugin_mi = plugin_mi_np
    mi_codes = _mi_codes_np
    weighted_w1 = weighted_w1_np
