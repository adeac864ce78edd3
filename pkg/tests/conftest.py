import numpy as np
import pytest

from gcfn import nn


def numeric_grad(fn, tree, h=1e-6):
    """Central differences of the scalar ``fn()`` with respect to every leaf of ``tree``.

    Leaves are perturbed in place and restored.
    """
    out = []
    for leaf in nn.tree_leaves(tree):
        g = np.zeros_like(leaf)
        flat = leaf.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = fn()
            flat[i] = old - h
            down = fn()
            flat[i] = old
            gflat[i] = (up - down) / (2 * h)
        out.append(g)
    return out


def max_rel_error(analytic, numeric, floor=1e-8):
    worst = 0.0
    for a, b in zip(analytic, numeric):
        err = np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
        # entries where both sides are below the floor count as exact
        err = np.where(np.maximum(np.abs(a), np.abs(b)) < floor, 0.0, err)
        worst = max(worst, float(err.max(initial=0.0)))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
