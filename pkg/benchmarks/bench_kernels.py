"""Compare the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py            # kernels plus end-to-end epochs
    python3 benchmarks/bench_kernels.py --kernels  # kernels only

Kernel timings call the ``_nb`` and ``_np`` variants side by side.  The
end-to-end rows run one training epoch in a fresh interpreter per path, with
GCFN_DISABLE_NUMBA selecting the fallback.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from gcfn import _accel
from gcfn import kernels as K

BATCH, CATS, HIDDEN, BINS = 500, 50, 50, 50


def _cases(rng):
    rows = BATCH * CATS
    logits = rng.normal(size=(rows, BINS))
    idx = rng.integers(0, BINS, size=rows)
    _, lse = K.log_softmax_pick_np(logits, idx)
    row_part = rng.normal(size=(BATCH, HIDDEN))
    cat_part = rng.normal(size=(CATS, HIDDEN))
    act = K.pair_relu_np(row_part, cat_part)
    d = rng.normal(size=act.shape)
    x = rng.normal(size=BATCH)
    a = rng.integers(0, CATS, size=5000)
    b = rng.integers(0, 10, size=5000)
    e1, e2 = rng.normal(size=5000), rng.normal(size=5000)
    w1, w2 = rng.random(5000), np.ones(5000)
    return {
        "log_softmax_rows": ((logits,), K.log_softmax_rows_np, K.log_softmax_rows_nb),
        "log_softmax_pick": ((logits, idx), K.log_softmax_pick_np, K.log_softmax_pick_nb),
        "pick_grad": ((logits, lse, idx, np.ones(rows)), K.pick_grad_np, K.pick_grad_nb),
        "pair_relu": ((row_part, cat_part), K.pair_relu_np, K.pair_relu_nb),
        "relu_mask": ((d, act), lambda d, a: K.relu_mask_np(d.copy(), a), lambda d, a: K.relu_mask_nb(d.copy(), a)),
        "pair_reduce": ((d, x, CATS), K.pair_reduce_np, K.pair_reduce_nb),
        "mi_codes": ((a, b, CATS, 10), K._mi_codes_np, K._mi_codes_nb),
        "weighted_w1": ((e1, w1, e2, w2), K.weighted_w1_np, K.weighted_w1_nb),
    }


def _best(fn, args, repeat=5):
    fn(*args)  # warm up (and compile)
    t = timeit.Timer(lambda: fn(*args))
    number, _ = t.autorange()
    return min(t.repeat(repeat, number)) / number


def bench_kernels():
    if not _accel.numba_enabled():
        print("numba is not active; kernel comparison skipped")
        return
    cases = _cases(np.random.default_rng(0))
    print(f"{'kernel':<18}{'numpy ms':>11}{'numba ms':>11}{'speed-up':>10}")
    for name, (args, f_np, f_nb) in cases.items():
        t_np, t_nb = _best(f_np, args), _best(f_nb, args)
        print(f"{name:<18}{t_np * 1e3:>11.3f}{t_nb * 1e3:>11.3f}{t_np / t_nb:>9.1f}x")


EPOCH_SNIPPET = """
import time
import numpy as np
from gcfn import outcome, vde
from gcfn.simgen import ScenarioSpec, generate
d = generate(ScenarioSpec("semi", n=5000, seed=0))
out = []
for structure in ("additive", "categorical"):
    cfg = vde.VdeConfig(decoder_structure=structure, epochs=1, semi_supervised=structure == "categorical")
    vde.train_vde(d.subset(np.arange(500)), cfg)  # compile
    t0 = time.perf_counter()
    vde.train_vde(d, cfg)
    out.append(time.perf_counter() - t0)
q = np.full((5000, 50), 1 / 50)
outcome.fit_outcome_q(d.t[:500], d.y[:500], q[:500], epochs=1)
t0 = time.perf_counter()
outcome.fit_outcome_q(d.t, d.y, q, epochs=1)
out.append(time.perf_counter() - t0)
print(" ".join(f"{x:.4f}" for x in out))
"""


def bench_epochs():
    labels = ("VDE epoch, additive", "VDE epoch, categorical", "outcome epoch")
    times = {}
    for path, flag in (("numpy", "1"), ("numba", "0")):
        env = dict(os.environ, GCFN_DISABLE_NUMBA=flag)
        r = subprocess.run([sys.executable, "-c", EPOCH_SNIPPET], env=env, capture_output=True, text=True, check=True)
        times[path] = [float(x) for x in r.stdout.split()]
    print(f"\n{'n = 5000, batch 500':<24}{'numpy s':>10}{'numba s':>10}{'speed-up':>10}")
    for i, label in enumerate(labels):
        t_np, t_nb = times["numpy"][i], times["numba"][i]
        print(f"{label:<24}{t_np:>10.3f}{t_nb:>10.3f}{t_np / t_nb:>9.1f}x")


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--kernels", action="store_true", help="skip the end-to-end epochs")
    args = p.parse_args()
    bench_kernels()
    if not args.kernels:
        bench_epochs()


if __name__ == "__main__":
    main()
