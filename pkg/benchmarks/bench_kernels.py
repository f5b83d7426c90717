"""Compare the compiled and pure-Python loss kernels.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Reports per-call latency for every objective at two group shapes (a small
training group and an in-batch-sized one), plus end-to-end gradcheck and
desk-preset training times. Both backends must agree to 1e-12; the script
exits 1 if they do not.
"""

import argparse
import sys
import time
import timeit

import numpy as np

from mpdr import losses
from mpdr.data import SynthConfig, generate
from mpdr.encoder import init_params
from mpdr.losses import ObjectiveKind, ScoreGroup, evaluate
from mpdr.oracle import gradcheck
from mpdr.trainer import preset, train

SHAPES = ((4, 4), (4, 252))


def per_call(kind, group, number):
    rng = np.random.default_rng(0)
    timer = timeit.Timer(lambda: evaluate(group, kind, rng))
    return min(timer.repeat(repeat=3, number=number)) / number


def agree(kind, group):
    out = {}
    for name in losses.available_backends():
        losses.set_backend(name)
        res, _ = evaluate(group, kind, np.random.default_rng(1))
        out[name] = np.concatenate([[res.loss], res.grad_positive, res.grad_negative])
    values = list(out.values())
    return max(float(np.max(np.abs(v - values[0]))) for v in values)


def wall(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=3)
    parser.add_argument("--number", type=int, default=2000)
    args = parser.parse_args()

    backends = losses.available_backends()
    if "cython" not in backends:
        print("compiled kernels not built; only the python backend is available")
    original = losses.backend()
    rng = np.random.default_rng(0)
    groups = {shape: ScoreGroup(rng.normal(size=shape[0]), rng.normal(size=shape[1])) for shape in SHAPES}

    worst = 0.0
    print(f"{'objective':<18} {'shape':>8}  " + "  ".join(f"{b + ' us':>10}" for b in backends) + "  speedup")
    for kind in ObjectiveKind:
        for shape, group in groups.items():
            worst = max(worst, agree(kind, group))
            times = []
            for name in backends:
                losses.set_backend(name)
                times.append(per_call(kind, group, args.number) * 1e6)
            speed = times[-1] / times[0] if len(times) > 1 else 1.0
            label = f"{shape[0]}x{shape[1]}"
            print(f"{kind.value:<18} {label:>8}  " + "  ".join(f"{t:10.2f}" for t in times) + f"  {speed:6.1f}x")

    corpus = generate(SynthConfig())
    init = init_params(corpus.input_dim, 16, 0)
    config = preset("desk", objective=ObjectiveKind.LSE_PAIR)
    print()
    print(f"{'end to end':<34}" + "  ".join(f"{b + ' s':>10}" for b in backends))
    for label, fn in (("gradcheck (115200 groups)", lambda: gradcheck()),
                      ("train LSEPair, desk preset", lambda: train(corpus, init, config))):
        times = []
        for name in backends:
            losses.set_backend(name)
            times.append(wall(fn, args.repeat))
        print(f"{label:<34}" + "  ".join(f"{t:10.3f}" for t in times))

    losses.set_backend(original)
    print(f"\nmax |cython - python| over loss and gradients: {worst:.2e}")
    return 0 if worst <= 1e-12 else 1


if __name__ == "__main__":
    sys.exit(main())
