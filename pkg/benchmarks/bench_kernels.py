"""Compiled vs numpy kernel timings.

    python benchmarks/bench_kernels.py [--repeat 5]

Prints one row per kernel: best-of-N wall time for each available backend
and the speedup of the compiled one.  Workloads mirror real call sites:
rejection sampling during forging, batched oracle scoring of rollouts, and
the Euler-Maruyama / log-density work inside a GRPO step.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from spatial_lab._backend import available
from spatial_lab.forge import GrammarConfig, generate_prompt
from spatial_lab.numerics import RngStream


def workloads():
    s = RngStream(0, 1)
    prompt = generate_prompt(RngStream(0, 2), GrammarConfig(atoms_min=4, atoms_max=4))
    atoms = prompt.atom_array()
    chunk = s.uniform((500, 4, 2))
    rollouts = s.uniform((32 * 24, 4, 2))
    n, d = 32 * 12 * 6, 8
    x, v, eps, mean = (s.normal((n, d)) for _ in range(4))
    t = s.uniform(n, 0.01, 0.99)
    dt = np.full(n, -1.0 / 6)
    sigma = s.uniform(n, 0.1, 1.0)
    std = sigma * np.sqrt(1.0 / 6)
    return {
        "first_satisfying (500 layouts, 4 atoms)": lambda k: k.first_satisfying(chunk, atoms, 0.02, 0.2, 0.5),
        "count_satisfied (768 layouts, 4 atoms)": lambda k: k.count_satisfied(rollouts, atoms, 0.02, 0.2, 0.5),
        "em_step (2304 x 8)": lambda k: k.em_step(x, v, t, dt, sigma, eps),
        "gauss_logpdf (2304 x 8)": lambda k: k.gauss_logpdf(x, mean, std),
    }


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--number", type=int, default=200)
    args = ap.parse_args()
    backends = available()
    names = sorted(backends)
    print(f"{'kernel':42s}" + "".join(f"{n:>14s}" for n in names) + ("   speedup" if len(names) > 1 else ""))
    for label, fn in workloads().items():
        times = {}
        for name in names:
            k = backends[name]
            times[name] = min(timeit.repeat(lambda: fn(k), number=args.number, repeat=args.repeat)) / args.number
        row = f"{label:42s}" + "".join(f"{times[n] * 1e6:11.1f} us" for n in names)
        if "compiled" in times:
            row += f"   {times['python'] / times['compiled']:6.1f}x"
        print(row)


if __name__ == "__main__":
    main()
