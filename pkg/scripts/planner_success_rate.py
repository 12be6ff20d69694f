#!/usr/bin/env python3
"""Measure planner completeness on randomly generated reachable targets.

For each seed a random step profile (up to --max-segments segments) is
scrambled by up to --max-moves random moves; the planner must then recover a
move sequence with L2 error below --eps.  Prints the success rate, move-count
statistics and total runtime.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from shearflow.planning import plan, random_reachable_target
from shearflow.profiles import StepProfile, energy, momentum


def random_instance(seed: int, max_segments: int, max_moves: int):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(2, max_segments + 1))
    interior = np.sort(rng.uniform(0.05, 0.95, size=k - 1))
    # keep breakpoints separated so masses stay well conditioned
    interior = np.linspace(0.05, 0.95, k - 1) * 0.5 + interior * 0.5 if k > 1 else interior
    bp = tuple([0.0] + list(interior) + [1.0])
    vals = tuple(rng.normal(0.0, 1.5, size=k))
    source = StepProfile(bp, vals)
    n_moves = int(rng.integers(0, max_moves + 1))
    target, _ = random_reachable_target(source, n_moves, seed=seed + 10_000)
    return source, target, n_moves


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--instances", type=int, default=200)
    ap.add_argument("--max-segments", type=int, default=16)
    ap.add_argument("--max-moves", type=int, default=12)
    ap.add_argument("--eps", type=float, default=1e-3)
    ap.add_argument("--seed0", type=int, default=0)
    args = ap.parse_args()

    successes = 0
    move_counts = []
    worst = []
    t0 = time.perf_counter()
    for i in range(args.instances):
        seed = args.seed0 + i
        source, target, n_moves = random_instance(seed, args.max_segments, args.max_moves)
        result = plan(source, target, eps=args.eps, seed=seed)
        if result.converged:
            successes += 1
            move_counts.append(len(result.moves))
        else:
            worst.append((seed, n_moves, result.achieved_error, len(result.moves)))
        # conservation sanity
        assert abs(momentum(source) - momentum(target)) < 1e-8
        assert abs(energy(source) - energy(target)) < 1e-8
    elapsed = time.perf_counter() - t0

    print(f"instances      : {args.instances}")
    print(f"successes      : {successes} ({100.0 * successes / args.instances:.1f}%)")
    if move_counts:
        print(
            f"moves (median/p90/max): {int(np.median(move_counts))}"
            f"/{int(np.percentile(move_counts, 90))}/{max(move_counts)}"
        )
    print(f"runtime        : {elapsed:.2f} s")
    for seed, n_moves, err, used in worst[:10]:
        print(f"  FAIL seed={seed} gen_moves={n_moves} err={err:.3e} used={used}")


if __name__ == "__main__":
    main()
