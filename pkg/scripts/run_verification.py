#!/usr/bin/env python3
"""Run the residual and Monte Carlo audits on the four shipped presets.

For every preset: drift-match residual statistics, the martingale audit of
the optimal strategy plus perturbations, and the Laplace-transform check of
the underlying forward model.  Path counts are deliberately modest by
default; pass --paths 100000 --steps 500 to reproduce the acceptance-scale
numbers.
"""

import argparse
import time

import numpy as np

from affinebsde.affine_model import solve_transform
from affinebsde.bsde import classify_ratio, drift_match_stats, orient_ratio
from affinebsde.portfolio import SHIPPED_PRESETS
from affinebsde.simulator import bns_functionals, heston_functionals, mean_stderr, CorrelationSpec


def transform_check(preset, n_paths, n_steps, seed, threads):
    params = preset.params
    u = 0.6 * np.eye(params.d)
    exact = solve_transform(params, u, preset.horizon, steps=2000).laplace(preset.model.r0)
    if params.m.n:
        fn = bns_functionals(preset.model.spec, preset.model.r0, np.zeros(params.d),
                             preset.horizon, n_steps, np.zeros((1, params.d)),
                             n_paths, seed, threads=threads)
    else:
        fn = heston_functionals(params, preset.model.r0, CorrelationSpec(np.zeros(params.d)),
                                np.zeros(params.d), preset.horizon, n_steps,
                                np.zeros((1, params.d)), n_paths, seed, threads=threads)
    vals = np.exp(-np.einsum("ij,bij->b", u, fn.r_terminal))
    m, se = mean_stderr(vals)
    return exact, float(m), float(se)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--paths", type=int, default=30000)
    ap.add_argument("--steps", type=int, default=300)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--riccati-steps", type=int, default=2000)
    args = ap.parse_args()

    for name, factory in SHIPPED_PRESETS.items():
        t0 = time.perf_counter()
        preset = factory(steps=args.riccati_steps)
        print(f"\n== {name} (gamma = {preset.gamma}, T = {preset.horizon}) ==")
        print(f"   V(1) = {preset.solve.value_at(1.0):.10g}"
              + (f", swap price = {preset.solve.price:.10g}" if preset.solve.price is not None else ""))

        stats = drift_match_stats(preset.bsde_eval(), n_samples=50, seed=args.seed)
        print(f"   drift-match: max residual {stats['max_abs_residual']:.3e} "
              f"(relative {stats['max_rel_residual']:.3e})")

        strategies = [preset.opt_strategy_grid(args.steps)] + preset.perturbed_strategies(args.steps)[:4]
        means, ses, l0 = preset.audit_strategies(strategies, n_paths=args.paths,
                                                 seed=args.seed, n_steps=args.steps,
                                                 threads=args.threads)
        for i in range(len(strategies)):
            ratio, se = orient_ratio(float(means[i]), float(ses[i]), l0)
            tag = "optimal " if i == 0 else f"perturb{i}"
            print(f"   {tag}: ratio {ratio:.5f} +- {se:.5f}  {classify_ratio(ratio, se)}")

        exact, mc, se = transform_check(preset, args.paths, args.steps, args.seed, args.threads)
        print(f"   transform: exact {exact:.6f}  mc {mc:.6f} +- {se:.6f} "
              f"({'PASS' if abs(mc - exact) <= 3 * se else 'FAIL'})")
        print(f"   elapsed {time.perf_counter() - t0:.1f} s")


if __name__ == "__main__":
    main()
