"""Convergence of EM on the single-region (linear) Gripen-like system.

With one region the regime sampling is trivial, so this isolates the rate of
the EM fixed-point iteration itself.  For each seed the script prints the
relative error of every reported parameter at a few iteration counts and,
optionally, the numerical maximum-likelihood estimate for comparison.

    python3 scripts/em_convergence.py --seeds 0 1 2 --iterations 400
"""
import argparse
import dataclasses

import numpy as np
from scipy import optimize

from pwass import cli
from pwass.em import EmConfig, run_em
from pwass.model import CONTINUOUS, PwaFunction, Theta, theta_of
from pwass.simulator import gripen_model, gripen_sim_config, perturb_theta, simulate, theta_offset
from pwass.smoother import regime_loglik


def linear_gripen(noise_reading=None):
    model, _ = gripen_model(noise_reading)
    ends = model.boundaries[[0, -1]]
    knots = model.pwa.knot_values()[[0, -1]]
    return dataclasses.replace(model, pwa=PwaFunction.from_knots(knots, ends))


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--iterations", type=int, default=100)
    p.add_argument("--checkpoints", type=int, nargs="+", default=[0, 10, 30, 100, 400])
    p.add_argument("--noise-reading", choices=["std", "variance"])
    p.add_argument("--mle", action="store_true", help="also maximize the likelihood directly")
    args = p.parse_args(argv)

    model = linear_gripen(args.noise_reading)
    truth = theta_of(model)
    names = cli.summary_params(model, CONTINUOUS)
    keep = [i for i, n in enumerate(names) if not n.startswith("Phi")]
    true = cli.derived_values(model, truth.pack(), CONTINUOUS)
    print("seed iter " + " ".join(f"{names[i]:>7}" for i in keep) + "   loglik")
    for seed in args.seeds:
        rng = np.random.default_rng(seed)
        traj = simulate(model, truth, gripen_sim_config(), rng)
        y, u = traj.measurements, traj.inputs
        regimes = np.zeros(len(y) - 1, dtype=int)
        theta0 = perturb_theta(truth, 0.4, rng, theta_offset(model))
        trace = run_em(model, theta0, y, u, EmConfig(num_trajectories=1,
                                                     num_iterations=args.iterations),
                       np.random.default_rng(seed + 1000))

        def loglik(vec):
            return float(regime_loglik(model, Theta.unpack(vec, 1, 2), regimes, y, u))

        for k in [c for c in args.checkpoints if c <= args.iterations]:
            est = cli.derived_values(model, trace.thetas[k], CONTINUOUS)
            rel = np.abs(est - true) / np.abs(true)
            print(f"{seed:4d} {k:4d} " + " ".join(f"{rel[i]:7.3f}" for i in keep)
                  + f" {loglik(trace.thetas[k]):9.2f}")
        if args.mle:
            res = optimize.minimize(lambda v: -loglik(v), truth.pack(), method="BFGS")
            est = cli.derived_values(model, res.x, CONTINUOUS)
            rel = np.abs(est - true) / np.abs(true)
            print(f"{seed:4d}  MLE " + " ".join(f"{rel[i]:7.3f}" for i in keep)
                  + f" {-res.fun:9.2f}")
        print(f"{seed:4d} true " + " " * (8 * len(keep)) + f"{loglik(truth.pack()):9.2f}")


if __name__ == "__main__":
    main()
