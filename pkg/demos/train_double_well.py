"""Training a bridge control through a potential barrier.

The double-well process started in the right well almost never crosses to
the left one on its own; conditioning on arrival makes the crossing certain
and training teaches the net the cheapest way through. A backward PDE solve
provides the exact answer to compare against. Scaled down from the
benchmark settings (100 time steps, 300 iterations) so it finishes in
about a minute.
"""

import numpy as np

from ccbridge import (AlphaSchedule, AuxiliaryDriftMode, ControlEvaluator,
                      ControlNet, OracleSuite, TimeGrid, TrainingConfig,
                      kl_to_truth, preset, simulate_controlled,
                      solve_backward_kolmogorov_1d, train)


def main():
    problem = preset("double_well").problem
    grid = TimeGrid(steps=100, horizon=problem.horizon)

    print("solving the backward equation for the reference control ...")
    table = solve_backward_kolmogorov_1d(
        problem, float(problem.xT[0]), np.linspace(-3.0, 3.0, 961), 4000)
    truth = table.as_control()

    cfg = TrainingConfig(
        iterations=1200, batch=32, lr=1e-3, grid=grid,
        schedule=AlphaSchedule.average(),
        mode=AuxiliaryDriftMode.minus_base(),   # tames the well Jacobians
        seed=0, eval_every=200, eval_batch=256)
    net = ControlNet.initialize(problem.dim, problem.horizon, (0, 11))

    ref_traj = simulate_controlled(problem, grid, truth, 512, (9, 9))
    chord = ControlEvaluator(net, problem, min_remaining=grid.dt / 2,
                             frozen=True)
    kl0, se0 = kl_to_truth(truth, chord, problem, ref_traj)
    print(f"fresh net (straight chord): KL(exact || learned) = "
          f"{kl0:.3f} +- {se0:.3f}")

    print(f"training {cfg.iterations} iterations ...")
    log = train(problem, cfg, net, OracleSuite(truth=truth))

    print("iteration   loss        KL(exact || learned)")
    for ev in log.evals:
        rec = log.records[ev["iter"] - 1]
        print(f"{ev['iter']:9d}   {rec['loss']:<10.4g}  "
              f"{ev['kl_truth']:.4f} +- {ev['kl_truth_se']:.4f}")

    learned = ControlEvaluator(net, problem, min_remaining=grid.dt / 2,
                               frozen=True)
    kl, se = kl_to_truth(truth, learned, problem, ref_traj)
    print(f"final KL(exact || learned) on fresh trajectories: "
          f"{kl:.4f} +- {se:.4f}")
    crossings = simulate_controlled(problem, grid, learned, 8, (3, 1))
    mid = crossings.states[:, grid.steps // 2, 0]
    print(f"state at t=0.5 for 8 sample crossings: {mid.round(2)}")


if __name__ == "__main__":
    main()
