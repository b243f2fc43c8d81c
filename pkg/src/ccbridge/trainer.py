"""Online training loop: simulate with the current control, regress on
frozen backward targets, step the optimizer.

Each iteration is deterministic given (config.seed, iteration): the
simulation consumes the Philox stream keyed by that pair, the parameter
snapshot is taken before simulation, and the same frozen evaluator serves
both the simulation and the target sweep. Optional evaluation runs on fresh
batches from a disjoint stream so it never perturbs training randomness.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .control import (ControlEvaluator, ControlNet, NonFiniteLossError,
                      OptimizerState, adam_update, loss_and_gradient)
from .oracles import kl_to_base, kl_to_truth
from .sde import SdeProblem, Seed, SimulationDiverged, TimeGrid, simulate_controlled
from .sensitivity import AuxiliaryDriftMode
from .targets import AlphaSchedule, backward_targets

_EVAL_STREAM = 1_000_000_007


@dataclass
class TrainingConfig:
    iterations: int
    batch: int
    lr: float
    grid: TimeGrid
    schedule: AlphaSchedule = field(default_factory=AlphaSchedule.next_step)
    mode: AuxiliaryDriftMode = field(default_factory=AuxiliaryDriftMode.zero)
    stl: bool = False
    clip: Optional[float] = None
    seed: int = 0
    eval_every: int = 0
    eval_batch: int = 256

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be nonnegative")
        if self.batch < 1 or self.eval_batch < 1:
            raise ValueError("batch sizes must be positive")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.eval_every < 0:
            raise ValueError("eval_every must be nonnegative")


@dataclass
class OracleSuite:
    """Evaluation wiring: a ground-truth control (or None) and the number of
    terminal steps dropped from the KL integrals."""

    truth: Optional[object] = None
    truncate_last: int = 5


@dataclass
class TrainingLog:
    records: list = field(default_factory=list)
    evals: list = field(default_factory=list)
    aborted: bool = False
    abort_reason: str = ""

    @property
    def final_loss(self) -> float:
        for rec in reversed(self.records):
            if math.isfinite(rec["loss"]):
                return rec["loss"]
        return math.nan


def training_step(problem: SdeProblem, config: TrainingConfig, net: ControlNet,
                  opt_state: OptimizerState, seed: Seed) -> float:
    """One iteration: snapshot, simulate, sweep targets, gradient step.

    The snapshot is taken once, before simulation; the simulated paths and
    the targets regressed against both come from the same frozen parameters.
    """
    frozen = ControlEvaluator(net, problem, min_remaining=config.grid.dt / 2,
                              frozen=True)
    frozen.warm(config.grid.times[:config.grid.steps - 1])
    traj = simulate_controlled(problem, config.grid, frozen, config.batch, seed)
    tb = backward_targets(problem, traj, frozen, config.schedule, config.mode,
                          stl=config.stl)
    # the frozen snapshot equals the live parameters until the update below,
    # so the target-side control values double as the loss-side ones
    loss, grad = loss_and_gradient(net, problem, traj, tb, clip=config.clip,
                                   reuse_target_values=True)
    adam_update(opt_state, grad)
    return loss


def _evaluate(problem: SdeProblem, config: TrainingConfig, net: ControlNet,
              oracles: OracleSuite, iteration: int) -> dict:
    learned = ControlEvaluator(net, problem, min_remaining=config.grid.dt / 2,
                               frozen=True)
    row = {"iter": iteration}
    traj = simulate_controlled(problem, config.grid, learned, config.eval_batch,
                               (config.seed, _EVAL_STREAM, iteration))
    kb, kb_se = kl_to_base(learned, problem, traj, oracles.truncate_last)
    row["kl_base"], row["kl_base_se"] = kb, kb_se
    if oracles.truth is not None:
        traj = simulate_controlled(problem, config.grid, oracles.truth,
                                   config.eval_batch,
                                   (config.seed, _EVAL_STREAM + 1, iteration))
        kt, kt_se = kl_to_truth(oracles.truth, learned, problem, traj,
                                oracles.truncate_last)
        row["kl_truth"], row["kl_truth_se"] = kt, kt_se
    return row


def train(problem: SdeProblem, config: TrainingConfig, net: ControlNet,
          oracles: Optional[OracleSuite] = None) -> TrainingLog:
    """Run config.iterations training steps; returns the complete log.

    Divergence policy: an iteration whose batch goes non-finite is skipped
    (no parameter update) and logged with a nan loss; three consecutive
    skips abort training, preserving the partial log.
    """
    log = TrainingLog()
    opt_state = OptimizerState(params=net.theta, lr=config.lr)
    consecutive_failures = 0
    for it in range(config.iterations):
        start = time.perf_counter()
        try:
            loss = training_step(problem, config, net, opt_state,
                                 (config.seed, it))
            consecutive_failures = 0
        except (SimulationDiverged, NonFiniteLossError) as err:
            loss = math.nan
            consecutive_failures += 1
            if consecutive_failures >= 3:
                log.records.append({"iter": it, "loss": loss,
                                    "wall_ms": 1e3 * (time.perf_counter() - start)})
                log.aborted = True
                log.abort_reason = f"3 consecutive diverged iterations; last: {err}"
                return log
        wall_ms = 1e3 * (time.perf_counter() - start)
        log.records.append({"iter": it, "loss": loss, "wall_ms": wall_ms})
        if (config.eval_every > 0 and oracles is not None
                and (it + 1) % config.eval_every == 0):
            log.evals.append(_evaluate(problem, config, net, oracles, it + 1))
    return log


def write_log_csv(log: TrainingLog, path) -> None:
    """One row per iteration: iter, loss, kl_truth, kl_base, wall_ms.

    KL columns are filled on evaluation iterations and blank elsewhere.
    """
    by_iter = {row["iter"]: row for row in log.evals}
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iter", "loss", "kl_truth", "kl_base", "wall_ms"])
        for rec in log.records:
            ev = by_iter.get(rec["iter"] + 1, {})
            writer.writerow([
                rec["iter"],
                f"{rec['loss']:.10g}" if math.isfinite(rec["loss"]) else "nan",
                f"{ev['kl_truth']:.10g}" if "kl_truth" in ev else "",
                f"{ev['kl_base']:.10g}" if "kl_base" in ev else "",
                f"{rec['wall_ms']:.3f}",
            ])
