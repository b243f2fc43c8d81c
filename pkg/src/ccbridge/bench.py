"""Experiment presets, config files, results emission, and the CLI.

Presets carry the exact coefficients of the benchmark problems (linear
mean-reverting, square-root, double-well, two-gene switch, Mueller-Brown)
with hand-derived Jacobians, plus per-problem training defaults. Configs
are TOML with [problem], [training], [schedule], [oracle] sections; any
resolved config serializes back to TOML and reparses identically.
"""

from __future__ import annotations

import argparse
import json
import math
import subprocess
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:          # python < 3.11
    import tomli as tomllib

from .control import ControlEvaluator, ControlNet, save_checkpoint, load_checkpoint
from .oracles import (DensityTable1D, cir_ground_truth, kl_to_base, kl_to_truth,
                      max_energy, ou_ground_truth, solve_backward_kolmogorov_1d)
from .sde import (EllipticityError, SdeProblem, SimulationDiverged, TimeGrid,
                  check_problem, save_trajectories, simulate_controlled)
from .sensitivity import AuxiliaryDriftMode
from .targets import AlphaSchedule, ScheduleDegenerateError
from .trainer import OracleSuite, TrainingConfig, TrainingLog, train, write_log_csv

# ---------------------------------------------------------------------------
# problem definitions


def _const_diffusion(dim: int, scale: float):
    base = scale * np.eye(dim)

    def diffusion(t, x):
        return np.broadcast_to(base, (x.shape[0], dim, dim))

    return diffusion


def _zero_diffusion_jacobian(dim: int):
    def jac(t, x):
        return np.zeros((x.shape[0], dim, dim, dim))

    return jac


def _ou_problem() -> SdeProblem:
    alpha, sig = 2.0, 0.1

    def potential(x):
        return 0.5 * alpha * np.einsum("bi,bi->b", x, x)

    return SdeProblem(
        dim=2, horizon=1.0, x0=[1.0, 0.0], xT=[0.0, 1.0],
        drift=lambda t, x: -alpha * x,
        diffusion=_const_diffusion(2, sig),
        drift_jacobian=lambda t, x: np.broadcast_to(-alpha * np.eye(2),
                                                    (x.shape[0], 2, 2)),
        diffusion_jacobian=_zero_diffusion_jacobian(2),
        conservative_drift=True, potential=potential)


def _cir_problem() -> SdeProblem:
    a, b, eps = 1.0, 1.0, 1.0

    def diffusion(t, x):
        return (eps * np.sqrt(np.clip(x, 0.0, None)))[:, :, None]

    def diffusion_jacobian(t, x):
        root = np.sqrt(np.clip(x, 0.0, None))
        slope = np.where(x > 0, eps / (2.0 * np.maximum(root, 1e-300)), 0.0)
        return slope[:, :, None, None]

    def potential(x):
        return a * (0.5 * x[:, 0] ** 2 - b * x[:, 0])

    return SdeProblem(
        dim=1, horizon=1.0, x0=[2.0], xT=[2.0],
        drift=lambda t, x: a * (b - x),
        drift_jacobian=lambda t, x: np.full((x.shape[0], 1, 1), -a),
        diffusion=diffusion, diffusion_jacobian=diffusion_jacobian,
        conservative_drift=True, potential=potential)


def _double_well_problem() -> SdeProblem:
    v = 3.0

    def potential(x):
        return v * (x[:, 0] ** 2 - 1.0) ** 2

    return SdeProblem(
        dim=1, horizon=1.0, x0=[1.0], xT=[-1.0],
        drift=lambda t, x: -4.0 * v * x * (x ** 2 - 1.0),
        drift_jacobian=lambda t, x: (-4.0 * v * (3.0 * x ** 2 - 1.0))[:, :, None],
        diffusion=_const_diffusion(1, 1.0),
        diffusion_jacobian=_zero_diffusion_jacobian(1),
        conservative_drift=True, potential=potential)


_CELL_ENDPOINTS = {
    "normal": ([0.1, -0.1], [2.0, -0.1], 4.0),
    "rare": ([0.1, -0.1], [1.0, -0.1], 4.0),
    "multimodal": ([-1.0, -1.0], [-1.0, -1.0], 5.0),
}


def _cell_problem(setting: str) -> SdeProblem:
    c = 2.0 ** -4
    x0, xT, horizon = _CELL_ENDPOINTS[setting]

    def drift(t, x):
        x4 = x ** 4
        act = x4 / (c + x4)
        inh = c / (c + x4)
        return act + inh[:, ::-1] - x

    def drift_jacobian(t, x):
        x3 = x ** 3
        den = (c + x ** 4) ** 2
        dact = 4.0 * c * x3 / den
        dinh = -4.0 * c * x3 / den
        out = np.zeros((x.shape[0], 2, 2))
        out[:, 0, 0] = dact[:, 0] - 1.0
        out[:, 1, 1] = dact[:, 1] - 1.0
        out[:, 0, 1] = dinh[:, 1]
        out[:, 1, 0] = dinh[:, 0]
        return out

    return SdeProblem(
        dim=2, horizon=horizon, x0=x0, xT=xT,
        drift=drift, drift_jacobian=drift_jacobian,
        diffusion=_const_diffusion(2, 0.1),
        diffusion_jacobian=_zero_diffusion_jacobian(2))


_MB_A = np.array([-200.0, -100.0, -170.0, 15.0])
_MB_a = np.array([-1.0, -1.0, -6.5, 0.7])
_MB_b = np.array([0.0, 0.0, 11.0, 0.6])
_MB_c = np.array([-10.0, -10.0, -6.5, 0.7])
_MB_X = np.array([1.0, 0.0, -0.5, -1.0])
_MB_Y = np.array([0.0, 0.5, 1.5, 1.0])


def _mb_pieces(x: np.ndarray):
    dx = x[:, 0:1] - _MB_X
    dy = x[:, 1:2] - _MB_Y
    e = _MB_A * np.exp(_MB_a * dx ** 2 + _MB_b * dx * dy + _MB_c * dy ** 2)
    gx = 2.0 * _MB_a * dx + _MB_b * dy
    gy = _MB_b * dx + 2.0 * _MB_c * dy
    return e, gx, gy


def mueller_brown_potential(x: np.ndarray) -> np.ndarray:
    e, _, _ = _mb_pieces(np.atleast_2d(x))
    return e.sum(axis=1)


def _mueller_brown_problem() -> SdeProblem:
    def drift(t, x):
        e, gx, gy = _mb_pieces(x)
        return -np.stack([(e * gx).sum(axis=1), (e * gy).sum(axis=1)], axis=1)

    def drift_jacobian(t, x):
        e, gx, gy = _mb_pieces(x)
        out = np.empty((x.shape[0], 2, 2))
        out[:, 0, 0] = -(e * (gx * gx + 2.0 * _MB_a)).sum(axis=1)
        out[:, 0, 1] = -(e * (gx * gy + _MB_b)).sum(axis=1)
        out[:, 1, 0] = out[:, 0, 1]
        out[:, 1, 1] = -(e * (gy * gy + 2.0 * _MB_c)).sum(axis=1)
        return out

    return SdeProblem(
        dim=2, horizon=0.05, x0=[-0.559, 1.442], xT=[0.624, 0.028],
        drift=drift, drift_jacobian=drift_jacobian,
        diffusion=_const_diffusion(2, 3.0),
        diffusion_jacobian=_zero_diffusion_jacobian(2),
        conservative_drift=True, potential=mueller_brown_potential)


# ---------------------------------------------------------------------------
# presets

@dataclass
class ExperimentPreset:
    name: str
    problem: SdeProblem
    config: TrainingConfig
    form: str = "gradient"
    include_base_drift: bool = False
    truth_factory: Optional[Callable[[dict], object]] = None


def _dw_truth(oracle_cfg: dict):
    span = float(oracle_cfg.get("pde_span", 3.0))
    points = int(oracle_cfg.get("pde_space_points", 961))
    steps = int(oracle_cfg.get("pde_time_steps", 4000))
    table = solve_backward_kolmogorov_1d(
        _double_well_problem(), -1.0, np.linspace(-span, span, points), steps)
    return table.as_control()


def _preset_builders():
    def training(iterations, lr, steps, horizon, **kw):
        # reference runs mix with the averaged weighting unless overridden
        kw.setdefault("schedule", AlphaSchedule.average())
        return TrainingConfig(iterations=iterations, batch=64, lr=lr,
                              grid=TimeGrid(steps=steps, horizon=horizon),
                              eval_every=100, eval_batch=1000, **kw)

    builders = {
        "ou": lambda: ExperimentPreset(
            "ou", _ou_problem(), training(5000, 1e-4, 500, 1.0),
            truth_factory=lambda cfg: ou_ground_truth(2.0, 0.1, [0.0, 1.0])),
        "cir": lambda: ExperimentPreset(
            "cir", _cir_problem(), training(2000, 1e-4, 500, 1.0),
            truth_factory=lambda cfg: cir_ground_truth(1.0, 1.0, 1.0, 2.0)),
        "double_well": lambda: ExperimentPreset(
            "double_well", _double_well_problem(), training(4000, 1e-3, 500, 1.0),
            truth_factory=_dw_truth),
        "mueller_brown": lambda: ExperimentPreset(
            "mueller_brown", _mueller_brown_problem(),
            training(4000, 3e-4, 1000, 0.05,
                     mode=AuxiliaryDriftMode.minus_base(), clip=1e4)),
    }
    for setting in _CELL_ENDPOINTS:
        name = "cell" if setting == "normal" else f"cell_{setting}"
        horizon = _CELL_ENDPOINTS[setting][2]
        builders[name] = lambda s=setting, n=name, h=horizon: ExperimentPreset(
            n, _cell_problem(s), training(1000, 1e-3, 500, h),
            include_base_drift=True)
    return builders


_PRESETS = _preset_builders()


def preset(name: str) -> ExperimentPreset:
    """Named experiment with its coefficients and training defaults."""
    try:
        builder = _PRESETS[name]
    except KeyError:
        known = ", ".join(sorted(_PRESETS))
        raise KeyError(f"unknown preset {name!r}; known: {known}") from None
    return builder()


# ---------------------------------------------------------------------------
# config files

_SCHEDULE_NAMES = {
    "next": "next_step", "next_step": "next_step",
    "avg": "average", "average": "average",
    "end": "endpoint", "endpoint": "endpoint",
    "custom": "custom",
}
_MODE_NAMES = {"zero": "zero", "minus-b": "minus_base", "minus_base": "minus_base"}


class ConfigError(ValueError):
    pass


@dataclass
class ResolvedConfig:
    preset_name: str
    runs: int
    iterations: int
    batch: int
    lr: float
    steps: int
    seed: int
    eval_every: int
    eval_batch: int
    stl: bool
    clip: Optional[float]
    form: str
    include_base_drift: bool
    schedule_kind: str
    schedule_alphas: Optional[list]
    mode: str
    oracle_enabled: bool
    truncate_last: int
    oracle_extra: dict = field(default_factory=dict)

    def to_sections(self) -> dict:
        training = {
            "runs": self.runs, "iterations": self.iterations, "batch": self.batch,
            "lr": self.lr, "steps": self.steps, "seed": self.seed,
            "eval_every": self.eval_every, "eval_batch": self.eval_batch,
            "stl": self.stl, "form": self.form,
            "include_base_drift": self.include_base_drift, "mode": self.mode,
        }
        if self.clip is not None:
            training["clip"] = self.clip
        schedule = {"kind": self.schedule_kind}
        if self.schedule_alphas is not None:
            schedule["alphas"] = self.schedule_alphas
        oracle = {"enabled": self.oracle_enabled,
                  "truncate_last": self.truncate_last}
        oracle.update(self.oracle_extra)
        return {"problem": {"preset": self.preset_name}, "training": training,
                "schedule": schedule, "oracle": oracle}

    def schedule(self) -> AlphaSchedule:
        if self.schedule_kind == "custom":
            if not self.schedule_alphas:
                raise ConfigError("custom schedule requires alphas")
            return AlphaSchedule.custom(self.schedule_alphas)
        return AlphaSchedule(name=self.schedule_kind)

    def drift_mode(self) -> AuxiliaryDriftMode:
        return (AuxiliaryDriftMode.zero() if self.mode == "zero"
                else AuxiliaryDriftMode.minus_base())

    def training_config(self, horizon: float, seed: int) -> TrainingConfig:
        return TrainingConfig(
            iterations=self.iterations, batch=self.batch, lr=self.lr,
            grid=TimeGrid(steps=self.steps, horizon=horizon),
            schedule=self.schedule(), mode=self.drift_mode(), stl=self.stl,
            clip=self.clip, seed=seed, eval_every=self.eval_every,
            eval_batch=self.eval_batch)


def resolve_config(sections: dict) -> ResolvedConfig:
    """Fill a parsed TOML mapping with preset defaults; validate names."""
    problem = sections.get("problem", {})
    name = problem.get("preset")
    if not name:
        raise ConfigError("[problem] must name a preset")
    try:
        base = preset(name)
    except KeyError as err:
        raise ConfigError(str(err)) from None

    tr = dict(sections.get("training", {}))
    sc = dict(sections.get("schedule", {}))
    oc = dict(sections.get("oracle", {}))

    kind = sc.pop("kind", base.config.schedule.name)
    if kind not in _SCHEDULE_NAMES:
        raise ConfigError(f"unknown schedule kind {kind!r}")
    mode = tr.pop("mode", base.config.mode.name)
    if mode not in _MODE_NAMES:
        raise ConfigError(f"unknown auxiliary drift mode {mode!r}")
    form = tr.pop("form", base.form)
    if form not in ("gradient", "direct"):
        raise ConfigError(f"unknown net form {form!r}")

    alphas = sc.pop("alphas", None)
    if sc:
        raise ConfigError(f"unknown [schedule] keys: {sorted(sc)}")

    cfg = ResolvedConfig(
        preset_name=name,
        runs=int(tr.pop("runs", 1)),
        iterations=int(tr.pop("iterations", base.config.iterations)),
        batch=int(tr.pop("batch", base.config.batch)),
        lr=float(tr.pop("lr", base.config.lr)),
        steps=int(tr.pop("steps", base.config.grid.steps)),
        seed=int(tr.pop("seed", 0)),
        eval_every=int(tr.pop("eval_every", base.config.eval_every)),
        eval_batch=int(tr.pop("eval_batch", base.config.eval_batch)),
        stl=bool(tr.pop("stl", base.config.stl)),
        clip=(float(tr["clip"]) if "clip" in tr else base.config.clip),
        form=form,
        include_base_drift=bool(tr.pop("include_base_drift",
                                       base.include_base_drift)),
        schedule_kind=_SCHEDULE_NAMES[kind],
        schedule_alphas=(list(map(float, alphas)) if alphas is not None else None),
        mode=_MODE_NAMES[mode],
        oracle_enabled=bool(oc.pop("enabled", True)),
        truncate_last=int(oc.pop("truncate_last", 5)),
        oracle_extra={k: oc[k] for k in sorted(oc)},
    )
    tr.pop("clip", None)
    if tr:
        raise ConfigError(f"unknown [training] keys: {sorted(tr)}")
    if cfg.runs < 1:
        raise ConfigError("runs must be positive")
    return cfg


def _toml_scalar(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_scalar(x) for x in v) + "]"
    raise TypeError(f"cannot serialize {type(v)}")


def serialize_config(cfg: ResolvedConfig) -> str:
    lines = []
    for section, body in cfg.to_sections().items():
        lines.append(f"[{section}]")
        for key, value in body.items():
            lines.append(f"{key} = {_toml_scalar(value)}")
        lines.append("")
    return "\n".join(lines)


def load_config(path) -> ResolvedConfig:
    try:
        with open(path, "rb") as fh:
            sections = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as err:
        raise ConfigError(f"config parse error in {path}: {err}") from None
    return resolve_config(sections)


# ---------------------------------------------------------------------------
# experiment driver

@dataclass
class ResultsBundle:
    config: dict
    seeds: list
    build_id: str
    logs: list
    run_metrics: list
    aggregate: dict
    out_dir: Optional[str] = None
    failed: bool = False


def _build_id() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "--short", "HEAD"],
                             capture_output=True, text=True, timeout=5,
                             cwd=Path(__file__).parent)
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"


def _final_metrics(base: ExperimentPreset, cfg: ResolvedConfig, net: ControlNet,
                   truth, seed: int) -> dict:
    problem = base.problem
    grid = TimeGrid(steps=cfg.steps, horizon=problem.horizon)
    learned = ControlEvaluator(net, problem, min_remaining=grid.dt / 2, frozen=True)
    out = {}
    traj = simulate_controlled(problem, grid, learned, cfg.eval_batch,
                               (seed, 424242))
    out["kl_base"], out["kl_base_se"] = kl_to_base(
        learned, problem, traj, cfg.truncate_last)
    if problem.potential is not None:
        energies = max_energy(traj, problem.potential)
        out["max_energy"] = float(energies.mean())
        out["max_energy_std"] = float(energies.std(ddof=1))
    if truth is not None:
        traj_star = simulate_controlled(problem, grid, truth, cfg.eval_batch,
                                        (seed, 424243))
        out["kl_truth"], out["kl_truth_se"] = kl_to_truth(
            truth, learned, problem, traj_star, cfg.truncate_last)
    out["sample_traj"] = traj
    return out


def run_experiment(config, out_dir=None) -> ResultsBundle:
    """Execute a config (path, TOML mapping, or ResolvedConfig): train over
    `runs` seeds, write per-run CSV/checkpoint/trajectory files plus an
    aggregate summary, and return the bundle."""
    if isinstance(config, ResolvedConfig):
        cfg = config
    elif isinstance(config, dict):
        cfg = resolve_config(config)
    else:
        cfg = load_config(config)

    base = preset(cfg.preset_name)
    problem = base.problem
    truth = None
    if cfg.oracle_enabled and base.truth_factory is not None:
        truth = base.truth_factory(cfg.oracle_extra)
    oracles = OracleSuite(truth=truth, truncate_last=cfg.truncate_last)

    out = Path(out_dir) if out_dir else Path("results") / cfg.preset_name
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.toml").write_text(serialize_config(cfg))

    seeds = [cfg.seed + r for r in range(cfg.runs)]
    logs, run_metrics = [], []
    failed = False
    for run_seed in seeds:
        net = ControlNet.initialize(problem.dim, problem.horizon, (run_seed, 11),
                                    form=cfg.form,
                                    include_base_drift=cfg.include_base_drift)
        tcfg = cfg.training_config(problem.horizon, run_seed)
        started = time.perf_counter()
        log = train(problem, tcfg, net, oracles)
        elapsed = time.perf_counter() - started
        logs.append(log)
        failed = failed or log.aborted

        # a run that aborted (or left non-finite parameters) still yields a
        # partial bundle; final metrics are attempted but must not crash it
        traj = None
        try:
            metrics = _final_metrics(base, cfg, net, truth, run_seed)
            traj = metrics.pop("sample_traj")
        except (FloatingPointError, SimulationDiverged, EllipticityError,
                np.linalg.LinAlgError):
            metrics = {}
        metrics.update({"seed": run_seed, "train_seconds": elapsed,
                        "aborted": log.aborted, "final_loss": log.final_loss})
        run_metrics.append(metrics)

        tag = f"run{run_seed}"
        write_log_csv(log, out / f"metrics_{tag}.csv")
        save_checkpoint(out / f"checkpoint_{tag}.bin", net, seed=run_seed,
                        meta={"preset": cfg.preset_name,
                              "config": cfg.to_sections()})
        if traj is not None:
            keep = min(64, traj.states.shape[0])
            sample = type(traj)(states=traj.states[:keep], noise=traj.noise[:keep],
                                grid=traj.grid, controlled=traj.controlled)
            save_trajectories(out / f"trajectories_{tag}.bin", sample, run_seed)

    aggregate = {}
    for key in ("kl_truth", "kl_base", "max_energy", "final_loss",
                "train_seconds"):
        vals = [m[key] for m in run_metrics if key in m and math.isfinite(m[key])]
        if vals:
            aggregate[key] = {"mean": float(np.mean(vals)),
                              "std": float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0,
                              "n": len(vals)}

    bundle = ResultsBundle(config=cfg.to_sections(), seeds=seeds,
                           build_id=_build_id(), logs=logs,
                           run_metrics=run_metrics, aggregate=aggregate,
                           out_dir=str(out), failed=failed)
    summary = {"config": bundle.config, "seeds": seeds, "build_id": bundle.build_id,
               "runs": run_metrics, "aggregate": aggregate, "failed": failed}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    with open(out / "aggregate.csv", "w") as fh:
        fh.write("metric,mean,std,n\n")
        for key, row in aggregate.items():
            fh.write(f"{key},{row['mean']:.10g},{row['std']:.10g},{row['n']}\n")
    return bundle


# ---------------------------------------------------------------------------
# built-in verification battery

def _verify_checks():
    from .oracles import (cir_transition_density, ou_bridge_control,
                          ou_transition_logpdf)
    from .targets import backward_targets, direct_targets_oracle
    from .sensitivity import step_jacobian
    from .control import input_gradient, loss_and_gradient
    from .targets import TargetBatch
    from .trainer import training_step
    from .control import OptimizerState

    checks = []

    def check(name):
        def wrap(fn):
            checks.append((name, fn))
            return fn
        return wrap

    @check("problem definitions pass derivative checks")
    def _presets():
        for name in sorted(_PRESETS):
            check_problem(preset(name).problem, seed=3, samples=6, rtol=2e-4)

    @check("backward sweep matches the unrolled oracle")
    def _recursion():
        problem = _ou_problem()
        grid = TimeGrid(steps=12, horizon=1.0)
        net = ControlNet.initialize(2, 1.0, 5)
        net.theta[:] = np.random.default_rng(5).normal(0.0, 0.05, net.theta.shape)
        ev = ControlEvaluator(net, problem, min_remaining=grid.dt / 2)
        traj = simulate_controlled(problem, grid, ev, 4, 9)
        for schedule in (AlphaSchedule.next_step(), AlphaSchedule.average(),
                         AlphaSchedule.endpoint()):
            for mode in (AuxiliaryDriftMode.zero(), AuxiliaryDriftMode.minus_base()):
                a = backward_targets(problem, traj, ev, schedule, mode).targets
                b = direct_targets_oracle(problem, traj, ev, schedule, mode).targets
                assert np.abs(a - b).max() <= 1e-10

    @check("one-step sensitivity matches finite differences")
    def _jacobian():
        problem = _cir_problem()
        dt, t = 1e-3, 0.3
        x = np.array([1.7])
        db = np.array([0.02])
        mode = AuxiliaryDriftMode.zero()
        jac = step_jacobian(problem, mode, t, x, db, dt).matrix

        def euler(xv):
            xb = xv[None, :]
            return (xb + problem.drift(t, xb) * dt
                    + np.einsum("bij,bj->bi", problem.diffusion(t, xb), db[None, :]))[0]

        h = 1e-6
        fd = (euler(x + h) - euler(x - h)) / (2 * h)
        assert np.abs(fd - jac[:, 0]).max() <= 1e-3 * np.abs(jac).max()

    @check("loss gradient matches finite differences")
    def _grad():
        problem = _ou_problem()
        grid = TimeGrid(steps=8, horizon=1.0)
        rng = np.random.default_rng(2)
        for form in ("gradient", "direct"):
            net = ControlNet.initialize(2, 1.0, 7, form=form)
            net.theta[:] = rng.normal(0.0, 0.05, net.theta.shape)
            ev = ControlEvaluator(net, problem, min_remaining=grid.dt / 2)
            traj = simulate_controlled(problem, grid, ev, 3, 21)
            targets = TargetBatch(
                targets=rng.normal(0.0, 1.0, (3, grid.steps, 2)),
                schedule="next_step", mode="zero", stl=False)
            loss, grad = loss_and_gradient(net, problem, traj, targets)
            for idx in rng.integers(0, net.theta.size, 8):
                h = 1e-6
                net.theta[idx] += h
                lp, _ = loss_and_gradient(net, problem, traj, targets)
                net.theta[idx] -= 2 * h
                lm, _ = loss_and_gradient(net, problem, traj, targets)
                net.theta[idx] += h
                fd = (lp - lm) / (2 * h)
                assert abs(grad[idx] - fd) <= 1e-4 * max(1.0, abs(fd))

    @check("gradient-form field is curl-free")
    def _curl():
        net = ControlNet.initialize(2, 1.0, 13)
        rng = np.random.default_rng(13)
        net.theta[:] = rng.normal(0.0, 0.2, net.theta.shape)
        for _ in range(20):
            t = rng.uniform(0.0, 0.99)
            x = rng.normal(0.0, 1.0, 2)
            _, jac = input_gradient(net, t, x)
            scale = np.abs(jac).max() + 1e-12
            assert np.abs(jac - jac.T).max() <= 1e-4 * scale

    @check("closed-form linear control solves the log-density identity")
    def _doob():
        x1 = np.array([0.0, 1.0])
        for t in (0.1, 0.45, 0.8):
            for shift in (-0.4, 0.3):
                x = np.array([[0.6 + shift, -0.2]])
                u = ou_bridge_control(2.0, 0.1, x1, t, x)[0]
                h = 1e-5
                fd = np.empty(2)
                for l in range(2):
                    xp, xm = x.copy(), x.copy()
                    xp[0, l] += h
                    xm[0, l] -= h
                    fd[l] = (ou_transition_logpdf(2.0, 0.1, 1.0 - t, xp, x1)[0]
                             - ou_transition_logpdf(2.0, 0.1, 1.0 - t, xm, x1)[0]) / (2 * h)
                assert np.abs(u - fd).max() <= 1e-3 * np.abs(fd).max()

    @check("square-root transition density is normalized")
    def _cir_norm():
        from scipy.integrate import quad
        total, _ = quad(lambda y: cir_transition_density(1.0, 1.0, 1.0, 0.5, 2.0, y),
                        1e-9, 40.0, limit=200)
        assert abs(total - 1.0) <= 1e-4

    @check("every controlled trajectory bridges exactly")
    def _bridging():
        problem = _ou_problem()
        grid = TimeGrid(steps=50, horizon=1.0)
        net = ControlNet.initialize(2, 1.0, 3)
        ev = ControlEvaluator(net, problem, min_remaining=grid.dt / 2)
        traj = simulate_controlled(problem, grid, ev, 16, 4)
        assert np.all(traj.states[:, -1] == problem.xT)

    @check("one training step runs and is deterministic")
    def _step():
        problem = _ou_problem()
        cfg = TrainingConfig(iterations=1, batch=8, lr=1e-4,
                             grid=TimeGrid(steps=20, horizon=1.0))
        losses = []
        for _ in range(2):
            net = ControlNet.initialize(2, 1.0, 17)
            opt = OptimizerState(params=net.theta, lr=cfg.lr)
            losses.append(training_step(problem, cfg, net, opt, (0, 0)))
        assert losses[0] == losses[1] and math.isfinite(losses[0])

    return checks


def verify() -> int:
    """Run the built-in oracle/property battery; 0 if all pass, else 3."""
    failures = 0
    for name, fn in _verify_checks():
        try:
            fn()
        except Exception as err:    # noqa: BLE001 - report and continue
            failures += 1
            print(f"FAIL {name}: {err}")
        else:
            print(f"PASS {name}")
    return 0 if failures == 0 else 3


# ---------------------------------------------------------------------------
# CLI

def _eval_checkpoint(path: str, eval_batch: Optional[int], seed: int) -> int:
    net, meta = load_checkpoint(path)
    name = meta.get("preset")
    if not name:
        print("checkpoint sidecar does not name a preset", file=sys.stderr)
        return 2
    cfg = resolve_config(meta.get("config", {"problem": {"preset": name}}))
    if eval_batch:
        cfg.eval_batch = eval_batch
    base = preset(name)
    truth = None
    if cfg.oracle_enabled and base.truth_factory is not None:
        truth = base.truth_factory(cfg.oracle_extra)
    metrics = _final_metrics(base, cfg, net, truth, seed)
    metrics.pop("sample_traj")
    for key, value in metrics.items():
        print(f"{key} = {value:.6g}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="ccbridge",
        description="Train and evaluate conditioned-diffusion controls.")
    sub = parser.add_subparsers(dest="command", required=True)

    runp = sub.add_parser("run", help="run a preset or a TOML config")
    runp.add_argument("target", help="preset name or path to config.toml")
    runp.add_argument("--seed", type=int, default=None)
    runp.add_argument("--runs", type=int, default=None)
    runp.add_argument("--iterations", type=int, default=None)
    runp.add_argument("--schedule", choices=sorted(_SCHEDULE_NAMES), default=None)
    runp.add_argument("--mode", choices=sorted(_MODE_NAMES), default=None)
    runp.add_argument("--stl", action="store_true", default=None)
    runp.add_argument("--clip", type=float, default=None)
    runp.add_argument("--out", default=None)

    sub.add_parser("verify", help="run the built-in verification battery")

    evalp = sub.add_parser("eval", help="recompute metrics for a checkpoint")
    evalp.add_argument("checkpoint")
    evalp.add_argument("--eval-batch", type=int, default=None)
    evalp.add_argument("--seed", type=int, default=0)

    args = parser.parse_args(argv)

    if args.command == "verify":
        return verify()

    if args.command == "eval":
        try:
            return _eval_checkpoint(args.checkpoint, args.eval_batch, args.seed)
        except FileNotFoundError as err:
            print(f"config error: {err}", file=sys.stderr)
            return 2
        except (RuntimeError, FloatingPointError, EllipticityError,
                ScheduleDegenerateError, np.linalg.LinAlgError) as err:
            print(f"numerical failure: {err}", file=sys.stderr)
            return 3

    try:
        if args.target.endswith(".toml") or "/" in args.target:
            cfg = load_config(args.target)
        else:
            cfg = resolve_config({"problem": {"preset": args.target}})
        if args.seed is not None:
            cfg.seed = args.seed
        if args.runs is not None:
            cfg.runs = args.runs
        if args.iterations is not None:
            cfg.iterations = args.iterations
        if args.schedule is not None:
            cfg.schedule_kind = _SCHEDULE_NAMES[args.schedule]
        if args.mode is not None:
            cfg.mode = _MODE_NAMES[args.mode]
        if args.stl:
            cfg.stl = True
        if args.clip is not None:
            cfg.clip = args.clip
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2

    try:
        bundle = run_experiment(cfg, out_dir=args.out)
    except (RuntimeError, FloatingPointError, EllipticityError,
            ScheduleDegenerateError, np.linalg.LinAlgError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return 3
    print(f"results written to {bundle.out_dir}")
    for key, row in bundle.aggregate.items():
        print(f"{key}: {row['mean']:.6g} +- {row['std']:.6g} (n={row['n']})")
    return 3 if bundle.failed else 0


if __name__ == "__main__":
    sys.exit(main())
