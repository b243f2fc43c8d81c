"""Backward regression targets along simulated bridge trajectories.

The sweep anchors at the realized final control (the last step is a
deterministic jump, so the control at T - dt is known exactly) and walks
backwards, mixing the running target with the next-step control value
according to an alpha-schedule, transporting with transposed one-step
sensitivity factors, and optionally adding a running-cost term (auxiliary
drift) and a pathwise noise-cancellation term (stl).

Control objects are duck-typed: values(t, x) -> [B, d] is required;
values_batch(ts, xs) is an optional fast path over flattened samples;
input_jvp(t, x, v) -> [B, d] (directional derivative of the control in x)
is required only when stl is requested.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .sde import EllipticityError, SdeProblem, TimeGrid, TrajectoryBatch
from .sensitivity import AuxiliaryDriftMode, step_jacobian, step_jacobian_batch


class ScheduleDegenerateError(ValueError):
    """Raised when a custom weighting has no mass after some step."""


@dataclass(frozen=True)
class AlphaSchedule:
    """Weighting over future times; exposes per-step mixing coefficients.

    mixing(grid) returns (lam, mu), length N-1 arrays for steps k = 0..N-2:
    the sweep computes J^T (lam_k * S_{k+1} + mu_k * u_{k+1}). For the named
    schedules lam + mu = 1 exactly. Custom weights are stored per step, with
    alphas[k] weighting the step that ends at t_{k+1} (right-endpoint rule);
    the pair is (A_{k+1}/A_k, dt*alphas[k]/A_k) with A_k = dt * sum_{j>=k}
    alphas[j] accumulated from the tail so lam + mu = 1 is exact. Constant
    weights reproduce the Average schedule identically.
    """

    name: str
    alphas: Optional[np.ndarray] = None

    @classmethod
    def next_step(cls) -> "AlphaSchedule":
        return cls(name="next_step")

    @classmethod
    def average(cls) -> "AlphaSchedule":
        return cls(name="average")

    @classmethod
    def endpoint(cls) -> "AlphaSchedule":
        return cls(name="endpoint")

    @classmethod
    def custom(cls, alphas) -> "AlphaSchedule":
        alphas = np.asarray(alphas, dtype=np.float64)
        if alphas.ndim != 1:
            raise ValueError("alphas must be a 1-d array of per-step weights")
        if np.any(alphas < 0):
            raise ValueError("alphas must be nonnegative")
        return cls(name="custom", alphas=alphas)

    def mixing(self, grid: TimeGrid):
        n = grid.steps
        if self.name == "next_step":
            return np.zeros(n - 1), np.ones(n - 1)
        if self.name == "endpoint":
            return np.ones(n - 1), np.zeros(n - 1)
        if self.name == "average":
            times = grid.times
            T = grid.horizon
            lam = (T - times[1:n]) / (T - times[: n - 1])
            return lam, 1.0 - lam
        if self.alphas.shape[0] != n:
            raise ValueError(
                f"custom schedule has {self.alphas.shape[0]} weights, grid has {n} steps")
        dt = grid.dt
        # tail accumulation keeps A_k = A_{k+1} + dt*alphas[k] exact
        A = np.empty(n)
        acc = 0.0
        for k in range(n - 1, -1, -1):
            acc = acc + dt * self.alphas[k]
            A[k] = acc
        if np.any(A[: n - 1] <= 0.0):
            k = int(np.argmax(A[: n - 1] <= 0.0))
            raise ScheduleDegenerateError(
                f"custom schedule has no weight mass after step {k}")
        lam = np.empty(n - 1)
        mu = np.empty(n - 1)
        lam[: n - 2] = A[1: n - 1] / A[: n - 2]
        mu[: n - 2] = dt * self.alphas[: n - 2] / A[: n - 2]
        # last mixing index: remaining mass beyond t_{N-1} also rides on the anchor
        lam[n - 2] = A[n - 1] / A[n - 2]
        mu[n - 2] = dt * self.alphas[n - 2] / A[n - 2]
        return lam, mu


@dataclass
class TargetBatch:
    """Per-step targets S, shape [B, N, d]; index N-1 holds the anchor.

    control_values optionally carries the control field u(t_k, X_k) for
    k = 0..N-2 ([B, N-1, d]) as evaluated while building the targets, so a
    consumer holding the same parameters can skip re-evaluating it;
    eval_cache holds the evaluator's opaque intermediates for those rows.
    """

    targets: np.ndarray
    schedule: str
    mode: str
    stl: bool
    control_values: Optional[np.ndarray] = None
    eval_cache: Optional[dict] = None


def final_control_batch(problem: SdeProblem, x_penultimate: np.ndarray, dt: float) -> np.ndarray:
    """Realized control at T - dt for a batch of penultimate states."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    t = problem.horizon - dt
    x = np.atleast_2d(np.asarray(x_penultimate, dtype=np.float64))
    sig = problem.diffusion(t, x)
    gram = np.einsum("bij,bkj->bik", sig, sig)
    rhs = (problem.xT - x) / dt - problem.drift(t, x)
    try:
        return np.linalg.solve(gram, rhs[..., None])[..., 0]
    except np.linalg.LinAlgError as err:
        raise EllipticityError(
            f"sigma sigma^T is singular at t={t}: {err}") from err


def final_control(problem: SdeProblem, x_penultimate: np.ndarray, dt: float) -> np.ndarray:
    """(sigma sigma^T)^{-1}(T-dt, x) [ (xT - x)/dt - b(T-dt, x) ]."""
    x = np.asarray(x_penultimate, dtype=np.float64).reshape(1, problem.dim)
    return final_control_batch(problem, x, dt)[0]


def _control_values_grid(control, times: np.ndarray, states: np.ndarray):
    """u(t_k, X_k) for k = 0..len(times)-1; returns ([B, K, d], cache)."""
    B, _, d = states.shape
    K = times.shape[0]
    if hasattr(control, "values_batch_cached"):
        ts = np.repeat(times, B)
        xs = states[:, :K].transpose(1, 0, 2).reshape(K * B, d)
        flat, cache = control.values_batch_cached(ts, xs)
        return flat.reshape(K, B, d).transpose(1, 0, 2), cache
    if hasattr(control, "values_batch"):
        ts = np.repeat(times, B)
        xs = states[:, :K].transpose(1, 0, 2).reshape(K * B, d)
        return control.values_batch(ts, xs).reshape(K, B, d).transpose(1, 0, 2), None
    out = np.empty((B, K, d))
    for k in range(K):
        out[:, k] = control.values(times[k], states[:, k])
    return out, None


def _stl_terms(problem: SdeProblem, control, times: np.ndarray,
               states: np.ndarray, noise: np.ndarray, u_vals: np.ndarray) -> np.ndarray:
    """Pathwise cancellation terms (grad u . sigma dB + (grad sigma . dB)^T u).

    Evaluated at (t_k, X_k) with the increment dB_k, for k = 0..N-2.
    """
    B, K, d = u_vals.shape
    out = np.empty((B, K, d))
    for k in range(K):
        t, x, db = times[k], states[:, k], noise[:, k]
        sig = problem.diffusion(t, x)
        w = np.einsum("bij,bj->bi", sig, db)
        jvp = control.input_jvp(t, x, w)
        dsig = problem.diffusion_jacobian(t, x)
        cont = np.einsum("bijl,bj->bil", dsig, db)
        out[:, k] = jvp + np.einsum("bil,bi->bl", cont, u_vals[:, k])
    return out


def backward_targets(problem: SdeProblem, traj: TrajectoryBatch, control,
                     schedule: AlphaSchedule, mode: AuxiliaryDriftMode,
                     stl: bool = False) -> TargetBatch:
    """Sweep the targets backwards along a controlled trajectory batch.

    S_{N-1} is the realized final control; for k = N-2 down to 0

        S_k = -dt * grad(btilde)^T u(t_k, X_k)
              + J_step^T [ lam_k S_{k+1} + mu_k u(t_{k+1}, X_{k+1}) ]
              - stl_k                                          (when stl)

    where u(t_{N-1}, .) is the anchor itself (the control at the penultimate
    time is fixed by the terminal jump, not by the network).
    """
    if not traj.controlled:
        raise ValueError("targets require a controlled trajectory batch")
    grid = traj.grid
    n, d, dt = grid.steps, problem.dim, grid.dt
    B = traj.states.shape[0]
    times = grid.times
    lam, mu = schedule.mixing(grid)

    S = np.empty((B, n, d))
    S[:, n - 1] = final_control_batch(problem, traj.states[:, n - 1], dt)

    u_vals, eval_cache = _control_values_grid(control, times[: n - 1], traj.states)
    stl_vals = None
    if stl:
        stl_vals = _stl_terms(problem, control, times[: n - 1], traj.states,
                              traj.noise, u_vals)

    running = mode.has_running_cost
    for k in range(n - 2, -1, -1):
        t = times[k]
        xk = traj.states[:, k]
        factor = step_jacobian_batch(problem, mode, t, xk, traj.noise[:, k], dt)
        u_next = u_vals[:, k + 1] if k + 1 <= n - 2 else S[:, n - 1]
        mixed = lam[k] * S[:, k + 1] + mu[k] * u_next
        sk = np.einsum("bj,bji->bi", mixed, factor)
        if running:
            aux = mode.aux_drift_jacobian(problem, t, xk)
            sk = sk - dt * np.einsum("bil,bi->bl", aux, u_vals[:, k])
        if stl:
            sk = sk - stl_vals[:, k]
        if not np.all(np.isfinite(sk)):
            bad = np.flatnonzero(~np.all(np.isfinite(sk), axis=-1))[0]
            raise FloatingPointError(
                f"non-finite target in trajectory {bad} at step {k}")
        S[:, k] = sk
    return TargetBatch(targets=S, schedule=schedule.name, mode=mode.name, stl=stl,
                       control_values=u_vals, eval_cache=eval_cache)


def direct_targets_oracle(problem: SdeProblem, traj: TrajectoryBatch, control,
                          schedule: AlphaSchedule, mode: AuxiliaryDriftMode) -> TargetBatch:
    """Unrolled double-sum targets for small N (testing tool, no stl).

    Forms every multi-step transport as an explicit left-to-right product of
    single-step factors and sums the weighted control and running-cost terms
    directly; agrees with the sweep up to association order of the products.
    """
    if not traj.controlled:
        raise ValueError("targets require a controlled trajectory batch")
    grid = traj.grid
    n, d, dt = grid.steps, problem.dim, grid.dt
    B = traj.states.shape[0]
    times = grid.times
    lam, mu = schedule.mixing(grid)

    S = np.empty((B, n, d))
    for b in range(B):
        states = traj.states[b]
        noise = traj.noise[b]
        anchor = final_control(problem, states[n - 1], dt)
        S[b, n - 1] = anchor

        factors = [step_jacobian(problem, mode, times[k], states[k], noise[k], dt).matrix
                   for k in range(n - 1)]
        u = [control.values(times[k], states[k][None, :])[0] for k in range(n - 1)]
        run = []
        for k in range(n - 1):
            aux = mode.aux_drift_jacobian(problem, times[k], states[k][None, :])[0]
            run.append(-dt * (aux.T @ u[k]))

        for k in range(n - 1):
            total = run[k].copy()
            prod = np.eye(d)
            chain = 1.0
            for j in range(k + 1, n):
                prod = factors[j - 1] @ prod
                uj = u[j] if j <= n - 2 else anchor
                total = total + (chain * mu[j - 1]) * (prod.T @ uj)
                chain = chain * lam[j - 1]
                if j <= n - 2:
                    total = total + chain * (prod.T @ run[j])
                else:
                    total = total + chain * (prod.T @ anchor)
            S[b, k] = total
    return TargetBatch(targets=S, schedule=schedule.name, mode=mode.name, stl=False)
