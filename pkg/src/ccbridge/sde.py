"""Bridge problems and Euler-Maruyama simulation on a uniform time grid.

A bridge problem is a reference diffusion

    dX_t = b(t, X_t) dt + sigma(t, X_t) dB_t

together with endpoints x0, xT and a horizon T. Controlled simulation adds a
drift correction (sigma sigma^T) u and forces the final state to xT by a
deterministic jump in the last step, so every controlled trajectory bridges
exactly.

All problem callables are vectorized over a leading batch axis: drift and
control maps take (t, x) with x of shape [B, d] and return [B, d]; the
diffusion returns [B, d, d]; its spatial Jacobian returns [B, d, d, d] with
entry [b, i, j, l] = d sigma_ij / d x_l.

Randomness uses counter-based Philox streams, one stream per trajectory,
keyed by SeedSequence entropy (seed words..., trajectory index). The seed
argument may be an int or a tuple of ints; callers that need per-iteration
streams pass (base_seed, iteration).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np

Seed = Union[int, Sequence[int]]


class EllipticityError(ValueError):
    """Raised when sigma sigma^T is singular at a queried point."""


class SimulationDiverged(RuntimeError):
    """Raised when a simulated state goes non-finite.

    Attributes
    ----------
    trajectory, step : int
        Batch index and time index of the first offending state.
    """

    def __init__(self, trajectory: int, step: int):
        self.trajectory = int(trajectory)
        self.step = int(step)
        super().__init__(
            f"simulation diverged: non-finite state in trajectory "
            f"{self.trajectory} at step {self.step}"
        )


@dataclass
class SdeProblem:
    """One bridge problem: reference dynamics, endpoints, horizon.

    Parameters
    ----------
    dim : int
        State dimension d.
    horizon : float
        Terminal time T > 0.
    x0, xT : array_like, shape [d]
        Start and termination states.
    drift : callable
        b(t, x) -> [B, d].
    diffusion : callable
        sigma(t, x) -> [B, d, d]. Must be elliptic (sigma sigma^T SPD).
    drift_jacobian : callable
        grad b(t, x) -> [B, d, d], entry [.., i, l] = d b_i / d x_l.
    diffusion_jacobian : callable
        grad sigma(t, x) -> [B, d, d, d], entry [.., i, j, l] = d sigma_ij / d x_l.
    conservative_drift : bool
        True when b = -grad U for the supplied potential.
    potential : callable, optional
        U(x) -> [B], required when conservative_drift is set.
    """

    dim: int
    horizon: float
    x0: np.ndarray
    xT: np.ndarray
    drift: Callable
    diffusion: Callable
    drift_jacobian: Callable
    diffusion_jacobian: Callable
    conservative_drift: bool = False
    potential: Optional[Callable] = None

    def __post_init__(self):
        self.dim = int(self.dim)
        self.horizon = float(self.horizon)
        self.x0 = np.asarray(self.x0, dtype=np.float64).reshape(self.dim)
        self.xT = np.asarray(self.xT, dtype=np.float64).reshape(self.dim)
        if self.dim <= 0:
            raise ValueError("dim must be positive")
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        if self.conservative_drift and self.potential is None:
            raise ValueError("conservative_drift requires a potential")


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_k = k * dt, k = 0..N, with dt = T / N.

    The tail of the grid is computed as T - (N - k) * dt so that t_N == T
    exactly regardless of rounding in k * dt.
    """

    steps: int
    horizon: float

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be positive")
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    @property
    def times(self) -> np.ndarray:
        n, T, dt = self.steps, self.horizon, self.dt
        k = np.arange(n + 1)
        head = k * dt
        tail = T - (n - k) * dt
        return np.where(k <= n // 2, head, tail)


@dataclass
class TrajectoryBatch:
    """Batched discretized paths plus the Brownian increments that made them.

    states[b, k] is X_{t_k}; noise[b, k] is the increment delta B_k (units
    sqrt(time)) consumed in the step from t_k to t_{k+1}. For controlled
    batches the final increment is drawn and stored but unused, because the
    last step jumps to xT deterministically.
    """

    states: np.ndarray
    noise: np.ndarray
    grid: TimeGrid
    controlled: bool


def _trajectory_noise(seed: Seed, batch: int, steps: int, dim: int, dt: float) -> np.ndarray:
    words = (int(seed),) if np.isscalar(seed) else tuple(int(w) for w in seed)
    out = np.empty((batch, steps, dim))
    root = np.sqrt(dt)
    for b in range(batch):
        gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(words + (b,))))
        out[b] = gen.standard_normal((steps, dim)) * root
    return out


def _check_finite(x: np.ndarray, step: int) -> None:
    if not np.all(np.isfinite(x)):
        bad = np.flatnonzero(~np.all(np.isfinite(x), axis=-1))[0]
        raise SimulationDiverged(bad, step)


def simulate_controlled(problem: SdeProblem, grid: TimeGrid, control,
                        batch: int, seed: Seed) -> TrajectoryBatch:
    """Simulate the controlled process and jump to xT in the final step.

    Euler-Maruyama: X_{k+1} = X_k + [b + (sigma sigma^T) u](t_k, X_k) dt
    + sigma(t_k, X_k) dB_k for k = 0..N-2, then X_N := xT. The control
    object must expose values(t, x) -> [B, d].

    Returns a replayable TrajectoryBatch (bit-identical for equal seeds).
    """
    n, d, dt = grid.steps, problem.dim, grid.dt
    if n < 2:
        raise ValueError("grid must have at least 2 steps")
    times = grid.times
    noise = _trajectory_noise(seed, batch, n, d, dt)
    states = np.empty((batch, n + 1, d))
    x = np.broadcast_to(problem.x0, (batch, d)).copy()
    states[:, 0] = x
    # controls that expose the full controlled drift b + (sigma sigma^T) u
    # directly skip the solve-then-remultiply round trip
    fused = getattr(control, "drift_values", None)
    for k in range(n - 1):
        t = times[k]
        sig = problem.diffusion(t, x)
        if fused is not None:
            total = fused(t, x)
        else:
            u = control.values(t, x)
            total = problem.drift(t, x) + np.einsum("bij,bkj,bk->bi", sig, sig, u)
        x = x + total * dt + np.einsum("bij,bj->bi", sig, noise[:, k])
        _check_finite(x, k + 1)
        states[:, k + 1] = x
    states[:, n] = problem.xT
    return TrajectoryBatch(states=states, noise=noise, grid=grid, controlled=True)


def simulate_uncontrolled(problem: SdeProblem, grid: TimeGrid,
                          batch: int, seed: Seed) -> TrajectoryBatch:
    """Simulate the reference process; no control term, no terminal jump."""
    n, d, dt = grid.steps, problem.dim, grid.dt
    times = grid.times
    noise = _trajectory_noise(seed, batch, n, d, dt)
    states = np.empty((batch, n + 1, d))
    x = np.broadcast_to(problem.x0, (batch, d)).copy()
    states[:, 0] = x
    for k in range(n):
        t = times[k]
        sig = problem.diffusion(t, x)
        x = x + problem.drift(t, x) * dt + np.einsum("bij,bj->bi", sig, noise[:, k])
        _check_finite(x, k + 1)
        states[:, k + 1] = x
    return TrajectoryBatch(states=states, noise=noise, grid=grid, controlled=False)


def replay_controlled(problem: SdeProblem, grid: TimeGrid, control,
                      noise: np.ndarray) -> TrajectoryBatch:
    """Re-run the controlled update from stored increments (replay check)."""
    n, d, dt = grid.steps, problem.dim, grid.dt
    batch = noise.shape[0]
    times = grid.times
    states = np.empty((batch, n + 1, d))
    x = np.broadcast_to(problem.x0, (batch, d)).copy()
    states[:, 0] = x
    fused = getattr(control, "drift_values", None)
    for k in range(n - 1):
        t = times[k]
        sig = problem.diffusion(t, x)
        if fused is not None:
            total = fused(t, x)
        else:
            u = control.values(t, x)
            total = problem.drift(t, x) + np.einsum("bij,bkj,bk->bi", sig, sig, u)
        x = x + total * dt + np.einsum("bij,bj->bi", sig, noise[:, k])
        states[:, k + 1] = x
    states[:, n] = problem.xT
    return TrajectoryBatch(states=states, noise=noise.copy(), grid=grid, controlled=True)


def check_problem(problem: SdeProblem, seed: int = 0, samples: int = 16,
                  rtol: float = 1e-5) -> None:
    """Validate a problem's analytic Jacobians against central differences.

    Checks, at randomly sampled (t, x) near the segment x0..xT:
      - sigma sigma^T is symmetric positive definite,
      - drift_jacobian matches finite differences of drift to rtol,
      - diffusion_jacobian matches finite differences of diffusion to rtol,
      - if conservative, drift matches -grad(potential) to rtol.

    Raises AssertionError on the first violated check.
    """
    rng = np.random.default_rng(seed)
    d, T = problem.dim, problem.horizon
    span = np.abs(problem.x0).sum() + np.abs(problem.xT).sum() + 1.0
    for _ in range(samples):
        t = float(rng.uniform(0.0, 0.95 * T))
        w = rng.uniform(0.1, 0.9)
        x = (problem.x0 + w * (problem.xT - problem.x0)
             + 0.05 * span * rng.standard_normal(d))[None, :]
        sig = problem.diffusion(t, x)[0]
        gram = sig @ sig.T
        assert np.allclose(gram, gram.T, atol=1e-12), "sigma sigma^T not symmetric"
        assert np.linalg.eigvalsh(gram).min() > 0, "sigma sigma^T not positive definite"

        jb = problem.drift_jacobian(t, x)[0]
        js = problem.diffusion_jacobian(t, x)[0]
        scale_b = np.abs(jb).max() + 1.0
        scale_s = np.abs(js).max() + 1.0
        for l in range(d):
            h = 1e-5 * max(1.0, abs(float(x[0, l])))
            xp, xm = x.copy(), x.copy()
            xp[0, l] += h
            xm[0, l] -= h
            fd_b = (problem.drift(t, xp)[0] - problem.drift(t, xm)[0]) / (2 * h)
            assert np.abs(fd_b - jb[:, l]).max() <= rtol * scale_b, \
                f"drift_jacobian column {l} disagrees with finite differences"
            fd_s = (problem.diffusion(t, xp)[0] - problem.diffusion(t, xm)[0]) / (2 * h)
            assert np.abs(fd_s - js[:, :, l]).max() <= rtol * scale_s, \
                f"diffusion_jacobian slice {l} disagrees with finite differences"
        if problem.conservative_drift:
            bval = problem.drift(t, x)[0]
            scale_u = np.abs(bval).max() + 1.0
            for l in range(d):
                h = 1e-5 * max(1.0, abs(float(x[0, l])))
                xp, xm = x.copy(), x.copy()
                xp[0, l] += h
                xm[0, l] -= h
                fd_u = (problem.potential(xp)[0] - problem.potential(xm)[0]) / (2 * h)
                assert abs(-fd_u - bval[l]) <= rtol * scale_u, \
                    f"drift is not -grad(potential) in component {l}"


def save_trajectories(path, batch: TrajectoryBatch, seed: Seed) -> None:
    """Dump states to a flat binary file with a JSON header line.

    Layout: one UTF-8 JSON line {"B", "N", "d", "T", "seed"} terminated by a
    newline, followed by B*(N+1)*d little-endian float64 values in C order
    (the states array).
    """
    B, n1, d = batch.states.shape
    header = {
        "B": B, "N": n1 - 1, "d": d, "T": batch.grid.horizon,
        "seed": seed if np.isscalar(seed) else list(int(w) for w in seed),
    }
    with open(path, "wb") as fh:
        fh.write((json.dumps(header) + "\n").encode())
        fh.write(batch.states.astype("<f8").tobytes(order="C"))


def load_trajectories(path):
    """Inverse of save_trajectories; returns (states, header dict)."""
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode())
        data = np.frombuffer(fh.read(), dtype="<f8")
    shape = (header["B"], header["N"] + 1, header["d"])
    return data.reshape(shape).copy(), header
