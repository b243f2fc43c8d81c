"""Ground-truth controls, reference densities, and quality metrics.

Closed forms exist for the linear (mean-reverting Gaussian) bridge and for
the square-root process; everything else gets a reference control from a
1-d backward Kolmogorov solve on a dense grid. The KL metrics integrate
squared control differences along trajectories and report (mean, standard
error) over the batch.

All density math runs in log space; the modified Bessel function of the
first kind is evaluated by a power series for small arguments and a scaled
asymptotic expansion for large ones, so the square-root-process density is
usable in regimes where the direct formula overflows.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.linalg import solve_banded

from .sde import SdeProblem, TrajectoryBatch


@dataclass
class GroundTruthControl:
    """Closed-form control field; optionally with an input derivative.

    fn(t, x[B, d]) -> [B, d]; jvp(t, x, v) -> [B, d] when available.
    """

    fn: Callable
    jvp: Optional[Callable] = None

    def values(self, t: float, x: np.ndarray) -> np.ndarray:
        return self.fn(float(t), np.asarray(x, dtype=np.float64))

    def values_batch(self, ts: np.ndarray, xs: np.ndarray) -> np.ndarray:
        out = np.empty_like(xs)
        uniq, inverse = np.unique(np.asarray(ts, dtype=np.float64),
                                  return_inverse=True)
        for i, t in enumerate(uniq):
            sel = inverse == i
            out[sel] = self.fn(float(t), xs[sel])
        return out

    def input_jvp(self, t: float, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        if self.jvp is None:
            raise NotImplementedError("this control has no input derivative")
        return self.jvp(float(t), np.asarray(x, dtype=np.float64),
                        np.asarray(v, dtype=np.float64))


# ---------------------------------------------------------------------------
# mean-reverting Gaussian bridge (dX = -alpha X dt + sigma dB, T = 1)

def ou_transition_logpdf(alpha: float, sigma: float, t_gap: float,
                         x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """log p(t+t_gap, y | t, x) for the linear process, componentwise iid."""
    if t_gap <= 0:
        raise ValueError("t_gap must be positive")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    mean = x * math.exp(-alpha * t_gap)
    var = sigma ** 2 * (1.0 - math.exp(-2.0 * alpha * t_gap)) / (2.0 * alpha)
    out = -0.5 * ((y - mean) ** 2 / var + math.log(2.0 * math.pi * var))
    return out.sum(axis=-1)


def ou_bridge_control(alpha: float, sigma: float, x1: np.ndarray,
                      t: float, x: np.ndarray) -> np.ndarray:
    """Conditioned-process drift correction for the linear bridge on [0, 1]:

        u*(t, x) = 2 alpha e^{-alpha (1-t)} (x1 - x e^{-alpha (1-t)})
                   / (sigma^2 (1 - e^{-2 alpha (1-t)}))

    which is grad_x log p(1, x1 | t, x) for the exact Gaussian kernel. The
    remaining-time argument appears in every factor; the denominator is
    singular at t = 1, so the domain is t in [0, 1).
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if not 0.0 <= t < 1.0:
        raise ValueError(f"singular denominator: t={t} outside [0, 1)")
    rem = 1.0 - t
    x = np.asarray(x, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    decay = math.exp(-alpha * rem)
    denom = sigma ** 2 * (1.0 - math.exp(-2.0 * alpha * rem))
    return 2.0 * alpha * decay * (x1 - x * decay) / denom


def ou_ground_truth(alpha: float, sigma: float, x1: np.ndarray) -> GroundTruthControl:
    """Closed-form bridge control as a control-protocol object (T = 1)."""
    x1 = np.asarray(x1, dtype=np.float64)

    def fn(t, x):
        return ou_bridge_control(alpha, sigma, x1, t, x)

    def jvp(t, x, v):
        rem = 1.0 - t
        decay2 = math.exp(-2.0 * alpha * rem)
        denom = sigma ** 2 * (1.0 - decay2)
        return -2.0 * alpha * decay2 / denom * v

    return GroundTruthControl(fn=fn, jvp=jvp)


# ---------------------------------------------------------------------------
# square-root process (dX = a (b - X) dt + eps sqrt(X) dB)

def _log_bessel_i(q: float, z):
    """log I_q(z) for z >= 0: power series below 30, scaled asymptotic above."""
    shape = np.shape(z)
    z = np.atleast_1d(np.asarray(z, dtype=np.float64))
    out = np.empty_like(z)
    small = z < 30.0
    if np.any(small):
        zs = z[small]
        with np.errstate(divide="ignore"):
            logh = np.log(zs / 2.0)
        m = np.arange(60)
        lg = np.array([math.lgamma(mm + 1.0) + math.lgamma(mm + q + 1.0) for mm in m])
        terms = (2.0 * m[None, :] + q) * logh[:, None] - lg[None, :]
        out[small] = np.logaddexp.reduce(terms, axis=1)
    if np.any(~small):
        zl = z[~small]
        mu = 4.0 * q * q
        corr = np.ones_like(zl)
        term = np.ones_like(zl)
        for k in range(1, 7):
            term = term * -(mu - (2 * k - 1) ** 2) / (8.0 * k * zl)
            corr = corr + term
        out[~small] = zl - 0.5 * np.log(2.0 * np.pi * zl) + np.log(corr)
    return out.reshape(shape)


def cir_log_transition_density(a: float, b: float, eps: float, t_gap: float,
                               x, xT):
    """log p(t + t_gap, xT | t, x) for the square-root process."""
    if min(a, b, eps, t_gap) <= 0:
        raise ValueError("a, b, eps, t_gap must be positive")
    x = np.asarray(x, dtype=np.float64)
    xT = np.asarray(xT, dtype=np.float64)
    if np.any(x <= 0) or np.any(xT <= 0):
        raise ValueError("states must be positive")
    c = 2.0 * a / ((1.0 - math.exp(-a * t_gap)) * eps ** 2)
    q = 2.0 * a * b / eps ** 2 - 1.0
    u = c * x * math.exp(-a * t_gap)
    v = c * xT
    return (math.log(c) - u - v + (q / 2.0) * (np.log(v) - np.log(u))
            + _log_bessel_i(q, 2.0 * np.sqrt(u * v)))


def cir_transition_density(a: float, b: float, eps: float, t_gap: float, x, xT):
    return np.exp(cir_log_transition_density(a, b, eps, t_gap, x, xT))


def cir_bridge_control(a: float, b: float, eps: float, x1: float,
                       t: float, x, horizon: float = 1.0):
    """grad_x log p(T, x1 | t, x) for the square-root process.

    Using dI_q/dz = I_{q+1} + (q/z) I_q, the derivative collapses to
    (sqrt(u v) I_{q+1}(z)/I_q(z) - u) / x with z = 2 sqrt(u v).
    """
    if not 0.0 <= t < horizon:
        raise ValueError(f"t={t} outside [0, horizon)")
    t_gap = horizon - t
    x = np.asarray(x, dtype=np.float64)
    if np.any(x <= 0):
        raise ValueError("states must be positive")
    c = 2.0 * a / ((1.0 - math.exp(-a * t_gap)) * eps ** 2)
    q = 2.0 * a * b / eps ** 2 - 1.0
    u = c * x * math.exp(-a * t_gap)
    v = c * x1
    z = 2.0 * np.sqrt(u * v)
    ratio = np.exp(_log_bessel_i(q + 1.0, z) - _log_bessel_i(q, z))
    return (np.sqrt(u * v) * ratio - u) / x


def cir_ground_truth(a: float, b: float, eps: float, x1: float,
                     horizon: float = 1.0) -> GroundTruthControl:
    def fn(t, x):
        return cir_bridge_control(a, b, eps, x1, t, x, horizon)

    return GroundTruthControl(fn=fn)


# ---------------------------------------------------------------------------
# 1-d backward Kolmogorov reference solve

@dataclass
class DensityTable1D:
    """Tabulated log p(T, xT | t, x) on a (t, x) grid, with the induced
    control d/dx log p available by bilinear interpolation."""

    xs: np.ndarray
    ts: np.ndarray
    logp: np.ndarray
    horizon: float

    def __post_init__(self):
        dx = self.xs[1] - self.xs[0]
        du = np.empty_like(self.logp)
        du[:, 1:-1] = (self.logp[:, 2:] - self.logp[:, :-2]) / (2.0 * dx)
        du[:, 0] = (self.logp[:, 1] - self.logp[:, 0]) / dx
        du[:, -1] = (self.logp[:, -1] - self.logp[:, -2]) / dx
        self._du = du

    def _interp(self, table: np.ndarray, t: float, x: np.ndarray) -> np.ndarray:
        ts, xs = self.ts, self.xs
        i = int(np.clip(np.searchsorted(ts, t) - 1, 0, len(ts) - 2))
        wt = np.clip((t - ts[i]) / (ts[i + 1] - ts[i]), 0.0, 1.0)
        xq = np.clip(x, xs[0], xs[-1])
        j = np.clip(np.searchsorted(xs, xq) - 1, 0, len(xs) - 2)
        wx = (xq - xs[j]) / (xs[j + 1] - xs[j])
        lo = (1.0 - wx) * table[i, j] + wx * table[i, j + 1]
        hi = (1.0 - wx) * table[i + 1, j] + wx * table[i + 1, j + 1]
        return (1.0 - wt) * lo + wt * hi

    def log_density(self, t: float, x) -> np.ndarray:
        return self._interp(self.logp, float(t), np.asarray(x, dtype=np.float64))

    def control(self, t: float, x) -> np.ndarray:
        return self._interp(self._du, float(t), np.asarray(x, dtype=np.float64))

    def as_control(self) -> GroundTruthControl:
        """Adapter to the control protocol for d = 1 problems."""

        def fn(t, x):
            return self.control(t, x[:, 0])[:, None]

        return GroundTruthControl(fn=fn)


def solve_backward_kolmogorov_1d(problem: SdeProblem, xT: float, xs: np.ndarray,
                                 time_steps: int) -> DensityTable1D:
    """March p_t + b p_x + (1/2) sigma^2 p_xx = 0 backward from a mollified
    point mass at the terminal state.

    The terminal condition is a Gaussian of width two grid cells at xT,
    placed one time step before T. In remaining time s = T - t the equation
    is forward-parabolic and is stepped with theta = 1/2 after two implicit
    startup steps, on absorbing (zero) far boundaries. Returns the table of
    log densities at grid times t = 0, dt, ..., T - dt.
    """
    if problem.dim != 1:
        raise ValueError("reference solve supports d = 1 only")
    xs = np.asarray(xs, dtype=np.float64)
    m = xs.shape[0]
    dx = xs[1] - xs[0]
    if not np.allclose(np.diff(xs), dx):
        raise ValueError("space grid must be uniform")
    T = problem.horizon
    dt = T / time_steps

    width = 2.0 * dx
    v = np.exp(-0.5 * ((xs - xT) / width) ** 2) / (width * math.sqrt(2 * math.pi))
    mass0 = np.trapezoid(v, xs)

    cols = xs[:, None]
    rows = np.empty((time_steps, m))
    rows[time_steps - 1] = v

    def lower_diag_ops(t):
        bvals = problem.drift(t, cols)[:, 0]
        svals = problem.diffusion(t, cols)[:, 0, 0]
        diff = 0.5 * svals ** 2 / dx ** 2
        adv = bvals / (2.0 * dx)
        lo = diff - adv          # multiplies v_{j-1}
        mid = -2.0 * diff        # multiplies v_j
        hi = diff + adv          # multiplies v_{j+1}
        return lo, mid, hi

    for step in range(1, time_steps):
        s = step * dt + dt       # remaining time after this step
        t_new = T - s
        t_old = t_new + dt
        theta = 1.0 if step <= 2 else 0.5
        lo_n, mid_n, hi_n = lower_diag_ops(t_new)
        if theta < 1.0:
            lo_o, mid_o, hi_o = lower_diag_ops(t_old)
            w = 1.0 - theta
            rhs = v.copy()
            rhs[1:-1] += w * dt * (lo_o[1:-1] * v[:-2] + mid_o[1:-1] * v[1:-1]
                                   + hi_o[1:-1] * v[2:])
        else:
            rhs = v.copy()
        ab = np.zeros((3, m))
        ab[1, :] = 1.0
        ab[1, 1:-1] -= theta * dt * mid_n[1:-1]
        ab[0, 2:] = -theta * dt * hi_n[1:-1]
        ab[2, :-2] = -theta * dt * lo_n[1:-1]
        rhs[0] = 0.0
        rhs[-1] = 0.0
        v = solve_banded((1, 1), ab, rhs)
        if not np.all(np.isfinite(v)) or np.trapezoid(np.abs(v), xs) > 10.0 * mass0:
            raise RuntimeError(f"reference solve unstable at step {step}")
        rows[time_steps - 1 - step] = v

    ts = np.arange(time_steps) * dt
    logp = np.log(np.maximum(rows, 1e-300))
    return DensityTable1D(xs=xs, ts=ts, logp=logp, horizon=T)


def save_density_table(path, table: DensityTable1D) -> None:
    """JSON header line (grids, horizon) + flat little-endian log densities."""
    header = {
        "M": int(table.xs.shape[0]),
        "x_min": float(table.xs[0]), "x_max": float(table.xs[-1]),
        "time_steps": int(table.ts.shape[0]),
        "horizon": float(table.horizon),
    }
    with open(path, "wb") as fh:
        fh.write((json.dumps(header) + "\n").encode())
        fh.write(table.logp.astype("<f8").tobytes(order="C"))


def load_density_table(path) -> DensityTable1D:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode())
        data = np.frombuffer(fh.read(), dtype="<f8")
    xs = np.linspace(header["x_min"], header["x_max"], header["M"])
    n = header["time_steps"]
    ts = np.arange(n) * (header["horizon"] / n)
    return DensityTable1D(xs=xs, ts=ts, logp=data.reshape(n, header["M"]).copy(),
                          horizon=header["horizon"])


# ---------------------------------------------------------------------------
# metrics

def _kl_integral(problem: SdeProblem, traj: TrajectoryBatch, diff_fn,
                 truncate_last: int):
    """(mean, se) of 0.5 sum_k ||sigma^T diff(t_k, X_k)||^2 dt over the batch."""
    grid = traj.grid
    n, dt = grid.steps, grid.dt
    times = grid.times
    n_use = n - truncate_last
    if n_use < 1:
        raise ValueError("truncate_last leaves no steps")
    B = traj.states.shape[0]
    acc = np.zeros(B)
    for k in range(n_use):
        t = float(times[k])
        x = traj.states[:, k]
        diff = diff_fn(t, x)
        sig = problem.diffusion(t, x)
        w = np.einsum("bji,bj->bi", sig, diff)
        acc += 0.5 * np.einsum("bi,bi->b", w, w) * dt
    mean = float(acc.mean())
    se = float(acc.std(ddof=1) / math.sqrt(B)) if B > 1 else 0.0
    return mean, se


def kl_to_truth(truth, learned, problem: SdeProblem, traj_from_truth: TrajectoryBatch,
                truncate_last: int = 5):
    """Path divergence of the learned bridge from the true one,
    0.5 E*[ integral ||sigma^T (u* - u)||^2 dt ], trajectories from u*."""

    def diff(t, x):
        return truth.values(t, x) - learned.values(t, x)

    return _kl_integral(problem, traj_from_truth, diff, truncate_last)


def kl_to_base(learned, problem: SdeProblem, traj_from_learned: TrajectoryBatch,
               truncate_last: int = 5):
    """Divergence from the reference process, 0.5 E_theta[ integral
    ||sigma^T u||^2 dt ], trajectories from the learned control."""
    return _kl_integral(problem, traj_from_learned, learned.values, truncate_last)


def max_energy(traj: TrajectoryBatch, potential: Callable) -> np.ndarray:
    """Per-trajectory max_k U(X_k); aggregate as mean +- std across the batch."""
    B, n1, _ = traj.states.shape
    out = np.full(B, -np.inf)
    for k in range(n1):
        out = np.maximum(out, potential(traj.states[:, k]))
    return out
