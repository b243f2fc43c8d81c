"""Single-step sensitivity factors of the base or auxiliary process.

The backward target sweep transports vectors with transposed one-step
Jacobian factors

    J_step = Id + grad(b + btilde)(t, x) * dt + grad(sigma)(t, x) . dB,

where the diffusion contraction is fixed as
(grad(sigma) . dB)_{il} = sum_j d sigma_ij / d x_l * dB_j.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .sde import SdeProblem


@dataclass(frozen=True)
class AuxiliaryDriftMode:
    """Auxiliary drift btilde defining the transported measure.

    Variants: zero (plain sweep, transport by the base Jacobian), minus_base
    (btilde = -b, so b + btilde vanishes and constant-sigma transports are the
    identity), or a custom btilde with its spatial Jacobian.
    """

    name: str
    drift: Optional[Callable] = None
    jacobian: Optional[Callable] = None

    @classmethod
    def zero(cls) -> "AuxiliaryDriftMode":
        return cls(name="zero")

    @classmethod
    def minus_base(cls) -> "AuxiliaryDriftMode":
        return cls(name="minus_base")

    @classmethod
    def custom(cls, drift: Callable, jacobian: Callable) -> "AuxiliaryDriftMode":
        return cls(name="custom", drift=drift, jacobian=jacobian)

    def combined_drift_jacobian(self, problem: SdeProblem, t: float, x: np.ndarray) -> np.ndarray:
        """grad(b + btilde)(t, x), shape [B, d, d]."""
        if self.name == "zero":
            return problem.drift_jacobian(t, x)
        if self.name == "minus_base":
            d = problem.dim
            return np.zeros((x.shape[0], d, d))
        return problem.drift_jacobian(t, x) + self.jacobian(t, x)

    def aux_drift_jacobian(self, problem: SdeProblem, t: float, x: np.ndarray) -> np.ndarray:
        """grad(btilde)(t, x), shape [B, d, d]; zero for the plain sweep."""
        if self.name == "zero":
            d = problem.dim
            return np.zeros((x.shape[0], d, d))
        if self.name == "minus_base":
            return -problem.drift_jacobian(t, x)
        return self.jacobian(t, x)

    @property
    def has_running_cost(self) -> bool:
        return self.name != "zero"


@dataclass(frozen=True)
class StepJacobian:
    """Dense one-step factor; equals Id when grad(b+btilde) and grad(sigma) vanish."""

    matrix: np.ndarray


def step_jacobian_batch(problem: SdeProblem, mode: AuxiliaryDriftMode,
                        t: float, x: np.ndarray, dB: np.ndarray, dt: float) -> np.ndarray:
    """One-step factors for a batch of points, shape [B, d, d]."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    d = problem.dim
    jb = mode.combined_drift_jacobian(problem, t, x)
    if not np.all(np.isfinite(jb)):
        i, r, c = np.argwhere(~np.isfinite(jb))[0]
        raise ValueError(
            f"non-finite drift-jacobian entry ({r},{c}) in step factor at t={t} (batch {i})")
    contraction = np.einsum("bijl,bj->bil", problem.diffusion_jacobian(t, x), dB)
    if not np.all(np.isfinite(contraction)):
        i, r, c = np.argwhere(~np.isfinite(contraction))[0]
        raise ValueError(
            f"non-finite diffusion-contraction entry ({r},{c}) in step factor at t={t} (batch {i})")
    return np.eye(d) + jb * dt + contraction


def step_jacobian(problem: SdeProblem, mode: AuxiliaryDriftMode,
                  t: float, x: np.ndarray, dB: np.ndarray, dt: float) -> StepJacobian:
    """One-step factor Id + grad(b+btilde) dt + grad(sigma).dB at a point."""
    x = np.asarray(x, dtype=np.float64).reshape(1, problem.dim)
    dB = np.asarray(dB, dtype=np.float64).reshape(1, problem.dim)
    return StepJacobian(matrix=step_jacobian_batch(problem, mode, t, x, dB, dt)[0])


def transpose_apply(j: StepJacobian, v: np.ndarray) -> np.ndarray:
    """J^T v. The recursion only ever consumes factors through this."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != j.matrix.shape[0]:
        raise ValueError(
            f"dimension mismatch: factor is {j.matrix.shape}, vector has {v.shape}")
    return v @ j.matrix
