"""Shared problem builders and numerical utilities for the test suite."""

import numpy as np

from ccbridge import SdeProblem


def const_diffusion(dim, scale=1.0):
    base = scale * np.eye(dim) if np.isscalar(scale) else np.asarray(scale, float)

    def diffusion(t, x):
        return np.broadcast_to(base, (x.shape[0], dim, dim)).copy()

    def diffusion_jacobian(t, x):
        return np.zeros((x.shape[0], dim, dim, dim))

    return diffusion, diffusion_jacobian


def ou_problem(dim=1, alpha=2.0, sigma=0.1, x0=0.0, xT=1.0, horizon=1.0):
    """Linear mean-reverting bridge problem dX = -alpha X dt + sigma dB."""
    x0 = np.full(dim, float(x0)) if np.isscalar(x0) else np.asarray(x0, float)
    xT = np.full(dim, float(xT)) if np.isscalar(xT) else np.asarray(xT, float)
    diffusion, diffusion_jacobian = const_diffusion(dim, sigma)
    eye = np.eye(dim)
    return SdeProblem(
        dim=dim, horizon=horizon, x0=x0, xT=xT,
        drift=lambda t, x: -alpha * x,
        diffusion=diffusion,
        drift_jacobian=lambda t, x: np.broadcast_to(-alpha * eye,
                                                    (x.shape[0], dim, dim)).copy(),
        diffusion_jacobian=diffusion_jacobian,
        conservative_drift=True,
        potential=lambda x: 0.5 * alpha * np.sum(np.asarray(x, float) ** 2, axis=-1),
    )


def zero_drift_problem(dim=1, sigma=1.0, x0=0.0, xT=1.0, horizon=1.0):
    x0 = np.full(dim, float(x0)) if np.isscalar(x0) else np.asarray(x0, float)
    xT = np.full(dim, float(xT)) if np.isscalar(xT) else np.asarray(xT, float)
    diffusion, diffusion_jacobian = const_diffusion(dim, sigma)
    return SdeProblem(
        dim=dim, horizon=horizon, x0=x0, xT=xT,
        drift=lambda t, x: np.zeros_like(x),
        diffusion=diffusion,
        drift_jacobian=lambda t, x: np.zeros((x.shape[0], dim, dim)),
        diffusion_jacobian=diffusion_jacobian,
    )


def affine_problem(dim=3, seed=0, horizon=1.0):
    """Dense affine drift Ax + c with a dense constant, well-conditioned sigma."""
    rng = np.random.default_rng(seed)
    A = 0.5 * rng.standard_normal((dim, dim))
    c = rng.standard_normal(dim)
    sig = 0.3 * rng.standard_normal((dim, dim)) + np.eye(dim)
    diffusion, diffusion_jacobian = const_diffusion(dim, sig)
    return SdeProblem(
        dim=dim, horizon=horizon,
        x0=rng.standard_normal(dim), xT=rng.standard_normal(dim),
        drift=lambda t, x: x @ A.T + c,
        diffusion=diffusion,
        drift_jacobian=lambda t, x: np.broadcast_to(A, (x.shape[0], dim, dim)).copy(),
        diffusion_jacobian=diffusion_jacobian,
    )


def statedep_problem(horizon=1.0):
    """d=2 with smooth state-dependent diagonal sigma; exercises grad-sigma terms."""
    dim = 2

    def drift(t, x):
        return np.stack([-x[:, 0] + 0.5 * x[:, 1], np.sin(x[:, 0]) - x[:, 1]], axis=1)

    def drift_jacobian(t, x):
        j = np.zeros((x.shape[0], dim, dim))
        j[:, 0, 0] = -1.0
        j[:, 0, 1] = 0.5
        j[:, 1, 0] = np.cos(x[:, 0])
        j[:, 1, 1] = -1.0
        return j

    def diffusion(t, x):
        s = np.zeros((x.shape[0], dim, dim))
        s[:, 0, 0] = 1.0 + 0.1 * np.sin(x[:, 0])
        s[:, 1, 1] = 1.0 + 0.1 * np.cos(x[:, 1])
        return s

    def diffusion_jacobian(t, x):
        j = np.zeros((x.shape[0], dim, dim, dim))
        j[:, 0, 0, 0] = 0.1 * np.cos(x[:, 0])
        j[:, 1, 1, 1] = -0.1 * np.sin(x[:, 1])
        return j

    return SdeProblem(dim=dim, horizon=horizon, x0=[0.0, 0.5], xT=[1.0, -0.5],
                      drift=drift, diffusion=diffusion,
                      drift_jacobian=drift_jacobian,
                      diffusion_jacobian=diffusion_jacobian)


def sqrt_problem(a=1.0, b=1.0, eps=1.0, x0=2.0, xT=2.0, horizon=1.0):
    """Square-root diffusion dX = a(b - X) dt + eps sqrt(X) dB (d = 1)."""

    def diffusion(t, x):
        return (eps * np.sqrt(np.maximum(x, 0.0)))[:, :, None]

    def diffusion_jacobian(t, x):
        safe = np.maximum(x, 1e-12)
        return (0.5 * eps / np.sqrt(safe))[:, :, None, None]

    return SdeProblem(
        dim=1, horizon=horizon, x0=[x0], xT=[xT],
        drift=lambda t, x: a * (b - x),
        diffusion=diffusion,
        drift_jacobian=lambda t, x: np.full((x.shape[0], 1, 1), -a),
        diffusion_jacobian=diffusion_jacobian,
    )


def perturbed_net(net, scale=0.05, seed=0):
    """In-place random parameter perturbation so the adjustment is nonzero."""
    rng = np.random.default_rng(seed)
    net.theta[:] += scale * rng.standard_normal(net.theta.shape)
    return net


def central_diff(f, x, h):
    """Scalar central difference of a scalar function."""
    return (f(x + h) - f(x - h)) / (2.0 * h)
