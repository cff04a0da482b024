"""Variance-preserving noise schedule, forward noising and the ancestral sampler."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .numerics import Rng, ShapeError, Tensor, add, constant, mul, no_grad

__all__ = [
    "NoiseSchedule",
    "DiffusedLatent",
    "build_schedule",
    "forward_diffuse",
    "sample_timesteps",
    "sample",
    "NoisePredictor",
]


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep coefficients, indexed by ``t`` in ``1..T``.

    ``alpha[t-1]`` scales the clean latent and ``beta[t-1]`` the noise, with
    ``alpha**2 + beta**2 == 1``. ``step_var`` holds the per-step variances the
    cumulative products were built from; the sampler needs them.
    """

    T: int
    alpha: np.ndarray
    beta: np.ndarray
    step_var: np.ndarray

    def alpha_at(self, t):
        return self.alpha[np.asarray(t) - 1]

    def beta_at(self, t):
        return self.beta[np.asarray(t) - 1]

    def check_t(self, t) -> np.ndarray:
        ts = np.asarray(t, dtype=np.int64)
        if ts.size and (ts.min() < 1 or ts.max() > self.T):
            raise ValueError(f"timestep out of range 1..{self.T}: {t}")
        return ts


def build_schedule(T: int = 100, beta_start: float = 1e-4, beta_end: float = 2e-2) -> NoiseSchedule:
    """Linear per-step variances, turned into cumulative signal/noise scales."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got beta_start={beta_start}, beta_end={beta_end}"
        )
    step_var = np.linspace(beta_start, beta_end, T)
    alpha = np.sqrt(np.cumprod(1.0 - step_var))
    beta = np.sqrt(1.0 - alpha * alpha)
    return NoiseSchedule(T=T, alpha=alpha, beta=beta, step_var=step_var)


@dataclass
class DiffusedLatent:
    z_t: Tensor
    t: np.ndarray
    eps: Tensor


def _coeff(values: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # per-item scalar broadcast to the full latent shape
    if values.ndim == 0:
        return np.full(shape, float(values))
    return np.repeat(values[:, None], shape[1], axis=1)


def forward_diffuse(z: Tensor, t, eps: Tensor, sched: NoiseSchedule) -> DiffusedLatent:
    """``z_t = alpha_t * z + beta_t * eps``.

    ``t`` is a single timestep, or one timestep per row when ``z`` is a batch
    of shape ``(n, d)``. Differentiable in ``z``; ``eps`` is a constant.
    """
    if eps.shape != z.shape:
        raise ShapeError(f"forward_diffuse: z shape {z.shape} and eps shape {eps.shape} differ")
    ts = sched.check_t(t)
    if ts.ndim == 1 and (z.ndim != 2 or ts.shape[0] != z.shape[0]):
        raise ShapeError(f"forward_diffuse: {ts.shape[0]} timesteps for latent batch {z.shape}")
    a = constant(_coeff(sched.alpha_at(ts), z.shape))
    b = _coeff(sched.beta_at(ts), z.shape)
    z_t = add(mul(z, a), constant(b * eps.data))
    return DiffusedLatent(z_t=z_t, t=ts, eps=eps if not eps.requires_grad else constant(eps.data))


def sample_timesteps(rng: Rng, n: int, sched: NoiseSchedule) -> np.ndarray:
    """Uniform draw from ``{1..T}``."""
    return rng.integers(1, sched.T + 1, size=n)


class NoisePredictor(Protocol):
    def predict(self, z_t: Tensor, t: np.ndarray, cond) -> Tensor: ...


def sample(model: NoisePredictor, cond, sched: NoiseSchedule, rng: Rng, n: int, dim: int) -> np.ndarray:
    """Ancestral DDPM sampling; returns ``n`` latents of dimension ``dim`` as an (n, dim) array.

    Starts from N(0, I) at ``t = T`` and applies the posterior-mean update with
    the fixed posterior variance at every step; the last step adds no noise.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    x = rng.normal((n, dim))
    abar = sched.alpha**2
    with no_grad():
        for t in range(sched.T, 0, -1):
            ts = np.full(n, t, dtype=np.int64)
            eps_hat = model.predict(constant(x), ts, cond).data
            b = sched.step_var[t - 1]
            mean = (x - (b / sched.beta[t - 1]) * eps_hat) / np.sqrt(1.0 - b)
            if t > 1:
                post_var = b * (1.0 - abar[t - 2]) / (1.0 - abar[t - 1])
                x = mean + np.sqrt(post_var) * rng.normal((n, dim))
            else:
                x = mean
    return x
