"""Fine-tuning losses and latent noise modulation.

Four squared-error terms act on the adapted model ``f``:

* subject loss   ``|eps - f(z_t, t, [V] c)|^2`` on subject latents;
* prior loss     ``|eps - f(z_t, t, c)|^2`` on prior latents;
* prior consistency ``|f(z_t, t, c) - f_ref(z_t, t, c)|^2`` against the frozen base;
* subject consistency ``|f(z_t, t, [V] c) - f(z'_t, t, [V] c)|^2`` where
  ``z'_t = alpha_t (z * eps_m) + beta_t eps`` reuses the clean branch's ``eps`` and ``t``.

Each loss draws its own ``(t, eps)`` from ``rng`` unless a :class:`NoiseDraw`
is passed, which is how the trainer shares one draw across every term that
touches the same item.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .denoiser import BaseParams, ConditionToken, Denoiser, predict_noise
from .diffusion import DiffusedLatent, NoiseSchedule, forward_diffuse, sample_timesteps
from .numerics import Rng, Tensor

MODULATIONS = ("multiplicative", "additive")


@dataclass(frozen=True)
class LossWeights:
    lambda_prior: float = 1.0
    lambda_cp: float = 0.5
    lambda_cs: float = 0.5
    sigma: float = 0.2

    def __post_init__(self):
        for name in ("lambda_prior", "lambda_cp", "lambda_cs", "sigma"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be a finite non-negative number, got {value}")


@dataclass
class LossReport:
    """Scalar loss values for one step; inactive terms are reported as 0."""

    l_s: float
    l_prior: float
    l_cp: float
    l_cs: float
    total: float
    t_subject: list[int] = field(default_factory=list)
    t_prior: list[int] = field(default_factory=list)
    subject_ids: list[int] = field(default_factory=list)
    prior_ids: list[int] = field(default_factory=list)


@dataclass
class NoiseDraw:
    """One timestep and one diffusion-noise vector per item."""

    t: np.ndarray
    eps: np.ndarray


def draw_noise(rng: Rng, n: int, dim: int, sched: NoiseSchedule) -> NoiseDraw:
    return NoiseDraw(t=sample_timesteps(rng, n, sched), eps=rng.normal((n, dim)))


def _as_batch(batch) -> Tensor:
    z = batch if isinstance(batch, Tensor) else nx.constant(batch)
    if z.ndim == 1:
        z = nx.reshape(z, (1, z.shape[0]))
    if z.shape[0] == 0:
        raise ValueError("empty batch")
    return z


def _check_sigma(sigma: float) -> None:
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")


def modulation_noise(rng: Rng, shape, sigma: float, kind: str = "multiplicative") -> np.ndarray:
    """``N(1, sigma^2)`` factors for multiplicative, ``N(0, sigma^2)`` offsets for additive."""
    _check_sigma(sigma)
    if kind == "multiplicative":
        return rng.normal(shape, 1.0, sigma)
    if kind == "additive":
        return rng.normal(shape, 0.0, sigma)
    raise ValueError(f"unknown modulation {kind!r}; expected one of {MODULATIONS}")


def modulate(z: Tensor, sigma: float, rng: Rng | None = None, eps_m: np.ndarray | None = None) -> Tensor:
    """``z * eps_m`` with ``eps_m ~ N(1, sigma^2 I)`` held constant."""
    _check_sigma(sigma)
    if sigma == 0.0 and eps_m is None:
        return z
    if eps_m is None:
        eps_m = modulation_noise(rng, z.shape, sigma)
    return nx.mul(z, nx.constant(eps_m))


def modulate_additive(z: Tensor, sigma: float, rng: Rng | None = None, eps_a: np.ndarray | None = None) -> Tensor:
    """``z + eps_a`` with ``eps_a ~ N(0, sigma^2 I)``; the ablation counterpart of :func:`modulate`."""
    _check_sigma(sigma)
    if sigma == 0.0 and eps_a is None:
        return z
    if eps_a is None:
        eps_a = modulation_noise(rng, z.shape, sigma, "additive")
    return nx.add(z, nx.constant(eps_a))


def _apply_modulation(z: Tensor, sigma: float, noise: np.ndarray, kind: str) -> Tensor:
    if kind not in MODULATIONS:
        raise ValueError(f"unknown modulation {kind!r}; expected one of {MODULATIONS}")
    if sigma == 0.0:
        return z
    if kind == "multiplicative":
        return modulate(z, sigma, eps_m=noise)
    return modulate_additive(z, sigma, eps_a=noise)


class GradientAudit:
    """Counts gradient leaks into the frozen reference branch or base parameters."""

    def __init__(self, base: BaseParams | None = None):
        self.base_leaves = base.leaves() if base is not None else []
        self.reference_outputs: list[Tensor] = []
        self.violations = 0
        self.checks = 0

    def record_reference(self, pred: Tensor) -> None:
        self.reference_outputs.append(pred)

    def check(self) -> int:
        bad = 0
        for t in self.reference_outputs:
            if t.requires_grad or t._grad is not None or t._parents:
                bad += 1
        for leaf in self.base_leaves:
            if leaf.requires_grad or leaf._grad is not None:
                bad += 1
        self.reference_outputs.clear()
        self.violations += bad
        self.checks += 1
        return bad


# -- fused per-batch terms (used by the trainer) ------------------------------------------

def coupled_latents(
    z: Tensor,
    draw: NoiseDraw,
    sched: NoiseSchedule,
    mod_noise: np.ndarray,
    sigma: float,
    modulation: str = "multiplicative",
) -> tuple[DiffusedLatent, DiffusedLatent]:
    """Clean and modulated diffused latents built from one ``(t, eps)`` draw; both hold the same ``eps`` object."""
    _check_sigma(sigma)
    clean = forward_diffuse(z, draw.t, nx.constant(draw.eps), sched)
    noisy = forward_diffuse(_apply_modulation(z, sigma, mod_noise, modulation), draw.t, clean.eps, sched)
    return clean, noisy


def subject_terms(
    model: Denoiser,
    batch,
    cond: ConditionToken,
    sched: NoiseSchedule,
    draw: NoiseDraw,
    mod_noise: np.ndarray | None = None,
    sigma: float = 0.0,
    modulation: str = "multiplicative",
    detach_clean: bool = False,
) -> tuple[Tensor, Tensor | None]:
    """Subject loss and (when ``mod_noise`` is given) subject consistency from one clean forward pass."""
    z = _as_batch(batch)
    if mod_noise is None:
        clean = forward_diffuse(z, draw.t, nx.constant(draw.eps), sched)
        return nx.mse(model.predict(clean.z_t, draw.t, cond), clean.eps), None
    clean, noisy = coupled_latents(z, draw, sched, mod_noise, sigma, modulation)
    pred = model.predict(clean.z_t, draw.t, cond)
    l_s = nx.mse(pred, clean.eps)
    pred_mod = model.predict(noisy.z_t, draw.t, cond)
    target = nx.constant(pred.data) if detach_clean else pred
    return l_s, nx.mse(target, pred_mod)


def prior_terms(
    model: Denoiser,
    ref: BaseParams | None,
    batch,
    cond: ConditionToken,
    sched: NoiseSchedule,
    draw: NoiseDraw,
    audit: GradientAudit | None = None,
) -> tuple[Tensor, Tensor | None]:
    """Prior loss and (when ``ref`` is given) prior consistency from one adapted forward pass."""
    z = _as_batch(batch)
    noisy = forward_diffuse(z, draw.t, nx.constant(draw.eps), sched)
    pred = model.predict(noisy.z_t, draw.t, cond)
    l_prior = nx.mse(pred, noisy.eps)
    if ref is None:
        return l_prior, None
    with nx.no_grad():
        ref_pred = predict_noise(ref, None, nx.constant(noisy.z_t.data), draw.t, cond)
    if audit is not None:
        audit.record_reference(ref_pred)
    return l_prior, nx.mse(pred, ref_pred)


# -- the four losses as standalone operations ------------------------------------------------

def _draw_for(batch: Tensor, sched: NoiseSchedule, rng: Rng | None, draw: NoiseDraw | None) -> NoiseDraw:
    if draw is not None:
        return draw
    if rng is None:
        raise ValueError("need either rng or an explicit noise draw")
    return draw_noise(rng, batch.shape[0], batch.shape[1], sched)


def loss_s(model: Denoiser, batch, cond: ConditionToken, sched: NoiseSchedule,
           rng: Rng | None = None, draw: NoiseDraw | None = None) -> Tensor:
    z = _as_batch(batch)
    l_s, _ = subject_terms(model, z, cond, sched, _draw_for(z, sched, rng, draw))
    return l_s


def loss_prior(model: Denoiser, batch, cond: ConditionToken, sched: NoiseSchedule,
               rng: Rng | None = None, draw: NoiseDraw | None = None) -> Tensor:
    z = _as_batch(batch)
    l_prior, _ = prior_terms(model, None, z, cond, sched, _draw_for(z, sched, rng, draw))
    return l_prior


def loss_cp(model: Denoiser, ref: BaseParams, batch, cond: ConditionToken, sched: NoiseSchedule,
            rng: Rng | None = None, draw: NoiseDraw | None = None,
            audit: GradientAudit | None = None) -> Tensor:
    z = _as_batch(batch)
    _, l_cp = prior_terms(model, ref, z, cond, sched, _draw_for(z, sched, rng, draw), audit)
    return l_cp


def loss_cs(model: Denoiser, batch, cond: ConditionToken, sigma: float, sched: NoiseSchedule,
            rng: Rng | None = None, draw: NoiseDraw | None = None, mod_noise: np.ndarray | None = None,
            modulation: str = "multiplicative", detach_clean: bool = False) -> Tensor:
    _check_sigma(sigma)
    z = _as_batch(batch)
    draw = _draw_for(z, sched, rng, draw)
    if mod_noise is None:
        if rng is None:
            raise ValueError("need either rng or explicit modulation noise")
        mod_noise = modulation_noise(rng, z.shape, sigma, modulation)
    _, l_cs = subject_terms(model, z, cond, sched, draw, mod_noise, sigma, modulation, detach_clean)
    return l_cs


def total_loss(weights: LossWeights, l_s: Tensor, l_prior: Tensor | None = None,
               l_cp: Tensor | None = None, l_cs: Tensor | None = None) -> tuple[Tensor, LossReport]:
    """Weighted sum over the active (non-``None``) terms, plus its scalar report."""
    total = l_s
    for part, w in ((l_prior, weights.lambda_prior), (l_cp, weights.lambda_cp), (l_cs, weights.lambda_cs)):
        if part is not None:
            total = nx.add(total, nx.scalar_mul(part, w))

    def val(x: Tensor | None) -> float:
        return 0.0 if x is None else x.item()

    report = LossReport(l_s=val(l_s), l_prior=val(l_prior), l_cp=val(l_cp), l_cs=val(l_cs), total=total.item())
    return total, report
