"""Pretraining, prior generation and subject fine-tuning."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import numerics as nx
from .codec import LatentCodec
from .denoiser import (
    HIDDEN,
    BaseParams,
    ConditionTable,
    ConditionToken,
    Denoiser,
    LoraDelta,
    init_base,
    init_delta,
    predict_noise,
    trainable_leaves,
)
from .diffusion import NoiseSchedule, forward_diffuse, sample
from .numerics import Rng, ShapeError, Tensor
from .objectives import (
    GradientAudit,
    LossReport,
    LossWeights,
    draw_noise,
    modulation_noise,
    prior_terms,
    subject_terms,
    total_loss,
)

log = logging.getLogger(__name__)

# which loss terms each mode switches on, and the modulation it uses
MODES: dict[str, tuple[frozenset[str], str]] = {
    "dreambooth": (frozenset({"prior"}), "multiplicative"),
    "ours": (frozenset({"cp", "cs"}), "multiplicative"),
    "ours+prior": (frozenset({"prior", "cp", "cs"}), "multiplicative"),
    "cp-only": (frozenset({"cp"}), "multiplicative"),
    "cs-only": (frozenset({"cs"}), "multiplicative"),
    "additive-ablation": (frozenset({"cp", "cs"}), "additive"),
}


class TrainingError(RuntimeError):
    pass


# -- Adam -------------------------------------------------------------------------------

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def for_leaves(cls, leaves: list[Tensor]) -> "AdamState":
        return cls([np.zeros(p.shape) for p in leaves], [np.zeros(p.shape) for p in leaves])


def adam_step(
    leaves: list[Tensor],
    grads: list[np.ndarray | None],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """Bias-corrected Adam; replaces each leaf's data array with the updated one."""
    if len(leaves) != len(grads) or len(leaves) != len(state.m):
        raise ShapeError(f"adam_step: {len(leaves)} leaves, {len(grads)} grads, {len(state.m)} state slots")
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for i, (p, g) in enumerate(zip(leaves, grads)):
        if g is None:
            g = np.zeros(p.shape)
        if g.shape != p.shape or state.m[i].shape != p.shape:
            raise ShapeError(f"adam_step: leaf {i} shape {p.shape}, grad {g.shape}, state {state.m[i].shape}")
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * (g * g)
        p.data = p.data - lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + eps)


# -- configuration ------------------------------------------------------------------------

@dataclass
class FinetuneConfig:
    mode: str = "ours"
    learning_rate: float = 5e-4
    steps: int = 8000
    lora_rank: int = 4
    lora_scaling: float = 1.0
    lora_init_std: float | None = None
    lambda_prior: float = 1.0
    lambda_cp: float = 0.5
    lambda_cs: float = 0.5
    sigma: float = 0.2
    prior_count: int = 100
    subject_count: int = 4
    subject_batch: int = 4
    prior_batch: int = 4
    detach_clean: bool = False
    rare_token_init: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {sorted(MODES)}")
        if self.steps < 0 or self.subject_batch < 1 or self.prior_batch < 1 or self.lora_rank < 1:
            raise ValueError("steps must be >= 0; batch sizes and lora_rank must be >= 1")
        self.weights  # validates the loss weights

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_prior, self.lambda_cp, self.lambda_cs, self.sigma)

    @property
    def active_terms(self) -> frozenset[str]:
        return MODES[self.mode][0]

    @property
    def modulation(self) -> str:
        return MODES[self.mode][1]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "FinetuneConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in values.items() if k in names})


@dataclass
class PretrainConfig:
    steps: int = 6000
    batch_size: int = 64
    learning_rate: float = 2e-3
    hidden: int = HIDDEN
    seed: int = 0


# -- phase 1: pretraining -------------------------------------------------------------------

@dataclass
class PretrainResult:
    base: BaseParams
    losses: list[float] = field(default_factory=list)


def pretrain_base(
    latents: np.ndarray,
    labels: np.ndarray,
    class_names: list[str],
    sched: NoiseSchedule,
    config: PretrainConfig | None = None,
) -> PretrainResult:
    """Fit the conditional denoiser to class latents with the plain noise-prediction loss.

    Returns frozen parameters; the learning rate decays linearly to 10% of its
    initial value over the run.
    """
    config = config or PretrainConfig()
    latents = np.asarray(latents, dtype=np.float64)
    if latents.ndim != 2 or len(latents) == 0:
        raise ValueError("pretraining needs a non-empty (N, d) latent corpus")
    rng = Rng(config.seed).child(10)
    params = init_base(rng.child(0), class_names, latents.shape[1], hidden=config.hidden)
    leaves = params.leaves()
    state = AdamState.for_leaves(leaves)
    losses = []
    n = len(latents)
    for step in range(config.steps):
        srng = rng.child(1, step)
        idx = srng.integers(0, n, size=min(config.batch_size, n))
        draw = draw_noise(srng, len(idx), latents.shape[1], sched)
        conds = [ConditionToken(class_names[int(c)]) for c in labels[idx]]
        noisy = forward_diffuse(nx.constant(latents[idx]), draw.t, nx.constant(draw.eps), sched)
        step_loss = nx.mse(predict_noise(params, None, noisy.z_t, draw.t, conds), noisy.eps)
        nx.backward(step_loss)
        lr = config.learning_rate * (1.0 - 0.9 * step / max(config.steps, 1))
        adam_step(leaves, [p._grad for p in leaves], state, lr)
        nx.zero_grads(leaves)
        losses.append(step_loss.item())
        if not np.isfinite(losses[-1]):
            raise TrainingError(f"non-finite pretraining loss at step {step}")
    return PretrainResult(base=params.frozen(), losses=losses)


# -- phase 2: prior generation -----------------------------------------------------------------

def generate_priors(
    base: BaseParams,
    class_token: ConditionToken,
    count: int,
    sched: NoiseSchedule,
    rng: Rng,
    codec: LatentCodec,
) -> np.ndarray:
    """Sample ``count`` class images from the frozen base model (no adapter involved)."""
    if class_token.subject:
        raise ValueError("priors are generated with the generic class prompt, not the subject token")
    latents = sample(Denoiser(base), class_token, sched, rng, count, base.latent_dim)
    return codec.decode(latents)


# -- phase 3: fine-tuning ------------------------------------------------------------------------

LOG_COLUMNS = ["step", "t_subject", "t_prior", "l_s", "l_prior", "l_cp", "l_cs", "total"]


@dataclass
class FinetuneResult:
    delta: LoraDelta
    table: ConditionTable
    log: list[LossReport]
    audit_violations: int
    audit_checks: int = 0

    def model(self, base: BaseParams) -> Denoiser:
        return Denoiser(base, self.delta, self.table)


def finetune(
    base: BaseParams,
    subject_latents: np.ndarray,
    prior_latents: np.ndarray | None,
    class_name: str,
    sched: NoiseSchedule,
    config: FinetuneConfig,
) -> FinetuneResult:
    """Train a low-rank adapter and the ``[V]`` row on one subject.

    Each step draws one subject minibatch and one prior minibatch. Every item
    gets a single ``(t, eps)`` draw shared by all terms that touch it; the
    subject items also get one fresh modulation draw. Only the adapter factors
    and the ``[V]`` row are updated.
    """
    terms = config.active_terms
    weights = config.weights
    needs_priors = bool(terms & {"prior", "cp"})
    subject_latents = np.asarray(subject_latents, dtype=np.float64)
    if subject_latents.ndim != 2 or len(subject_latents) == 0:
        raise ValueError("fine-tuning needs a non-empty (K, d) subject latent set")
    if needs_priors and (prior_latents is None or len(prior_latents) == 0):
        raise ValueError(f"mode {config.mode!r} needs prior latents")

    rng = Rng(config.seed).child(20)
    delta = init_delta(base, rng.child(0), rank=config.lora_rank, scaling=config.lora_scaling,
                       init_std=config.lora_init_std)
    table = base.conditions.with_subject(rng=rng.child(3)) if config.rare_token_init else base.conditions.with_subject()
    model = Denoiser(base, delta, table)
    leaves = trainable_leaves(delta, table)
    state = AdamState.for_leaves(leaves)
    audit = GradientAudit(base)
    subject_cond = ConditionToken(class_name, subject=True)
    prior_cond = ConditionToken(class_name)
    ref = base if "cp" in terms else None
    dim = subject_latents.shape[1]
    k = len(subject_latents)
    history: list[LossReport] = []

    for step in range(config.steps):
        srng = rng.child(1, step)
        sub_ids = srng.choice(k, config.subject_batch, replace=config.subject_batch > k)
        sub_draw = draw_noise(srng, len(sub_ids), dim, sched)
        mod = None
        if "cs" in terms:
            mod = modulation_noise(srng, (len(sub_ids), dim), config.sigma, config.modulation)
        l_s, l_cs = subject_terms(model, subject_latents[sub_ids], subject_cond, sched, sub_draw, mod,
                                  config.sigma, config.modulation, config.detach_clean)

        l_prior = l_cp = None
        pri_ids = np.array([], dtype=np.int64)
        pri_draw = None
        if needs_priors:
            prng = rng.child(2, step)
            n_p = len(prior_latents)
            pri_ids = prng.choice(n_p, config.prior_batch, replace=config.prior_batch > n_p)
            pri_draw = draw_noise(prng, len(pri_ids), dim, sched)
            l_prior, l_cp = prior_terms(model, ref, prior_latents[pri_ids], prior_cond, sched, pri_draw, audit)
            if "prior" not in terms:
                l_prior = None

        total, report = total_loss(weights, l_s, l_prior, l_cp, l_cs)
        if not np.isfinite(report.total):
            raise TrainingError(f"non-finite loss at step {step}")
        nx.backward(total)
        if audit.check():
            raise TrainingError(f"gradient reached the frozen reference at step {step}")
        adam_step(leaves, [p._grad for p in leaves], state, config.learning_rate)
        nx.zero_grads(leaves)

        report.t_subject = [int(t) for t in sub_draw.t]
        report.t_prior = [int(t) for t in pri_draw.t] if pri_draw is not None else []
        report.subject_ids = [int(i) for i in sub_ids]
        report.prior_ids = [int(i) for i in pri_ids]
        history.append(report)

    return FinetuneResult(delta=delta, table=table, log=history, audit_violations=audit.violations,
                          audit_checks=audit.checks)


def write_log(path: str | Path, history: list[LossReport]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(LOG_COLUMNS)
        for step, r in enumerate(history):
            w.writerow([
                step,
                ";".join(map(str, r.t_subject)),
                ";".join(map(str, r.t_prior)),
                *(repr(v) for v in (r.l_s, r.l_prior, r.l_cp, r.l_cs, r.total)),
            ])


def read_log(path: str | Path) -> list[dict]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    for r in rows:
        for key in ("l_s", "l_prior", "l_cp", "l_cs", "total"):
            r[key] = float(r[key])
        r["step"] = int(r["step"])
    return rows
