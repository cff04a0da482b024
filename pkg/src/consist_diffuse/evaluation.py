"""Similarity scores with frozen random-projection embedders and latent-histogram KL."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .codec import LatentCodec, validate_images
from .numerics import Rng

EMBED_DIM = 32

# embedder seeds for the two image scorers (image-similarity and the second, DINO-like one)
IMAGE_SCORER_SEED = 7001
SECOND_SCORER_SEED = 7002


@dataclass(frozen=True)
class Embedder:
    """Image -> unit vector via a fixed Gaussian projection of ``tanh(gain * (x - 0.5))``."""

    projection: np.ndarray  # (EMBED_DIM, H*W*3)
    gain: float = 2.0

    @classmethod
    def from_seed(cls, seed: int, image_shape=(16, 16, 3), dim: int = EMBED_DIM) -> "Embedder":
        n = int(np.prod(image_shape))
        return cls(Rng(seed).normal((dim, n), 0.0, 1.0 / np.sqrt(n)))

    def embed(self, images: np.ndarray) -> np.ndarray:
        images = validate_images(images)
        single = images.ndim == 3
        flat = np.tanh(self.gain * (images.reshape(1 if single else len(images), -1) - 0.5))
        feats = flat @ self.projection.T
        norms = np.linalg.norm(feats, axis=1, keepdims=True)
        feats = feats / np.where(norms > 0, norms, 1.0)
        return feats[0] if single else feats

    def embed_prompt(self, prototypes: np.ndarray) -> np.ndarray:
        """Prompt feature: the normalised mean feature of the images a token names."""
        feats = self.embed(prototypes)
        mean = np.atleast_2d(feats).mean(axis=0)
        return mean / np.linalg.norm(mean)


def _nonempty(name: str, images: np.ndarray) -> np.ndarray:
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    if images.ndim != 4 or len(images) == 0:
        raise ValueError(f"{name}: need a non-empty set of images")
    return images


def score_image_similarity(generated: np.ndarray, reference: np.ndarray, emb: Embedder) -> float:
    """Mean cosine similarity over every (generated, reference) pair."""
    g = emb.embed(_nonempty("generated", generated))
    r = emb.embed(_nonempty("reference", reference))
    return float(np.mean(g @ r.T))


def score_prompt_similarity(generated: np.ndarray, prompt_feature: np.ndarray, emb: Embedder) -> float:
    """Mean cosine similarity between a prompt feature and each generated image."""
    g = emb.embed(_nonempty("generated", generated))
    p = np.asarray(prompt_feature, dtype=np.float64)
    return float(np.mean(g @ (p / np.linalg.norm(p))))


# -- histograms and KL ------------------------------------------------------------------------

@dataclass(frozen=True)
class HistogramSpec:
    bins: int = 64
    low: float = -4.0
    high: float = 4.0
    smoothing: float = 1e-8

    @property
    def edges(self) -> np.ndarray:
        return np.linspace(self.low, self.high, self.bins + 1)

    @property
    def centers(self) -> np.ndarray:
        e = self.edges
        return 0.5 * (e[:-1] + e[1:])


def histogram(values: np.ndarray, spec: HistogramSpec = HistogramSpec()) -> np.ndarray:
    """Normalised histogram of all values pooled, clamped into range; empty bins get ``smoothing``."""
    v = np.clip(np.asarray(values, dtype=np.float64).ravel(), spec.low, spec.high)
    counts, _ = np.histogram(v, bins=spec.edges)
    return smooth(counts.astype(np.float64), spec.smoothing)


def smooth(counts: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    p = np.asarray(counts, dtype=np.float64)
    p = p / p.sum()
    p = np.where(p > 0, p, eps)
    return p / p.sum()


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """``sum p ln(p / q)`` over bins with ``p > 0``; ``q`` must be positive wherever ``p`` is."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"histograms differ in shape: {p.shape} vs {q.shape}")
    mask = p > 0
    if np.any(q[mask] <= 0):
        raise ValueError("q has empty bins where p has mass; smooth it first")
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def latent_kl(generated: np.ndarray, priors: np.ndarray, codec: LatentCodec,
              spec: HistogramSpec = HistogramSpec()) -> float:
    """KL(generated || priors) between pooled histograms of encoded latent values."""
    zg = codec.encode(_nonempty("generated", generated))
    zp = codec.encode(_nonempty("priors", priors))
    return kl_divergence(histogram(zg, spec), histogram(zp, spec))


def per_dimension_kl(generated: np.ndarray, priors: np.ndarray, codec: LatentCodec,
                     spec: HistogramSpec = HistogramSpec()) -> np.ndarray:
    """One KL value per latent coordinate (supplementary to the pooled metric)."""
    zg = codec.encode(_nonempty("generated", generated))
    zp = codec.encode(_nonempty("priors", priors))
    return np.array([kl_divergence(histogram(zg[:, j], spec), histogram(zp[:, j], spec))
                     for j in range(zg.shape[1])])


def write_histogram(path: str | Path, values: np.ndarray, spec: HistogramSpec = HistogramSpec()) -> None:
    """Two whitespace-separated columns: bin centre and density."""
    p = histogram(values, spec)
    width = (spec.high - spec.low) / spec.bins
    with open(path, "w") as f:
        for c, d in zip(spec.centers, p / width):
            f.write(f"{float(c)!r} {float(d)!r}\n")


# -- study report -----------------------------------------------------------------------------

STUDY_COLUMNS = ["mode", "subject", "seed", "sim_I", "sim_T", "sim_D", "kl"]


@dataclass
class StudyRow:
    mode: str
    subject: str
    seed: int
    sim_I: float
    sim_T: float
    sim_D: float
    kl: float


def score_run(generated: np.ndarray, subject_images: np.ndarray, priors: np.ndarray,
              codec: LatentCodec, emb_i: Embedder, emb_d: Embedder, spec: HistogramSpec = HistogramSpec(),
              ) -> tuple[float, float, float, float]:
    """(sim_I, sim_T, sim_D, kl) for one run's generated images."""
    prompt = emb_i.embed_prompt(subject_images)
    return (
        score_image_similarity(generated, subject_images, emb_i),
        score_prompt_similarity(generated, prompt, emb_i),
        score_image_similarity(generated, subject_images, emb_d),
        latent_kl(generated, priors, codec, spec),
    )


def write_study(path: str | Path, rows: list[StudyRow]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(STUDY_COLUMNS)
        for r in rows:
            w.writerow([r.mode, r.subject, r.seed, repr(r.sim_I), repr(r.sim_T), repr(r.sim_D), repr(r.kl)])


def read_study(path: str | Path) -> list[StudyRow]:
    with open(path, newline="") as f:
        return [
            StudyRow(r["mode"], r["subject"], int(r["seed"]), float(r["sim_I"]), float(r["sim_T"]),
                     float(r["sim_D"]), float(r["kl"]))
            for r in csv.DictReader(f)
        ]


def summarize(rows: list[StudyRow]) -> dict[str, dict[str, float]]:
    """Per-mode medians and means of every score."""
    out: dict[str, dict[str, float]] = {}
    for mode in dict.fromkeys(r.mode for r in rows):
        sel = [r for r in rows if r.mode == mode]
        stats = {"runs": float(len(sel))}
        for key in ("sim_I", "sim_T", "sim_D", "kl"):
            vals = np.array([getattr(r, key) for r in sel])
            stats[f"median_{key}"] = float(np.median(vals))
            stats[f"mean_{key}"] = float(np.mean(vals))
        out[mode] = stats
    return out


def format_summary(summary: dict[str, dict[str, float]]) -> str:
    keys = ["median_sim_I", "median_sim_T", "median_sim_D", "median_kl"]
    lines = [f"{'mode':<20}" + "".join(f"{k:>16}" for k in keys) + f"{'runs':>6}"]
    for mode, s in summary.items():
        lines.append(f"{mode:<20}" + "".join(f"{s[k]:>16.4f}" for k in keys) + f"{int(s['runs']):>6}")
    return "\n".join(lines)
