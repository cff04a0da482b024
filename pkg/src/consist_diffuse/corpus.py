"""Procedural "blob" images: a soft-edged coloured shape on a linear-gradient background.

The class corpus draws every attribute at random. A subject fixes the shape,
colour and size, and varies only its position and the background, so identity
lives in shape/colour while diversity lives in the background.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .numerics import Rng

IMAGE_SIZE = 16
SHAPES = ("disc", "square", "diamond")


@dataclass(frozen=True)
class BlobSpec:
    shape: str
    color: tuple[float, float, float]
    cx: float
    cy: float
    size: float
    bg_start: tuple[float, float, float]
    bg_end: tuple[float, float, float]
    bg_angle: float


@dataclass(frozen=True)
class Subject:
    """One identity: fixed shape, colour and size."""

    name: str
    shape: str
    color: tuple[float, float, float]
    size: float


@dataclass
class Corpus:
    """Class corpus (for pretraining) plus subject sets.

    ``class_images`` has shape (N, H, W, 3) with ``class_labels`` indexing
    ``SHAPES``; ``subjects`` maps subject name to its (K, H, W, 3) image set.
    """

    class_images: np.ndarray
    class_labels: np.ndarray
    subjects: dict[str, np.ndarray] = field(default_factory=dict)
    subject_specs: dict[str, Subject] = field(default_factory=dict)


def _grid(size: int = IMAGE_SIZE) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    return xs, ys


def render(spec: BlobSpec, size: int = IMAGE_SIZE) -> np.ndarray:
    xs, ys = _grid(size)
    c = (size - 1) / 2.0
    ramp = 0.5 + ((xs - c) * np.cos(spec.bg_angle) + (ys - c) * np.sin(spec.bg_angle)) / size
    ramp = np.clip(ramp, 0.0, 1.0)[..., None]
    bg = (1.0 - ramp) * np.asarray(spec.bg_start) + ramp * np.asarray(spec.bg_end)

    dx, dy = xs - spec.cx, ys - spec.cy
    if spec.shape == "disc":
        dist = np.hypot(dx, dy)
    elif spec.shape == "square":
        dist = np.maximum(np.abs(dx), np.abs(dy)) * 1.1
    elif spec.shape == "diamond":
        dist = (np.abs(dx) + np.abs(dy)) / 1.35
    else:
        raise ValueError(f"unknown shape {spec.shape!r}")
    mask = 1.0 / (1.0 + np.exp(-(spec.size - dist) / 0.6))
    img = bg * (1.0 - mask[..., None]) + np.asarray(spec.color) * mask[..., None]
    return np.clip(img, 0.0, 1.0)


def _color(rng: Rng) -> tuple[float, float, float]:
    return tuple(float(v) for v in rng.uniform(0.05, 0.95, 3))


def _background(rng: Rng) -> dict:
    return {
        "bg_start": _color(rng),
        "bg_end": _color(rng),
        "bg_angle": float(rng.uniform(0.0, 2.0 * np.pi)),
    }


def _position(rng: Rng) -> tuple[float, float]:
    lo, hi = 5.0, IMAGE_SIZE - 6.0
    return float(rng.uniform(lo, hi)), float(rng.uniform(lo, hi))


def random_class_spec(rng: Rng, label: int) -> BlobSpec:
    cx, cy = _position(rng)
    return BlobSpec(
        shape=SHAPES[label],
        color=_color(rng),
        cx=cx,
        cy=cy,
        size=float(rng.uniform(2.5, 4.5)),
        **_background(rng),
    )


def make_subject(rng: Rng, name: str) -> Subject:
    return Subject(
        name=name,
        shape=SHAPES[int(rng.integers(0, len(SHAPES)))],
        color=_color(rng),
        size=float(rng.uniform(3.0, 4.5)),
    )


def subject_spec(subject: Subject, rng: Rng) -> BlobSpec:
    cx, cy = _position(rng)
    return BlobSpec(
        shape=subject.shape, color=subject.color, cx=cx, cy=cy, size=subject.size, **_background(rng)
    )


def subject_images(subject: Subject, rng: Rng, k: int) -> np.ndarray:
    return np.stack([render(subject_spec(subject, rng)) for _ in range(k)])


def make_corpus(seed: int, class_size: int = 512, n_subjects: int = 3, k: int = 4) -> Corpus:
    """Deterministic synthetic corpus; independent rng streams per part."""
    root = Rng(seed)
    crng = root.child(1)
    labels = crng.integers(0, len(SHAPES), size=class_size)
    images = np.stack([render(random_class_spec(crng, int(lab))) for lab in labels])
    corpus = Corpus(class_images=images, class_labels=labels.astype(np.int64))
    for i in range(n_subjects):
        srng = root.child(2, i)
        subj = make_subject(srng, f"subject{i:02d}")
        corpus.subject_specs[subj.name] = subj
        corpus.subjects[subj.name] = subject_images(subj, srng, k)
    return corpus


def subject_to_dict(subject: Subject) -> dict:
    return asdict(subject)
