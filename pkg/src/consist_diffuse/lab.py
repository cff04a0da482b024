"""On-disk artifact store and the phase functions the CLI drives.

Layout under one root directory::

    corpus/                class/*.ppm, class_labels.csv, subjects/<name>/*.ppm, subjects.json
    base/                  base.ckpt, codec.npz, pretrain_log.csv
    priors/<subject>/seed<k>/          *.ppm
    runs/<tag>/<subject>/seed<k>/      delta.ckpt, train_log.csv, samples/, samples_kl/
    study/ , ablate/<param>/           study.csv, summary.txt

Every artifact directory holds one ``manifest.toml``: the command, the full
option set and upstream paths. Reading it back as ``--config`` re-runs the step.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import tomli
import tomli_w

from . import __version__
from .codec import LatentCodec, read_ppm, write_ppm
from .corpus import SHAPES, Corpus, Subject, make_corpus
from .denoiser import ConditionToken, Denoiser, load_base, load_delta, save_base, save_delta
from .diffusion import NoiseSchedule, build_schedule, sample
from .evaluation import (
    IMAGE_SCORER_SEED,
    SECOND_SCORER_SEED,
    Embedder,
    HistogramSpec,
    StudyRow,
    format_summary,
    latent_kl,
    score_run,
    summarize,
    write_histogram,
    write_study,
)
from .numerics import Rng
from .trainer import FinetuneConfig, PretrainConfig, finetune, generate_priors, pretrain_base, write_log

log = logging.getLogger(__name__)

MANIFEST = "manifest.toml"
# keys written by the tool itself; everything else in a manifest is an option
MANIFEST_META = ("command", "version", "created", "inputs", "outputs")

PROMPTS = 10
IMAGES_PER_PROMPT = 4
KL_SAMPLES = 200
SCHEDULE_STEPS = 100


class ArtifactError(RuntimeError):
    """A required input is missing, or an output exists and overwriting was not requested."""


# -- manifests -----------------------------------------------------------------------------

def write_manifest(directory: Path, command: str, options: dict, inputs: dict | None = None,
                   outputs: list[str] | None = None) -> None:
    doc = {k: v for k, v in options.items() if v is not None}
    doc.update(command=command, version=__version__, created=time.strftime("%Y-%m-%dT%H:%M:%S"))
    doc["inputs"] = {k: str(v) for k, v in (inputs or {}).items()}
    doc["outputs"] = sorted(outputs or [])
    (directory / MANIFEST).write_text(tomli_w.dumps(doc))


def read_config(path: str | Path) -> dict:
    """Option values from a flat TOML file (a manifest or a hand-written config)."""
    path = Path(path)
    if not path.is_file():
        raise ArtifactError(f"config file not found: {path}")
    with open(path, "rb") as f:
        doc = tomli.load(f)
    return {k: v for k, v in doc.items() if k not in MANIFEST_META and not isinstance(v, dict)}


def _prepare(directory: Path, force: bool, marker: str) -> Path:
    if (directory / marker).exists() and not force:
        raise ArtifactError(f"{directory / marker} already exists; pass --force to overwrite")
    directory.mkdir(parents=True, exist_ok=True)
    return directory


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise ArtifactError(f"missing input {path} (run `{hint}` first)")
    return path


# -- the store ---------------------------------------------------------------------------------

@dataclass(frozen=True)
class Lab:
    root: Path

    @property
    def corpus_dir(self) -> Path:
        return self.root / "corpus"

    @property
    def base_dir(self) -> Path:
        return self.root / "base"

    def prior_dir(self, subject: str, seed: int) -> Path:
        return self.root / "priors" / subject / f"seed{seed}"

    def run_dir(self, tag: str, subject: str, seed: int) -> Path:
        return self.root / "runs" / tag / subject / f"seed{seed}"

    @property
    def schedule(self) -> NoiseSchedule:
        return build_schedule(SCHEDULE_STEPS)


# -- corpus ---------------------------------------------------------------------------------------

def write_corpus(lab: Lab, corpus: Corpus, options: dict, force: bool = False) -> Path:
    d = _prepare(lab.corpus_dir, force, "class_labels.csv")
    (d / "class").mkdir(exist_ok=True)
    for i, img in enumerate(corpus.class_images):
        write_ppm(d / "class" / f"{i:05d}.ppm", img)
    with open(d / "class_labels.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["index", "label"])
        for i, lab_ in enumerate(corpus.class_labels):
            w.writerow([i, SHAPES[int(lab_)]])
    specs = {}
    for name, imgs in corpus.subjects.items():
        sd = d / "subjects" / name
        sd.mkdir(parents=True, exist_ok=True)
        for j, img in enumerate(imgs):
            write_ppm(sd / f"{j}.ppm", img)
        s = corpus.subject_specs[name]
        specs[name] = {"shape": s.shape, "color": list(s.color), "size": s.size}
    (d / "subjects.json").write_text(json.dumps(specs, indent=2, sort_keys=True))
    write_manifest(d, "make-corpus", options, outputs=["class/", "class_labels.csv", "subjects/", "subjects.json"])
    return d


def build_corpus(lab: Lab, seed: int, class_size: int, subjects: int, k: int, force: bool = False) -> Path:
    corpus = make_corpus(seed, class_size=class_size, n_subjects=subjects, k=k)
    opts = {"seed": seed, "class_size": class_size, "subjects": subjects, "k": k}
    return write_corpus(lab, corpus, opts, force)


def load_corpus(lab: Lab) -> Corpus:
    d = lab.corpus_dir
    _require(d / "class_labels.csv", "consist-diffuse make-corpus")
    with open(d / "class_labels.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    images = np.stack([read_ppm(d / "class" / f"{int(r['index']):05d}.ppm") for r in rows])
    labels = np.array([SHAPES.index(r["label"]) for r in rows], dtype=np.int64)
    corpus = Corpus(class_images=images, class_labels=labels)
    specs = json.loads((d / "subjects.json").read_text())
    for name in sorted(specs):
        files = sorted((d / "subjects" / name).glob("*.ppm"), key=lambda p: int(p.stem))
        corpus.subjects[name] = np.stack([read_ppm(p) for p in files])
        s = specs[name]
        corpus.subject_specs[name] = Subject(name, s["shape"], tuple(s["color"]), s["size"])
    return corpus


def subject_names(lab: Lab) -> list[str]:
    return sorted(json.loads(_require(lab.corpus_dir / "subjects.json", "consist-diffuse make-corpus").read_text()))


# -- pretraining ------------------------------------------------------------------------------------

def run_pretrain(lab: Lab, config: PretrainConfig, force: bool = False) -> Path:
    corpus = load_corpus(lab)
    d = _prepare(lab.base_dir, force, "base.ckpt")
    codec = LatentCodec.calibrate(corpus.class_images)
    codec.save(d / "codec.npz")
    latents = codec.encode(corpus.class_images)
    result = pretrain_base(latents, corpus.class_labels, list(SHAPES), lab.schedule, config)
    save_base(d / "base.ckpt", result.base)
    with open(d / "pretrain_log.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "loss"])
        for i, v in enumerate(result.losses):
            w.writerow([i, repr(v)])
    log.info("pretrained %d steps, final loss %.4f", config.steps, np.mean(result.losses[-50:]))
    opts = {"seed": config.seed, "pretrain_steps": config.steps, "batch_size": config.batch_size,
            "pretrain_lr": config.learning_rate, "hidden": config.hidden}
    write_manifest(d, "pretrain", opts, inputs={"corpus": lab.corpus_dir},
                   outputs=["base.ckpt", "codec.npz", "pretrain_log.csv"])
    return d


def load_codec(lab: Lab) -> LatentCodec:
    return LatentCodec.load(_require(lab.base_dir / "codec.npz", "consist-diffuse pretrain"))


def load_pretrained(lab: Lab):
    return load_base(_require(lab.base_dir / "base.ckpt", "consist-diffuse pretrain"))


# -- priors ---------------------------------------------------------------------------------------------

def _subject_index(lab: Lab, subject: str) -> int:
    names = subject_names(lab)
    if subject not in names:
        raise ArtifactError(f"unknown subject {subject!r}; corpus has {names}")
    return names.index(subject)


def run_gen_priors(lab: Lab, subject: str, seed: int, count: int = 100, force: bool = False) -> Path:
    corpus = load_corpus(lab)
    base, codec = load_pretrained(lab), load_codec(lab)
    d = _prepare(lab.prior_dir(subject, seed), force, MANIFEST)
    rng = Rng(seed).child(30, _subject_index(lab, subject))
    cls = corpus.subject_specs[subject].shape
    images = generate_priors(base, ConditionToken(cls), count, lab.schedule, rng, codec)
    for i, img in enumerate(images):
        write_ppm(d / f"{i:03d}.ppm", img)
    write_manifest(d, "gen-priors", {"subject": subject, "seed": seed, "prior_count": count, "prompt": cls},
                   inputs={"base": lab.base_dir / "base.ckpt"}, outputs=[f"{i:03d}.ppm" for i in range(count)])
    return d


def _read_images(directory: Path) -> np.ndarray:
    files = sorted(directory.glob("*.ppm"))
    if not files:
        raise ArtifactError(f"no images in {directory}")
    return np.stack([read_ppm(p) for p in files])


def load_priors(lab: Lab, subject: str, seed: int) -> np.ndarray:
    d = lab.prior_dir(subject, seed)
    _require(d / MANIFEST, f"consist-diffuse --seed {seed} gen-priors --subject {subject}")
    return _read_images(d)


# -- fine-tuning and sampling ----------------------------------------------------------------------------

def run_tag(config: FinetuneConfig, overrides: dict | None = None) -> str:
    """Directory name of a run: the mode, plus any swept weight."""
    if not overrides:
        return config.mode
    return config.mode + "".join(f"_{k}={v}" for k, v in sorted(overrides.items()))


def run_finetune(lab: Lab, subject: str, config: FinetuneConfig, tag: str | None = None,
                 force: bool = False) -> Path:
    corpus = load_corpus(lab)
    _subject_index(lab, subject)
    base, codec = load_pretrained(lab), load_codec(lab)
    subject_imgs = corpus.subjects[subject]
    if len(subject_imgs) < config.subject_count:
        raise ArtifactError(f"{subject} has {len(subject_imgs)} images, config wants {config.subject_count}")
    subject_imgs = subject_imgs[: config.subject_count]
    needs_priors = bool(config.active_terms & {"prior", "cp"})
    priors = load_priors(lab, subject, config.seed)[: config.prior_count] if needs_priors else None
    d = _prepare(lab.run_dir(tag or config.mode, subject, config.seed), force, "delta.ckpt")

    before = [p.data.copy() for p in base.leaves()]
    cls = corpus.subject_specs[subject].shape
    result = finetune(base, codec.encode(subject_imgs), None if priors is None else codec.encode(priors),
                      cls, lab.schedule, config)
    if any(b.tobytes() != p.data.tobytes() for b, p in zip(before, base.leaves())):
        raise ArtifactError("self-check failed: fine-tuning modified the base parameters")
    if result.audit_violations:
        raise ArtifactError(f"self-check failed: {result.audit_violations} gradient leaks into the reference")

    save_delta(d / "delta.ckpt", result.delta, result.table)
    write_log(d / "train_log.csv", result.log)
    write_manifest(d, "finetune", {"subject": subject, **config.to_dict()},
                   inputs={"base": lab.base_dir / "base.ckpt",
                           **({"priors": lab.prior_dir(subject, config.seed)} if needs_priors else {})},
                   outputs=["delta.ckpt", "train_log.csv"])
    return d


def _load_model(lab: Lab, run: Path) -> Denoiser:
    base = load_pretrained(lab)
    delta, table = load_delta(_require(run / "delta.ckpt", "consist-diffuse finetune"), base)
    return Denoiser(base, delta, table)


def run_sample(lab: Lab, subject: str, run: Path, seed: int, prompts: int = PROMPTS,
               per_prompt: int = IMAGES_PER_PROMPT, kl_samples: int = KL_SAMPLES, force: bool = False) -> Path:
    """Protocol samples (``prompts`` x ``per_prompt``) plus a larger set for the histogram analysis.

    The toy has no context words, so each prompt is an independent sampling
    stream under the same ``[V] class`` condition.
    """
    corpus = load_corpus(lab)
    _subject_index(lab, subject)
    model, codec = _load_model(lab, run), load_codec(lab)
    cond = ConditionToken(corpus.subject_specs[subject].shape, subject=True)
    out = _prepare(run / "samples", force, "p00_0.ppm")
    for p in range(prompts):
        z = sample(model, cond, lab.schedule, Rng(seed).child(40, p), per_prompt, codec.dim)
        for i, img in enumerate(codec.decode(z)):
            write_ppm(out / f"p{p:02d}_{i}.ppm", img)
    out_kl = _prepare(run / "samples_kl", force, "000.ppm")
    z = sample(model, cond, lab.schedule, Rng(seed).child(41), kl_samples, codec.dim)
    for i, img in enumerate(codec.decode(z)):
        write_ppm(out_kl / f"{i:03d}.ppm", img)
    opts = {"subject": subject, "tag": run.parent.parent.name, "seed": seed, "prompts": prompts,
            "per_prompt": per_prompt, "kl_samples": kl_samples}
    write_manifest(out, "sample", opts, inputs={"run": run / "delta.ckpt"}, outputs=["*.ppm", "../samples_kl/"])
    return run


# -- studies -------------------------------------------------------------------------------------------

@dataclass
class StudyPlan:
    """Arms are ``(mode, overrides)`` pairs; overrides are FinetuneConfig fields recorded in the run tag."""

    arms: list[tuple[str, dict]]
    subjects: list[str]
    seeds: list[int]
    base_config: FinetuneConfig
    prompts: int = PROMPTS
    per_prompt: int = IMAGES_PER_PROMPT
    kl_samples: int = KL_SAMPLES

    @classmethod
    def for_modes(cls, modes: list[str], subjects: list[str], seeds: list[int],
                  base_config: FinetuneConfig | None = None, **kw) -> "StudyPlan":
        return cls([(m, {}) for m in modes], subjects, seeds, base_config or FinetuneConfig(), **kw)


def ensure_priors(lab: Lab, subject: str, seed: int, count: int, force: bool = False) -> Path:
    d = lab.prior_dir(subject, seed)
    if force or not (d / MANIFEST).exists():
        run_gen_priors(lab, subject, seed, count, force=True)
    return d


def ensure_run(lab: Lab, subject: str, config: FinetuneConfig, tag: str, plan: StudyPlan,
               force: bool = False) -> Path:
    """Train and sample a run unless its artifacts are already present."""
    run = lab.run_dir(tag, subject, config.seed)
    if force or not (run / "delta.ckpt").exists():
        run_finetune(lab, subject, config, tag=tag, force=True)
    if force or not (run / "samples_kl").exists():
        run_sample(lab, subject, run, config.seed, plan.prompts, plan.per_prompt, plan.kl_samples, force=True)
    return run


def score_existing(lab: Lab, subject: str, run: Path, seed: int, emb_i: Embedder, emb_d: Embedder,
                   spec: HistogramSpec = HistogramSpec()) -> tuple[float, float, float, float]:
    """Similarities on the protocol samples, KL on the larger histogram set."""
    corpus, codec = load_corpus(lab), load_codec(lab)
    protocol = _read_images(_require(run / "samples", "consist-diffuse sample"))
    for_kl = _read_images(_require(run / "samples_kl", "consist-diffuse sample"))
    subject_imgs = corpus.subjects[subject]
    priors = load_priors(lab, subject, seed)
    si, st, sd, _ = score_run(protocol, subject_imgs, priors, codec, emb_i, emb_d, spec)
    kl = latent_kl(for_kl, priors, codec, spec)
    write_histogram(run / "hist_generated.txt", codec.encode(for_kl), spec)
    return si, st, sd, kl


def run_study(lab: Lab, plan: StudyPlan, out_dir: Path, force: bool = False,
              options: dict | None = None, command: str = "evaluate") -> list[StudyRow]:
    """One row per (arm, subject, seed): train and sample what is missing, then score.

    Priors are cached per (subject, seed) and shared by every arm; they exist
    even for arms that do not train on them, as the KL reference.
    """
    emb_i = Embedder.from_seed(IMAGE_SCORER_SEED)
    emb_d = Embedder.from_seed(SECOND_SCORER_SEED)
    rows = []
    for subject in plan.subjects:
        for seed in plan.seeds:
            ensure_priors(lab, subject, seed, plan.base_config.prior_count, force)
            for mode, overrides in plan.arms:
                cfg = replace(plan.base_config, mode=mode, seed=seed, **overrides)
                tag = run_tag(cfg, overrides)
                run = ensure_run(lab, subject, cfg, tag, plan, force)
                scores = score_existing(lab, subject, run, seed, emb_i, emb_d)
                rows.append(StudyRow(tag, subject, seed, *scores))
                log.info("%s %s seed=%d sim_I=%.4f kl=%.4f", tag, subject, seed, scores[0], scores[3])
    out_dir.mkdir(parents=True, exist_ok=True)
    write_study(out_dir / "study.csv", rows)
    (out_dir / "summary.txt").write_text(format_summary(summarize(rows)) + "\n")
    write_manifest(out_dir, command, options or {}, inputs={"runs": lab.root / "runs"},
                   outputs=["study.csv", "summary.txt"])
    return rows
