import shutil

import numpy as np
import pytest

from consist_diffuse.corpus import make_corpus
from consist_diffuse.evaluation import read_study
from consist_diffuse.lab import (
    MANIFEST,
    ArtifactError,
    Lab,
    StudyPlan,
    build_corpus,
    load_corpus,
    read_config,
    run_finetune,
    run_gen_priors,
    run_pretrain,
    run_sample,
    run_study,
    run_tag,
    subject_names,
    write_manifest,
)
from consist_diffuse.trainer import FinetuneConfig, PretrainConfig, read_log

TINY = dict(steps=15, prior_count=6)


@pytest.fixture(scope="module")
def seeded_lab(tmp_path_factory):
    lab = Lab(tmp_path_factory.mktemp("lab"))
    build_corpus(lab, seed=5, class_size=48, subjects=2, k=4)
    run_pretrain(lab, PretrainConfig(steps=40, hidden=16, seed=5))
    return lab


@pytest.fixture
def lab(seeded_lab, tmp_path):
    shutil.copytree(seeded_lab.root, tmp_path / "lab")
    return Lab(tmp_path / "lab")


def test_manifest_round_trip_keeps_options_only(tmp_path):
    write_manifest(tmp_path, "finetune", {"subject": "s", "steps": 3, "lora_init_std": None, "seeds": [1, 2]},
                   inputs={"base": tmp_path / "b"}, outputs=["x"])
    assert read_config(tmp_path / MANIFEST) == {"subject": "s", "steps": 3, "seeds": [1, 2]}


def test_missing_config_is_an_artifact_error(tmp_path):
    with pytest.raises(ArtifactError, match="config file not found"):
        read_config(tmp_path / "nope.toml")


def test_corpus_round_trips_through_ppm_within_quantisation(lab):
    stored, fresh = load_corpus(lab), make_corpus(5, class_size=48, n_subjects=2, k=4)
    assert np.max(np.abs(stored.class_images - fresh.class_images)) <= 0.5 / 255 + 1e-12
    np.testing.assert_array_equal(stored.class_labels, fresh.class_labels)
    assert subject_names(lab) == sorted(fresh.subjects)
    assert stored.subject_specs == fresh.subject_specs


def test_existing_outputs_are_not_overwritten_without_force(lab):
    with pytest.raises(ArtifactError, match="--force"):
        build_corpus(lab, seed=5, class_size=48, subjects=2, k=4)
    with pytest.raises(ArtifactError, match="--force"):
        run_pretrain(lab, PretrainConfig(steps=40, hidden=16, seed=5))
    build_corpus(lab, seed=5, class_size=48, subjects=2, k=4, force=True)


def test_missing_inputs_name_the_producing_command(tmp_path, lab):
    with pytest.raises(ArtifactError, match="make-corpus"):
        run_pretrain(Lab(tmp_path / "empty"), PretrainConfig())
    with pytest.raises(ArtifactError, match="gen-priors --subject subject00"):
        run_finetune(lab, "subject00", FinetuneConfig(mode="dreambooth", **TINY))
    with pytest.raises(ArtifactError, match="unknown subject"):
        run_gen_priors(lab, "nobody", 0)


def test_modes_without_prior_terms_need_no_priors(lab):
    run = run_finetune(lab, "subject01", FinetuneConfig(mode="cs-only", **TINY))
    assert (run / "delta.ckpt").exists()
    assert "priors" not in read_config(run / MANIFEST) and len(read_log(run / "train_log.csv")) == 15


def test_run_tag_names_the_sweep():
    cfg = FinetuneConfig(mode="ours")
    assert run_tag(cfg) == "ours"
    assert run_tag(cfg, {"lambda_cs": 0.8}) == "ours_lambda_cs=0.8"


def test_phases_are_bit_reproducible(seeded_lab, tmp_path):
    outputs = []
    for name in ("a", "b"):
        shutil.copytree(seeded_lab.root, tmp_path / name)
        lab = Lab(tmp_path / name)
        run_gen_priors(lab, "subject00", 2, count=6)
        run = run_finetune(lab, "subject00", FinetuneConfig(mode="ours", seed=2, **TINY))
        run_sample(lab, "subject00", run, 2, prompts=2, per_prompt=2, kl_samples=4)
        files = sorted(p for p in lab.root.rglob("*") if p.is_file() and p.name != MANIFEST)
        outputs.append({str(p.relative_to(lab.root)): p.read_bytes() for p in files})
    assert outputs[0] == outputs[1]


def test_study_shares_priors_and_covers_the_grid(lab):
    subjects, seeds = subject_names(lab), [0, 1]
    plan = StudyPlan.for_modes(["dreambooth", "ours", "cs-only"], subjects, seeds, FinetuneConfig(**TINY),
                               prompts=2, per_prompt=2, kl_samples=6)
    rows = run_study(lab, plan, lab.root / "study")
    assert len(rows) == 3 * len(subjects) * len(seeds)
    assert read_study(lab.root / "study" / "study.csv") == rows
    assert len(list((lab.root / "priors").glob("*/seed*/" + MANIFEST))) == len(subjects) * len(seeds)
    stamp = {p: p.stat().st_mtime_ns for p in (lab.root / "priors").rglob("*.ppm")}

    again = run_study(lab, plan, lab.root / "study")
    assert again == rows
    assert stamp == {p: p.stat().st_mtime_ns for p in (lab.root / "priors").rglob("*.ppm")}
    for r in rows:
        assert np.isfinite([r.sim_I, r.sim_T, r.sim_D, r.kl]).all() and r.kl >= 0
        assert (lab.run_dir(r.mode, r.subject, r.seed) / "hist_generated.txt").exists()


def test_sweep_arms_get_their_own_runs(lab):
    plan = StudyPlan([("ours", {"lambda_cp": v}) for v in (0.0, 1.0)], ["subject00"], [0],
                     FinetuneConfig(**TINY), prompts=1, per_prompt=2, kl_samples=4)
    rows = run_study(lab, plan, lab.root / "sweep")
    assert [r.mode for r in rows] == ["ours_lambda_cp=0.0", "ours_lambda_cp=1.0"]
    configs = [read_config(lab.run_dir(r.mode, "subject00", 0) / MANIFEST) for r in rows]
    assert [c["lambda_cp"] for c in configs] == [0.0, 1.0]
