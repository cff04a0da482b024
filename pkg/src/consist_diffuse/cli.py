"""``consist-diffuse``: command-line entry point for the experiment pipeline.

Phases run in order: make-corpus, pretrain, gen-priors, finetune, sample; then
evaluate (a mode study) or ablate (weight sweeps). Options can come from a flat
TOML file via ``--config``; flags given on the command line win.
"""

from __future__ import annotations

import dataclasses
import logging
import os
import typing
from pathlib import Path

import click
from click.core import ParameterSource

from .lab import ArtifactError, Lab, StudyPlan, read_config
from .trainer import MODES, FinetuneConfig, PretrainConfig, TrainingError

HOME_ENV = "CONSIST_DIFFUSE_HOME"
DEFAULT_HOME = "consist-diffuse-runs"
STUDY_MODES = ["dreambooth", "ours", "cp-only", "cs-only", "additive-ablation"]
ABLATION_GRIDS = {
    "lambda_cp": [0.0, 0.2, 0.5, 1.0],
    "lambda_cs": [0.0, 0.2, 0.5, 0.8],
}


class ListParam(click.ParamType):
    """Comma-separated list (``0,1,2`` or ``0-4`` for ints); also accepts a TOML list."""

    def __init__(self, item=str):
        self.item = item
        self.name = "int-list" if item is int else "list"

    def convert(self, value, param, ctx):
        if isinstance(value, (list, tuple)):
            parts = [str(v) for v in value]
        else:
            parts = [p.strip() for p in str(value).split(",") if p.strip()]
        out = []
        try:
            for p in parts:
                if self.item is int and "-" in p[1:]:
                    lo, hi = p.split("-", 1)
                    out.extend(range(int(lo), int(hi) + 1))
                else:
                    out.append(self.item(p))
        except ValueError:
            self.fail(f"cannot read {value!r} as a list of {self.item.__name__}", param, ctx)
        if not out:
            self.fail("empty list", param, ctx)
        return out


def _finetune_options(f=None, *, with_mode: bool = True):
    """One option per FinetuneConfig field (seed comes from the global flag)."""
    if f is None:
        return lambda g: _finetune_options(g, with_mode=with_mode)
    hints = typing.get_type_hints(FinetuneConfig)
    for fld in reversed(dataclasses.fields(FinetuneConfig)):
        if fld.name == "seed" or (fld.name == "mode" and not with_mode):
            continue
        flag = "--" + fld.name.replace("_", "-")
        if hints[fld.name] is bool:
            f = click.option(f"{flag}/--no-{fld.name.replace('_', '-')}", fld.name, default=fld.default,
                             show_default=True)(f)
        elif fld.name == "mode":
            f = click.option(flag, type=click.Choice(sorted(MODES)), default=fld.default, show_default=True)(f)
        else:
            typ = int if hints[fld.name] is int else float
            f = click.option(flag, fld.name, type=typ, default=fld.default, show_default=True)(f)
    return f


def _finetune_config(seed: int, kw: dict) -> FinetuneConfig:
    names = {f.name for f in dataclasses.fields(FinetuneConfig)}
    try:
        return FinetuneConfig(seed=seed, **{k: v for k, v in kw.items() if k in names})
    except ValueError as e:
        raise click.UsageError(str(e)) from e


def _params_of(cmd: click.Command) -> set[str]:
    return {p.name for p in cmd.params}


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.option("--seed", type=int, default=0, show_default=True, help="Seed for every random stream.")
@click.option("--out", type=click.Path(file_okay=False, path_type=Path), default=None,
              help=f"Artifact root (default: ${HOME_ENV} or ./{DEFAULT_HOME}).")
@click.option("--config", "config_path", type=click.Path(dir_okay=False, path_type=Path), default=None,
              help="Flat TOML file of option values, e.g. a manifest.toml from an earlier run.")
@click.option("--force", is_flag=True, help="Overwrite existing outputs instead of refusing.")
@click.option("--threads", type=click.IntRange(min=1), default=None, help="Limit BLAS threads.")
@click.option("-v", "--verbose", count=True, help="Log progress (repeat for debug output).")
@click.pass_context
def main(ctx, seed, out, config_path, force, threads, verbose):
    """Consistency-regularised fine-tuning lab for a toy latent diffusion model."""
    logging.basicConfig(level=[logging.WARNING, logging.INFO, logging.DEBUG][min(verbose, 2)],
                        format="%(asctime)s %(name)s: %(message)s")
    values = read_config(config_path) if config_path else {}
    if "seed" in values and ctx.get_parameter_source("seed") is ParameterSource.DEFAULT:
        seed = int(values["seed"])
    if out is None:
        out = Path(values.get("out") or os.environ.get(HOME_ENV) or DEFAULT_HOME)
    if threads is None and "threads" in values:
        threads = int(values["threads"])
    if threads is not None:
        from threadpoolctl import threadpool_limits

        threadpool_limits(limits=threads)
    ctx.default_map = {
        name: {k: v for k, v in values.items() if k in _params_of(cmd)} for name, cmd in main.commands.items()
    }
    ctx.obj = {"lab": Lab(Path(out)), "seed": seed, "force": force}


def _run(fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except (ArtifactError, TrainingError) as e:
        raise click.ClickException(str(e)) from e


@main.command("make-corpus")
@click.option("--class-size", type=click.IntRange(min=1), default=512, show_default=True)
@click.option("--subjects", type=click.IntRange(min=1), default=3, show_default=True)
@click.option("--k", type=click.IntRange(min=1), default=4, show_default=True, help="Images per subject.")
@click.pass_obj
def make_corpus_cmd(obj, class_size, subjects, k):
    """Render the class corpus and the subject sets as PPM images."""
    from .lab import build_corpus

    d = _run(build_corpus, obj["lab"], obj["seed"], class_size, subjects, k, obj["force"])
    click.echo(str(d))


@main.command()
@click.option("--pretrain-steps", type=click.IntRange(min=1), default=PretrainConfig.steps, show_default=True)
@click.option("--batch-size", type=click.IntRange(min=1), default=PretrainConfig.batch_size, show_default=True)
@click.option("--pretrain-lr", type=float, default=PretrainConfig.learning_rate, show_default=True)
@click.option("--hidden", type=click.IntRange(min=1), default=PretrainConfig.hidden, show_default=True)
@click.pass_obj
def pretrain(obj, pretrain_steps, batch_size, pretrain_lr, hidden):
    """Calibrate the codec and train the base denoiser on the class corpus."""
    from .lab import run_pretrain

    cfg = PretrainConfig(steps=pretrain_steps, batch_size=batch_size, learning_rate=pretrain_lr,
                         hidden=hidden, seed=obj["seed"])
    click.echo(str(_run(run_pretrain, obj["lab"], cfg, obj["force"])))


@main.command("gen-priors")
@click.option("--subject", required=True)
@click.option("--prior-count", type=click.IntRange(min=1), default=100, show_default=True)
@click.pass_obj
def gen_priors_cmd(obj, subject, prior_count):
    """Sample class images for a subject's class from the frozen base model."""
    from .lab import run_gen_priors

    click.echo(str(_run(run_gen_priors, obj["lab"], subject, obj["seed"], prior_count, obj["force"])))


@main.command("finetune")
@click.option("--subject", required=True)
@click.option("--tag", default=None, help="Run directory name (default: the mode).")
@_finetune_options
@click.pass_obj
def finetune_cmd(obj, subject, tag, **kw):
    """Train an adapter and the [V] row on one subject."""
    from .lab import run_finetune

    cfg = _finetune_config(obj["seed"], kw)
    click.echo(str(_run(run_finetune, obj["lab"], subject, cfg, tag, obj["force"])))


@main.command("sample")
@click.option("--subject", required=True)
@click.option("--tag", "--mode", "tag", default="ours", show_default=True, help="Run to sample from.")
@click.option("--prompts", type=click.IntRange(min=1), default=10, show_default=True)
@click.option("--per-prompt", type=click.IntRange(min=1), default=4, show_default=True)
@click.option("--kl-samples", type=click.IntRange(min=1), default=200, show_default=True)
@click.pass_obj
def sample_cmd(obj, subject, tag, prompts, per_prompt, kl_samples):
    """Generate subject images from a fine-tuned run into its samples/ directories."""
    from .lab import run_sample

    lab, seed = obj["lab"], obj["seed"]
    run = lab.run_dir(tag, subject, seed)
    click.echo(str(_run(run_sample, lab, subject, run, seed, prompts, per_prompt, kl_samples, obj["force"])))


def _study(obj, plan: StudyPlan, out_dir: Path, command: str, options: dict) -> None:
    from .evaluation import format_summary, summarize
    from .lab import run_study

    options = {"seed": obj["seed"], **options}
    rows = _run(run_study, obj["lab"], plan, out_dir, obj["force"], options=options, command=command)
    click.echo(format_summary(summarize(rows)))
    click.echo(f"\nreport: {out_dir / 'study.csv'}")


def _subjects(obj, subjects):
    from .lab import subject_names

    return subjects or _run(subject_names, obj["lab"])


@main.command()
@click.option("--modes", type=ListParam(), default=",".join(STUDY_MODES), show_default=True)
@click.option("--subjects", type=ListParam(), default=None, help="Default: every corpus subject.")
@click.option("--seeds", type=ListParam(int), default="0-4", show_default=True)
@_finetune_options(with_mode=False)
@click.pass_obj
def evaluate(obj, modes, subjects, seeds, **kw):
    """Mode study: train what is missing, sample, and score every (mode, subject, seed)."""
    bad = [m for m in modes if m not in MODES]
    if bad:
        raise click.BadParameter(f"unknown modes {bad}; choose from {sorted(MODES)}", param_hint="--modes")
    subjects = _subjects(obj, subjects)
    plan = StudyPlan.for_modes(modes, subjects, seeds, _finetune_config(seeds[0], kw))
    _study(obj, plan, obj["lab"].root / "study", "evaluate",
           {"modes": modes, "subjects": subjects, "seeds": seeds, **kw})


@main.command()
@click.option("--param", type=click.Choice(["lambda_cp", "lambda_cs", "both"]), default="both", show_default=True)
@click.option("--values", type=ListParam(float), default=None,
              help="Override the grid (needs a single --param).")
@click.option("--subjects", type=ListParam(), default=None, help="Default: every corpus subject.")
@click.option("--seeds", type=ListParam(int), default=None, help="Default: the global --seed.")
@_finetune_options(with_mode=False)
@click.pass_obj
def ablate(obj, param, values, subjects, seeds, **kw):
    """Sweep lambda_cp and/or lambda_cs in mode 'ours'."""
    if values is not None and param == "both":
        raise click.UsageError("--values needs --param lambda_cp or --param lambda_cs")
    params = ["lambda_cp", "lambda_cs"] if param == "both" else [param]
    seeds = seeds or [obj["seed"]]
    subjects = _subjects(obj, subjects)
    for p in params:
        grid = [float(v) for v in (values if values is not None else ABLATION_GRIDS[p])]
        plan = StudyPlan([("ours", {p: v}) for v in grid], subjects, seeds, _finetune_config(seeds[0], kw))
        _study(obj, plan, obj["lab"].root / "ablate" / p, "ablate",
               {"param": p, "values": grid, "subjects": subjects, "seeds": seeds, **kw})


if __name__ == "__main__":
    main()
