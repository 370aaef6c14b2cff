"""Command line: ``iguane phantom|preprocess|normalize|train|harmonize|evaluate``

Exit codes: 0 success, 1 validation or configuration error, 2 some rows failed (the run
continued), 3 internal error.
"""

import sys
from dataclasses import replace
from functools import partial
from pathlib import Path

import click

from iguane import CONFIG
from iguane.blocks import (
    Apply,
    HistogramMatching,
    StandardScale,
    WhiteStripe,
    WriteTo,
    learn_standard_scale,
)
from iguane.blocks.preprocessing import (
    TARGET_DIMS,
    median_normalize,
    preprocess_external,
    to_model_space,
)
from iguane.console_utils import error, info, warning
from iguane.core import Sequence, SequenceParallel, Space
from iguane.errors import ConfigError, IguaneError, ValidationError
from iguane.io import Manifest, load_volume
from iguane.tools import ToolConfig
from iguane.utils import write_run_record

EXIT_OK, EXIT_INVALID, EXIT_PARTIAL, EXIT_INTERNAL = 0, 1, 2, 3


def _load_manifest(path) -> Manifest:
    """Manifest rows, without those a previous command flagged as failed"""
    manifest = Manifest.from_csv(path)
    if "status" in manifest.df.columns:
        manifest = manifest.select(manifest.df["status"] == "ok")
    if len(manifest) == 0:
        raise ValidationError(f"{path}: manifest is empty")
    return manifest


def _load_row(row, loader=load_volume):
    vol = loader(row["path"])
    vol.metadata.update(row)
    return vol


def _run_rows(manifest, blocks, loader, out, workers, show_progress, name):
    """Run ``blocks`` over every manifest row and write the output manifest

    Rows discarded along the way are kept in the output manifest with a ``status`` of
    ``excluded`` or ``failed`` and the discard reason. Returns the number of failed rows.
    """
    outputs = {}
    collect = Apply(lambda vol: outputs.__setitem__(vol.i, vol.output_path))
    rows = [manifest.metadata(i) for i in range(len(manifest))]
    if workers and workers > 1:
        sequence = SequenceParallel([], data_blocks=blocks + [collect], name=name, workers=workers)
    else:
        sequence = Sequence(blocks + [collect], name=name)
    sequence.run(rows, show_progress=show_progress, loader=loader)

    df = manifest.df.copy()
    df["status"], df["reason"] = "ok", ""
    for i in range(len(df)):
        if i in outputs:
            df.loc[i, "path"] = outputs[i]
        else:
            block, reason = sequence.reasons.get(i, ("unknown", ""))
            excluded = reason.startswith("ExclusionError")
            df.loc[i, "status"] = "excluded" if excluded else "failed"
            df.loc[i, "reason"] = reason
    Manifest(df, root=manifest.root).to_csv(Path(out) / "manifest.csv")
    failed = int((df["status"] != "ok").sum())
    if failed:
        warning(f"{failed} of {len(df)} rows were not processed (see the manifest reasons)")
    return failed


@click.group()
@click.option("--quiet", is_flag=True, help="hide progress bars")
@click.option("--log", "log_file", type=click.Path(dir_okay=False), help="also write messages to this file")
@click.pass_context
def cli(ctx, quiet, log_file):
    """IGUANe harmonization of 3D brain MRI"""
    ctx.ensure_object(dict)
    ctx.obj["progress"] = not quiet
    if log_file is not None:
        CONFIG.logs.append(log_file)
        ctx.call_on_close(lambda: CONFIG.logs.remove(log_file))


@cli.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              help="cohort spec (YAML), by default the built-in desk cohort")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--seed", type=int, default=None)
@click.option("--workers", type=int, default=1)
@click.pass_context
def phantom(ctx, config_path, out, seed, workers):
    """Render a synthetic multi-site cohort"""
    from iguane.phantom import CohortSpec, default_cohort_spec, make_cohort

    if config_path is None:
        spec = default_cohort_spec(seed=seed or 0)
    else:
        spec = CohortSpec.from_file(config_path)
        if seed is not None:
            spec = replace(spec, seed=seed)
    manifest = make_cohort(spec, out, workers=workers, show_progress=ctx.obj["progress"])
    info(f"{len(manifest)} volumes written to {out}")
    return EXIT_OK


@cli.command()
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              help="external tools file, by default the one named by IGUANE_TOOLS")
@click.option("--dims", type=int, nargs=3, default=TARGET_DIMS, show_default=True)
@click.option("--workers", type=int, default=1)
@click.pass_context
def preprocess(ctx, manifest_path, out, config_path, dims, workers):
    """Skull-strip, correct, register, crop and median-normalize every row"""
    manifest = _load_manifest(manifest_path)
    tools = ToolConfig.load(config_path) if config_path else ToolConfig.from_env()
    out = Path(out)
    loader = partial(
        _load_row,
        loader=partial(preprocess_external, tool_config=tools, target_dims=tuple(dims),
                       work_dir=out / "intermediate"),
    )
    failed = _run_rows(
        manifest, [WriteTo(out)], loader, out, workers, ctx.obj["progress"], "preprocess"
    )
    write_run_record(out, "preprocess", tools=tools.name, dims=list(dims))
    return EXIT_PARTIAL if failed else EXIT_OK


def _load_preprocessed(path):
    """Load a volume, median-normalizing it if it is still raw"""
    vol = load_volume(path)
    if vol.space == Space.RAW:
        vol = median_normalize(vol)
    return vol


@cli.command()
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--method", type=click.Choice(["hm", "ws"]), required=True)
@click.option("--reference-site", help="site the hm standard scale is learned on")
@click.option("--scale", "scale_path", type=click.Path(exists=True, dir_okay=False),
              help="hm standard scale (CSV) to reuse instead of learning one")
@click.option("--workers", type=int, default=1)
@click.pass_context
def normalize(ctx, manifest_path, out, method, reference_site, scale_path, workers):
    """Histogram-match or WhiteStripe-normalize every row"""
    manifest = _load_manifest(manifest_path)
    out = Path(out)
    extra = {}
    if method == "hm":
        if scale_path is not None:
            scale = StandardScale.from_csv(scale_path)
        elif reference_site is None:
            raise ConfigError("hm needs --reference-site or --scale")
        else:
            reference = manifest.site(reference_site)
            scale = learn_standard_scale(
                [_load_preprocessed(p) for p in reference.paths]
            )
        out.mkdir(parents=True, exist_ok=True)
        scale.to_csv(out / "standard_scale.csv")
        blocks = [HistogramMatching(scale)]
        extra["reference_site"] = reference_site
    else:
        blocks = [WhiteStripe()]
    failed = _run_rows(
        manifest, blocks + [WriteTo(out)], partial(_load_row, loader=_load_preprocessed), out,
        workers, ctx.obj["progress"], "normalize",
    )
    write_run_record(out, "normalize", method=method, **extra)
    return EXIT_PARTIAL if failed else EXIT_OK


@cli.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--seed", type=int, default=None)
@click.option("--resume", is_flag=True, help="continue the run interrupted in --out")
@click.pass_context
def train(ctx, config_path, manifest_path, out, seed, resume):
    """Train the universal generator"""
    from iguane.trainer import TrainingConfig
    from iguane.trainer import train as train_generators

    config = TrainingConfig.from_file(config_path)
    if seed is not None:
        config = replace(config, seed=seed)
    if config.reference_site is None:
        raise ConfigError(f"{config_path}: reference_site is required")

    manifest = _load_manifest(manifest_path)
    cohort = {}
    for i in range(len(manifest)):
        vol = _load_row(manifest.metadata(i), _load_preprocessed)
        if vol.space == Space.PREPROCESSED:
            vol = to_model_space(vol)
        cohort.setdefault(vol.site_id, []).append(vol)
    info(
        "training on "
        + ", ".join(f"{site} ({len(vols)})" for site, vols in cohort.items())
    )

    bundle = train_generators(
        config, cohort, out_dir=out, resume=resume, show_progress=ctx.obj["progress"]
    )
    write_run_record(out, "train", config.config_hash, config.seed, best_epoch=bundle.best_epoch)
    return EXIT_OK


def _find_checkpoint(path) -> Path:
    path = Path(path)
    for candidate in (path, path / "best", path / "last"):
        if (candidate / "bundle.yaml").exists():
            return candidate
    raise ValidationError(f"no checkpoint found in {path}")


@cli.command()
@click.option("--checkpoint", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--workers", type=int, default=1)
@click.pass_context
def harmonize(ctx, checkpoint, manifest_path, out, workers):
    """Translate every row to the reference domain"""
    from iguane.trainer import ModelBundle

    checkpoint = _find_checkpoint(checkpoint)
    bundle = ModelBundle.load(checkpoint)
    manifest = _load_manifest(manifest_path)
    out = Path(out)
    provenance = dict(cfg=bundle.config.config_hash, seed=bundle.config.seed)
    harmonizer = bundle.harmonizer(device=bundle.config.device)
    blocks = [harmonizer, WriteTo(out, provenance=provenance)]
    # the generator stays in the main process
    failed = _run_rows(
        manifest, blocks, partial(_load_row, loader=_load_preprocessed), out, workers,
        ctx.obj["progress"], "harmonize",
    )
    write_run_record(
        out, "harmonize", bundle.config.config_hash, bundle.config.seed,
        checkpoint=str(checkpoint), generator=bundle.gen_fwd.hash,
    )
    return EXIT_PARTIAL if failed else EXIT_OK


@cli.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--seed", type=int, default=None)
@click.pass_context
def evaluate(ctx, config_path, out, seed):
    """Run the analyses of an evaluation spec"""
    from iguane.evaluation import EvaluationSpec
    from iguane.evaluation import evaluate as run_evaluation

    spec = EvaluationSpec.from_file(config_path)
    if seed is not None:
        spec.seed = seed
    run_evaluation(spec, out, show_progress=ctx.obj["progress"])
    return EXIT_OK


def main(args=None) -> int:
    """Entry point mapping outcomes to exit codes"""
    try:
        code = cli.main(args=args, prog_name="iguane", standalone_mode=False)
    except click.exceptions.Abort:
        error("aborted")
        code = EXIT_INVALID
    except click.ClickException as err:
        err.show()
        code = EXIT_INVALID
    except IguaneError as err:
        error(f"{type(err).__name__}: {err}")
        code = err.exit_code
    except FileNotFoundError as err:
        error(str(err))
        code = EXIT_INVALID
    except Exception as err:
        error(f"internal error {type(err).__name__}: {err}")
        code = EXIT_INTERNAL
    # --help returns None
    return EXIT_OK if code is None else int(code)


if __name__ == "__main__":
    sys.exit(main())
