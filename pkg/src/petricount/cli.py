"""Command-line front end: every capability without running the service.

Subcommands: ingest, postprocess, evaluate, search, export (alias:
quantify), synth, serve. Exit codes: 0 success, 1 domain error, 2 usage
error. Reports are written by the same renderers the HTTP service uses, so
for identical inputs and configuration the two produce identical bytes.

Pipeline configuration is resolved per field with this precedence, highest
first: command-line flag, ``PETRICOUNT_<FIELD>`` environment variable, JSON
config file (``--config`` or ``PETRICOUNT_CONFIG``), built-in default.

Dataset arguments accept an interchange JSON file, a directory containing
``dataset.json``, or ``-`` for stdin; report outputs accept a path or ``-``
for stdout.
"""

from __future__ import annotations

import functools
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import click

from .dilution import DilutionFactor, Experiment, TriplicateGroup, aggregate_ci, validate_experiment
from .errors import DomainError
from .geometry import estimate_dish_ellipse
from .metrics import EvalConfig, build_eval_report
from .model import Dataset, ExclusionReason, Split, images_with_unsure, reviewed_counts_by_image
from .pipeline import PostProcConfig, reset_pipeline_marks, run_pipeline
from .reports import render_eval_report, render_quant_report, render_search_result
from .search import SearchSpace, grid_search
from .store import DatasetStore, load_interchange, parse_interchange, save_interchange
from .synth import Perturbation, SynthConfig, generate_case, write_case

ENV_PREFIX = "PETRICOUNT_"

SUMMARY_ORDER = ("kept", "unsure") + tuple(r.value for r in ExclusionReason)


def friendly_errors(fn):
    """Expected failures exit 1 with a plain message, not a traceback."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except click.ClickException:
            raise
        except (DomainError, OSError, json.JSONDecodeError) as exc:
            raise click.ClickException(str(exc)) from exc

    return wrapper


def resolve_postproc_config(config_path=None, overrides=None, env=None) -> PostProcConfig:
    """Merge defaults <- config file <- environment <- flags."""
    import os

    env = os.environ if env is None else env
    merged = PostProcConfig().to_dict()
    path = config_path or env.get(ENV_PREFIX + "CONFIG")
    if path and path not in ("default", "defaults"):
        merged.update(PostProcConfig.from_file(path).to_dict())
    for name in merged:
        raw = env.get(ENV_PREFIX + name.upper())
        if raw is not None:
            try:
                merged[name] = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise DomainError(f"bad value for {ENV_PREFIX}{name.upper()}: {raw!r}") from exc
    for name, value in (overrides or {}).items():
        if value is not None:
            merged[name] = value
    return PostProcConfig.from_dict(merged)


def _load_dataset(path: str, dataset_id: str | None = None) -> Dataset:
    if path == "-":
        try:
            doc = json.load(sys.stdin)
        except json.JSONDecodeError as exc:
            raise DomainError(f"stdin is not valid JSON: {exc}") from exc
        return parse_interchange(doc, dataset_id=dataset_id or "stdin")
    p = Path(path)
    if p.is_dir():
        p = p / "dataset.json"
    return load_interchange(p, dataset_id=dataset_id)


def _write_text(path: str, text: str) -> None:
    if path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _ensure_ellipses(ds: Dataset) -> None:
    """Auto-fit missing dish ellipses from pixel data, or fail naming the image."""
    import numpy as np
    from PIL import Image as PILImage

    for im in ds.images:
        if im.dish_ellipse is not None:
            continue
        if not im.pixel_data_ref:
            raise DomainError(f"image {im.id!r} has no dish ellipse and no pixel data to fit one from")
        try:
            with PILImage.open(im.pixel_data_ref) as img:
                pixels = np.asarray(img.convert("L"), dtype=float)
        except OSError as exc:
            raise DomainError(f"image {im.id!r}: cannot read pixel data: {exc}") from exc
        im.dish_ellipse, _ = estimate_dish_ellipse(pixels)


def _run_pipeline_over(ds: Dataset, cfg: PostProcConfig, jobs: int) -> None:
    def process(im):
        idx = [k for k, inst in enumerate(ds.predictions) if inst.image_id == im.id]
        fresh = reset_pipeline_marks([ds.predictions[k] for k in idx])
        result = run_pipeline(im, fresh, cfg)
        return idx, result.instances

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            chunks = list(pool.map(process, ds.images))
    else:
        chunks = [process(im) for im in ds.images]
    for idx, instances in chunks:
        for k, inst in zip(idx, instances):
            ds.predictions[k] = inst


def _summary_counts(ds: Dataset) -> dict:
    counts = {name: 0 for name in SUMMARY_ORDER}
    for inst in ds.predictions:
        if inst.excluded is None:
            counts["kept"] += 1
            if inst.unsure:
                counts["unsure"] += 1
        else:
            counts[inst.excluded.value] += 1
    return counts


def _config_options(fn):
    decorators = [
        click.option("--config", "config_path", default=None,
                     help="JSON config file; 'default' for built-ins."),
        click.option("--score-threshold", type=float, default=None),
        click.option("--dup-iou-threshold", type=float, default=None),
        click.option("--ellipse-shrink", type=float, default=None),
        click.option("--laplace-ci", type=float, default=None),
        click.option("--min-instances", "min_instances_for_area_filter", type=int, default=None),
    ]
    for dec in reversed(decorators):
        fn = dec(fn)
    return fn


@click.group()
def cli():
    """Colony counting toolkit: filtering, metrics, quantification, review service."""


@cli.command()
@click.argument("source")
@click.option("--data", "data_dir", required=True, type=click.Path(file_okay=False),
              help="Store directory (shared with 'serve').")
@click.option("--id", "dataset_id", default=None, help="Dataset id; defaults to the file stem.")
@friendly_errors
def ingest(source, data_dir, dataset_id):
    """Load an interchange document into a data directory."""
    store = DatasetStore(data_dir)
    if source == "-":
        ds = _load_dataset("-", dataset_id=dataset_id)
        store.create_dataset(ds)
        click.echo(ds.id)
        return
    p = Path(source)
    if p.is_dir():
        p = p / "dataset.json"
    click.echo(store.ingest_file(p, dataset_id=dataset_id))


@cli.command()
@click.option("--in", "src", required=True, help="Dataset to filter.")
@click.option("--out", "dst", default=None, help="Write the filtered dataset here.")
@click.option("--jobs", type=click.IntRange(min=1), default=1,
              help="Images processed in parallel.")
@_config_options
@friendly_errors
def postprocess(src, dst, jobs, config_path, **overrides):
    """Run the four-stage prediction filter and print an exclusion summary."""
    ds = _load_dataset(src)
    cfg = resolve_postproc_config(config_path, overrides)
    _ensure_ellipses(ds)
    _run_pipeline_over(ds, cfg, jobs)
    counts = _summary_counts(ds)
    # keep stdout clean for piping when the dataset itself goes there
    to_err = dst == "-"
    for name in SUMMARY_ORDER:
        click.echo(f"{name:<24} {counts[name]}", err=to_err)
    if dst is not None:
        if dst == "-":
            from .store import canonical_json, dataset_to_interchange

            sys.stdout.write(canonical_json(dataset_to_interchange(ds)) + "\n")
        else:
            out = Path(dst)
            if out.suffix != ".json":
                out.mkdir(parents=True, exist_ok=True)
                out = out / "dataset.json"
            save_interchange(ds, out)


@cli.command()
@click.option("--pred", "pred_src", required=True, help="Dataset holding the predictions.")
@click.option("--gt", "gt_src", default=None,
              help="Dataset holding the ground truth; defaults to --pred.")
@click.option("--format", "fmt", type=click.Choice(["text", "json"]), default="text")
@click.option("--out", default="-", help="Report destination ('-' for stdout).")
@click.option("--map-iou", default=None,
              help="Comma-separated IoU thresholds for mAP (default 0.50:0.05:0.95).")
@click.option("--confusion-iou", type=float, default=None,
              help="Class-agnostic matching threshold for the confusion table.")
@click.option("--pooled", is_flag=True, help="Pool counts across images for MAPE.")
@friendly_errors
def evaluate(pred_src, gt_src, fmt, out, map_iou, confusion_iou, pooled):
    """Score predictions against ground truth and emit the full report."""
    pred_ds = _load_dataset(pred_src)
    gt_ds = pred_ds if gt_src is None else _load_dataset(gt_src)
    if not gt_ds.ground_truth:
        raise DomainError("no ground truth to evaluate against")
    kwargs = {"mape_pooled": pooled}
    if map_iou is not None:
        try:
            kwargs["iou_thresholds"] = tuple(float(t) for t in map_iou.split(","))
        except ValueError as exc:
            raise click.BadParameter(str(exc), param_hint="--map-iou") from exc
    if confusion_iou is not None:
        kwargs["match_iou_for_confusion"] = confusion_iou
    report = build_eval_report(pred_ds.predictions, gt_ds.ground_truth, EvalConfig(**kwargs))
    _write_text(out, render_eval_report(report, fmt))


@cli.command()
@click.option("--in", "src", required=True, help="Dataset with train/val splits and ground truth.")
@click.option("--space", "space_path", default=None, help="JSON file listing values per parameter.")
@click.option("--splits", default="train,val", help="Comma-separated splits to search on.")
@click.option("--format", "fmt", type=click.Choice(["csv", "text", "json"]), default="csv")
@click.option("--out", default="-", help="Result table destination ('-' for stdout).")
@friendly_errors
def search(src, space_path, splits, fmt, out):
    """Grid-search the filter parameters; best config goes to stderr."""
    ds = _load_dataset(src)
    space = SearchSpace.from_file(space_path) if space_path else SearchSpace()
    try:
        split_list = tuple(Split(s.strip()) for s in splits.split(","))
    except ValueError as exc:
        raise click.BadParameter(str(exc), param_hint="--splits") from exc
    result = grid_search(ds, space, splits=split_list)
    _write_text(out, render_search_result(result, fmt))
    best = result.best_config.to_dict()
    summary = "  ".join(f"{k}={best[k]}" for k in sorted(best))
    click.echo(f"best ({result.objective:.4f}): {summary}", err=True)


def _parse_triplicate(raw: str, ds: Dataset):
    factor, sep, ids_raw = raw.partition(":")
    if not sep or not ids_raw:
        raise click.BadParameter(f"expected FACTOR:ID,ID,ID, got {raw!r}",
                                 param_hint="--triplicate")
    try:
        dilution = DilutionFactor(float(factor))
    except ValueError as exc:
        raise click.BadParameter(str(exc), param_hint="--triplicate") from exc
    by_text = {str(im.id): im.id for im in ds.images}
    ids = []
    for token in ids_raw.split(","):
        token = token.strip()
        if token not in by_text:
            raise DomainError(f"unknown image {token!r} in --triplicate")
        ids.append(by_text[token])
    return TriplicateGroup(image_ids=ids, dilution=dilution)


@cli.command("export")
@click.option("--in", "src", required=True, help="Reviewed dataset to quantify.")
@click.option("--experiment-id", default="experiment")
@click.option("--triplicate", "triplicates", multiple=True, required=True,
              help="FACTOR:ID,ID,ID; repeat per dilution group.")
@click.option("--level", type=float, default=0.95, help="Confidence level.")
@click.option("--format", "fmt", type=click.Choice(["csv", "text", "json"]), default="csv")
@click.option("--out", default="-", help="Report destination ('-' for stdout).")
@friendly_errors
def export_cmd(src, experiment_id, triplicates, level, fmt, out):
    """Dilution-corrected concentration estimates with confidence intervals."""
    ds = _load_dataset(src)
    exp = Experiment(id=experiment_id,
                     triplicates=[_parse_triplicate(raw, ds) for raw in triplicates])
    diagnostics = validate_experiment(exp, images_with_unsure(ds))
    blocking = [d for d in diagnostics if d.severity == "error"]
    if blocking:
        raise DomainError("; ".join(str(d) for d in blocking))
    report = aggregate_ci(exp, reviewed_counts_by_image(ds), level)
    _write_text(out, render_quant_report(report, experiment_id, fmt,
                                         warnings=[str(d) for d in diagnostics]))


cli.add_command(export_cmd, name="quantify")


@cli.command()
@click.option("--seed", type=int, default=0)
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--colonies", type=int, default=30)
@click.option("--width", type=int, default=512)
@click.option("--height", type=int, default=512)
@click.option("--drop-rate", type=float, default=0.0)
@click.option("--false-positive-rate", type=float, default=0.0)
@click.option("--jitter", type=float, default=0.0)
@click.option("--score-noise", type=float, default=0.0)
@click.option("--class-flip-rate", type=float, default=0.0)
@click.option("--low-score-rate", type=float, default=0.0)
@click.option("--duplicate-rate", type=float, default=0.0)
@click.option("--border-rate", type=float, default=0.0)
@click.option("--dust-rate", type=float, default=0.0)
@friendly_errors
def synth(seed, out_dir, colonies, width, height, drop_rate, false_positive_rate,
          jitter, score_noise, class_flip_rate, low_score_rate, duplicate_rate,
          border_rate, dust_rate):
    """Generate a self-certified synthetic benchmark case."""
    cfg = SynthConfig(
        seed=seed, width=width, height=height, n_colonies=colonies,
        perturbation=Perturbation(
            drop_rate=drop_rate, false_positive_rate=false_positive_rate,
            jitter_px=jitter, score_noise=score_noise, class_flip_rate=class_flip_rate,
            low_score_rate=low_score_rate, duplicate_rate=duplicate_rate,
            border_rate=border_rate, dust_rate=dust_rate,
        ),
    )
    case = generate_case(cfg)
    write_case(case, out_dir)
    click.echo(f"wrote {out_dir}: {len(case.ground_truth)} colonies, "
               f"{len(case.predictions)} predictions, "
               f"{len(case.planted_violations)} planted violations")


@cli.command()
@click.option("--host", default=None, help="Bind address (default 127.0.0.1).")
@click.option("--port", type=int, default=None, help="Port (default 8000).")
@click.option("--data", "data_dir", default=None, help="Store directory (default ./data).")
@click.option("--config", "config_path", default=None, help="Pipeline config JSON.")
@friendly_errors
def serve(host, port, data_dir, config_path):
    """Run the HTTP review service."""
    import os

    import uvicorn

    from .service import create_app

    env = os.environ
    host = host or env.get(ENV_PREFIX + "HOST") or "127.0.0.1"
    port = port if port is not None else int(env.get(ENV_PREFIX + "PORT") or 8000)
    data_dir = data_dir or env.get(ENV_PREFIX + "DATA") or "data"
    app = create_app(data_dir, resolve_postproc_config(config_path))
    uvicorn.run(app, host=host, port=port, log_level="warning")


def main():
    cli()


if __name__ == "__main__":
    main()
