"""Command-line entry point for the discourse classification pipeline.

Exit codes: 0 success, 2 user/input error (lines prefixed ``error:``),
1 internal error. Every command echoes its effective configuration into the
output directory; feeding the echo back via ``--config`` reproduces the run.
"""

from __future__ import annotations

import functools
import json
import sys
from datetime import datetime
from pathlib import Path
from typing import Optional

import click

from .classifier import (
    load_checkpoint,
    predict_posts,
    run_training,
    save_checkpoint,
    write_train_log,
)
from .config import RunConfig, make_run_config, write_config_echo
from .corpus import (
    DiscourseLabel,
    compute_stats,
    format_stats_table,
    load_dataset,
    load_split,
    make_split,
    save_split,
    stats_record,
    validate_images,
)
from .encoders import caption_image, resolve_caption_source
from .errors import DatasetError, DiscourseError, TrainingDivergedError
from .evaluation import (
    dump_attention_weights,
    export_heatmap,
    f1_report,
    format_report_table,
    fusion_grid,
    length_grid,
    modality_grid,
    report_record,
    run_ablation,
    significance,
)

GRID_BUILDERS = {
    "modalities": modality_grid,
    "length": length_grid,
    "fusion": fusion_grid,
}


def guarded(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except DiscourseError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(2)
        except (ValueError, TrainingDivergedError) as exc:
            click.echo(f"error: internal: {exc}", err=True)
            sys.exit(1)
    return wrapper


def config_flags(fn):
    options = [
        click.option("--config", "config_file", default=None, help="Flat key=value config file."),
        click.option("--seed", type=int, default=None),
        click.option("--modalities", default=None, help="Comma list from text,image,caption."),
        click.option(
            "--fusion",
            type=click.Choice(["multihead", "concat", "attention", "coattention"]),
            default=None,
        ),
        click.option("--text-cap", "text_cap", type=click.Choice(["5", "10", "15", "20"]), default=None),
        click.option("--backend-text", "text_backend", default=None),
        click.option("--backend-image", "image_backend", default=None),
        click.option("--backend-caption", "caption_source", default=None),
        click.option("--captions", "captions_file", default=None, help="Precomputed caption file."),
    ]
    for option in reversed(options):
        fn = option(fn)
    return fn


def _config(config_file, **overrides) -> RunConfig:
    return make_run_config(config_file, overrides)


def _out_dir(out: Optional[str], command: str) -> Path:
    if out is None:
        stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
        out = f"runs/{stamp}-{command}"
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_labeled(dataset: str):
    return load_dataset(dataset, require_labels=True)


@click.group()
def main():
    """Classify image-text pairs into five cross-modality discourse labels."""


@main.command("stats")
@click.option("--dataset", required=True)
@click.option("--out", default=None)
@click.option("--config", "config_file", default=None)
@guarded
def cmd_stats(dataset, out, config_file):
    """Print corpus statistics and write the machine-readable record."""
    cfg = _config(config_file)
    posts = _load_labeled(dataset)
    for post_id, problem in validate_images(posts):
        click.echo(f"warning: post '{post_id}': {problem}", err=True)
    stats = compute_stats(posts)
    click.echo(format_stats_table(stats))
    out_path = _out_dir(out, "stats")
    (out_path / "stats.json").write_text(
        json.dumps(stats_record(stats), indent=2) + "\n", encoding="utf-8"
    )
    write_config_echo(cfg, out_path)
    click.echo(f"stats written to {out_path / 'stats.json'}")


@main.command("split")
@click.option("--dataset", required=True)
@click.option("--seed", type=int, default=None)
@click.option("--out", default=None)
@click.option("--config", "config_file", default=None)
@guarded
def cmd_split(dataset, seed, out, config_file):
    """Write a deterministic 80/10/10 split file."""
    cfg = _config(config_file, seed=seed)
    posts = load_dataset(dataset)
    split = make_split(posts, cfg.seed)
    out_path = _out_dir(out, "split")
    split_file = out_path / "split.json"
    save_split(split, split_file)
    write_config_echo(cfg, out_path)
    click.echo(
        f"split sizes train/validation/test: "
        f"{len(split.train)}/{len(split.validation)}/{len(split.test)}"
    )
    click.echo(f"split written to {split_file}")


@main.command("caption")
@click.option("--dataset", required=True)
@click.option("--backend-caption", "caption_source", required=True, help="stub:<seed> or model id.")
@click.option("--out", default=None)
@click.option("--config", "config_file", default=None)
@guarded
def cmd_caption(dataset, caption_source, out, config_file):
    """Precompute captions for every post into a line-delimited file."""
    cfg = _config(config_file, caption_source=caption_source)
    source = resolve_caption_source(cfg.caption_source, cfg.captions_file)
    if source is None or getattr(source, "kind", "") == "precomputed":
        raise DatasetError(
            "caption precomputation needs a generating backend, e.g. --backend-caption stub:42"
        )
    posts = load_dataset(dataset)
    out_path = _out_dir(out, "caption")
    captions_file = out_path / "captions.jsonl"
    with captions_file.open("w", encoding="utf-8") as fh:
        for post in posts:
            caption = caption_image(post, source)
            fh.write(json.dumps({"id": post.id, "caption": caption}, ensure_ascii=False) + "\n")
    write_config_echo(cfg, out_path)
    click.echo(f"{len(posts)} captions written to {captions_file}")


@main.command("train")
@click.option("--dataset", required=True)
@click.option("--split", "split_file", default=None, help="Split file; made from --seed if omitted.")
@click.option("--out", default=None)
@config_flags
@guarded
def cmd_train(dataset, split_file, out, config_file, **overrides):
    """Train the fusion classifier and save the best checkpoint."""
    cfg = _config(config_file, **overrides)
    posts = _load_labeled(dataset)
    out_path = _out_dir(out, "train")
    if split_file is None:
        split = make_split(posts, cfg.seed)
        save_split(split, out_path / "split.json")
    else:
        split = load_split(split_file)
    model, result = run_training(posts, split, cfg)
    save_checkpoint(model, cfg, out_path / "checkpoint.pt", split_seed=split.seed)
    write_train_log(result, out_path / "train_log.jsonl")
    write_config_echo(cfg, out_path)
    for entry in result.log:
        click.echo(
            f"epoch {entry.epoch}: train_loss {entry.train_loss:.4f} "
            f"val_weighted_f1 {entry.val_weighted_f1:.2f}"
        )
    click.echo(f"best epoch {result.best_epoch} (val weighted F1 {result.best_val_f1:.2f})")
    click.echo(f"checkpoint written to {out_path / 'checkpoint.pt'}")


@main.command("eval")
@click.option("--checkpoint", required=True)
@click.option("--dataset", required=True)
@click.option("--split", "split_file", required=True)
@click.option("--compare", "compare_file", default=None, help="Prediction file for significance.")
@click.option("--trials", type=int, default=10000)
@click.option("--out", default=None)
@guarded
def cmd_eval(checkpoint, dataset, split_file, compare_file, trials, out):
    """Score a checkpoint on the test split."""
    model, cfg, _ = load_checkpoint(checkpoint)
    posts = _load_labeled(dataset)
    split = load_split(split_file)
    posts_by_id = {post.id: post for post in posts}
    missing = [i for i in split.test if i not in posts_by_id]
    if missing:
        raise DatasetError(f"split references unknown post ids: {missing[:5]}")
    test_posts = [posts_by_id[i] for i in split.test]
    truths = [post.label for post in test_posts]
    predictions = predict_posts(model, test_posts)
    report = f1_report(predictions, truths)
    if compare_file is not None:
        other = _load_predictions(compare_file, split.test)
        p_value = significance(predictions, other, truths, trials=trials, seed=cfg.seed)
        report.significance = {"baseline": str(compare_file), "p_value": p_value}
    out_path = _out_dir(out, "eval")
    (out_path / "report.json").write_text(
        json.dumps(report_record(report), indent=2) + "\n", encoding="utf-8"
    )
    write_config_echo(cfg, out_path)
    click.echo(format_report_table({"test": report}))
    if report.significance is not None:
        click.echo(f"significance vs {compare_file}: p = {report.significance['p_value']:.4f}")
    click.echo(f"report written to {out_path / 'report.json'}")


def _load_predictions(path: str, test_ids) -> list[DiscourseLabel]:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"prediction file not found: {path}")
    by_id = {}
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                by_id[record["id"]] = DiscourseLabel.from_name(record["label"])
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DatasetError(f"malformed prediction at line {lineno} of {path}: {exc}") from None
    missing = [post_id for post_id in test_ids if post_id not in by_id]
    if missing:
        raise DatasetError(f"prediction file {path} missing test ids: {missing[:5]}")
    return [by_id[post_id] for post_id in test_ids]


@main.command("ablate")
@click.option("--dataset", required=True)
@click.option("--split", "split_file", required=True)
@click.option("--grid", type=click.Choice(sorted(GRID_BUILDERS)), required=True)
@click.option("--out", default=None)
@config_flags
@guarded
def cmd_ablate(dataset, split_file, grid, out, config_file, **overrides):
    """Run an ablation grid (modalities, text length, or fusion strategy)."""
    cfg = _config(config_file, **overrides)
    posts = _load_labeled(dataset)
    split = load_split(split_file)
    specs = GRID_BUILDERS[grid]()
    reports = run_ablation(specs, posts, split, cfg)
    out_path = _out_dir(out, "ablate")
    record = {name: report_record(report) for name, report in reports.items()}
    (out_path / "ablation.json").write_text(json.dumps(record, indent=2) + "\n", encoding="utf-8")
    write_config_echo(cfg, out_path)
    click.echo(format_report_table(reports))
    click.echo(f"ablation table written to {out_path / 'ablation.json'}")


@main.command("visualize")
@click.option("--checkpoint", required=True)
@click.option("--dataset", required=True)
@click.option("--post-id", "post_id", required=True)
@click.option("--per-head", is_flag=True, default=False)
@click.option("--out", default=None)
@guarded
def cmd_visualize(checkpoint, dataset, post_id, per_head, out):
    """Export attention heatmap grids and an overlay for one post."""
    model, cfg, _ = load_checkpoint(checkpoint)
    posts = load_dataset(dataset)
    post = next((p for p in posts if p.id == post_id), None)
    if post is None:
        raise DatasetError(f"post '{post_id}' not found in {dataset}")
    import torch

    with torch.no_grad():
        _, fusion_output = model.forward_post(post)
    out_path = _out_dir(out, "visualize")
    files = export_heatmap(post, fusion_output, out_path, per_head=per_head)
    dump_attention_weights(post.id, fusion_output, out_path / "attention.jsonl")
    write_config_echo(cfg, out_path)
    for file in files:
        click.echo(f"wrote {file}")


if __name__ == "__main__":
    main()
