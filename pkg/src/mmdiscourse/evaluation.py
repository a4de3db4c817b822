"""Per-class and weighted F1, significance testing, ablations, heatmaps."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .config import RunConfig, canonical_modalities
from .corpus import DatasetSplit, DiscourseLabel, MultimediaPost
from .errors import DiscourseError
from .fusion import ATTENTION, COATTENTION, CONCAT, MULTIHEAD, FusionOutput, STRATEGIES

N_LABELS = len(DiscourseLabel)
ABLATION_TEXT_CAPS = (5, 10, 15, 20)


@dataclass
class EvalReport:
    """Per-class and weighted F1 on a 0-100 scale, plus the confusion matrix.

    Confusion rows are true labels, columns predictions, both in label-code
    order; entries sum to n.
    """

    per_class_f1: dict[DiscourseLabel, float]
    weighted_f1: float
    confusion: np.ndarray
    n: int
    significance: Optional[dict] = None


def confusion_matrix(
    predictions: Sequence[DiscourseLabel], truths: Sequence[DiscourseLabel]
) -> np.ndarray:
    matrix = np.zeros((N_LABELS, N_LABELS), dtype=np.int64)
    for pred, truth in zip(predictions, truths):
        matrix[int(truth), int(pred)] += 1
    return matrix


def _f1_from_confusion(matrix: np.ndarray) -> tuple[list[float], float]:
    """Per-class F1 (0-100) and the support-weighted average.

    F1 is 0 by convention when precision + recall is 0 (class never
    predicted and never true, or disjoint).
    """
    n = int(matrix.sum())
    per_class = []
    weighted = 0.0
    for code in range(N_LABELS):
        tp = int(matrix[code, code])
        fp = int(matrix[:, code].sum()) - tp
        fn = int(matrix[code, :].sum()) - tp
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = (2 * precision * recall / (precision + recall) if precision + recall else 0.0) * 100.0
        per_class.append(f1)
        weighted += (tp + fn) / n * f1
    return per_class, weighted


def f1_report(
    predictions: Sequence[DiscourseLabel], truths: Sequence[DiscourseLabel]
) -> EvalReport:
    if len(predictions) != len(truths):
        raise ValueError(f"{len(predictions)} predictions vs {len(truths)} truths")
    if not truths:
        raise ValueError("cannot score an empty prediction list")
    matrix = confusion_matrix(predictions, truths)
    per_class, weighted = _f1_from_confusion(matrix)
    return EvalReport(
        per_class_f1={DiscourseLabel(code): per_class[code] for code in range(N_LABELS)},
        weighted_f1=weighted,
        confusion=matrix,
        n=len(truths),
    )


def _weighted_f1_of_codes(predictions: np.ndarray, truths: np.ndarray) -> float:
    matrix = np.bincount(
        truths * N_LABELS + predictions, minlength=N_LABELS * N_LABELS
    ).reshape(N_LABELS, N_LABELS)
    return _f1_from_confusion(matrix)[1]


def significance(
    preds_a: Sequence[DiscourseLabel],
    preds_b: Sequence[DiscourseLabel],
    truths: Sequence[DiscourseLabel],
    trials: int = 10000,
    seed: int = 0,
) -> float:
    """Approximate-randomization p-value on the weighted-F1 difference.

    Each trial flips each position between the two prediction lists with
    probability one half; p is the fraction of trials whose absolute score
    difference reaches the observed one. Identical lists give p = 1.0.
    """
    if not (len(preds_a) == len(preds_b) == len(truths)):
        raise ValueError(
            f"length mismatch: {len(preds_a)} / {len(preds_b)} predictions vs {len(truths)} truths"
        )
    if trials < 1000:
        raise ValueError(f"need at least 1000 trials for a stable p-value, got {trials}")
    a = np.array([int(x) for x in preds_a], dtype=np.int64)
    b = np.array([int(x) for x in preds_b], dtype=np.int64)
    t = np.array([int(x) for x in truths], dtype=np.int64)
    observed = abs(_weighted_f1_of_codes(a, t) - _weighted_f1_of_codes(b, t))
    rng = np.random.default_rng(seed)
    hits = 0
    for _ in range(trials):
        flip = rng.random(len(t)) < 0.5
        swapped_a = np.where(flip, b, a)
        swapped_b = np.where(flip, a, b)
        delta = abs(
            _weighted_f1_of_codes(swapped_a, t) - _weighted_f1_of_codes(swapped_b, t)
        )
        if delta >= observed:
            hits += 1
    return hits / trials


@dataclass(frozen=True)
class AblationSpec:
    """One cell of the ablation grid: modality subset, fusion, text cap."""

    modalities: frozenset[str]
    fusion: str = MULTIHEAD
    text_cap: int = 20

    def __post_init__(self):
        if not self.modalities:
            raise ValueError("ablation spec needs a non-empty modality subset")
        unknown = set(self.modalities) - {"text", "image", "caption"}
        if unknown:
            raise ValueError(f"unknown modalities in ablation spec: {sorted(unknown)}")
        if self.fusion not in STRATEGIES:
            raise ValueError(f"unknown fusion strategy '{self.fusion}'")
        if self.text_cap not in ABLATION_TEXT_CAPS:
            raise ValueError(f"text cap must be one of {ABLATION_TEXT_CAPS}, got {self.text_cap}")

    def label(self) -> str:
        if len(self.modalities) == 3:
            name = "full"
        elif len(self.modalities) == 1:
            name = f"{next(iter(self.modalities))}-only"
        else:
            name = canonical_modalities(self.modalities).replace(",", "+")
        if self.fusion != MULTIHEAD:
            name += f"/{self.fusion}"
        if self.text_cap != 20:
            name += f"/cap{self.text_cap}"
        return name


FULL_MODALITIES = frozenset({"text", "image", "caption"})


def modality_grid() -> list[AblationSpec]:
    return [
        AblationSpec(frozenset({"caption"})),
        AblationSpec(frozenset({"image"})),
        AblationSpec(frozenset({"text"})),
        AblationSpec(FULL_MODALITIES),
    ]


def length_grid() -> list[AblationSpec]:
    return [AblationSpec(FULL_MODALITIES, text_cap=cap) for cap in ABLATION_TEXT_CAPS]


def fusion_grid() -> list[AblationSpec]:
    return [
        AblationSpec(FULL_MODALITIES, fusion=strategy)
        for strategy in (CONCAT, ATTENTION, COATTENTION, MULTIHEAD)
    ]


def run_ablation(
    specs: Sequence[AblationSpec],
    posts: Sequence[MultimediaPost],
    split: DatasetSplit,
    base_cfg: RunConfig,
) -> dict[str, EvalReport]:
    """Train one model per spec and score it on the test split.

    Absent modalities enter the model as zero features, so the head input
    dimension is constant across the grid. The full-modality spec runs the
    exact plain-training code path with the base seed.
    """
    from .classifier import predict_posts, run_training

    posts_by_id = {post.id: post for post in posts}
    test_posts = [posts_by_id[i] for i in split.test]
    truths = [post.label for post in test_posts]
    reports: dict[str, EvalReport] = {}
    for spec in specs:
        cfg = replace(
            base_cfg,
            modalities=canonical_modalities(spec.modalities),
            fusion=spec.fusion,
            text_cap=spec.text_cap,
        )
        model, _ = run_training(posts, split, cfg)
        predictions = predict_posts(model, test_posts)
        reports[spec.label()] = f1_report(predictions, truths)
    return reports


def report_record(report: EvalReport) -> dict:
    """Machine-readable record; keys follow the result-table column order."""
    record = {label.file_name: report.per_class_f1[label] for label in DiscourseLabel}
    record["weighted_f1"] = report.weighted_f1
    record["n"] = report.n
    record["confusion"] = report.confusion.tolist()
    if report.significance is not None:
        record["significance"] = report.significance
    return record


def format_report_table(reports: dict[str, EvalReport]) -> str:
    headers = ["run"] + [label.short for label in DiscourseLabel] + ["F1"]
    rows = [headers]
    for name, report in reports.items():
        rows.append(
            [name]
            + [f"{report.per_class_f1[label]:.2f}" for label in DiscourseLabel]
            + [f"{report.weighted_f1:.2f}"]
        )
    widths = [max(len(row[i]) for row in rows) for i in range(len(headers))]
    return "\n".join(
        "  ".join(cell.ljust(w) if i == 0 else cell.rjust(w) for i, (cell, w) in enumerate(zip(row, widths)))
        for row in rows
    )


def _attention_grid(fusion_output: FusionOutput) -> np.ndarray:
    """Per-head image attention as (n_heads, side, side); exact weights."""
    if fusion_output.image_attention is None:
        raise DiscourseError(f"strategy '{fusion_output.strategy}' has no attention weights")
    weights = fusion_output.image_attention.detach().double().cpu().numpy()  # (heads, 1, m)
    n_regions = weights.shape[-1]
    side = math.isqrt(n_regions)
    if side * side != n_regions:
        raise ValueError(f"{n_regions} regions do not form a square grid")
    return weights[:, 0, :].reshape(-1, side, side)


def _write_grid(grid: np.ndarray, path: Path) -> None:
    lines = [" ".join(repr(float(v)) for v in row) for row in grid]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def render_overlay(image: Image.Image, grid: np.ndarray, alpha: float = 0.5) -> Image.Image:
    """Alpha-blend a bilinearly upsampled attention grid onto the image.

    The grid is min-max normalized for rendering only; a flat grid renders
    as a flat overlay.
    """
    spread = grid.max() - grid.min()
    normalized = (grid - grid.min()) / spread if spread > 0 else np.zeros_like(grid)
    heat_small = Image.fromarray((normalized * 255).astype(np.uint8), mode="L")
    heat = np.asarray(heat_small.resize(image.size, Image.BILINEAR), dtype=np.float64) / 255.0
    # cold-to-hot ramp: blue for low attention, red for high
    heat_rgb = np.stack([heat * 255, heat * 40, (1 - heat) * 255], axis=-1)
    base = np.asarray(image, dtype=np.float64)
    blended = np.clip((1 - alpha) * base + alpha * heat_rgb, 0, 255).astype(np.uint8)
    return Image.fromarray(blended)


def export_heatmap(
    post: MultimediaPost,
    fusion_output: FusionOutput,
    out_dir: str | Path,
    per_head: bool = False,
    alpha: float = 0.5,
) -> list[Path]:
    """Write attention grids and an upsampled overlay image.

    Grid files contain the stored attention weights verbatim (row-major,
    space-delimited); the overlay normalizes only for rendering.
    """
    grids = _attention_grid(fusion_output)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    average = grids.mean(axis=0)
    avg_path = out_dir / "attention_avg.txt"
    _write_grid(average, avg_path)
    written.append(avg_path)

    if per_head:
        for index, grid in enumerate(grids, start=1):
            head_path = out_dir / f"attention_head{index}.txt"
            _write_grid(grid, head_path)
            written.append(head_path)

    with Image.open(post.image_path()) as img:
        overlay = render_overlay(img.convert("RGB"), average, alpha=alpha)
    overlay_path = out_dir / "attention_overlay.png"
    overlay.save(overlay_path)
    written.append(overlay_path)
    return written


def dump_attention_weights(post_id: str, fusion_output: FusionOutput, path: str | Path) -> None:
    """Append one {id, strategy, heads} record to a line-delimited dump."""
    if fusion_output.image_attention is None:
        raise DiscourseError(f"strategy '{fusion_output.strategy}' has no attention weights")
    heads = fusion_output.image_attention.detach().cpu().numpy()[:, 0, :]
    record = {
        "id": post_id,
        "strategy": fusion_output.strategy,
        "heads": [[float(v) for v in row] for row in heads],
    }
    with Path(path).open("a", encoding="utf-8") as fh:
        fh.write(json.dumps(record) + "\n")


def load_grid(path: str | Path) -> np.ndarray:
    """Read a grid file written by export_heatmap."""
    rows = [
        [float(token) for token in line.split()]
        for line in Path(path).read_text(encoding="utf-8").splitlines()
        if line.strip()
    ]
    return np.array(rows, dtype=np.float64)
