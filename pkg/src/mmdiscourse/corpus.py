"""Dataset schema, loading, splitting, statistics and quality screening.

The dataset is a UTF-8 file with one JSON record per line. Field names are a
frozen contract: ``id`` (string), ``text`` (string), ``image`` (relative
path), ``caption`` (string or null), ``label`` (lowercase label name or
null). Posts reference their images relative to the dataset file location.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from random import Random
from typing import Mapping, Optional, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DatasetError

DATASET_FIELDS = ("id", "text", "image", "caption", "label")

# Quality flag names. Background screening needs world knowledge and is never
# emitted by quality_screen; it stays a manual annotation category.
PORTRAIT = "Portrait"
BACKGROUND = "Background"
LOW_QUALITY = "LowQuality"
OCR_SUBTITLE = "OcrSubtitle"
QUALITY_FLAGS = (PORTRAIT, BACKGROUND, LOW_QUALITY, OCR_SUBTITLE)

# Calibrated on synthetic probes (uniform fields, rendered text blocks,
# skin-toned patches); see tests/test_corpus.py for the probe images.
LAPLACIAN_VAR_NORM = 200.0
EDGE_GRADIENT_THRESHOLD = 40.0
TEXT_CELL_SIZE = 16
TEXT_CELL_EDGE_FRACTION = 0.08
QUOTE_CHARS = "\"'“”‘’"
DEFAULT_RESOLUTION_FLOOR = 32

DEFAULT_QUALITY_THRESHOLDS = {
    PORTRAIT: 0.5,
    LOW_QUALITY: 0.75,
    OCR_SUBTITLE: 0.3,
}


class DiscourseLabel(IntEnum):
    """Five-way taxonomy of image-text discourse relations.

    The integer codes are stable and used in label files, checkpoints and
    confusion matrices. Entity-level relations (insertion, concretization,
    projection) hinge on a local object; scene-level relations (restatement,
    extension) on the global scene.
    """

    INSERTION = 0
    CONCRETIZATION = 1
    PROJECTION = 2
    RESTATEMENT = 3
    EXTENSION = 4

    @classmethod
    def from_name(cls, name: str) -> "DiscourseLabel":
        try:
            return _LABELS_BY_NAME[name]
        except KeyError:
            raise KeyError(name) from None

    @property
    def file_name(self) -> str:
        return self.name.lower()

    @property
    def short(self) -> str:
        return _SHORT_NAMES[self]


_LABELS_BY_NAME = {label.name.lower(): label for label in DiscourseLabel}
_SHORT_NAMES = {
    DiscourseLabel.INSERTION: "Ins",
    DiscourseLabel.CONCRETIZATION: "Con",
    DiscourseLabel.PROJECTION: "Pro",
    DiscourseLabel.RESTATEMENT: "Res",
    DiscourseLabel.EXTENSION: "Ext",
}


@dataclass
class MultimediaPost:
    """One image-text pair, the unit of all processing."""

    id: str
    text: str
    image_ref: str
    caption: Optional[str] = None
    label: Optional[DiscourseLabel] = None
    root: Optional[Path] = field(default=None, compare=False, repr=False)

    def image_path(self) -> Path:
        path = Path(self.image_ref)
        if not path.is_absolute() and self.root is not None:
            path = self.root / path
        return path


@dataclass
class DatasetSplit:
    """Disjoint train/validation/test id lists covering the whole dataset."""

    train: list[str]
    validation: list[str]
    test: list[str]
    seed: int

    def all_ids(self) -> set[str]:
        return set(self.train) | set(self.validation) | set(self.test)


@dataclass
class CorpusStats:
    """Per-label counts, mean text lengths and length histograms."""

    per_label_counts: dict[DiscourseLabel, int]
    per_label_mean_length: dict[DiscourseLabel, float]
    total_count: int
    total_mean_length: float
    length_histogram: dict[DiscourseLabel, dict[int, int]]
    empty_labels: frozenset[DiscourseLabel]


@dataclass
class QualityVerdict:
    """Automated screening result for one post.

    A flag is present iff its score exceeds the configured threshold. The
    Background flag is never scored here.
    """

    post_id: str
    flags: frozenset[str]
    scores: dict[str, float]


def load_dataset(path: str | Path, require_labels: bool = False) -> list[MultimediaPost]:
    """Read a line-delimited dataset file into posts, in file order.

    Args:
        path: dataset file location; image refs resolve relative to it.
        require_labels: reject records whose label is null.

    Raises:
        DatasetError: on a malformed line, unknown label, duplicate id,
            empty text, or a missing label when require_labels is set.
    """
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"dataset file not found: {path}")
    root = path.parent
    posts: list[MultimediaPost] = []
    seen: set[str] = set()
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"malformed record at line {lineno}: {exc.msg}") from None
            if not isinstance(record, dict):
                raise DatasetError(f"malformed record at line {lineno}: not an object")
            for key in ("id", "text", "image"):
                if not isinstance(record.get(key), str):
                    raise DatasetError(f"malformed record at line {lineno}: missing field '{key}'")
            post_id = record["id"]
            if post_id in seen:
                raise DatasetError(f"duplicate id '{post_id}' at line {lineno}")
            seen.add(post_id)
            text = record["text"]
            if not text.split():
                raise DatasetError(f"empty text for id '{post_id}' at line {lineno}")
            caption = record.get("caption")
            if caption is not None and not isinstance(caption, str):
                raise DatasetError(f"malformed record at line {lineno}: caption must be string or null")
            raw_label = record.get("label")
            label: Optional[DiscourseLabel] = None
            if raw_label is not None:
                try:
                    label = DiscourseLabel.from_name(raw_label)
                except KeyError:
                    raise DatasetError(f"unknown label '{raw_label}' at line {lineno}") from None
            elif require_labels:
                raise DatasetError(f"missing label for id '{post_id}' at line {lineno}")
            posts.append(MultimediaPost(post_id, text, record["image"], caption, label, root=root))
    return posts


def write_dataset(posts: Sequence[MultimediaPost], path: str | Path) -> None:
    """Write posts in the canonical one-record-per-line format."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for post in posts:
            record = {
                "id": post.id,
                "text": post.text,
                "image": post.image_ref,
                "caption": post.caption,
                "label": post.label.file_name if post.label is not None else None,
            }
            fh.write(json.dumps(record, ensure_ascii=False))
            fh.write("\n")


def validate_images(posts: Sequence[MultimediaPost]) -> list[tuple[str, str]]:
    """Eagerly check that every image ref decodes; returns (id, problem) pairs."""
    problems = []
    for post in posts:
        path = post.image_path()
        if not path.exists():
            problems.append((post.id, f"image not found: {path}"))
            continue
        try:
            with Image.open(path) as img:
                img.verify()
        except (UnidentifiedImageError, OSError) as exc:
            problems.append((post.id, f"undecodable image {path}: {exc}"))
    return problems


def make_split(posts: Sequence[MultimediaPost], seed: int) -> DatasetSplit:
    """Split post ids 80/10/10 deterministically.

    The shuffle is keyed on sorted ids, so the same id multiset with the same
    seed yields the identical split regardless of input order. Validation and
    test sizes are floor(n/10) each; remainder posts go to train.
    """
    ids = sorted(post.id for post in posts)
    n = len(ids)
    if n < 10:
        raise DatasetError(f"need at least 10 posts to split, got {n}")
    Random(seed).shuffle(ids)
    n_holdout = n // 10
    n_train = n - 2 * n_holdout
    return DatasetSplit(
        train=ids[:n_train],
        validation=ids[n_train:n_train + n_holdout],
        test=ids[n_train + n_holdout:],
        seed=seed,
    )


def save_split(split: DatasetSplit, path: str | Path) -> None:
    record = {
        "seed": split.seed,
        "train": split.train,
        "validation": split.validation,
        "test": split.test,
    }
    Path(path).write_text(json.dumps(record, indent=2) + "\n", encoding="utf-8")


def load_split(path: str | Path) -> DatasetSplit:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"split file not found: {path}")
    try:
        record = json.loads(path.read_text(encoding="utf-8"))
        return DatasetSplit(
            train=list(record["train"]),
            validation=list(record["validation"]),
            test=list(record["test"]),
            seed=int(record["seed"]),
        )
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"malformed split file {path}: {exc}") from None


def token_length(text: str) -> int:
    """Whitespace-token count, the unit for all corpus length statistics."""
    return len(text.split())


def compute_stats(posts: Sequence[MultimediaPost]) -> CorpusStats:
    """Count posts and average text lengths per label.

    Raises:
        DatasetError: if any post is unlabeled, naming its id.
    """
    counts = {label: 0 for label in DiscourseLabel}
    length_sums = {label: 0 for label in DiscourseLabel}
    histogram: dict[DiscourseLabel, dict[int, int]] = {label: {} for label in DiscourseLabel}
    total_length = 0
    for post in posts:
        if post.label is None:
            raise DatasetError(f"unlabeled post '{post.id}'")
        n_tokens = token_length(post.text)
        counts[post.label] += 1
        length_sums[post.label] += n_tokens
        histogram[post.label][n_tokens] = histogram[post.label].get(n_tokens, 0) + 1
        total_length += n_tokens
    means = {
        label: (length_sums[label] / counts[label]) if counts[label] else 0.0
        for label in DiscourseLabel
    }
    total = len(posts)
    return CorpusStats(
        per_label_counts=counts,
        per_label_mean_length=means,
        total_count=total,
        total_mean_length=(total_length / total) if total else 0.0,
        length_histogram=histogram,
        empty_labels=frozenset(label for label in DiscourseLabel if counts[label] == 0),
    )


def format_stats_table(stats: CorpusStats) -> str:
    """Render counts and mean lengths as a Total + per-label table."""
    headers = ["", "Total"] + [label.short for label in DiscourseLabel]
    num_row = ["Num", str(stats.total_count)] + [
        str(stats.per_label_counts[label]) for label in DiscourseLabel
    ]
    len_row = ["Len", f"{stats.total_mean_length:.2f}"] + [
        f"{stats.per_label_mean_length[label]:.2f}" + (" (empty)" if label in stats.empty_labels else "")
        for label in DiscourseLabel
    ]
    widths = [max(len(row[i]) for row in (headers, num_row, len_row)) for i in range(len(headers))]
    lines = []
    for row in (headers, num_row, len_row):
        lines.append("  ".join(cell.rjust(width) for cell, width in zip(row, widths)))
    return "\n".join(lines)


def stats_record(stats: CorpusStats) -> dict:
    """Machine-readable mirror of the stats table, histograms included."""
    return {
        "total": {"count": stats.total_count, "mean_length": stats.total_mean_length},
        "per_label": {
            label.file_name: {
                "count": stats.per_label_counts[label],
                "mean_length": stats.per_label_mean_length[label],
                "empty": label in stats.empty_labels,
            }
            for label in DiscourseLabel
        },
        "length_histogram": {
            label.file_name: {str(k): v for k, v in sorted(stats.length_histogram[label].items())}
            for label in DiscourseLabel
        },
    }


def agreement(
    labels_a: Mapping[str, DiscourseLabel],
    labels_b: Mapping[str, DiscourseLabel],
) -> float:
    """Raw percent agreement between two annotations of the same id set."""
    ids_a, ids_b = set(labels_a), set(labels_b)
    if ids_a != ids_b:
        difference = sorted(ids_a.symmetric_difference(ids_b))
        raise ValueError(f"label maps cover different ids: {difference}")
    if not labels_a:
        raise ValueError("label maps are empty")
    matches = sum(1 for post_id in labels_a if labels_a[post_id] == labels_b[post_id])
    return matches / len(labels_a)


def quality_screen(
    post: MultimediaPost,
    thresholds: Mapping[str, float],
    resolution_floor: int = DEFAULT_RESOLUTION_FLOOR,
) -> QualityVerdict:
    """Score one post against the automated bad-pair heuristics.

    Scores in [0, 1]:
      * LowQuality: 1 minus normalized variance-of-Laplacian sharpness; an
        image below the resolution floor scores 1.0 outright.
      * OcrSubtitle: fraction of the image area covered by text-like cells.
      * Portrait: mean of skin-tone area fraction and quote-punctuation
        density in the text.

    Background is not scored (needs external knowledge).
    """
    try:
        with Image.open(post.image_path()) as img:
            rgb = np.asarray(img.convert("RGB"), dtype=np.float64)
    except (UnidentifiedImageError, OSError, FileNotFoundError) as exc:
        raise DatasetError(f"undecodable image for post '{post.id}': {exc}") from None
    gray = rgb @ np.array([0.299, 0.587, 0.114])
    scores = {
        LOW_QUALITY: _low_quality_score(gray, resolution_floor),
        OCR_SUBTITLE: _text_coverage(gray),
        PORTRAIT: _portrait_score(rgb, post.text),
    }
    flags = frozenset(
        name for name, score in scores.items()
        if name in thresholds and score > thresholds[name]
    )
    return QualityVerdict(post_id=post.id, flags=flags, scores=scores)


def _low_quality_score(gray: np.ndarray, resolution_floor: int) -> float:
    if min(gray.shape) < resolution_floor:
        return 1.0
    lap = (
        gray[:-2, 1:-1] + gray[2:, 1:-1] + gray[1:-1, :-2] + gray[1:-1, 2:]
        - 4.0 * gray[1:-1, 1:-1]
    )
    sharpness = min(1.0, float(lap.var()) / LAPLACIAN_VAR_NORM)
    return 1.0 - sharpness


def _text_coverage(gray: np.ndarray) -> float:
    """Fraction of the image covered by cells with text-like edge density."""
    h, w = gray.shape
    cell = TEXT_CELL_SIZE
    if h < cell or w < cell:
        return 0.0
    grad_x = np.abs(np.diff(gray, axis=1))
    grad_y = np.abs(np.diff(gray, axis=0))
    edges = np.zeros_like(gray, dtype=bool)
    edges[:, :-1] |= grad_x > EDGE_GRADIENT_THRESHOLD
    edges[:-1, :] |= grad_y > EDGE_GRADIENT_THRESHOLD
    rows, cols = h // cell, w // cell
    trimmed = edges[: rows * cell, : cols * cell]
    per_cell = trimmed.reshape(rows, cell, cols, cell).mean(axis=(1, 3))
    return float((per_cell > TEXT_CELL_EDGE_FRACTION).mean())


def _skin_fraction(rgb: np.ndarray) -> float:
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    spread = rgb.max(axis=-1) - rgb.min(axis=-1)
    mask = (
        (r > 95) & (g > 40) & (b > 20)
        & (r > g) & (r > b)
        & (np.abs(r - g) > 15) & (spread > 15)
    )
    return float(mask.mean())


def _portrait_score(rgb: np.ndarray, text: str) -> float:
    quotes = sum(text.count(ch) for ch in QUOTE_CHARS)
    quote_density = min(1.0, quotes / 4.0)
    return 0.5 * _skin_fraction(rgb) + 0.5 * quote_density
