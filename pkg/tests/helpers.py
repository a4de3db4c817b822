"""Shared test utilities: brute-force oracles, corpus builders, FD gradients.

The oracles here are deliberately written with explicit Python loops and no
matrix library so they stay independent of the implementation under test.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from mmdiscourse.config import RunConfig, make_run_config
from mmdiscourse.corpus import DiscourseLabel


def mat_mul(a: list[list[float]], b: list[list[float]]) -> list[list[float]]:
    rows, inner, cols = len(a), len(b), len(b[0])
    out = [[0.0] * cols for _ in range(rows)]
    for i in range(rows):
        for j in range(cols):
            acc = 0.0
            for t in range(inner):
                acc += a[i][t] * b[t][j]
            out[i][j] = acc
    return out


def attention_oracle(
    q: list[list[float]], k: list[list[float]], v: list[list[float]]
) -> tuple[list[list[float]], list[list[float]]]:
    """Double-loop softmax(QK^T / sqrt(d_k)) V."""
    d_k = len(q[0])
    scale = math.sqrt(d_k)
    outputs, weights = [], []
    for row in q:
        scores = []
        for key_row in k:
            dot = 0.0
            for t in range(d_k):
                dot += row[t] * key_row[t]
            scores.append(dot / scale)
        peak = max(scores)
        exps = [math.exp(s - peak) for s in scores]
        norm = sum(exps)
        w = [e / norm for e in exps]
        weights.append(w)
        out_row = [0.0] * len(v[0])
        for j, weight in enumerate(w):
            for t in range(len(v[0])):
                out_row[t] += weight * v[j][t]
        outputs.append(out_row)
    return outputs, weights


def multi_head_oracle(
    q: list[list[float]],
    k: list[list[float]],
    v: list[list[float]],
    w_query: list[list[list[float]]],
    w_key: list[list[list[float]]],
    w_value: list[list[list[float]]],
    w_out: list[list[float]],
) -> tuple[list[list[float]], list[list[list[float]]]]:
    """Per-head projection + attention_oracle + concatenation + output mix."""
    head_outputs, head_weights = [], []
    for j in range(len(w_query)):
        out_j, weights_j = attention_oracle(
            mat_mul(q, w_query[j]), mat_mul(k, w_key[j]), mat_mul(v, w_value[j])
        )
        head_outputs.append(out_j)
        head_weights.append(weights_j)
    concatenated = [
        [value for head in head_outputs for value in head[i]] for i in range(len(q))
    ]
    return mat_mul(concatenated, w_out), head_weights


def f1_oracle(
    predictions: list[DiscourseLabel], truths: list[DiscourseLabel]
) -> tuple[dict[DiscourseLabel, float], float]:
    """Per-class and weighted F1 (0-100) via direct TP/FP/FN counting."""
    per_class: dict[DiscourseLabel, float] = {}
    weighted = 0.0
    n = len(truths)
    for label in DiscourseLabel:
        tp = fp = fn = 0
        for pred, truth in zip(predictions, truths):
            if pred == label and truth == label:
                tp += 1
            elif pred == label:
                fp += 1
            elif truth == label:
                fn += 1
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = (2 * precision * recall / (precision + recall) if precision + recall else 0.0) * 100.0
        per_class[label] = f1
        weighted += (tp + fn) / n * f1
    return per_class, weighted


def finite_diff_gradient(param: torch.Tensor, loss_fn, step: float = 1e-4) -> torch.Tensor:
    """Central finite differences of loss_fn w.r.t. every element of param."""
    grad = torch.zeros_like(param)
    flat = param.data.view(-1)
    grad_flat = grad.view(-1)
    for index in range(flat.numel()):
        original = flat[index].item()
        flat[index] = original + step
        plus = loss_fn()
        flat[index] = original - step
        minus = loss_fn()
        flat[index] = original
        grad_flat[index] = (plus - minus) / (2 * step)
    return grad


def max_relative_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    diff = (analytic - numeric).abs()
    scale = torch.maximum(analytic.abs(), numeric.abs()).clamp_min(1e-8)
    rel = diff / scale
    # both-tiny entries are indistinguishable from FD noise
    rel[(analytic.abs() < 1e-10) & (numeric.abs() < 1e-10)] = 0.0
    return float(rel.max())


LABEL_TINTS = {
    0: (220, 40, 40),
    1: (40, 220, 40),
    2: (40, 40, 220),
    3: (220, 220, 40),
    4: (220, 40, 220),
}

_FILLER_WORDS = [
    "sun", "dog", "car", "beach", "coffee", "court", "track", "hands",
    "step", "closer", "summer", "gavel",
]


def build_toy_corpus(
    root: Path,
    n_posts: int = 20,
    seed: int = 7,
    with_captions: bool = True,
    learnable: bool = True,
) -> Path:
    """Write a small dataset whose features correlate with the labels.

    Each label gets a signature token and an image tint, so stub features
    are separable and tiny training runs can fit the data.
    """
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    dataset_path = root / "data.jsonl"
    with dataset_path.open("w", encoding="utf-8") as fh:
        for i in range(n_posts):
            label = list(DiscourseLabel)[i % len(DiscourseLabel)]
            image_name = f"img{i:03d}.png"
            tint = np.array(LABEL_TINTS[int(label)], dtype=np.float64)
            if not learnable:
                tint = rng.uniform(0, 255, 3)
            pixels = np.clip(tint + rng.normal(0, 25, (32, 32, 3)), 0, 255).astype(np.uint8)
            Image.fromarray(pixels).save(root / image_name)
            filler = " ".join(rng.choice(_FILLER_WORDS, size=int(rng.integers(3, 8))))
            text = (f"marker{int(label)} " if learnable else "") + filler
            record = {
                "id": f"p{i:03d}",
                "text": text,
                "image": image_name,
                "caption": f"a thing{int(label)} on view" if with_captions else None,
                "label": label.file_name,
            }
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")
    return dataset_path


TOY_OVERRIDES = {
    "hidden_size": 32,
    "grid_side": 2,
    "heads": 2,
    "raw_channels": 32,
    "learning_rate": 0.01,
    "max_epochs": 8,
    "patience": 8,
    "batch_size": 100,
    "seed": 5,
}


def toy_run_config(**overrides) -> RunConfig:
    merged = dict(TOY_OVERRIDES)
    merged.update(overrides)
    return make_run_config(overrides=merged)
