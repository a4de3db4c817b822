"""Classification head, weighted loss, end-to-end model and training loop."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from random import Random
from typing import Mapping, Optional, Sequence

import torch
from torch import nn

from .config import RunConfig
from .corpus import DatasetSplit, DiscourseLabel, MultimediaPost
from .encoders import (
    EncodedPost,
    ImageFeatures,
    PostEncoder,
    resolve_caption_source,
    resolve_image_backend,
    resolve_text_backend,
)
from .errors import DatasetError, TrainingDivergedError
from .evaluation import f1_report
from .fusion import FusionOutput, ModalityFusion, fuse

N_LABELS = len(DiscourseLabel)
PROBABILITY_FLOOR = 1e-12


class ClassifierHead(nn.Module):
    """One hidden layer with tanh, then a linear map to the five labels."""

    def __init__(self, in_features: int, hidden_size: int):
        super().__init__()
        self.hidden = nn.Linear(in_features, hidden_size)
        self.output = nn.Linear(hidden_size, N_LABELS)

    @property
    def in_features(self) -> int:
        return self.hidden.in_features

    def forward(self, fused: torch.Tensor) -> torch.Tensor:
        return self.output(torch.tanh(self.hidden(fused)))


def predict(fusion_output: FusionOutput, head: ClassifierHead) -> torch.Tensor:
    """Label probabilities for one fused vector; argmax is the prediction."""
    vec = fusion_output.fused
    if vec.shape[-1] != head.in_features:
        raise ValueError(
            f"fused vector dim {vec.shape[-1]} != head input dim {head.in_features}"
        )
    return torch.softmax(head(vec), dim=-1)


def class_weights(counts: Mapping[DiscourseLabel, int]) -> torch.Tensor:
    """Inverse-frequency weights w_c = N / (K * N_c), all-ones when balanced."""
    for label in DiscourseLabel:
        if counts.get(label, 0) <= 0:
            raise ValueError(f"label '{label.file_name}' has zero count, weight undefined")
    total = sum(counts[label] for label in DiscourseLabel)
    return torch.tensor(
        [total / (N_LABELS * counts[label]) for label in DiscourseLabel],
        dtype=torch.float32,
    )


def weighted_cross_entropy(
    probs: torch.Tensor, labels: torch.Tensor, weights: torch.Tensor
) -> torch.Tensor:
    """Weighted mean of -w_y * log p[y], normalized by the batch weight sum.

    The normalization makes the loss invariant to uniform scaling of the
    class weights. Probabilities are floored at 1e-12, never NaN.
    """
    if probs.shape[0] != labels.shape[0]:
        raise ValueError(f"batch size mismatch: {probs.shape[0]} probs vs {labels.shape[0]} labels")
    picked = probs[torch.arange(probs.shape[0]), labels].clamp_min(PROBABILITY_FLOOR)
    batch_weights = weights.to(probs.dtype)[labels]
    return -(batch_weights * picked.log()).sum() / batch_weights.sum()


class DiscourseModel(nn.Module):
    """Encoders, image projection, modality fusion and MLP head, end to end.

    Backends live in the PostEncoder; when a pretrained backend is trainable
    its module is registered here so the optimizer updates it.
    """

    def __init__(self, encoder: PostEncoder, *, model_dim: int, n_heads: int, strategy: str):
        super().__init__()
        self.encoder = encoder
        self.strategy = strategy
        self.image_projection = nn.Linear(encoder.image_backend.raw_channels, model_dim)
        self.fusion = ModalityFusion(model_dim, n_heads)
        self.head = ClassifierHead(3 * model_dim, model_dim)
        for name, backend in (("text", encoder.text_backend), ("image", encoder.image_backend)):
            if getattr(backend, "trainable", False) and backend.kind == "pretrained":
                backend._ensure_loaded()
                self.add_module(f"{name}_backend_module", backend.module)

    def encode(self, post: MultimediaPost) -> EncodedPost:
        return self.encoder.encode(post)

    def forward(self, encoded: EncodedPost) -> tuple[torch.Tensor, FusionOutput]:
        regions = self.image_projection(encoded.image_regions)
        image = ImageFeatures(regions=regions, grid_side=encoded.grid_side)
        fused = fuse(encoded.text, image, encoded.caption, self.strategy, self.fusion)
        fused = self._mask_absent_modalities(fused)
        probs = torch.softmax(self.head(fused.fused), dim=-1)
        return probs, fused

    def _mask_absent_modalities(self, fused: FusionOutput) -> FusionOutput:
        """Replace branches of disabled modalities with zero vectors."""
        modalities = self.encoder.modalities
        if len(modalities) == 3:
            return fused
        branches = {
            "caption": fused.attended_caption,
            "text": fused.attended_text,
            "image": fused.attended_image,
        }
        for name, branch in branches.items():
            if name not in modalities:
                branches[name] = torch.zeros_like(branch)
        return replace(
            fused,
            fused=torch.cat([branches["caption"], branches["text"], branches["image"]]),
            attended_caption=branches["caption"],
            attended_text=branches["text"],
            attended_image=branches["image"],
        )

    def forward_post(self, post: MultimediaPost) -> tuple[torch.Tensor, FusionOutput]:
        return self(self.encode(post))


@dataclass
class TrainConfig:
    batch_size: int = 100
    learning_rate: float = 5e-5
    max_epochs: int = 20
    patience: int = 5
    seed: int = 42
    class_weights: Optional[torch.Tensor] = None

    def __post_init__(self):
        if self.class_weights is not None and not bool((self.class_weights > 0).all()):
            raise ValueError("class weights must be strictly positive")


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_weighted_f1: float
    val_per_class_f1: dict[str, float]


@dataclass
class TrainResult:
    log: list[EpochLog] = field(default_factory=list)
    best_epoch: int = 0
    best_val_f1: float = 0.0


def train(
    model: DiscourseModel,
    posts_by_id: Mapping[str, MultimediaPost],
    split: DatasetSplit,
    cfg: TrainConfig,
) -> TrainResult:
    """Mini-batch training with early stopping on validation weighted F1.

    The model is left holding the parameters of its best validation epoch.
    Deterministic for a fixed seed on stub backends.
    """
    if not split.train or not split.validation:
        raise DatasetError("train and validation splits must be non-empty")
    for post_id in list(split.train) + list(split.validation):
        post = posts_by_id.get(post_id)
        if post is None:
            raise DatasetError(f"split references unknown post id '{post_id}'")
        if post.label is None:
            raise DatasetError(f"unlabeled post '{post_id}' in training data")

    weights = cfg.class_weights
    if weights is None:
        counts = {label: 0 for label in DiscourseLabel}
        for post_id in split.train:
            counts[posts_by_id[post_id].label] += 1
        weights = class_weights(counts)

    cache: dict[str, EncodedPost] = {}

    def encoded(post_id: str) -> EncodedPost:
        if model.encoder.trainable:
            return model.encode(posts_by_id[post_id])
        bundle = cache.get(post_id)
        if bundle is None:
            bundle = model.encode(posts_by_id[post_id])
            cache[post_id] = bundle
        return bundle

    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    shuffler = Random(cfg.seed)
    result = TrainResult()
    best_state = None
    epochs_since_best = 0

    for epoch in range(1, cfg.max_epochs + 1):
        order = list(split.train)
        shuffler.shuffle(order)
        loss_sum = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch_ids = order[start:start + cfg.batch_size]
            probs = torch.stack([model(encoded(post_id))[0] for post_id in batch_ids])
            labels = torch.tensor([int(posts_by_id[i].label) for i in batch_ids])
            loss = weighted_cross_entropy(probs, labels, weights)
            if not torch.isfinite(loss):
                with torch.no_grad():
                    norm = torch.sqrt(sum((p ** 2).sum() for p in model.parameters()))
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch ids {batch_ids[:5]}, "
                    f"parameter norm {float(norm):.3e}"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            loss_sum += float(loss.detach()) * len(batch_ids)

        val_preds = predict_ids(model, split.validation, encoded)
        val_truths = [posts_by_id[i].label for i in split.validation]
        report = f1_report(val_preds, val_truths)
        entry = EpochLog(
            epoch=epoch,
            train_loss=loss_sum / len(order),
            val_weighted_f1=report.weighted_f1,
            val_per_class_f1={l.file_name: report.per_class_f1[l] for l in DiscourseLabel},
        )
        result.log.append(entry)

        if best_state is None or report.weighted_f1 > result.best_val_f1:
            result.best_val_f1 = report.weighted_f1
            result.best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())
            epochs_since_best = 0
        else:
            if report.weighted_f1 == result.best_val_f1:
                # among ties prefer the most-trained checkpoint
                result.best_epoch = epoch
                best_state = copy.deepcopy(model.state_dict())
            epochs_since_best += 1
            if epochs_since_best >= cfg.patience:
                break

    model.load_state_dict(best_state)
    return result


def predict_ids(model: DiscourseModel, ids: Sequence[str], encoded) -> list[DiscourseLabel]:
    predictions = []
    with torch.no_grad():
        for post_id in ids:
            probs, _ = model(encoded(post_id))
            predictions.append(DiscourseLabel(int(probs.argmax())))
    return predictions


def predict_posts(model: DiscourseModel, posts: Sequence[MultimediaPost]) -> list[DiscourseLabel]:
    """Predicted label per post, in order."""
    predictions = []
    with torch.no_grad():
        for post in posts:
            probs, _ = model.forward_post(post)
            predictions.append(DiscourseLabel(int(probs.argmax())))
    return predictions


def build_encoder(cfg: RunConfig) -> PostEncoder:
    return PostEncoder(
        resolve_text_backend(cfg.text_backend, cfg.hidden_size),
        resolve_image_backend(cfg.image_backend, cfg.raw_channels),
        resolve_caption_source(cfg.caption_source, cfg.captions_file),
        grid_side=cfg.grid_side,
        text_cap=cfg.text_cap,
        caption_cap=cfg.caption_cap,
        modalities=cfg.modality_set(),
    )


def build_model(cfg: RunConfig) -> DiscourseModel:
    """Construct the full model with parameter init seeded by the config."""
    torch.manual_seed(cfg.seed)
    return DiscourseModel(
        build_encoder(cfg),
        model_dim=cfg.hidden_size,
        n_heads=cfg.heads,
        strategy=cfg.fusion,
    )


def run_training(
    posts: Sequence[MultimediaPost], split: DatasetSplit, cfg: RunConfig
) -> tuple[DiscourseModel, TrainResult]:
    """Build a model from the run config and train it on the split."""
    posts_by_id = {post.id: post for post in posts}
    missing = [i for i in split.all_ids() if i not in posts_by_id]
    if missing:
        raise DatasetError(f"split references unknown post ids: {sorted(missing)[:5]}")
    model = build_model(cfg)
    train_cfg = TrainConfig(
        batch_size=cfg.batch_size,
        learning_rate=cfg.learning_rate,
        max_epochs=cfg.max_epochs,
        patience=cfg.patience,
        seed=cfg.seed,
    )
    result = train(model, posts_by_id, split, train_cfg)
    return model, result


def write_train_log(result: TrainResult, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for entry in result.log:
            fh.write(json.dumps(asdict(entry)) + "\n")


def save_checkpoint(
    model: DiscourseModel,
    cfg: RunConfig,
    path: str | Path,
    *,
    split_seed: Optional[int] = None,
) -> None:
    """Self-describing archive: config, parameters, label codes, split seed."""
    payload = {
        "format_version": 1,
        "config": asdict(cfg),
        "state": model.state_dict(),
        "label_codes": {label.file_name: int(label) for label in DiscourseLabel},
        "split_seed": split_seed,
    }
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> tuple[DiscourseModel, RunConfig, dict]:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"checkpoint not found: {path}")
    payload = torch.load(path, weights_only=True)
    expected = {label.file_name: int(label) for label in DiscourseLabel}
    if payload.get("label_codes") != expected:
        raise DatasetError(
            f"checkpoint label mapping {payload.get('label_codes')} does not match "
            f"the current taxonomy {expected}"
        )
    cfg = RunConfig(**payload["config"])
    model = build_model(cfg)
    model.load_state_dict(payload["state"])
    return model, cfg, payload
