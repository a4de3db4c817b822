"""Per-modality feature encoders.

Text and captions become token-level hidden states (plus a max-pooled text
vector); images become a grid of region features projected to the text
hidden size. Every encoder has a deterministic stub backend keyed by a seed,
so the whole pipeline runs and tests without pretrained weights. Pretrained
backends (tweet language model, ResNet-101, COCO captioner) sit behind the
same interfaces and are loaded lazily.

Backend spec strings: ``stub:<seed>`` or a pretrained model identifier.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .corpus import DiscourseLabel, MultimediaPost
from .errors import BackendError, DatasetError

DEFAULT_TOKEN_CAP = 20
DEFAULT_GRID_SIDE = 14
DEFAULT_RAW_CHANNELS = 2048
# Upper bound on region-matrix elements (n_regions * hidden) per image.
DEFAULT_REGION_MEMORY_CAP = 1 << 24

_STUB_CELL_STATS = 6
_STUB_CAPTION_ADJECTIVES = (
    "small", "large", "bright", "dark", "old", "young", "red", "blue",
    "green", "quiet", "busy", "empty",
)
_STUB_CAPTION_NOUNS = (
    "dog", "car", "tree", "person", "street", "table", "bird", "house",
    "field", "window", "crowd", "river",
)
_STUB_CAPTION_PLACES = (
    "in a park", "on a road", "near a wall", "at the beach", "in a room",
    "under the sky", "by a fence", "on the grass",
)


def tokenize(text: str) -> list[str]:
    """Whitespace tokenization used by stub backends and length caps."""
    return text.split()


@dataclass
class TextFeatures:
    """Token-level hidden states plus their element-wise max pool."""

    states: torch.Tensor  # (length, hidden)
    pooled: torch.Tensor  # (hidden,)
    length: int


@dataclass
class ImageFeatures:
    """Region features after projection to the text hidden size."""

    regions: torch.Tensor  # (n_regions, hidden)
    grid_side: Optional[int] = None

    def __post_init__(self):
        if self.grid_side is not None and self.regions.shape[0] != self.grid_side ** 2:
            raise ValueError(
                f"expected {self.grid_side ** 2} regions for grid side "
                f"{self.grid_side}, got {self.regions.shape[0]}"
            )


@dataclass
class CaptionFeatures:
    """Token-level hidden states of the machine-generated image description."""

    states: torch.Tensor  # (length, hidden)
    length: int


@dataclass
class EncodedPost:
    """Per-modality feature bundle for one post.

    Image regions are kept pre-projection (raw backbone channels) so the
    trainable projection stays inside the model graph.
    """

    post_id: str
    text: TextFeatures
    image_regions: torch.Tensor  # (grid_side**2, raw_channels)
    grid_side: int
    caption: CaptionFeatures
    label: Optional[DiscourseLabel] = None


def _seeded_rng(*parts) -> np.random.Generator:
    digest = hashlib.blake2b(":".join(str(p) for p in parts).encode("utf-8"), digest_size=8)
    return np.random.default_rng(int.from_bytes(digest.digest(), "big"))


class StubTextBackend:
    """Maps each token string to a fixed pseudo-random vector.

    Vectors depend only on (seed, token), giving bit-identical features
    across processes for byte-identical inputs.
    """

    kind = "stub"
    trainable = False

    def __init__(self, seed: int, hidden_size: int):
        self.seed = seed
        self.hidden_size = hidden_size
        self._cache: dict[str, np.ndarray] = {}

    def identifier(self) -> str:
        return f"stub:{self.seed}"

    def encode(self, text: str, cap: int) -> torch.Tensor:
        tokens = tokenize(text)[:cap]
        rows = np.stack([self._token_vector(tok) for tok in tokens])
        return torch.from_numpy(rows).to(torch.float32)

    def _token_vector(self, token: str) -> np.ndarray:
        vec = self._cache.get(token)
        if vec is None:
            vec = _seeded_rng("text", self.seed, token).standard_normal(self.hidden_size)
            self._cache[token] = vec
        return vec


class PretrainedTextBackend:
    """Bottom layers of a pretrained tweet-domain language model.

    Exposes the hidden states after transformer layer ``n_layers``; the upper
    layers are discarded. The loaded module is trainable so the kept layers
    can be fine-tuned.
    """

    kind = "pretrained"
    trainable = True

    def __init__(self, model_name: str, n_layers: int = 6):
        self.model_name = model_name
        self.n_layers = n_layers
        self.module: Optional[torch.nn.Module] = None
        self._tokenizer = None
        self.hidden_size: Optional[int] = None

    def identifier(self) -> str:
        return self.model_name

    def _ensure_loaded(self):
        if self.module is not None:
            return
        try:
            from transformers import AutoModel, AutoTokenizer
            self._tokenizer = AutoTokenizer.from_pretrained(self.model_name, use_fast=False)
            self.module = AutoModel.from_pretrained(self.model_name, output_hidden_states=True)
            self.hidden_size = self.module.config.hidden_size
        except Exception as exc:
            raise BackendError(f"text backend '{self.model_name}' unavailable: {exc}") from None

    def encode(self, text: str, cap: int) -> torch.Tensor:
        self._ensure_loaded()
        encoded = self._tokenizer(text, truncation=True, max_length=cap, return_tensors="pt")
        outputs = self.module(**encoded)
        # hidden_states[0] is the embedding layer; index n_layers is the
        # output of the n-th transformer layer.
        states = outputs.hidden_states[self.n_layers][0]
        return states


class StubImageBackend:
    """Deterministic region features hashed from per-cell pixel statistics."""

    kind = "stub"
    trainable = False

    def __init__(self, seed: int, raw_channels: int = DEFAULT_RAW_CHANNELS):
        self.seed = seed
        self.raw_channels = raw_channels
        self._mixer = _seeded_rng("image", seed).standard_normal(
            (raw_channels, _STUB_CELL_STATS)
        )

    def identifier(self) -> str:
        return f"stub:{self.seed}"

    def extract(self, image_ref: str | Path, grid_side: int) -> torch.Tensor:
        arr = _load_rgb(image_ref) / 255.0
        cell = 8
        img = Image.fromarray((arr * 255).astype(np.uint8))
        img = img.resize((grid_side * cell, grid_side * cell), Image.BILINEAR)
        arr = np.asarray(img, dtype=np.float64) / 255.0
        gray = arr @ np.array([0.299, 0.587, 0.114])
        cells = arr.reshape(grid_side, cell, grid_side, cell, 3)
        gray_cells = gray.reshape(grid_side, cell, grid_side, cell)
        stats = np.stack(
            [
                cells[..., 0].mean(axis=(1, 3)),
                cells[..., 1].mean(axis=(1, 3)),
                cells[..., 2].mean(axis=(1, 3)),
                gray_cells.mean(axis=(1, 3)),
                gray_cells.std(axis=(1, 3)),
                np.abs(np.diff(gray_cells, axis=1)).mean(axis=(1, 3)),
            ],
            axis=-1,
        )  # (M, M, stats)
        features = stats.reshape(grid_side * grid_side, _STUB_CELL_STATS) @ self._mixer.T
        return torch.from_numpy(features).to(torch.float32)


class PretrainedImageBackend:
    """Final convolutional feature map of a pretrained CNN backbone.

    The map is adaptively average-pooled to the requested grid. The backbone
    is frozen by default; set trainable=True to fine-tune it.
    """

    kind = "pretrained"

    def __init__(self, model_name: str = "resnet101", trainable: bool = False):
        self.model_name = model_name
        self.trainable = trainable
        self.module: Optional[torch.nn.Module] = None
        self.raw_channels = DEFAULT_RAW_CHANNELS

    def identifier(self) -> str:
        return self.model_name

    def _ensure_loaded(self):
        if self.module is not None:
            return
        try:
            import torchvision.models as models
            factory = getattr(models, self.model_name)
            backbone = factory(weights="DEFAULT")
            self.module = torch.nn.Sequential(*list(backbone.children())[:-2])
            if not self.trainable:
                for param in self.module.parameters():
                    param.requires_grad_(False)
        except Exception as exc:
            raise BackendError(f"image backend '{self.model_name}' unavailable: {exc}") from None

    def extract(self, image_ref: str | Path, grid_side: int) -> torch.Tensor:
        self._ensure_loaded()
        arr = _load_rgb(image_ref) / 255.0
        tensor = torch.from_numpy(arr).to(torch.float32).permute(2, 0, 1).unsqueeze(0)
        feature_map = self.module(tensor)
        pooled = torch.nn.functional.adaptive_avg_pool2d(feature_map, grid_side)
        return pooled[0].permute(1, 2, 0).reshape(grid_side * grid_side, -1)


def _load_rgb(image_ref: str | Path) -> np.ndarray:
    try:
        with Image.open(image_ref) as img:
            return np.asarray(img.convert("RGB"), dtype=np.float64)
    except (UnidentifiedImageError, OSError, FileNotFoundError) as exc:
        raise DatasetError(f"undecodable image {image_ref}: {exc}") from None


def encode_text(text: str, backend, cap: int = DEFAULT_TOKEN_CAP) -> TextFeatures:
    """Encode text into token states and their max-pooled summary.

    The token sequence is truncated at ``cap``; pooling runs over real tokens
    only (states carry no padding rows).
    """
    if not text.split():
        raise ValueError("cannot encode empty text")
    states = backend.encode(text, cap)
    pooled = states.max(dim=0).values
    return TextFeatures(states=states, pooled=pooled, length=states.shape[0])


def encode_caption(caption: str, backend, cap: int = DEFAULT_TOKEN_CAP) -> CaptionFeatures:
    """Encode a caption with the exact text-encoding path, minus pooling."""
    feats = encode_text(caption, backend, cap)
    return CaptionFeatures(states=feats.states, length=feats.length)


def encode_image(
    image_ref: str | Path,
    backend,
    grid_side: int,
    projection: torch.nn.Module,
    memory_cap: int = DEFAULT_REGION_MEMORY_CAP,
) -> ImageFeatures:
    """Extract an M x M region grid and project it to the text hidden size."""
    if grid_side < 1:
        raise ValueError(f"grid side must be >= 1, got {grid_side}")
    hidden = projection.out_features
    if grid_side * grid_side * hidden > memory_cap:
        raise ValueError(
            f"region matrix {grid_side ** 2} x {hidden} exceeds memory cap {memory_cap}"
        )
    raw = backend.extract(image_ref, grid_side)
    return ImageFeatures(regions=projection(raw), grid_side=grid_side)


class PrecomputedCaptions:
    """Caption lookup from a line-delimited {id, caption} file."""

    kind = "precomputed"

    def __init__(self, path: str | Path):
        self.path = Path(path)
        if not self.path.exists():
            raise DatasetError(f"caption file not found: {self.path}")
        self._captions: dict[str, str] = {}
        with self.path.open("r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    record = json.loads(line)
                    self._captions[record["id"]] = record["caption"]
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise DatasetError(
                        f"malformed caption record at line {lineno} of {self.path}: {exc}"
                    ) from None

    def caption_for(self, post: MultimediaPost) -> str:
        caption = self._captions.get(post.id)
        if caption is None:
            raise DatasetError(f"no precomputed caption for post '{post.id}'")
        return caption


class StubCaptioner:
    """Deterministic English-like description built from image statistics."""

    kind = "stub"

    def __init__(self, seed: int):
        self.seed = seed

    def caption_for(self, post: MultimediaPost) -> str:
        arr = _load_rgb(post.image_path())
        digest = hashlib.blake2b(arr.tobytes(), digest_size=8).digest()
        rng = _seeded_rng("caption", self.seed, digest.hex())
        adjective = _STUB_CAPTION_ADJECTIVES[rng.integers(len(_STUB_CAPTION_ADJECTIVES))]
        noun = _STUB_CAPTION_NOUNS[rng.integers(len(_STUB_CAPTION_NOUNS))]
        place = _STUB_CAPTION_PLACES[rng.integers(len(_STUB_CAPTION_PLACES))]
        return f"a {adjective} {noun} {place}"


class PretrainedCaptioner:
    """Image-to-text captioning model; heavyweight, meant for offline runs."""

    kind = "pretrained"

    def __init__(self, model_name: str):
        self.model_name = model_name
        self._pipeline = None

    def caption_for(self, post: MultimediaPost) -> str:
        if self._pipeline is None:
            try:
                from transformers import pipeline
                self._pipeline = pipeline("image-to-text", model=self.model_name)
            except Exception as exc:
                raise BackendError(
                    f"caption backend '{self.model_name}' unavailable: {exc}"
                ) from None
        result = self._pipeline(str(post.image_path()))
        return result[0]["generated_text"].strip()


def caption_image(post: MultimediaPost, source) -> str:
    """Resolve the caption for a post from the configured source."""
    caption = source.caption_for(post)
    if not caption or not caption.split():
        raise DatasetError(f"caption source returned empty caption for post '{post.id}'")
    return caption


def resolve_text_backend(spec: str, hidden_size: int):
    if spec.startswith("stub:"):
        return StubTextBackend(int(spec.split(":", 1)[1]), hidden_size)
    return PretrainedTextBackend(spec)


def resolve_image_backend(spec: str, raw_channels: int = DEFAULT_RAW_CHANNELS):
    if spec.startswith("stub:"):
        return StubImageBackend(int(spec.split(":", 1)[1]), raw_channels)
    return PretrainedImageBackend(spec)


def resolve_caption_source(spec: str, captions_file: str = ""):
    """Build a caption source; None means rely on inline dataset captions."""
    if spec.startswith("stub:"):
        return StubCaptioner(int(spec.split(":", 1)[1]))
    if spec == "precomputed":
        return PrecomputedCaptions(captions_file) if captions_file else None
    return PretrainedCaptioner(spec)


class PostEncoder:
    """Turns posts into EncodedPost bundles with the configured backends.

    Disabled modalities are encoded as zero features of the right shape, so
    downstream fusion sees a constant-dimension input across ablations.
    """

    def __init__(
        self,
        text_backend,
        image_backend,
        caption_source,
        *,
        grid_side: int = DEFAULT_GRID_SIDE,
        text_cap: int = DEFAULT_TOKEN_CAP,
        caption_cap: int = DEFAULT_TOKEN_CAP,
        modalities: frozenset[str] = frozenset({"text", "image", "caption"}),
    ):
        self.text_backend = text_backend
        self.image_backend = image_backend
        self.caption_source = caption_source
        self.grid_side = grid_side
        self.text_cap = text_cap
        self.caption_cap = caption_cap
        self.modalities = frozenset(modalities)

    @property
    def trainable(self) -> bool:
        return bool(
            ("text" in self.modalities and self.text_backend.trainable)
            or ("image" in self.modalities and self.image_backend.trainable)
        )

    def encode(self, post: MultimediaPost) -> EncodedPost:
        hidden = self.text_backend.hidden_size
        raw = self.image_backend.raw_channels
        n_regions = self.grid_side ** 2

        if "text" in self.modalities:
            text = encode_text(post.text, self.text_backend, self.text_cap)
        else:
            text = TextFeatures(torch.zeros(1, hidden), torch.zeros(hidden), 1)

        if "image" in self.modalities:
            image_regions = self.image_backend.extract(post.image_path(), self.grid_side)
        else:
            image_regions = torch.zeros(n_regions, raw)

        if "caption" in self.modalities:
            caption_text = self._resolve_caption(post)
            caption = encode_caption(caption_text, self.text_backend, self.caption_cap)
        else:
            caption = CaptionFeatures(torch.zeros(1, hidden), 1)

        return EncodedPost(
            post_id=post.id,
            text=text,
            image_regions=image_regions,
            grid_side=self.grid_side,
            caption=caption,
            label=post.label,
        )

    def _resolve_caption(self, post: MultimediaPost) -> str:
        if post.caption and post.caption.split():
            return post.caption
        if self.caption_source is None:
            raise DatasetError(
                f"post '{post.id}' has no caption and no caption source is configured; "
                "precompute captions with the caption command or set a caption backend"
            )
        return caption_image(post, self.caption_source)
