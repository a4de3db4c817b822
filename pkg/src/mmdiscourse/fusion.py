"""Multi-head attention and modality fusion.

The fused representation concatenates a text-attended caption vector, the
max-pooled text vector, and a text-attended image vector. Attention is bare
scaled dot-product (no residuals, no layer norm): per head j,

    head_j = softmax(Q W_q[j] (K W_k[j])^T / sqrt(d_k)) V W_v[j]

and the head outputs are concatenated and mixed by an output matrix. Three
alternative strategies are provided for comparison runs: plain concatenation
of branch means, single-head dot-product attention, and parallel
co-attention where the text branch is replaced by its image-aware attended
version.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
from torch import nn

from .encoders import CaptionFeatures, ImageFeatures, TextFeatures

MULTIHEAD = "multihead"
CONCAT = "concat"
ATTENTION = "attention"
COATTENTION = "coattention"
STRATEGIES = (MULTIHEAD, CONCAT, ATTENTION, COATTENTION)

# Display names used in reports and result tables.
STRATEGY_LABELS = {
    MULTIHEAD: "MultiheadAtt",
    CONCAT: "ConcatFuse",
    ATTENTION: "Attention",
    COATTENTION: "Co-Attention",
}


@dataclass(frozen=True)
class AttentionConfig:
    """Head count and model width; the per-head width is their quotient."""

    n_heads: int = 6
    model_dim: int = 768

    def __post_init__(self):
        if self.n_heads < 1:
            raise ValueError(f"need at least one head, got {self.n_heads}")
        if self.model_dim % self.n_heads != 0:
            raise ValueError(
                f"model dim {self.model_dim} not divisible by {self.n_heads} heads"
            )

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.n_heads


def scaled_dot_attention(
    query: torch.Tensor, key: torch.Tensor, value: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Row-wise softmax(Q K^T / sqrt(d_k)) V.

    Returns (output, weights) with weights of shape (n_queries, n_keys).
    """
    if key.shape[0] == 0:
        raise ValueError("empty key set")
    if key.shape[0] != value.shape[0]:
        raise ValueError(f"key rows {tuple(key.shape)} != value rows {tuple(value.shape)}")
    if query.shape[-1] != key.shape[-1]:
        raise ValueError(f"query dim {tuple(query.shape)} != key dim {tuple(key.shape)}")
    d_k = query.shape[-1]
    scores = query @ key.transpose(-2, -1) / math.sqrt(d_k)
    weights = torch.softmax(scores, dim=-1)
    return weights @ value, weights


class MultiHeadAttention(nn.Module):
    """Per-head projections, scaled dot-product attention, output mixing."""

    def __init__(self, config: AttentionConfig):
        super().__init__()
        self.config = config
        n, d, d_k = config.n_heads, config.model_dim, config.head_dim
        self.w_query = nn.Parameter(torch.empty(n, d, d_k))
        self.w_key = nn.Parameter(torch.empty(n, d, d_k))
        self.w_value = nn.Parameter(torch.empty(n, d, d_k))
        self.w_out = nn.Parameter(torch.empty(n * d_k, d))
        bound = math.sqrt(6.0 / (d + d_k))
        for weight in (self.w_query, self.w_key, self.w_value):
            nn.init.uniform_(weight, -bound, bound)
        nn.init.uniform_(self.w_out, -math.sqrt(6.0 / (n * d_k + d)), math.sqrt(6.0 / (n * d_k + d)))

    def forward(
        self, query: torch.Tensor, key: torch.Tensor, value: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (output (q x d), per-head weights (n_heads x q x m))."""
        d = self.config.model_dim
        for name, tensor in (("query", query), ("key", key), ("value", value)):
            if tensor.shape[-1] != d:
                raise ValueError(
                    f"{name} dim {tuple(tensor.shape)} incompatible with model dim {d}"
                )
        outputs, weights = [], []
        for j in range(self.config.n_heads):
            head_out, head_weights = scaled_dot_attention(
                query @ self.w_query[j], key @ self.w_key[j], value @ self.w_value[j]
            )
            outputs.append(head_out)
            weights.append(head_weights)
        mixed = torch.cat(outputs, dim=-1) @ self.w_out
        return mixed, torch.stack(weights)


@dataclass
class FusionOutput:
    """Fused vector plus the attention grids that produced it."""

    fused: torch.Tensor  # (3 * hidden,)
    attended_caption: torch.Tensor  # (hidden,)
    attended_text: torch.Tensor  # (hidden,)
    attended_image: torch.Tensor  # (hidden,)
    image_attention: Optional[torch.Tensor]  # (n_heads, 1, n_regions) or None
    caption_attention: Optional[torch.Tensor]  # (n_heads, 1, n_tokens) or None
    strategy: str


class ModalityFusion(nn.Module):
    """Owns the two attention branches (image and caption, text as query)."""

    def __init__(self, model_dim: int, n_heads: int = 6):
        super().__init__()
        config = AttentionConfig(n_heads=n_heads, model_dim=model_dim)
        self.config = config
        self.image_attention = MultiHeadAttention(config)
        self.caption_attention = MultiHeadAttention(config)

    def forward(
        self,
        text: TextFeatures,
        image: ImageFeatures,
        caption: CaptionFeatures,
        strategy: str = MULTIHEAD,
    ) -> FusionOutput:
        return fuse(text, image, caption, strategy, self)


def fuse(
    text: TextFeatures,
    image: ImageFeatures,
    caption: CaptionFeatures,
    strategy: str,
    fusion: ModalityFusion,
) -> FusionOutput:
    """Compose the three modality features into one fused vector.

    Strategies:
      * multihead: both branches are multi-head attention with the pooled
        text vector as the single-row query.
      * concat: branch means, no attention (weights are None).
      * attention: the bare single-head kernel replaces multi-head attention.
      * coattention: bidirectional; the text slot carries the text tokens
        attended by the pooled image query.
    """
    hidden = text.pooled.shape[-1]
    for name, dim in (("image", image.regions.shape[-1]), ("caption", caption.states.shape[-1])):
        if dim != hidden:
            raise ValueError(f"{name} feature dim {dim} != text hidden size {hidden}")
    query = text.pooled.unsqueeze(0)

    if strategy == MULTIHEAD:
        image_vec, image_weights = fusion.image_attention(query, image.regions, image.regions)
        caption_vec, caption_weights = fusion.caption_attention(query, caption.states, caption.states)
        text_vec = text.pooled
        image_vec, caption_vec = image_vec[0], caption_vec[0]
    elif strategy == CONCAT:
        image_vec = image.regions.mean(dim=0)
        caption_vec = caption.states.mean(dim=0)
        text_vec = text.pooled
        image_weights = caption_weights = None
    elif strategy == ATTENTION:
        image_vec, w_img = scaled_dot_attention(query, image.regions, image.regions)
        caption_vec, w_cap = scaled_dot_attention(query, caption.states, caption.states)
        text_vec = text.pooled
        image_vec, caption_vec = image_vec[0], caption_vec[0]
        image_weights, caption_weights = w_img.unsqueeze(0), w_cap.unsqueeze(0)
    elif strategy == COATTENTION:
        image_vec, w_img = scaled_dot_attention(query, image.regions, image.regions)
        caption_vec, w_cap = scaled_dot_attention(query, caption.states, caption.states)
        image_query = image.regions.mean(dim=0, keepdim=True)
        text_attended, _ = scaled_dot_attention(image_query, text.states, text.states)
        text_vec = text_attended[0]
        image_vec, caption_vec = image_vec[0], caption_vec[0]
        image_weights, caption_weights = w_img.unsqueeze(0), w_cap.unsqueeze(0)
    else:
        raise ValueError(f"unknown fusion strategy '{strategy}'")

    fused = torch.cat([caption_vec, text_vec, image_vec])
    return FusionOutput(
        fused=fused,
        attended_caption=caption_vec,
        attended_text=text_vec,
        attended_image=image_vec,
        image_attention=image_weights,
        caption_attention=caption_weights,
        strategy=strategy,
    )
