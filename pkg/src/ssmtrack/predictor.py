"""Learned motion predictor: token embedding, bi-Mamba encoder, offset head.

The model maps a look-back window of normalized box deltas to the next
delta. Tracklets shorter than the window are left-padded with zero deltas;
a tracklet holding a single box gets the zero offset directly, since the
training windows never contain an all-padding input.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .geometry import BBox, ImageSize
from .ssm import BiMambaParams, bi_mamba_block_batch, init_bi_mamba
from .ssm import uniform_init
from .trajectory import MotionDelta, TrajFeature, Tracklet, delta_apply, feature_from_boxes


@dataclass(frozen=True)
class PredictorConfig:
    """Architecture hyperparameters for the motion predictor."""

    lookback: int = 10
    token_dim: int = 512
    num_blocks: int = 3
    state_dim: int = 16
    expand: int = 2
    conv_width: int = 4
    mlp_dim: Optional[int] = None
    head_hidden: Optional[int] = None

    def __post_init__(self):
        if min(self.lookback, self.token_dim, self.num_blocks, self.state_dim,
               self.expand, self.conv_width) < 1:
            raise ValueError("all config dimensions must be positive")

    @property
    def mlp_width(self) -> int:
        return self.mlp_dim if self.mlp_dim is not None else 2 * self.token_dim

    @property
    def head_width(self) -> int:
        return self.head_hidden if self.head_hidden is not None else self.token_dim


@dataclass
class PredictorModel:
    """All learnable tensors of the motion predictor."""

    config: PredictorConfig
    embed_w: Var  # (4, token_dim)
    embed_b: Var  # (token_dim,)
    blocks: list[BiMambaParams]
    head_w1: Var  # (token_dim, head_hidden)
    head_b1: Var
    head_w2: Var  # (head_hidden, 4)
    head_b2: Var

    def named_tensors(self) -> Iterator[tuple[str, Var]]:
        yield "embed_w", self.embed_w
        yield "embed_b", self.embed_b
        for i, block in enumerate(self.blocks):
            yield from block.named(f"blocks.{i}")
        yield "head_w1", self.head_w1
        yield "head_b1", self.head_b1
        yield "head_w2", self.head_w2
        yield "head_b2", self.head_b2

    def parameters(self) -> list[Var]:
        return [v for _, v in self.named_tensors()]


@dataclass(frozen=True)
class OffsetPrediction:
    offset: MotionDelta


def init_model(config: PredictorConfig, seed: int = 0) -> PredictorModel:
    rng = np.random.default_rng(seed)
    blocks = [
        init_bi_mamba(
            config.token_dim, config.state_dim, config.expand,
            config.conv_width, config.mlp_width, rng,
        )
        for _ in range(config.num_blocks)
    ]
    return PredictorModel(
        config=config,
        embed_w=uniform_init(rng, 4, (4, config.token_dim)),
        embed_b=Var(np.zeros(config.token_dim)),
        blocks=blocks,
        head_w1=uniform_init(rng, config.token_dim, (config.token_dim, config.head_width)),
        head_b1=Var(np.zeros(config.head_width)),
        head_w2=uniform_init(rng, config.head_width, (config.head_width, 4)),
        head_b2=Var(np.zeros(4)),
    )


def tokenize(model: PredictorModel, feature: TrajFeature) -> np.ndarray:
    """Per-step affine embedding of the delta window: (lookback, token_dim)."""
    _check_window(model, feature)
    return ad.affine(Var(feature.deltas), model.embed_w, model.embed_b).value


def forward_batch(model: PredictorModel, windows) -> Var:
    """Offsets for a batch of delta windows: (B, lookback, 4) -> (B, 4)."""
    x = ad.affine(ad.as_var(windows), model.embed_w, model.embed_b)
    for block in model.blocks:
        x, _ = bi_mamba_block_batch(block, x)
    pooled = ad.reduce_mean(x, axis=1)
    hidden = ad.silu(ad.affine(pooled, model.head_w1, model.head_b1))
    return ad.affine(hidden, model.head_w2, model.head_b2)


def forward(model: PredictorModel, feature: TrajFeature) -> OffsetPrediction:
    """Predict the next normalized offset from one feature window."""
    _check_window(model, feature)
    out = forward_batch(model, feature.deltas[None, :, :]).value[0]
    return OffsetPrediction(MotionDelta(*out))


def predict_next_box(model: PredictorModel, tracklet: Tracklet, img: ImageSize) -> BBox:
    """Next-frame box for a tracklet; all entry sources count as history."""
    boxes = tracklet.boxes()
    if not boxes:
        raise ValueError(f"tracklet {tracklet.id} has no boxes")
    if len(boxes) == 1:
        return boxes[-1]
    feature = feature_from_boxes(boxes, img, model.config.lookback)
    return delta_apply(boxes[-1], forward(model, feature).offset, img)


def predict_next_boxes(
    model: PredictorModel, tracklets: list[Tracklet], img: ImageSize
) -> list[BBox]:
    """Batched predict_next_box over many tracklets (one encoder pass)."""
    results: list[Optional[BBox]] = [None] * len(tracklets)
    windows = []
    slots = []
    for i, tracklet in enumerate(tracklets):
        boxes = tracklet.boxes()
        if not boxes:
            raise ValueError(f"tracklet {tracklet.id} has no boxes")
        if len(boxes) == 1:
            results[i] = boxes[-1]
        else:
            windows.append(feature_from_boxes(boxes, img, model.config.lookback).deltas)
            slots.append(i)
    if windows:
        offsets = forward_batch(model, np.stack(windows)).value
        for i, offset in zip(slots, offsets):
            results[i] = delta_apply(
                tracklets[i].last_box, MotionDelta(*offset), img
            )
    return results


def rollout(model: PredictorModel, tracklet: Tracklet, img: ImageSize, steps: int) -> list[BBox]:
    """Autoregressive future boxes: each prediction feeds the next one."""
    if steps < 0:
        raise ValueError("steps must be >= 0")
    if not tracklet.entries:
        raise ValueError(f"tracklet {tracklet.id} has no boxes")
    working = Tracklet(id=tracklet.id, entries=list(tracklet.entries))
    out = []
    for _ in range(steps):
        box = predict_next_box(model, working, img)
        working.append(working.last_frame + 1, box, "predicted")
        out.append(box)
    return out


def _check_window(model: PredictorModel, feature: TrajFeature) -> None:
    if feature.window != model.config.lookback:
        raise ValueError(
            f"feature window {feature.window} != model lookback {model.config.lookback}"
        )
