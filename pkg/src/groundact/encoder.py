"""Vision-language encoder: the cross-modal correlation stack.

Each layer runs text self-attention, per-cell temporal self-attention on the
video stream, video-to-text then text-to-video cross-attention, and a shared
FFN.  A learnable group token rides along as an extra video-side row and its
final embedding feeds the group-activity classifier.  An optional lightweight
temporal-convolution fast branch re-injects per-frame dynamics.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import nn
from . import tensor as T
from .config import ConfigError, ModelConfig
from .nn import (AttentionParams, FeedForwardParams, LayerNormParams,
                 PositionalEncoding, RunContext)
from .tensor import ShapeError, Tensor


@dataclass
class SharedRepresentation:
    """Fused streams plus the layout of the concatenated view.

    The concatenated view ``vt_f`` has T*HW video rows, then L text rows,
    then the group-token row, per batch element.
    """
    video: Tensor                   # [B, T, HW, d]
    text: Tensor                    # [B, L, d]
    group: Tensor                   # [B, 1, d]
    text_mask: Optional[np.ndarray]  # [B, L]

    @property
    def vt_f(self) -> Tensor:
        b, t, hw, d = self.video.shape
        flat_video = T.reshape(self.video, (b, t * hw, d))
        return T.concat([flat_video, self.text, self.group], axis=1)

    @property
    def layout(self) -> dict:
        b, t, hw, d = self.video.shape
        L = self.text.shape[1]
        return {"video": (0, t * hw), "text": (t * hw, t * hw + L),
                "group": (t * hw + L, t * hw + L + 1)}


@dataclass
class EncoderLayerParams:
    text_self_attn: AttentionParams
    video_temporal_self_attn: AttentionParams
    v2t_cross: AttentionParams
    t2v_cross: AttentionParams
    ffn: FeedForwardParams
    norm_text_self: LayerNormParams
    norm_video_self: LayerNormParams
    norm_v2t: LayerNormParams
    norm_t2v: LayerNormParams
    norm_ffn_video: LayerNormParams
    norm_ffn_text: LayerNormParams

    @classmethod
    def init(cls, rng, cfg: ModelConfig):
        d, h, p = cfg.d_model, cfg.num_heads, cfg.dropout
        mk = lambda: AttentionParams.init(rng, d, h, p)
        return cls(mk(), mk(), mk(), mk(),
                   FeedForwardParams.init(rng, d, cfg.d_ff, dropout_rate=p),
                   *[LayerNormParams.init(d) for _ in range(6)])


@dataclass
class FastBranchParams:
    kernel: Tensor                  # [k, d, d]
    bias: Tensor

    @classmethod
    def init(cls, rng, cfg: ModelConfig, k: int = 3):
        d = cfg.d_model
        return cls(nn.param(rng, k, d, d, scale=0.02 / np.sqrt(d)),
                   nn.zeros_param(d))


@dataclass
class VLEncoderParams:
    group_token: Tensor             # [1, d]
    temporal_pe: PositionalEncoding
    layers: List[EncoderLayerParams]
    fast_branch: Optional[FastBranchParams]

    @classmethod
    def init(cls, rng, cfg: ModelConfig):
        layers = [EncoderLayerParams.init(rng, cfg)
                  for _ in range(cfg.encoder_layers)]
        fast = FastBranchParams.init(rng, cfg) if cfg.use_fast_branch else None
        return cls(nn.param(rng, 1, cfg.d_model, scale=0.02),
                   PositionalEncoding.temporal(max(cfg.frames, 64), cfg.d_model),
                   layers, fast)


def cross_modal_block(video_rows: Tensor, text_rows: Tensor,
                      layer: EncoderLayerParams,
                      text_mask: Optional[np.ndarray] = None,
                      ctx: RunContext = nn.EVAL):
    """V2T then T2V, each pre-norm with a residual.

    video_rows: [B, R, d] (all video rows incl. the group token),
    text_rows: [B, L, d].
    """
    key_mask = None
    if text_mask is not None:
        R = video_rows.shape[-2]
        key_mask = np.expand_dims(text_mask, -2) & np.ones((R, 1), dtype=bool)
    h = nn.layer_norm(video_rows, layer.norm_v2t)
    video_rows = T.add(video_rows, nn.multi_head_attention(
        h, nn.layer_norm(text_rows, layer.norm_v2t), layer.v2t_cross,
        key_mask, ctx))
    h = nn.layer_norm(text_rows, layer.norm_t2v)
    text_rows = T.add(text_rows, nn.multi_head_attention(
        h, nn.layer_norm(video_rows, layer.norm_t2v), layer.t2v_cross,
        None, ctx))
    return video_rows, text_rows


def encode(v_f: Tensor, t_f: Tensor, params: VLEncoderParams,
           cfg: ModelConfig, text_mask: Optional[np.ndarray] = None,
           positional: bool = True,
           ctx: RunContext = nn.EVAL) -> SharedRepresentation:
    """Fuse video [B, T, HW, d] and text [B, L, d] into a shared representation.

    Within each layer: text self-attention, per-cell temporal self-attention
    on video (the group token attends only to itself), V2T, T2V, shared FFN.
    ``positional=False`` skips the temporal encoding, restoring frame-
    permutation equivariance of the stack.
    """
    if v_f.ndim != 4 or t_f.ndim != 3:
        raise ShapeError(f"expected batched inputs, got {v_f.shape}, {t_f.shape}")
    b, t, hw, d = v_f.shape
    if d != cfg.d_model or t_f.shape[-1] != d:
        raise ShapeError(f"width mismatch: video {v_f.shape}, text {t_f.shape}")

    video = v_f
    if positional:
        # temporal encoding added per frame, identical across cells
        rows = T.getitem(params.temporal_pe.table, np.arange(t))   # [T, d]
        video = T.add(video, T.reshape(rows, (1, t, 1, d)))
    text = t_f
    group = T.broadcast_to(T.reshape(params.group_token, (1, 1, d)), (b, 1, d))

    for layer in params.layers:
        # (a) text self-attention
        attn_mask = None
        if text_mask is not None:
            L = text.shape[1]
            attn_mask = np.expand_dims(text_mask, -2) & np.ones((L, 1), dtype=bool)
        h = nn.layer_norm(text, layer.norm_text_self)
        text = T.add(text, nn.multi_head_attention(
            h, h, layer.text_self_attn, attn_mask, ctx))

        # (b) temporal self-attention per spatial cell; group token is its
        # own one-row sequence through the same weights
        cells = T.transpose(video, (0, 2, 1, 3))          # [B, HW, T, d]
        h = nn.layer_norm(cells, layer.norm_video_self)
        cells = T.add(cells, nn.multi_head_attention(
            h, h, layer.video_temporal_self_attn, None, ctx))
        video = T.transpose(cells, (0, 2, 1, 3))
        hg = nn.layer_norm(group, layer.norm_video_self)
        group = T.add(group, nn.multi_head_attention(
            hg, hg, layer.video_temporal_self_attn, None, ctx))

        # fast branch: temporal conv over per-frame pooled features
        if params.fast_branch is not None:
            frame_means = T.tmean(video, axis=2)           # [B, T, d]
            refined = nn.conv1d(frame_means, params.fast_branch.kernel,
                                params.fast_branch.bias)
            video = T.add(video, T.reshape(refined, (b, t, 1, d)))

        # (c)+(d) bidirectional cross-attention over all video-side rows
        flat = T.concat([T.reshape(video, (b, t * hw, d)), group], axis=1)
        flat, text = cross_modal_block(flat, text, layer, text_mask, ctx)
        video = T.reshape(flat[:, :t * hw, :], (b, t, hw, d))
        group = flat[:, t * hw:, :]

        # (e) shared FFN on every row
        video = T.add(video, nn.feed_forward(
            nn.layer_norm(video, layer.norm_ffn_video), layer.ffn, ctx))
        group = T.add(group, nn.feed_forward(
            nn.layer_norm(group, layer.norm_ffn_video), layer.ffn, ctx))
        text = T.add(text, nn.feed_forward(
            nn.layer_norm(text, layer.norm_ffn_text), layer.ffn, ctx))

    return SharedRepresentation(video=video, text=text, group=group,
                                text_mask=text_mask)
