"""End-to-end grounded group activity model.

Wires the stub backbones, the vision-language encoder, actor fusion, and the
action decoder into one trainable object with a flat named-parameter view.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import backbones as bb
from . import nn
from . import tensor as T
from .config import ModelConfig
from .decoder import ActionDecoderParams, DecoderOutput, decode
from .encoder import SharedRepresentation, VLEncoderParams, encode
from .fusion import ActorFusionParams, ReferenceBoxParams
from .nn import RunContext
from .tensor import Tensor


@dataclass
class Batch:
    frames: np.ndarray            # [B, T, H, W, C]
    tokens: np.ndarray            # [B, L] padded with UNK
    text_mask: np.ndarray         # [B, L]
    annotations: list             # SceneAnnotation per clip, or None
    clip_ids: List[str]


def make_batch(clips, prompts: Sequence[str], cfg: ModelConfig,
               vocab: List[str], annotations=None) -> Batch:
    """Sample frames, tokenize and pad prompts, stack into arrays."""
    sampled = [bb.sample_frames(c, cfg.frames) for c in clips]
    frames = np.stack([c.frames for c in sampled])
    token_lists = [bb.tokenize(p, vocab, cfg.l_max).tokens for p in prompts]
    L = max(len(t) for t in token_lists)
    tokens = np.full((len(clips), L), bb.UNK, dtype=np.int64)
    mask = np.zeros((len(clips), L), dtype=bool)
    for i, t in enumerate(token_lists):
        tokens[i, :len(t)] = t
        mask[i, :len(t)] = True
    anns = list(annotations) if annotations is not None else [None] * len(clips)
    if annotations is not None:
        anns = [_sample_annotation(a, cfg.frames) if a is not None else None
                for a in anns]
    return Batch(frames, tokens, mask, anns,
                 [c.clip_id for c in clips])


def _sample_annotation(ann, t: int):
    """Resample annotation tubes to the model's T frames."""
    from dataclasses import replace
    total = ann.actors[0].tube.shape[0] if ann.actors else t
    if total == t:
        idx = np.arange(t)
    else:
        idx = np.round(np.linspace(0, total - 1, t)).astype(int)
    actors = [replace(a, tube=a.tube[idx]) for a in ann.actors]
    return replace(ann, actors=actors, keyframe=t // 2)


@dataclass
class ModelParams:
    visual: bb.VisualStubParams
    text: bb.TextStubParams
    vl_encoder: VLEncoderParams
    actor_fusion: ActorFusionParams
    reference: ReferenceBoxParams
    decoder: ActionDecoderParams


class GroundedModel:
    """Prompt + clip -> box tubes, per-actor action logits, group logits."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.params = ModelParams(
            visual=bb.VisualStubParams.init(rng, cfg),
            text=bb.TextStubParams.init(rng, cfg),
            vl_encoder=VLEncoderParams.init(rng, cfg),
            actor_fusion=ActorFusionParams.init(rng, cfg),
            reference=ReferenceBoxParams.init(cfg.num_queries),
            decoder=ActionDecoderParams.init(rng, cfg),
        )

    def named_parameters(self) -> Dict[str, Tensor]:
        return nn.collect_params(self.params)

    def zero_grad(self):
        for p in self.named_parameters().values():
            p.zero_grad()

    def load_state(self, arrays: Dict[str, np.ndarray]):
        params = self.named_parameters()
        missing = set(params) ^ set(arrays)
        if missing:
            raise ValueError(f"parameter name mismatch: {sorted(missing)[:5]}")
        for name, p in params.items():
            if p.data.shape != arrays[name].shape:
                raise ValueError(f"shape mismatch for {name}: "
                                 f"{p.data.shape} vs {arrays[name].shape}")
            p.data = arrays[name].astype(np.float64).copy()

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def forward(self, batch: Batch, ctx: RunContext = nn.EVAL,
                teacher_boxes: Optional[np.ndarray] = None,
                teacher_mask: Optional[np.ndarray] = None
                ) -> Tuple[SharedRepresentation, DecoderOutput]:
        cfg = self.cfg
        v = bb.visual_encode(batch.frames, self.params.visual, cfg)
        t = bb.text_encode(batch.tokens, self.params.text, cfg,
                           batch.text_mask, ctx)
        rep = encode(v.v_f, t.t_f, self.params.vl_encoder, cfg,
                     text_mask=t.mask, ctx=ctx)
        out = decode(rep, self.params.decoder, cfg,
                     fusion_params=self.params.actor_fusion,
                     ref_params=self.params.reference,
                     keyframe=cfg.frames // 2,
                     gt_boxes=teacher_boxes, gt_mask=teacher_mask,
                     ctx=ctx)
        return rep, out

    def keyframe(self) -> int:
        return self.cfg.frames // 2


def slice_output(out: DecoderOutput, i: int) -> DecoderOutput:
    """Single-sample view of a batched decoder output (graph preserved)."""
    s = slice(i, i + 1)
    return DecoderOutput(
        per_layer_boxes=[b[s] for b in out.per_layer_boxes],
        per_layer_actor_embeddings=[e[s] for e in out.per_layer_actor_embeddings],
        action_logits=out.action_logits[s],
        group_logits=out.group_logits[s])
