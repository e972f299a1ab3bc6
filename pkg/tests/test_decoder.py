"""Box-refining decoder: reference start, tube validity, teacher forcing."""

import numpy as np
import pytest

from groundact import nn
from groundact import tensor as T
from groundact.config import ModelConfig
from groundact.decoder import (ActionDecoderParams, DecoderOutput,
                               classify_actions, classify_group, decode)
from groundact.encoder import SharedRepresentation, VLEncoderParams, encode
from groundact.fusion import ActorFusionParams, ReferenceBoxParams
from groundact.tensor import ContractError, Tensor


def toy_cfg(**kw):
    base = dict(d_model=8, num_heads=2, d_ff_mult=2, dropout=0.0,
                encoder_layers=0, decoder_layers=2, frames=3,
                grid_h=2, grid_w=2, raster_h=8, raster_w=8,
                l_max=6, vocab_size=16, num_queries=3, num_actions=6,
                num_groups=6)
    base.update(kw)
    return ModelConfig(**base)


def make_rep(rng, cfg, b=1, l=4):
    v = Tensor(rng.normal(size=(b, cfg.frames, cfg.hw, cfg.d_model)))
    t = Tensor(rng.normal(size=(b, l, cfg.d_model)))
    enc_params = VLEncoderParams.init(rng, cfg)
    return encode(v, t, enc_params, cfg, positional=False)


def make_all(rng, cfg, b=1):
    rep = make_rep(rng, cfg, b=b)
    dec = ActionDecoderParams.init(rng, cfg)
    fusion = ActorFusionParams.init(rng, cfg)
    ref = ReferenceBoxParams.init(cfg.num_queries)
    return rep, dec, fusion, ref


def test_fresh_box_heads_emit_reference_boxes():
    # zero-initialized final box-head layers leave the tube at the reference
    cfg = toy_cfg()
    rng = np.random.default_rng(0)
    rep, dec, fusion, ref = make_all(rng, cfg)
    out = decode(rep, dec, cfg, fusion, ref)
    for boxes in out.per_layer_boxes:
        np.testing.assert_allclose(
            boxes.data, np.broadcast_to([0.5, 0.5, 0.1, 0.1],
                                        boxes.shape), atol=1e-12)


def test_boxes_stay_in_unit_interval():
    cfg = toy_cfg()
    rng = np.random.default_rng(1)
    rep, dec, fusion, ref = make_all(rng, cfg, b=2)
    # give every box head real output weights
    for layer in dec.layers:
        layer.box_head.w3 = Tensor(rng.normal(size=(cfg.d_model, 4)),
                                   requires_grad=True)
        layer.box_head.b3 = Tensor(rng.normal(size=4), requires_grad=True)
    out = decode(rep, dec, cfg, fusion, ref)
    assert len(out.per_layer_boxes) == cfg.decoder_layers
    for boxes in out.per_layer_boxes:
        assert boxes.shape == (2, cfg.num_queries, cfg.frames, 4)
        assert boxes.data.min() > 0.0 and boxes.data.max() < 1.0
    assert out.final_boxes is out.per_layer_boxes[-1]


def test_logit_shapes():
    cfg = toy_cfg()
    rng = np.random.default_rng(2)
    rep, dec, fusion, ref = make_all(rng, cfg, b=2)
    out = decode(rep, dec, cfg, fusion, ref)
    assert out.action_logits.shape == (2, cfg.num_queries, cfg.num_actions)
    assert out.group_logits.shape == (2, cfg.num_groups)


def test_zero_decoder_layers_yields_no_boxes_but_logits():
    cfg = toy_cfg(decoder_layers=0)
    rng = np.random.default_rng(3)
    rep, dec, fusion, ref = make_all(rng, cfg)
    out = decode(rep, dec, cfg, fusion, ref)
    assert out.per_layer_boxes == []
    assert out.group_logits.shape == (1, cfg.num_groups)
    with pytest.raises(ContractError):
        out.final_boxes


def test_fusion_off_uses_learned_queries():
    cfg = toy_cfg(use_actor_fusion=False)
    rng = np.random.default_rng(4)
    rep, dec, _, ref = make_all(rng, cfg)
    out = decode(rep, dec, cfg, fusion_params=None, ref_params=ref)
    assert out.final_boxes.shape == (1, cfg.num_queries, cfg.frames, 4)
    # learned queries receive gradient through the stack
    T.tsum(out.action_logits).backward()
    assert dec.learned_queries.grad is not None
    assert np.abs(dec.learned_queries.grad).max() > 0


def test_teacher_forcing_invisible_at_inference():
    cfg = toy_cfg(teacher_forcing=True)
    rng = np.random.default_rng(5)
    rep, dec, fusion, ref = make_all(rng, cfg)
    for layer in dec.layers:
        layer.box_head.w3 = Tensor(rng.normal(size=(cfg.d_model, 4)),
                                   requires_grad=True)
    gt = rng.uniform(0.3, 0.7, size=(1, 2, 4))
    plain = decode(rep, dec, cfg, fusion, ref)
    with_gt = decode(rep, dec, cfg, fusion, ref, gt_boxes=gt,
                     gt_mask=np.ones((1, 2), dtype=bool))
    assert (plain.final_boxes.data.tobytes()
            == with_gt.final_boxes.data.tobytes())


def test_teacher_forcing_changes_training_pass():
    cfg = toy_cfg(teacher_forcing=True)
    rng = np.random.default_rng(6)
    rep, dec, fusion, ref = make_all(rng, cfg)
    for layer in dec.layers:
        layer.box_head.w3 = Tensor(rng.normal(size=(cfg.d_model, 4)),
                                   requires_grad=True)
    ctx = nn.RunContext(training=True, rng=np.random.default_rng(0))
    gt = rng.uniform(0.3, 0.7, size=(1, 2, 4))
    plain = decode(rep, dec, cfg, fusion, ref, ctx=ctx)
    forced = decode(rep, dec, cfg, fusion, ref, gt_boxes=gt,
                    gt_mask=np.ones((1, 2), dtype=bool), ctx=ctx)
    assert np.abs(plain.final_boxes.data - forced.final_boxes.data).max() > 1e-9


def test_classifiers_are_rowwise_linear():
    cfg = toy_cfg()
    rng = np.random.default_rng(7)
    dec = ActionDecoderParams.init(rng, cfg)
    x = rng.normal(size=(2, cfg.num_queries, cfg.d_model))
    logits = classify_actions(Tensor(x), dec).data
    np.testing.assert_allclose(
        logits, x @ dec.action_w.data + dec.action_b.data, atol=1e-12)
    g = rng.normal(size=(2, cfg.d_model))
    np.testing.assert_allclose(
        classify_group(Tensor(g), dec).data,
        g @ dec.group_w.data + dec.group_b.data, atol=1e-12)


def test_gradient_flows_to_reference_offsets():
    cfg = toy_cfg()
    rng = np.random.default_rng(8)
    rep, dec, fusion, ref = make_all(rng, cfg)
    out = decode(rep, dec, cfg, fusion, ref)
    # later layers refine detached logits; the first layer's (auxiliary-loss)
    # boxes are the live path back to the reference offsets
    T.tsum(out.per_layer_boxes[0]).backward()
    assert ref.offsets.grad is not None
    assert np.abs(ref.offsets.grad).max() > 0


def test_decode_deterministic():
    cfg = toy_cfg()
    rng = np.random.default_rng(9)
    rep, dec, fusion, ref = make_all(rng, cfg)
    a = decode(rep, dec, cfg, fusion, ref)
    b = decode(rep, dec, cfg, fusion, ref)
    assert (a.final_boxes.data.tobytes() == b.final_boxes.data.tobytes())
    assert (a.group_logits.data.tobytes() == b.group_logits.data.tobytes())
