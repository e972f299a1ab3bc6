"""Cross-modal encoder stack: identity base case, equivariances, layout."""

import numpy as np
import pytest

from groundact import encoder as enc
from groundact import nn
from groundact import tensor as T
from groundact.config import ModelConfig
from groundact.encoder import (SharedRepresentation, VLEncoderParams,
                               cross_modal_block, encode)
from groundact.tensor import ShapeError, Tensor


def toy_cfg(**kw):
    base = dict(d_model=8, num_heads=2, d_ff_mult=2, dropout=0.0,
                encoder_layers=2, decoder_layers=1, frames=3,
                grid_h=2, grid_w=2, raster_h=8, raster_w=8,
                l_max=6, vocab_size=16, num_queries=2)
    base.update(kw)
    return ModelConfig(**base)


def rand_inputs(rng, cfg, b=2, l=4):
    v = Tensor(rng.normal(size=(b, cfg.frames, cfg.hw, cfg.d_model)))
    t = Tensor(rng.normal(size=(b, l, cfg.d_model)))
    return v, t


def test_zero_layers_is_identity_concat():
    cfg = toy_cfg(encoder_layers=0)
    rng = np.random.default_rng(0)
    params = VLEncoderParams.init(rng, cfg)
    v, t = rand_inputs(rng, cfg)
    rep = encode(v, t, params, cfg, positional=False)
    np.testing.assert_array_equal(rep.video.data, v.data)
    np.testing.assert_array_equal(rep.text.data, t.data)
    np.testing.assert_allclose(rep.group.data,
                               np.broadcast_to(params.group_token.data,
                                               (2, 1, cfg.d_model)))


def test_concat_view_layout():
    cfg = toy_cfg(encoder_layers=0)
    rng = np.random.default_rng(1)
    params = VLEncoderParams.init(rng, cfg)
    v, t = rand_inputs(rng, cfg, b=1, l=4)
    rep = encode(v, t, params, cfg, positional=False)
    rows = rep.vt_f.data[0]
    layout = rep.layout
    tv = cfg.frames * cfg.hw
    assert layout == {"video": (0, tv), "text": (tv, tv + 4),
                      "group": (tv + 4, tv + 5)}
    np.testing.assert_array_equal(rows[:tv],
                                  v.data.reshape(tv, cfg.d_model))
    np.testing.assert_array_equal(rows[tv:tv + 4], t.data[0])
    np.testing.assert_allclose(rows[tv + 4], params.group_token.data[0])


def test_positional_encoding_varies_frames():
    cfg = toy_cfg(encoder_layers=0)
    rng = np.random.default_rng(2)
    params = VLEncoderParams.init(rng, cfg)
    v = Tensor(np.zeros((1, cfg.frames, cfg.hw, cfg.d_model)))
    t = Tensor(np.zeros((1, 2, cfg.d_model)))
    rep = encode(v, t, params, cfg, positional=True)
    # each frame gets its own temporal code, constant across cells
    assert np.abs(rep.video.data[0, 0] - rep.video.data[0, 1]).max() > 1e-6
    for f in range(cfg.frames):
        np.testing.assert_array_equal(rep.video.data[0, f, 0],
                                      rep.video.data[0, f, 1])


def test_shapes_preserved_through_layers():
    cfg = toy_cfg()
    rng = np.random.default_rng(3)
    params = VLEncoderParams.init(rng, cfg)
    v, t = rand_inputs(rng, cfg, b=2, l=5)
    rep = encode(v, t, params, cfg)
    assert rep.video.shape == v.shape
    assert rep.text.shape == t.shape
    assert rep.group.shape == (2, 1, cfg.d_model)


def test_single_frame_clip_supported():
    cfg = toy_cfg(frames=1)
    rng = np.random.default_rng(4)
    params = VLEncoderParams.init(rng, cfg)
    v, t = rand_inputs(rng, cfg)
    rep = encode(v, t, params, cfg)
    assert rep.video.shape == v.shape


def test_frame_permutation_equivariance_without_positional():
    cfg = toy_cfg(use_fast_branch=False)
    rng = np.random.default_rng(5)
    params = VLEncoderParams.init(rng, cfg)
    v, t = rand_inputs(rng, cfg, b=1)
    perm = np.array([2, 0, 1])
    rep = encode(v, t, params, cfg, positional=False)
    rep_p = encode(Tensor(v.data[:, perm]), t, params, cfg, positional=False)
    np.testing.assert_allclose(rep_p.video.data, rep.video.data[:, perm],
                               atol=1e-9)
    np.testing.assert_allclose(rep_p.text.data, rep.text.data, atol=1e-9)
    np.testing.assert_allclose(rep_p.group.data, rep.group.data, atol=1e-9)


def test_fast_branch_breaks_frame_permutation_equivariance():
    cfg = toy_cfg(use_fast_branch=True)
    rng = np.random.default_rng(6)
    params = VLEncoderParams.init(rng, cfg)
    # give the temporal conv kernel real weight so order matters
    params.fast_branch.kernel = Tensor(
        rng.normal(size=params.fast_branch.kernel.shape), requires_grad=True)
    v, t = rand_inputs(rng, cfg, b=1)
    perm = np.array([2, 0, 1])
    rep = encode(v, t, params, cfg, positional=False)
    rep_p = encode(Tensor(v.data[:, perm]), t, params, cfg, positional=False)
    assert np.abs(rep_p.video.data - rep.video.data[:, perm]).max() > 1e-6


def test_text_padding_rows_do_not_leak():
    cfg = toy_cfg()
    rng = np.random.default_rng(7)
    params = VLEncoderParams.init(rng, cfg)
    v, t = rand_inputs(rng, cfg, b=1, l=5)
    mask = np.array([[True, True, True, False, False]])
    rep = encode(v, t, params, cfg, text_mask=mask)
    garbled = t.data.copy()
    garbled[0, 3:] += 100.0
    rep2 = encode(v, Tensor(garbled), params, cfg, text_mask=mask)
    np.testing.assert_allclose(rep2.video.data, rep.video.data, atol=1e-8)
    np.testing.assert_allclose(rep2.group.data, rep.group.data, atol=1e-8)
    np.testing.assert_allclose(rep2.text.data[0, :3], rep.text.data[0, :3],
                               atol=1e-8)


def test_width_mismatch_rejected():
    cfg = toy_cfg()
    params = VLEncoderParams.init(np.random.default_rng(8), cfg)
    with pytest.raises(ShapeError):
        encode(Tensor(np.zeros((1, 3, 4, 6))), Tensor(np.zeros((1, 2, 6))),
               params, cfg)
    with pytest.raises(ShapeError):
        encode(Tensor(np.zeros((3, 4, 8))), Tensor(np.zeros((1, 2, 8))),
               params, cfg)


def test_cross_modal_block_zero_projection_is_identity():
    cfg = toy_cfg()
    rng = np.random.default_rng(9)
    layer = enc.EncoderLayerParams.init(rng, cfg)
    layer.v2t_cross.wo = Tensor(np.zeros((cfg.d_model, cfg.d_model)),
                                requires_grad=True)
    layer.t2v_cross.wo = Tensor(np.zeros((cfg.d_model, cfg.d_model)),
                                requires_grad=True)
    video = Tensor(rng.normal(size=(1, 5, cfg.d_model)))
    text = Tensor(rng.normal(size=(1, 3, cfg.d_model)))
    out_v, out_t = cross_modal_block(video, text, layer)
    np.testing.assert_array_equal(out_v.data, video.data)
    np.testing.assert_array_equal(out_t.data, text.data)


def test_gradient_reaches_both_modalities_and_group_token():
    cfg = toy_cfg()
    rng = np.random.default_rng(10)
    params = VLEncoderParams.init(rng, cfg)
    v, t = rand_inputs(rng, cfg)
    v.requires_grad = t.requires_grad = True
    rep = encode(v, t, params, cfg)
    loss = T.add(T.tsum(T.mul(rep.video, rep.video)),
                 T.add(T.tsum(T.mul(rep.text, rep.text)),
                       T.tsum(T.mul(rep.group, rep.group))))
    loss.backward()
    assert np.abs(v.grad).max() > 0
    assert np.abs(t.grad).max() > 0
    assert np.abs(params.group_token.grad).max() > 0


def test_encode_deterministic():
    cfg = toy_cfg()
    rng = np.random.default_rng(11)
    params = VLEncoderParams.init(rng, cfg)
    v, t = rand_inputs(rng, cfg)
    a = encode(v, t, params, cfg).video.data
    b = encode(v, t, params, cfg).video.data
    assert a.tobytes() == b.tobytes()
