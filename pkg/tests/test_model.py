"""Unit tests for the embedding network: shapes, invariances, locality,
checkpoint round-trips."""

import numpy as np
import pytest

from gaitkit.autodiff import ShapeError, Tensor
from gaitkit.model import SfeConfig, SfeModel


def rand_frames(rng, n, cfg):
    return rng.random((n, 1, cfg.frame_height, cfg.frame_width)).astype(np.float32)


def test_shapes_through_pipeline(tiny_config):
    cfg = tiny_config
    model = SfeModel(cfg, seed=0)
    rng = np.random.default_rng(0)
    frames = rand_frames(rng, 5, cfg)
    fg = model.fem_forward(Tensor(frames))
    assert fg.shape == (5, cfg.feature_channels, cfg.feature_height, cfg.feature_width)
    ft = model.tff_fuse(Tensor(frames))
    assert ft.shape == (cfg.feature_channels, cfg.feature_height, cfg.feature_width)
    fs = model.ffe_forward(ft)
    assert fs.shape == ft.shape
    emb = model.embed_sequence(frames)
    assert emb.strips.shape == (cfg.n_strips, cfg.strip_dim)
    assert emb.flat.shape == (cfg.embedding_dim,)


def test_batch_embedding_matches_single(tiny_config):
    model = SfeModel(tiny_config, seed=1)
    rng = np.random.default_rng(1)
    frames = rng.random((3, 4, 1, 16, 12)).astype(np.float32)
    batch = model.embed_frames_batch(frames).data
    for i in range(3):
        single = model.embed_sequence(frames[i]).strips
        np.testing.assert_array_equal(batch[i], single)


def test_temporal_fusion_is_frame_order_invariant(tiny_config):
    model = SfeModel(tiny_config, seed=2)
    rng = np.random.default_rng(2)
    frames = rand_frames(rng, 6, tiny_config)
    base = model.embed_sequence(frames).flat
    for _ in range(5):
        perm = rng.permutation(6)
        shuffled = model.embed_sequence(frames[perm]).flat
        np.testing.assert_array_equal(base, shuffled)   # bitwise


def test_temporal_fusion_monotone_under_frame_addition(tiny_config):
    # fusing over more of the same per-frame feature maps never decreases
    # any coordinate (the per-frame maps are computed once so the check is
    # not affected by batch-size-dependent BLAS rounding)
    from gaitkit import autodiff as ad
    model = SfeModel(tiny_config, seed=3)
    rng = np.random.default_rng(3)
    frames = rand_frames(rng, 7, tiny_config)
    per_frame = model.fem_forward(Tensor(frames))
    fused_small = ad.amax(ad.narrow(per_frame, 0, 0, 5), axis=0).data
    fused_big = ad.amax(per_frame, axis=0).data
    assert np.all(fused_big >= fused_small)


def test_ffe_block_weights_only_touch_their_rows(tiny_config):
    cfg = tiny_config          # ffe_stages=(2,): blocks of 2 feature rows
    model = SfeModel(cfg, seed=4)
    rng = np.random.default_rng(4)
    ft = Tensor(rng.standard_normal(
        (cfg.feature_channels, cfg.feature_height, cfg.feature_width)).astype(np.float32))
    before = model.ffe_forward(ft).data.copy()
    model.params["ffe.s0.b1.w"].data += 1.0
    after = model.ffe_forward(ft).data
    block_h = cfg.feature_height // 2
    np.testing.assert_array_equal(before[:, :block_h], after[:, :block_h])
    assert not np.array_equal(before[:, block_h:], after[:, block_h:])


def test_head_weights_only_touch_their_strip(tiny_config):
    model = SfeModel(tiny_config, seed=5)
    rng = np.random.default_rng(5)
    frames = rand_frames(rng, 3, tiny_config)
    before = model.embed_sequence(frames).strips.copy()
    model.params["head.2.w"].data += 0.5
    after = model.embed_sequence(frames).strips
    for i in range(tiny_config.n_strips):
        if i == 2:
            assert not np.array_equal(before[i], after[i])
        else:
            np.testing.assert_array_equal(before[i], after[i])


def test_global_pool_mean_plus_max():
    model = SfeModel(SfeConfig(), seed=0)
    x = Tensor(np.array([[[1.0, 2.0, 3.0]]]))       # (1, 1, 3)
    assert model.global_pool(x).data[0, 0] == pytest.approx(2.0 + 3.0)


def test_shared_ffe_blocks_reduce_parameters(tiny_config):
    cfg = tiny_config
    shared = SfeConfig(**{**cfg.to_dict(), "share_ffe_blocks": True,
                          "backbone": cfg.backbone, "ffe_stages": cfg.ffe_stages})
    n_own = sum(1 for k in SfeModel(cfg, seed=0).params if k.startswith("ffe."))
    n_shared = sum(1 for k in SfeModel(shared, seed=0).params if k.startswith("ffe."))
    assert n_shared == 2 and n_own == 4   # one block's w/b vs two blocks' w/b


def test_multi_stage_ffe_runs(tiny_config):
    cfg = SfeConfig(frame_height=16, frame_width=12,
                    backbone=tiny_config.backbone, ffe_stages=(2, 4), strip_dim=8)
    model = SfeModel(cfg, seed=0)
    rng = np.random.default_rng(0)
    emb = model.embed_sequence(rand_frames(rng, 3, cfg))
    assert emb.strips.shape == (4, 8)


def test_config_validation_errors():
    with pytest.raises(ValueError):
        SfeConfig(frame_height=30).validate()          # not divisible by 4
    with pytest.raises(ValueError):
        SfeConfig(ffe_stages=(5,)).validate()          # 16 rows not divisible by 5
    with pytest.raises(ShapeError):
        SfeModel(SfeConfig(), seed=0).fem_forward(Tensor(np.zeros((2, 1, 32, 32))))


def test_checkpoint_roundtrip_bitwise(tmp_path, tiny_config):
    model = SfeModel(tiny_config, seed=7)
    path = tmp_path / "m.sfe"
    model.save(path)
    loaded = SfeModel.load(path)
    assert loaded.config == tiny_config
    for name, p in model.params.items():
        np.testing.assert_array_equal(p.data, loaded.params[name].data)
    rng = np.random.default_rng(7)
    frames = rand_frames(rng, 3, tiny_config)
    np.testing.assert_array_equal(model.embed_sequence(frames).flat,
                                  loaded.embed_sequence(frames).flat)


def test_checkpoint_rejects_wrong_magic(tmp_path):
    path = tmp_path / "bad.sfe"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ValueError, match="not a model checkpoint"):
        SfeModel.load(path)


def test_init_is_seed_deterministic(tiny_config):
    a = SfeModel(tiny_config, seed=11)
    b = SfeModel(tiny_config, seed=11)
    c = SfeModel(tiny_config, seed=12)
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)
    assert any(not np.array_equal(a.params[k].data, c.params[k].data) for k in a.params)
