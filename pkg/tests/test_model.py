"""Grounding model: projection, matching, response maps, aggregation rounds."""

import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from pixelphrase import ops
from pixelphrase.model import (
    ModelConfig,
    ModelParams,
    add_positional_encoding,
    aggregation_round,
    forward,
    load_checkpoint,
    match,
    positional_encoding,
    project_round0,
    respond,
    save_checkpoint,
)
from pixelphrase.tensor import Tensor


def _t(arr, dtype=np.float64, grad=False):
    return Tensor(np.asarray(arr, dtype=dtype), requires_grad=grad)


def _tiny_config(**overrides):
    base = dict(channels=4, heads=2, compatible_pixels=3, rounds=1,
                visual_channels=4, phrase_channels=4, norm_groups=2,
                ffn_factor=2, positional=False)
    base.update(overrides)
    return ModelConfig(**base)


class TestPositionalEncoding:
    def test_zero_position_pattern(self):
        # phase 0: every sin channel is 0, every cos channel is 1
        code = positional_encoding(3, 3, 8)
        half = 4
        even = np.arange(half) % 2 == 0
        assert_allclose(code[0, 0, :half][even], 0.0)
        assert_allclose(code[0, 0, :half][~even], 1.0)
        assert_allclose(code[0, 0, half:][even], 0.0)
        assert_allclose(code[0, 0, half:][~even], 1.0)

    def test_deterministic(self):
        a = positional_encoding(4, 5, 6)
        b = positional_encoding(4, 5, 6)
        assert np.array_equal(a, b)

    def test_hand_table_2x2x4(self):
        # half=2, pair exponent 10000^0 = 1, so channels are
        # [sin(col), cos(col), sin(row), cos(row)]
        code = positional_encoding(2, 2, 4, dtype=np.float64)
        s1, c1 = math.sin(1.0), math.cos(1.0)
        expected = np.array([
            [[0.0, 1.0, 0.0, 1.0], [s1, c1, 0.0, 1.0]],
            [[0.0, 1.0, s1, c1], [s1, c1, s1, c1]],
        ])
        assert_allclose(code, expected, rtol=1e-12)

    def test_odd_channels_rejected(self):
        with pytest.raises(ValueError, match="even"):
            positional_encoding(2, 2, 5)

    def test_add_matches_raw_code(self):
        rng = np.random.default_rng(0)
        feats = rng.normal(size=(3, 4, 6)).astype(np.float32)
        out = add_positional_encoding(Tensor(feats))
        assert_allclose(out.data, feats + positional_encoding(3, 4, 6), rtol=1e-6)

    def test_frequency_ladder_decreases(self):
        # later channel pairs oscillate slower: larger position needed
        code = positional_encoding(1, 50, 8, dtype=np.float64)
        fast = code[0, :, 0]   # sin at frequency 1
        slow = code[0, :, 2]   # sin at frequency 10000^(-2/4)
        assert np.abs(np.diff(fast)).mean() > np.abs(np.diff(slow)).mean()


class TestProjection:
    def test_identity_weights(self):
        cfg = _tiny_config()
        params = ModelParams.initialize(cfg, seed=0, dtype=np.float64)
        eye = np.eye(4, dtype=np.float64)
        params["visual_proj.weight"].data[:] = eye
        params["phrase_proj.weight"].data[:] = eye
        rng = np.random.default_rng(1)
        feats = rng.normal(size=(2, 3, 4))
        phrases = rng.normal(size=(5, 4))
        pix, phr = project_round0(_t(feats), _t(phrases), params)
        assert_allclose(pix.data, feats.reshape(6, 4), rtol=1e-12)
        assert_allclose(phr.data, phrases, rtol=1e-12)

    def test_zero_phrases_project_to_zero(self):
        cfg = _tiny_config()
        params = ModelParams.initialize(cfg, seed=0, dtype=np.float64)
        _, phr = project_round0(_t(np.ones((2, 2, 4))), _t(np.zeros((3, 4))),
                                params)
        assert_allclose(phr.data, np.zeros((3, 4)))

    def test_matches_matmul_oracle(self):
        cfg = ModelConfig(channels=6, heads=2, compatible_pixels=2, rounds=0,
                          visual_channels=4, phrase_channels=5, norm_groups=2,
                          positional=False)
        params = ModelParams.initialize(cfg, seed=3, dtype=np.float64)
        rng = np.random.default_rng(2)
        feats = rng.normal(size=(3, 2, 4))
        phrases = rng.normal(size=(4, 5))
        pix, phr = project_round0(_t(feats), _t(phrases), params)
        assert_allclose(pix.data,
                        feats.reshape(6, 4) @ params["visual_proj.weight"].data,
                        rtol=1e-12)
        assert_allclose(phr.data, phrases @ params["phrase_proj.weight"].data,
                        rtol=1e-12)

    def test_channel_mismatch_rejected(self):
        cfg = _tiny_config()
        params = ModelParams.initialize(cfg, seed=0, dtype=np.float64)
        with pytest.raises(ValueError, match="visual"):
            project_round0(_t(np.ones((2, 2, 3))), _t(np.ones((2, 4))), params)
        with pytest.raises(ValueError, match="phrase"):
            project_round0(_t(np.ones((2, 2, 4))), _t(np.ones((2, 3))), params)


class TestMatch:
    def test_orthogonal_vectors_score_zero(self):
        pixels = _t([[1.0, 0.0], [0.0, 0.0]])
        phrases = _t([[0.0, 1.0]])
        assert_allclose(match(pixels, phrases).data, [[0.0, 0.0]])

    def test_unit_norm_identical_row_scores_one(self):
        v = np.array([3.0, 4.0]) / 5.0
        out = match(_t([v]), _t([v]))
        assert_allclose(out.data, [[1.0]], rtol=1e-12)

    def test_dot_product_oracle(self):
        rng = np.random.default_rng(3)
        pixels = rng.normal(size=(4, 6))
        phrases = rng.normal(size=(3, 6))
        got = match(_t(pixels), _t(phrases)).data
        expected = np.array([[p @ f for f in pixels] for p in phrases])
        assert got.shape == (3, 4)
        assert_allclose(got, expected, rtol=1e-12)

    def test_scaling_one_phrase_scales_only_its_row(self):
        rng = np.random.default_rng(4)
        pixels = rng.normal(size=(5, 3))
        phrases = rng.normal(size=(3, 3))
        base = match(_t(pixels), _t(phrases)).data
        scaled = phrases.copy()
        scaled[1] *= 2.5
        out = match(_t(pixels), _t(scaled)).data
        assert_allclose(out[1], 2.5 * base[1], rtol=1e-12)
        assert_allclose(out[[0, 2]], base[[0, 2]], rtol=1e-12)

    def test_joint_dim_mismatch_rejected(self):
        with pytest.raises(ValueError, match="joint"):
            match(_t(np.ones((4, 3))), _t(np.ones((2, 5))))


class TestRespond:
    def test_zero_scores_give_half(self):
        maps = respond(_t(np.zeros((2, 6))), 2, 3)
        assert maps.shape == (2, 2, 3)
        assert_allclose(maps.data, np.full((2, 2, 3), 0.5))

    def test_large_score_saturates_below_one(self):
        maps = respond(_t([[50.0]]), 1, 1)
        assert maps.data[0, 0, 0] > 0.9999
        assert maps.data[0, 0, 0] < 1.0

    def test_matches_sigmoid_oracle(self):
        rng = np.random.default_rng(5)
        scores = rng.normal(scale=3.0, size=(3, 12))
        maps = respond(_t(scores), 3, 4).data
        assert_allclose(maps, (1.0 / (1.0 + np.exp(-scores))).reshape(3, 3, 4),
                        rtol=1e-10)


def _numpy_round_oracle(feats_flat, phrases, scores, params, cfg):
    """Plain-numpy re-implementation of one aggregation round."""
    g = {name: t.data for name, t in params.named_parameters()}
    p = "round0."

    def ln(x, gamma, beta):
        mu = x.mean(-1, keepdims=True)
        var = x.var(-1, keepdims=True)
        return (x - mu) / np.sqrt(var + 1e-5) * gamma + beta

    # pixel re-projection: linear, group norm over (pixels x group channels), relu
    proj = feats_flat @ g[p + "visual.weight"]
    per = cfg.channels // cfg.norm_groups
    vis = np.empty_like(proj)
    for grp in range(cfg.norm_groups):
        sl = slice(grp * per, (grp + 1) * per)
        block = proj[:, sl]
        vis[:, sl] = (block - block.mean()) / np.sqrt(block.var() + 1e-5)
    vis = np.maximum(vis * g[p + "visual_norm.gamma"]
                     + g[p + "visual_norm.beta"], 0.0)

    n, total = scores.shape
    s = cfg.compatible_pixels
    idx = np.empty((n, s), dtype=np.int64)
    for i in range(n):
        for b in range(s):
            lo, hi = (b * total) // s, ((b + 1) * total) // s
            idx[i, b] = lo + int(np.argmax(scores[i, lo:hi]))
    context = vis[idx]                                    # (N, S, C)

    hw = cfg.head_width
    denom = math.sqrt(cfg.channels if cfg.attn_scale == "joint" else hw)
    attended = np.zeros((n, cfg.channels))
    for h in range(cfg.heads):
        sl = slice(h * hw, (h + 1) * hw)
        q = phrases[:, sl] @ g[p + "attn.query.weight"][h]
        k = context[:, :, sl] @ g[p + "attn.key.weight"][h]
        v = context[:, :, sl] @ g[p + "attn.value.weight"][h]
        logits = np.einsum("nc,nsc->ns", q, k) / denom
        w = np.exp(logits - logits.max(-1, keepdims=True))
        w = w / w.sum(-1, keepdims=True)
        attended[:, sl] = np.einsum("ns,nsc->nc", w, v)

    merged = attended + phrases
    inner = ln(merged, g[p + "norm1.gamma"], g[p + "norm1.beta"])
    hidden = np.maximum(inner @ g[p + "ffn.w1"] + g[p + "ffn.b1"], 0.0)
    ffn_out = hidden @ g[p + "ffn.w2"] + g[p + "ffn.b2"]
    refined = ln(ffn_out, g[p + "norm2.gamma"], g[p + "norm2.beta"]) + merged

    out = refined
    for i in range(3):
        out = np.maximum(out @ g[p + f"phrase_mlp.w{i}"]
                         + g[p + f"phrase_mlp.b{i}"], 0.0)
    out = out @ g[p + "phrase_mlp.w3"] + g[p + "phrase_mlp.b3"]
    return refined, out @ vis.T


class TestAggregationRound:
    def test_matches_scripted_numpy_oracle(self):
        cfg = _tiny_config()
        params = ModelParams.initialize(cfg, seed=7, dtype=np.float64)
        rng = np.random.default_rng(8)
        feats_flat = rng.normal(size=(6, 4))
        phrases = rng.normal(size=(2, 4))
        scores = rng.normal(size=(2, 6))
        refined, new_scores = aggregation_round(
            _t(feats_flat), _t(phrases), _t(scores), params, 0)
        exp_refined, exp_scores = _numpy_round_oracle(
            feats_flat, phrases, scores, params, cfg)
        assert_allclose(refined.data, exp_refined, rtol=1e-10)
        assert_allclose(new_scores.data, exp_scores, rtol=1e-10)

    def test_single_head_single_phrase_oracle(self):
        cfg = ModelConfig(channels=2, heads=1, compatible_pixels=2, rounds=1,
                          visual_channels=2, phrase_channels=2, norm_groups=1,
                          ffn_factor=2, positional=False)
        params = ModelParams.initialize(cfg, seed=9, dtype=np.float64)
        rng = np.random.default_rng(10)
        feats_flat = rng.normal(size=(4, 2))
        phrases = rng.normal(size=(1, 2))
        scores = rng.normal(size=(1, 4))
        refined, new_scores = aggregation_round(
            _t(feats_flat), _t(phrases), _t(scores), params, 0)
        exp_refined, exp_scores = _numpy_round_oracle(
            feats_flat, phrases, scores, params, cfg)
        assert_allclose(refined.data, exp_refined, rtol=1e-10)
        assert_allclose(new_scores.data, exp_scores, rtol=1e-10)

    def test_single_pixel_ignores_query_and_key(self):
        # softmax over one key is 1 whatever the projections say
        cfg = _tiny_config(compatible_pixels=1)
        rng = np.random.default_rng(11)
        feats_flat = rng.normal(size=(6, 4))
        phrases = rng.normal(size=(3, 4))
        scores = rng.normal(size=(3, 6))

        outs = []
        for shift in (0.0, 4.5):
            params = ModelParams.initialize(cfg, seed=12, dtype=np.float64)
            params["round0.attn.query.weight"].data += shift
            params["round0.attn.key.weight"].data -= 2.0 * shift
            refined, new_scores = aggregation_round(
                _t(feats_flat), _t(phrases), _t(scores), params, 0)
            outs.append((refined.data.copy(), new_scores.data.copy()))
        assert np.array_equal(outs[0][0], outs[1][0])
        assert np.array_equal(outs[0][1], outs[1][1])

    def test_zero_visual_features_leave_only_phrase_path(self):
        cfg = _tiny_config()
        params = ModelParams.initialize(cfg, seed=13, dtype=np.float64)
        rng = np.random.default_rng(14)
        phrases = rng.normal(size=(2, 4))
        scores = rng.normal(size=(2, 6))
        refined, new_scores = aggregation_round(
            _t(np.zeros((6, 4))), _t(phrases), _t(scores), params, 0)
        # zero pixels -> zero attention output -> pure residual/FFN path
        exp_refined, exp_scores = _numpy_round_oracle(
            np.zeros((6, 4)), phrases, scores, params, cfg)
        assert_allclose(refined.data, exp_refined, rtol=1e-10)
        assert np.all(new_scores.data == 0.0)
        # and the refined phrases must not depend on the value projection
        params["round0.attn.value.weight"].data += 3.0
        refined2, _ = aggregation_round(
            _t(np.zeros((6, 4))), _t(phrases), _t(scores), params, 0)
        assert np.array_equal(refined.data, refined2.data)

    def test_topk_full_set_ignores_scores(self):
        cfg = _tiny_config(pool="topk", compatible_pixels=6)
        params = ModelParams.initialize(cfg, seed=15, dtype=np.float64)
        rng = np.random.default_rng(16)
        feats_flat = rng.normal(size=(6, 4))
        phrases = rng.normal(size=(2, 4))
        a = aggregation_round(_t(feats_flat), _t(phrases),
                              _t(rng.normal(size=(2, 6))), params, 0)
        b = aggregation_round(_t(feats_flat), _t(phrases),
                              _t(rng.normal(size=(2, 6))), params, 0)
        assert np.array_equal(a[0].data, b[0].data)
        assert np.array_equal(a[1].data, b[1].data)

    def test_too_many_compatible_pixels_rejected(self):
        cfg = _tiny_config(compatible_pixels=9)
        params = ModelParams.initialize(cfg, seed=0, dtype=np.float64)
        with pytest.raises(ValueError, match="compatible_pixels"):
            aggregation_round(_t(np.ones((6, 4))), _t(np.ones((2, 4))),
                              _t(np.ones((2, 6))), params, 0)


class TestForward:
    def test_zero_rounds_equals_initial_matching(self):
        cfg = _tiny_config(rounds=0)
        params = ModelParams.initialize(cfg, seed=17, dtype=np.float64)
        rng = np.random.default_rng(18)
        feats = rng.normal(size=(2, 3, 4))
        phrases = rng.normal(size=(3, 4))
        maps = forward(params, _t(feats), _t(phrases))
        assert len(maps) == 1
        pix, phr = project_round0(_t(feats), _t(phrases), params)
        expected = respond(match(pix, phr), 2, 3)
        assert_allclose(maps[0].data, expected.data, rtol=1e-12)

    def test_three_rounds_give_four_maps(self):
        cfg = _tiny_config(rounds=3)
        params = ModelParams.initialize(cfg, seed=19, dtype=np.float64)
        rng = np.random.default_rng(20)
        maps = forward(params, _t(rng.normal(size=(2, 3, 4))),
                       _t(rng.normal(size=(3, 4))))
        assert len(maps) == 4
        assert all(m.shape == (3, 2, 3) for m in maps)

    def test_rerun_is_bit_identical(self):
        cfg = _tiny_config(rounds=2)
        params = ModelParams.initialize(cfg, seed=21, dtype=np.float64)
        rng = np.random.default_rng(22)
        feats = rng.normal(size=(3, 2, 4))
        phrases = rng.normal(size=(2, 4))
        first = [m.data.copy() for m in forward(params, _t(feats), _t(phrases))]
        second = [m.data.copy() for m in forward(params, _t(feats), _t(phrases))]
        for a, b in zip(first, second):
            assert np.array_equal(a, b)

    def test_phrase_permutation_permutes_rows(self):
        cfg = _tiny_config(rounds=2)
        params = ModelParams.initialize(cfg, seed=23, dtype=np.float64)
        rng = np.random.default_rng(24)
        feats = rng.normal(size=(2, 3, 4))
        phrases = rng.normal(size=(4, 4))
        perm = np.array([2, 0, 3, 1])
        maps = forward(params, _t(feats), _t(phrases))
        maps_p = forward(params, _t(feats), _t(phrases[perm]))
        for m, mp in zip(maps, maps_p):
            assert_allclose(mp.data, m.data[perm], rtol=1e-12)

    def test_maps_strictly_inside_unit_interval(self):
        cfg = _tiny_config(rounds=2)
        params = ModelParams.initialize(cfg, seed=25, dtype=np.float64)
        rng = np.random.default_rng(26)
        maps = forward(params, _t(rng.normal(scale=10.0, size=(4, 4, 4))),
                       _t(rng.normal(scale=10.0, size=(5, 4))))
        for m in maps:
            assert np.all(m.data > 0.0) and np.all(m.data < 1.0)

    def test_batched_forward_matches_per_sample(self):
        cfg = _tiny_config(rounds=2)
        params = ModelParams.initialize(cfg, seed=27, dtype=np.float64)
        rng = np.random.default_rng(28)
        feats = rng.normal(size=(3, 2, 3, 4))
        phrases = rng.normal(size=(3, 2, 4))
        batched = forward(params, _t(feats), _t(phrases))
        for b in range(3):
            single = forward(params, _t(feats[b]), _t(phrases[b]))
            for bm, sm in zip(batched, single):
                assert_allclose(bm.data[b], sm.data, rtol=1e-9)

    def test_positional_encoding_changes_output(self):
        base = _tiny_config(rounds=1)
        cfg_pos = _tiny_config(rounds=1, positional=True)
        rng = np.random.default_rng(29)
        feats = rng.normal(size=(2, 3, 4))
        phrases = rng.normal(size=(2, 4))
        m_off = forward(ModelParams.initialize(base, 30, np.float64),
                        _t(feats), _t(phrases))
        m_on = forward(ModelParams.initialize(cfg_pos, 30, np.float64),
                       _t(feats), _t(phrases))
        assert not np.allclose(m_off[-1].data, m_on[-1].data)


class TestParams:
    def test_same_seed_same_tensors(self):
        cfg = _tiny_config()
        a = ModelParams.initialize(cfg, seed=1)
        b = ModelParams.initialize(cfg, seed=1)
        for (na, ta), (nb, tb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb
            assert np.array_equal(ta.data, tb.data)

    def test_different_seeds_differ(self):
        cfg = _tiny_config()
        a = ModelParams.initialize(cfg, seed=1)
        b = ModelParams.initialize(cfg, seed=2)
        assert not np.array_equal(a["visual_proj.weight"].data,
                                  b["visual_proj.weight"].data)

    def test_param_count_deterministic(self):
        cfg = _tiny_config(rounds=2)
        assert (ModelParams.initialize(cfg, 0).param_count()
                == ModelParams.initialize(cfg, 5).param_count())

    def test_param_count_grows_with_rounds(self):
        c1 = ModelParams.initialize(_tiny_config(rounds=1), 0).param_count()
        c2 = ModelParams.initialize(_tiny_config(rounds=2), 0).param_count()
        assert c2 > c1

    def test_head_width(self):
        assert _tiny_config().head_width == 2

    def test_config_validation(self):
        with pytest.raises(ValueError, match="heads"):
            _tiny_config(heads=3)
        with pytest.raises(ValueError, match="norm_groups"):
            _tiny_config(norm_groups=3)
        with pytest.raises(ValueError, match="raw"):
            _tiny_config(gather="raw", visual_channels=6)
        with pytest.raises(ValueError, match="even"):
            _tiny_config(positional=True, visual_channels=5,
                         gather="projected")
        with pytest.raises(ValueError, match="pool"):
            _tiny_config(pool="random")

    def test_config_roundtrips_via_dict(self):
        cfg = _tiny_config(rounds=2, pool="topk")
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg


class TestCheckpoint:
    def test_roundtrip_is_exact(self, tmp_path):
        cfg = _tiny_config(rounds=2)
        params = ModelParams.initialize(cfg, seed=31)
        save_checkpoint(params, tmp_path / "ckpt")
        loaded, extra = load_checkpoint(tmp_path / "ckpt")
        assert loaded.config == cfg
        for (name, t), (name2, t2) in zip(params.named_parameters(),
                                          loaded.named_parameters()):
            assert name == name2
            assert np.array_equal(t.data, t2.data)

    def test_extra_metadata_persists(self, tmp_path):
        params = ModelParams.initialize(_tiny_config(), seed=0)
        save_checkpoint(params, tmp_path / "ckpt", extra={"epoch": 3, "ar": 0.5})
        _, extra = load_checkpoint(tmp_path / "ckpt")
        assert extra["epoch"] == 3
        assert extra["ar"] == 0.5

    def test_missing_parameter_rejected(self, tmp_path):
        params = ModelParams.initialize(_tiny_config(), seed=0)
        save_checkpoint(params, tmp_path / "ckpt")
        (tmp_path / "ckpt" / "phrase_proj.weight.bin").unlink()
        with pytest.raises(Exception):
            load_checkpoint(tmp_path / "ckpt")

    def test_loaded_params_produce_identical_maps(self, tmp_path):
        cfg = _tiny_config(rounds=1)
        params = ModelParams.initialize(cfg, seed=33)
        save_checkpoint(params, tmp_path / "ckpt")
        loaded, _ = load_checkpoint(tmp_path / "ckpt")
        rng = np.random.default_rng(34)
        feats = Tensor(rng.normal(size=(2, 3, 4)).astype(np.float32))
        phrases = Tensor(rng.normal(size=(2, 4)).astype(np.float32))
        a = forward(params, feats, phrases)
        b = forward(loaded, feats, phrases)
        for ma, mb in zip(a, b):
            assert np.array_equal(ma.data, mb.data)
