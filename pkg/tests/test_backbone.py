"""Backbone blocks, the shape chain, and recurrent state handling."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emf.backbone import (
    LstmStateSet,
    RepBlockLayout,
    backbone_forward,
    convffn_forward,
    emf_block_forward,
    epe_forward,
    init_model,
    repblock_branches,
    repblock_forward,
    repmixer_forward,
    reset_states,
    root_module_forward,
    stage_forward,
)
from emf.errors import ConfigError, ShapeError, StateError
from emf.model import ModelConfig, randomize_batchnorms
from emf.reparam import fuse_model
from emf.tensor_core import batchnorm_infer, gelu


def _zero(model, *names):
    for n in names:
        model.params[n] = np.zeros_like(model.params[n])


def _input(rng, c, h, w):
    return rng.poisson(0.5, (c, h, w)).astype(np.float32)


class TestEpe:
    def test_locality(self, tiny_model, rng):
        m = randomize_batchnorms(tiny_model, 3)
        x = _input(rng, 20, 12, 14)
        x2 = x.copy()
        x2[:, 5, 7] += 3.0
        diff = np.abs(epe_forward(x, m) - epe_forward(x2, m)).sum(axis=0)
        assert diff[5, 7] > 0
        diff[5, 7] = 0
        assert not diff.any()

    def test_identity_weights_give_gelu(self, tiny_model, rng):
        m = tiny_model.copy()
        m.params["epe.pw.weight"] = np.eye(20, dtype=np.float32).reshape(20, 20, 1, 1)
        m.params["epe.pw.bias"] = np.zeros(20, np.float32)
        x = rng.uniform(0, 3, (20, 4, 4)).astype(np.float32)
        # fresh BN is identity up to eps
        assert np.max(np.abs(epe_forward(x, m) - gelu(x))) < 1e-4

    def test_channels(self, tiny_model, rng):
        assert epe_forward(_input(rng, 20, 4, 4), tiny_model).shape == (20, 4, 4)
        with pytest.raises(ShapeError):
            epe_forward(_input(rng, 19, 4, 4), tiny_model)


class TestRepBlock:
    def test_branch_sets(self):
        assert RepBlockLayout(8, 7, 2).branches == ("conv_k", "conv_3")
        assert RepBlockLayout(8, 7, 1).branches == ("conv_k", "conv_3", "skip")
        assert RepBlockLayout(8, 3, 1).branches == ("conv_k", "skip")
        assert RepBlockLayout(8, 1, 1, dense=True).groups == 1

    def test_zero_branches_give_activation_of_input(self, tiny_model, rng):
        m = tiny_model.copy()
        prefix = "stage1.root.rep2"
        _zero(m, prefix + ".conv_k.weight", prefix + ".conv_k.bias")
        x = rng.standard_normal((8, 6, 6)).astype(np.float32)
        layout = RepBlockLayout(8, 1, 1, dense=True)
        # conv branch outputs zero; skip BN is identity up to eps
        assert np.max(np.abs(repblock_forward(x, m, prefix, layout) - gelu(x))) < 1e-4

    def test_stride_two_shape(self, tiny_model, rng):
        x = rng.standard_normal((8, 64, 64)).astype(np.float32)
        y = repblock_forward(x, tiny_model, "stage1.root.rep0", RepBlockLayout(8, 7, 2))
        assert y.shape == (8, 32, 32)

    def test_equals_sum_of_branches(self, tiny_model, rng):
        m = randomize_batchnorms(tiny_model, 5)
        layout = RepBlockLayout(8, 7, 2)
        x = rng.standard_normal((8, 20, 20)).astype(np.float32)
        ref = gelu(np.sum(repblock_branches(x, m, "stage1.root.rep0", layout), axis=0))
        assert np.max(np.abs(repblock_forward(x, m, "stage1.root.rep0", layout) - ref)) <= 1e-6


class TestRootModule:
    @pytest.mark.parametrize("stage,cin,hw,out", [
        (1, 20, (240, 304), (8, 60, 76)),
        (2, 8, (60, 76), (16, 30, 38)),
        (4, 16, (15, 19), (24, 8, 10)),
    ])
    def test_shapes(self, tiny_model, stage, cin, hw, out):
        x = np.zeros((cin,) + hw, np.float32)
        assert root_module_forward(x, tiny_model, stage).shape == out

    def test_bad_stage(self, tiny_model):
        with pytest.raises(ValueError):
            root_module_forward(np.zeros((8, 4, 4), np.float32), tiny_model, 5)


class TestEmfBlock:
    def test_repmixer_zero_conv_is_identity(self, tiny_model, rng):
        m = tiny_model.copy()
        _zero(m, "stage2.block0.mixer.dw.weight", "stage2.block0.mixer.dw.bias")
        x = rng.standard_normal((16, 5, 5)).astype(np.float32)
        assert np.array_equal(repmixer_forward(x, m, "stage2.block0.mixer"), x)

    def test_repmixer_channel_independence(self, tiny_model, rng):
        x = rng.standard_normal((16, 6, 6)).astype(np.float32)
        x2 = x.copy()
        x2[3] += 1.0
        d = np.abs(repmixer_forward(x, tiny_model, "stage2.block0.mixer")
                   - repmixer_forward(x2, tiny_model, "stage2.block0.mixer")).sum(axis=(1, 2))
        assert d[3] > 0 and np.count_nonzero(d) == 1

    def test_repmixer_fused_matches(self, tiny_model, rng):
        m = randomize_batchnorms(tiny_model, 8)
        f = fuse_model(m)
        x = rng.standard_normal((16, 9, 9)).astype(np.float32)
        a = repmixer_forward(x, m, "stage2.block1.mixer")
        b = repmixer_forward(x, f, "stage2.block1.mixer")
        assert np.max(np.abs(a - b)) <= 1e-4

    def test_repmixer_form_mismatch(self, tiny_model, rng):
        f = fuse_model(tiny_model)
        f.params.pop("stage2.block0.mixer.fused.weight")
        with pytest.raises(StateError):
            repmixer_forward(np.zeros((16, 4, 4), np.float32), f, "stage2.block0.mixer")

    def test_convffn_zero_projection_is_identity(self, tiny_model, rng):
        m = tiny_model.copy()
        _zero(m, "stage1.block0.ffn.project.weight", "stage1.block0.ffn.project.bias")
        x = rng.standard_normal((8, 7, 7)).astype(np.float32)
        assert np.array_equal(convffn_forward(x, m, "stage1.block0.ffn"), x)

    def test_convffn_hidden_width(self, default_model):
        assert default_model.params["stage1.block0.ffn.expand.weight"].shape[0] == 256

    def test_convffn_receptive_field_is_7x7(self, tiny_model, rng):
        x = rng.standard_normal((8, 15, 15)).astype(np.float32)
        x2 = x.copy()
        x2[:, 7, 7] += 5.0
        d = np.abs(convffn_forward(x, tiny_model, "stage1.block0.ffn") - x
                   - (convffn_forward(x2, tiny_model, "stage1.block0.ffn") - x2)).sum(axis=0)
        ys, xs = np.nonzero(d)
        assert max(np.abs(ys - 7).max(), np.abs(xs - 7).max()) == 3

    def test_block_is_composition(self, tiny_model, rng):
        x = rng.standard_normal((16, 30, 38)).astype(np.float32)
        y = emf_block_forward(x, tiny_model, "stage2.block0")
        ref = convffn_forward(repmixer_forward(x, tiny_model, "stage2.block0.mixer"), tiny_model, "stage2.block0.ffn")
        assert y.shape == x.shape and np.array_equal(y, ref)

    def test_zero_residual_branches_give_identity(self, tiny_model, rng):
        m = tiny_model.copy()
        _zero(m, "stage2.block0.mixer.dw.weight", "stage2.block0.mixer.dw.bias",
              "stage2.block0.ffn.project.weight", "stage2.block0.ffn.project.bias")
        x = rng.standard_normal((16, 6, 6)).astype(np.float32)
        assert np.array_equal(emf_block_forward(x, m, "stage2.block0"), x)


class TestStage:
    def test_state_evolves_and_reset_restores(self, tiny_model, rng):
        x = rng.standard_normal((8, 16, 16)).astype(np.float32)
        y1, s1 = stage_forward(x, None, tiny_model, 2)
        y2, _ = stage_forward(x, s1, tiny_model, 2)
        assert np.max(np.abs(y1 - y2)) > 0
        y3, _ = stage_forward(x, None, tiny_model, 2)
        assert np.array_equal(y1, y3)

    def test_stale_state_shape(self, tiny_model, rng):
        _, s = stage_forward(np.zeros((8, 16, 16), np.float32), None, tiny_model, 2)
        with pytest.raises(StateError, match="reset"):
            stage_forward(np.zeros((8, 32, 32), np.float32), s, tiny_model, 2)


class TestBackbone:
    def test_gen1_shapes(self, tiny_model):
        outs, _ = backbone_forward(np.zeros((20, 240, 304), np.float32), None, tiny_model)
        assert [o.shape[1:] for o in outs] == [(60, 76), (30, 38), (15, 19), (8, 10)]

    @settings(max_examples=15, deadline=None)
    @given(h=st.integers(32, 90), w=st.integers(32, 90))
    def test_stride_invariant(self, tiny_model, h, w):
        outs, _ = backbone_forward(np.zeros((20, h, w), np.float32), None, tiny_model)
        for i, o in enumerate(outs):
            s = 4 * 2**i
            # each stride-2 step with pad k//2 maps n -> ceil(n / 2)
            assert o.shape[1:] == (math.ceil(h / s), math.ceil(w / s))

    def test_deterministic_with_reset(self, tiny_model, rng):
        x = _input(rng, 20, 40, 48)
        a, _ = backbone_forward(x, LstmStateSet(), tiny_model)
        b, _ = backbone_forward(x, LstmStateSet(), tiny_model)
        assert all(np.array_equal(p, q) for p, q in zip(a, b))

    def test_state_round_trip(self, tiny_model, rng):
        _, s = backbone_forward(_input(rng, 20, 40, 48), None, tiny_model)
        s2 = LstmStateSet.from_bytes(s.to_bytes())
        for p, q in zip(s.states, s2.states):
            assert np.array_equal(p.h, q.h) and np.array_equal(p.c, q.c)


class TestResetStates:
    def _sets(self, tiny_model, rng, n):
        return [backbone_forward(_input(rng, 20, 32, 32), None, tiny_model)[1] for _ in range(n)]

    def test_all_true(self, tiny_model, rng):
        for s in reset_states(self._sets(tiny_model, rng, 2), [True, True]):
            assert all(not st.h.any() and not st.c.any() for st in s.states)

    def test_all_false_and_partial(self, tiny_model, rng):
        sets = self._sets(tiny_model, rng, 2)
        out = reset_states(sets, [False, True])
        assert out[0] is sets[0]
        assert not any(st.h.any() for st in out[1].states)
        assert all(st.h.any() for st in sets[1].states)

    def test_mask_length(self):
        with pytest.raises(ValueError):
            reset_states([LstmStateSet()], [True, False])


class TestInit:
    def test_same_seed_same_checksum(self, tiny_config):
        assert init_model(tiny_config, 3).checksum() == init_model(tiny_config, 3).checksum()
        assert init_model(tiny_config, 3).checksum() != init_model(tiny_config, 4).checksum()

    def test_default_parameter_count(self, default_model):
        # informational: the reference total is 14.9 M
        assert default_model.num_parameters() == 11_643_515

    def test_fresh_bn_is_identity(self, tiny_model, rng):
        x = rng.standard_normal((8, 3, 3)).astype(np.float32)
        assert np.max(np.abs(batchnorm_infer(x, tiny_model.bn("stage1.root.bn")) - x)) < 1e-4

    def test_lstm_forget_bias(self, tiny_model):
        b = tiny_model.params["stage1.lstm.wx.bias"]
        assert np.all(b[8:16] == 1.0) and np.all(b[:8] == 0.0)

    @pytest.mark.parametrize("kw", [
        {"stage_channels": (8, 16, 0, 8)},
        {"detection_levels": (0, 2)},
        {"stage_channels": (8, 16)},
    ])
    def test_invalid_config(self, kw):
        with pytest.raises(ConfigError):
            ModelConfig(**kw)

    def test_config_round_trip(self, tiny_config):
        assert ModelConfig.from_dict(tiny_config.to_dict()) == tiny_config
        with pytest.raises(ConfigError):
            ModelConfig.from_dict({"bogus": 1})
