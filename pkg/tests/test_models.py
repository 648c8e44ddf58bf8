import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import central_difference, count_parameters_vit, relative_error
from vcl import cam
from vcl import tensor as T
from vcl.models import (
    CheckpointError,
    CnnConfig,
    UnsupportedOperation,
    ViTConfig,
    build_model,
    freeze_backbone,
    load_checkpoint,
    msa,
    patchify,
    save_checkpoint,
    unpatchify,
    vit_forward,
)
from vcl.tensor import Tensor, default_dtype
from vcl.training import AdamState, TrainConfig, adam_step, sparse_ce_loss

DEFAULT_VIT_PARAMS = 3_324_005


def small_vit(**kw):
    base = dict(image_hw=(16, 16), channels=1, patch_size=8, embed_dim=8, num_layers=2, num_heads=2,
                mlp_head_units=(16, 8), num_classes=3)
    base.update(kw)
    return build_model(ViTConfig(**base), np.random.default_rng(0))


def small_cnn(**kw):
    base = dict(image_hw=(32, 32), channels=1, num_classes=2)
    base.update(kw)
    return build_model(CnnConfig(**base), np.random.default_rng(0))


class TestPatchify:
    def test_128_input_with_64_patches_gives_four(self):
        out = patchify(np.zeros((1, 128, 128, 3), dtype=np.float32), 64)
        assert out.shape == (1, 4, 64 * 64 * 3)

    def test_single_patch_is_flattened_image(self):
        x = np.random.default_rng(0).random((2, 8, 8, 3)).astype(np.float32)
        np.testing.assert_array_equal(patchify(x, 8).data, x.reshape(2, 1, -1))

    def test_row_major_patch_order(self):
        x = np.arange(16, dtype=np.float32).reshape(1, 4, 4, 1)
        out = patchify(x, 2).data[0]
        np.testing.assert_array_equal(out, [[0, 1, 4, 5], [2, 3, 6, 7], [8, 9, 12, 13], [10, 11, 14, 15]])

    def test_round_trip(self):
        x = np.random.default_rng(1).random((3, 12, 8, 2)).astype(np.float32)
        assert unpatchify(patchify(x, 4), 4, (12, 8)).data.tobytes() == x.tobytes()

    def test_indivisible(self):
        with pytest.raises(ValueError, match="H=10, W=8"):
            patchify(np.zeros((1, 10, 8, 1)), 4)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 5), st.sampled_from([1, 3]))
    def test_patch_count(self, gh, gw, p, c):
        x = np.zeros((1, gh * p, gw * p, c), dtype=np.float32)
        assert patchify(x, p).shape == (1, gh * gw, p * p * c)


class TestMsa:
    def _params(self, d, seed=0):
        rng = np.random.default_rng(seed)
        return {f"attn_{n}_{s}": Tensor(rng.standard_normal((d, d)) * 0.5 if s == "w" else rng.standard_normal(d) * 0.1,
                                         requires_grad=True)
                for n in "qkvo" for s in "wb"}

    def test_single_token_attends_to_itself(self):
        params = self._params(4)
        x = Tensor(np.random.default_rng(1).standard_normal((2, 1, 4)))
        weights = []
        out = msa(x, params, 2, attn_out=weights)
        assert np.all(weights[0] == 1.0)
        v = x.data @ params["attn_v_w"].data + params["attn_v_b"].data
        expected = v @ params["attn_o_w"].data + params["attn_o_b"].data
        np.testing.assert_allclose(out.data, expected, rtol=1e-5, atol=1e-6)

    def test_identical_tokens_identical_outputs(self):
        params = self._params(4)
        x = Tensor(np.tile(np.random.default_rng(2).standard_normal((1, 1, 4)), (1, 5, 1)))
        out = msa(x, params, 2).data
        for t in range(1, 5):
            np.testing.assert_allclose(out[0, t], out[0, 0], rtol=1e-6, atol=1e-6)

    def test_gradient(self):
        with default_dtype(np.float64):
            params = self._params(4, seed=3)
            x = Tensor(np.random.default_rng(4).standard_normal((1, 3, 4)), requires_grad=True)
            probe = Tensor(np.random.default_rng(5).standard_normal((1, 3, 4)))

            def loss():
                return (msa(x, params, 2) * probe).sum()

            loss().backward()

            def f():
                with T.no_grad():
                    return float(loss().data)

            for t in [x] + list(params.values()):
                for i in range(t.size):
                    num = central_difference(f, t.data, i)
                    assert relative_error(t.grad.reshape(-1)[i], num) <= 1e-3


class TestVit:
    def test_attention_rows_stochastic(self):
        m = small_vit()
        weights = []
        vit_forward(m, np.random.default_rng(0).random((3, 16, 16, 1)), attn_out=weights)
        assert len(weights) == 2
        for w in weights:
            assert w.shape == (3, 2, 5, 5)
            assert np.max(np.abs(w.sum(axis=-1) - 1.0)) <= 1e-6

    def test_eval_is_deterministic(self):
        m = small_vit()
        x = np.random.default_rng(0).random((2, 16, 16, 1))
        assert m.forward(x).data.tobytes() == m.forward(x).data.tobytes()

    def test_zero_head_gives_uniform_probabilities(self):
        m = small_vit()
        for name in ("out_w", "out_b"):
            m.params[name] = Tensor(np.zeros_like(m.params[name].data), requires_grad=True)
        probs = T.softmax(m.forward(np.zeros((1, 16, 16, 1)))).data
        np.testing.assert_allclose(probs, np.full((1, 3), 1 / 3), atol=1e-7)

    def test_zero_dropout_train_equals_eval(self):
        m = small_vit(transformer_dropout=0.0, head_dropout=0.0)
        x = np.random.default_rng(0).random((2, 16, 16, 1))
        train = m.forward(x, train_mode=True, rng=np.random.default_rng(1)).data
        assert train.tobytes() == m.forward(x).data.tobytes()

    def test_dropout_active_in_train_mode(self):
        m = small_vit()
        x = np.random.default_rng(0).random((2, 16, 16, 1))
        train = m.forward(x, train_mode=True, rng=np.random.default_rng(1)).data
        assert train.tobytes() != m.forward(x).data.tobytes()

    def test_wrong_input_shape(self):
        with pytest.raises(ValueError, match="expects input"):
            small_vit().forward(np.zeros((1, 8, 8, 1)))

    def test_default_parameter_count(self):
        cfg = ViTConfig(channels=3, num_classes=37)
        assert count_parameters_vit(128, 128, 3, 64, 64, 8, (2048, 1024), 37) == DEFAULT_VIT_PARAMS
        assert build_model(cfg, np.random.default_rng(0)).num_parameters() == DEFAULT_VIT_PARAMS

    @pytest.mark.parametrize("kw", [dict(patch_size=5), dict(embed_dim=6, num_heads=4)])
    def test_invalid_config(self, kw):
        with pytest.raises(ValueError):
            small_vit(**kw)


class TestCnn:
    def test_tap_shapes(self):
        m = small_cnn()
        logits, taps = m.forward_with_taps(np.zeros((2, 32, 32, 1)))
        assert logits.shape == (2, 2)
        assert [t.shape for t in taps.values()] == [(2, 32, 32, 16), (2, 16, 16, 32), (2, 8, 8, 32)]
        assert m.feature_taps == ["block0", "block1", "block2"]

    def test_residual_is_wired(self):
        x = np.random.default_rng(0).random((1, 32, 32, 1))
        with_skip = small_cnn(residual=True).forward(x).data
        without = small_cnn(residual=False).forward(x).data
        assert not np.array_equal(with_skip, without)

    def test_eval_is_deterministic(self):
        m = small_cnn()
        x = np.random.default_rng(0).random((2, 32, 32, 1))
        assert m.forward(x).data.tobytes() == m.forward(x).data.tobytes()

    def test_final_map_too_small(self):
        with pytest.raises(ValueError):
            small_cnn(image_hw=(4, 4), conv_blocks=((4, 3, 2), (4, 3, 2)))

    def test_head_is_fixed(self):
        with pytest.raises(ValueError):
            small_cnn(head_units=(64, 32))


class TestFreeze:
    def _step(self, m):
        x = np.random.default_rng(0).random((4, 32, 32, 1))
        loss = sparse_ce_loss(m.forward(x), np.array([0, 1, 0, 1]))
        m.zero_grad()
        loss.backward()
        grads = {n: p.grad for n, p in m.params.items()}
        adam_step(m.params, grads, AdamState(), TrainConfig(learning_rate=1e-3), m.frozen)

    def test_conv_params_unchanged_head_changes(self):
        m = freeze_backbone(small_cnn())
        before = {n: p.data.copy() for n, p in m.params.items()}
        self._step(m)
        for name, p in m.params.items():
            if name.startswith("conv"):
                assert p.data.tobytes() == before[name].tobytes(), name
        assert not np.array_equal(m.params["dense0_w"].data, before["dense0_w"])
        assert not np.array_equal(m.params["out_w"].data, before["out_w"])

    def test_gradcam_still_works(self):
        m = freeze_backbone(small_cnn())
        x = np.random.default_rng(1).random((1, 32, 32, 1)).astype(np.float32)
        h = cam.gradcam(cam.CamRequest(m, x))
        assert np.all(np.isfinite(h.values)) and h.values.max() > 0

    def test_vit_rejected(self):
        with pytest.raises(UnsupportedOperation):
            freeze_backbone(small_vit())


class TestCheckpoint:
    @pytest.mark.parametrize("make", [small_vit, small_cnn])
    def test_round_trip_bitwise(self, tmp_path, make):
        m = make()
        if m.kind == "cnn":
            freeze_backbone(m)
        path = tmp_path / "m.vcl"
        save_checkpoint(path, m, ["a", "b", "c"][: m.num_classes])
        back, names = load_checkpoint(path)
        assert back.kind == m.kind and back.config == m.config and back.frozen == m.frozen
        assert names == ["a", "b", "c"][: m.num_classes]
        assert sorted(back.params) == sorted(m.params)
        for name in m.params:
            assert back.params[name].data.tobytes() == m.params[name].data.tobytes()
        save_checkpoint(tmp_path / "again.vcl", back, names)
        assert (tmp_path / "again.vcl").read_bytes() == path.read_bytes()

    def test_layout(self, tmp_path):
        path = tmp_path / "m.vcl"
        save_checkpoint(path, small_cnn())
        raw = path.read_bytes()
        assert raw[:4] == b"VCL1" and raw[4] == 1

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.vcl"
        path.write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(CheckpointError, match="bad checkpoint header"):
            load_checkpoint(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "m.vcl"
        save_checkpoint(path, small_cnn())
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)


def test_config_is_frozen_dataclass():
    cfg = ViTConfig()
    with pytest.raises(dataclasses.FrozenInstanceError):
        cfg.embed_dim = 3
