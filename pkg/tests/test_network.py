"""Network assembly: shapes, determinism, gradient flow, checkpoints."""

import numpy as np
import pytest

from cloudseg.errors import ConfigError, DataFormatError
from cloudseg.geometry import PointCloud
from cloudseg.network import (NetworkConfig, build_model, dead_gradient_names,
                              format_param_count, forward, infer, load_checkpoint,
                              param_count, save_checkpoint)
from cloudseg.tensor import RngState
from cloudseg.training import SceneSpec, synth_scene, weighted_ce


def desk_config(**kw):
    base = dict(num_layers=2, channel_widths=(8, 16), k_neighbors=8,
                attention_points=16, heads=4, global_layers=(1, 2),
                num_classes=4, in_dim=3, seed=0)
    base.update(kw)
    return NetworkConfig(**base)


def scene(seed=5, n=256):
    return synth_scene(RngState(seed), SceneSpec(n_points=n))


class TestConfigValidation:
    def test_width_count_must_match_layers(self):
        with pytest.raises(ConfigError):
            desk_config(channel_widths=(8, 16, 32))

    def test_global_layers_in_range(self):
        with pytest.raises(ConfigError):
            desk_config(global_layers=(1, 3))

    def test_head_divisibility_only_for_global_layers(self):
        with pytest.raises(ConfigError):
            desk_config(channel_widths=(9, 16), heads=4, global_layers=(1,))
        desk_config(channel_widths=(9, 16), heads=4, global_layers=(2,))  # fine

    def test_fusion_mode_checked(self):
        with pytest.raises(ConfigError):
            desk_config(fusion_mode="bogus")

    def test_feature_width_checked_before_compute(self):
        cfg = desk_config(in_dim=4)
        model = build_model(cfg)
        with pytest.raises(ConfigError):
            forward(scene(), model, cfg)  # scene features are 3-wide

    def test_missing_features_rejected(self):
        cfg = desk_config()
        model = build_model(cfg)
        with pytest.raises(ConfigError):
            forward(PointCloud(np.zeros((4, 3))), model, cfg)


class TestForward:
    def test_degenerate_single_layer_stack(self):
        cfg = desk_config(num_layers=1, channel_widths=(8,), downsample_ratio=1.0,
                          global_layers=())
        model = build_model(cfg)
        logits = forward(scene(n=64), model, cfg, RngState(1))
        assert logits.shape == (64, 4)
        assert np.all(np.isfinite(logits.data))

    def test_bit_identical_given_seed(self):
        cfg = desk_config()
        model = build_model(cfg)
        cloud = scene()
        a = forward(cloud, model, cfg, RngState(3))
        b = forward(cloud, model, cfg, RngState(3))
        assert np.array_equal(a.data, b.data)

    @pytest.mark.parametrize("n", [64, 100, 257])
    def test_decoder_restores_full_point_count(self, n):
        cfg = desk_config()
        model = build_model(cfg)
        logits = forward(scene(n=n), model, cfg, RngState(2))
        assert logits.shape == (n, cfg.num_classes)

    def test_every_parameter_receives_gradient(self):
        cfg = desk_config()
        model = build_model(cfg)
        cloud = scene(n=128)
        logits = forward(cloud, model, cfg, RngState(4))
        loss = weighted_ce(logits, cloud.labels, np.ones(4))
        loss.backward()
        assert dead_gradient_names(model) == []

    def test_local_mode_has_no_fusion_or_attention_params(self):
        cfg = desk_config(global_layers=(), fusion_mode="local")
        model = build_model(cfg)
        names = [n for n, _ in model.named_parameters()]
        assert not any("attn" in n or "fusion" in n for n in names)
        logits = forward(scene(n=64), model, cfg, RngState(5))
        assert logits.shape == (64, 4)


class TestInfer:
    def test_strict_maxima(self):
        cfg = desk_config()
        model = build_model(cfg)
        cloud = scene(n=64)
        logits = forward(cloud, model, cfg, RngState(6))
        assert np.array_equal(infer(cloud, model, cfg, RngState(6)),
                              np.argmax(logits.data, axis=1))

    def test_tied_logits_pick_lowest_class(self):
        cfg = desk_config()
        model = build_model(cfg)
        model.head.zero_()                     # all logits identical => ties
        preds = infer(scene(n=32), model, cfg, RngState(7))
        assert np.array_equal(preds, np.zeros(32, dtype=np.int64))


class TestParamCount:
    def test_single_linear_arithmetic(self):
        cfg = desk_config()
        model = build_model(cfg)
        head = model.head
        assert head.w.data.size + head.b.data.size == 8 * 4 + 4

    def test_equals_independent_walk(self):
        model = build_model(desk_config())
        total = 0
        for _, p in model.named_parameters():
            n = 1
            for d in p.data.shape:
                n *= d
            total += n
        assert param_count(model) == total

    def test_format(self):
        assert format_param_count(3_360_000) == "3.36M"
        assert format_param_count(0) == "0.00M"


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        cfg = desk_config(seed=11)
        model = build_model(cfg)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, model)
        restored = load_checkpoint(path)
        assert restored.config == cfg
        saved = dict(model.named_parameters())
        for name, p in restored.named_parameters():
            assert np.array_equal(p.data, saved[name].data), name
        # and the bytes themselves are stable
        save_checkpoint(tmp_path / "again.ckpt", restored)
        assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOTACKPT" + b"\x00" * 64)
        with pytest.raises(DataFormatError):
            load_checkpoint(path)

    def test_truncation_rejected(self, tmp_path):
        cfg = desk_config()
        model = build_model(cfg)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, model)
        blob = path.read_bytes()
        (tmp_path / "cut.ckpt").write_bytes(blob[:len(blob) - 7])
        with pytest.raises(DataFormatError):
            load_checkpoint(tmp_path / "cut.ckpt")

    def test_trailing_garbage_rejected(self, tmp_path):
        cfg = desk_config()
        model = build_model(cfg)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, model)
        (tmp_path / "fat.ckpt").write_bytes(path.read_bytes() + b"x")
        with pytest.raises(DataFormatError):
            load_checkpoint(tmp_path / "fat.ckpt")


def test_ablation_needs_long_range_cues_to_differ():
    """Full model and strictly-local ablation agree in structure but produce
    different logits once global layers are enabled."""
    cloud = scene(seed=21, n=128)
    full_cfg = desk_config(seed=3)
    local_cfg = desk_config(seed=3, global_layers=(), fusion_mode="local")
    full = forward(cloud, build_model(full_cfg), full_cfg, RngState(0))
    local = forward(cloud, build_model(local_cfg), local_cfg, RngState(0))
    assert full.shape == local.shape
    assert not np.allclose(full.data, local.data)
