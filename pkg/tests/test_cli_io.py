"""Scan/label parsing, config precedence, CLI behavior and exit codes."""

import os
import subprocess
import sys

import numpy as np
import pytest

from cloudseg.config import RunConfig, build_run_config, load_config_file, write_config_file
from cloudseg.errors import ConfigError, DataFormatError
from cloudseg.kitti_io import (BUNDLED_REMAP, KittiScan, RemapTable, cloud_to_scan,
                               read_kitti_scan, scan_pairs_in_dir, scan_to_cloud,
                               write_kitti_scan, write_labels)
from cloudseg.tensor import RngState
from cloudseg.training import SceneSpec, synth_scene


def run_cli(*args, env_extra=None, cwd=None):
    env = dict(os.environ, OMP_NUM_THREADS="1", OPENBLAS_NUM_THREADS="1")
    env.update(env_extra or {})
    return subprocess.run([sys.executable, "-m", "cloudseg.cli", *args],
                          capture_output=True, text=True, env=env, cwd=cwd)


class TestScanFormat:
    def test_32_bytes_is_two_points(self, tmp_path):
        path = tmp_path / "two.bin"
        path.write_bytes(np.arange(8, dtype="<f4").tobytes())
        scan = read_kitti_scan(path)
        assert scan.n == 2
        assert np.allclose(scan.points[1], [4, 5, 6, 7])

    def test_non_multiple_of_16_rejected(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"\x00" * 33)
        with pytest.raises(DataFormatError):
            read_kitti_scan(path)

    def test_label_count_mismatch_rejected(self, tmp_path):
        scan_path, label_path = tmp_path / "s.bin", tmp_path / "s.label"
        scan_path.write_bytes(np.zeros(8, dtype="<f4").tobytes())
        label_path.write_bytes(np.zeros(3, dtype="<u4").tobytes())
        with pytest.raises(DataFormatError):
            read_kitti_scan(scan_path, label_path)

    def test_round_trip_bit_exact(self, tmp_path):
        rng = RngState(0)
        points = rng.normal((50, 4)).astype(np.float32)
        labels = rng.integers(0, 2 ** 32 - 1, size=50).astype(np.uint32)
        write_kitti_scan(tmp_path / "x.bin", points)
        write_labels(tmp_path / "x.label", labels)
        again = read_kitti_scan(tmp_path / "x.bin", tmp_path / "x.label")
        assert again.points.tobytes() == points.tobytes()
        assert again.labels.tobytes() == labels.tobytes()

    def test_semantic_id_is_lower_16_bits(self):
        labels = np.array([(7 << 16) | 10, (3 << 16) | 81], dtype=np.uint32)
        scan = KittiScan(points=np.zeros((2, 4), dtype=np.float32), labels=labels)
        assert list(scan.semantic_ids()) == [10, 81]
        assert list(scan.instance_ids()) == [7, 3]

    def test_cloud_scan_round_trip(self):
        cloud = synth_scene(RngState(1), SceneSpec(n_points=64))
        scan = cloud_to_scan(cloud)
        back = scan_to_cloud(scan, remap=None)
        assert np.allclose(back.positions, cloud.positions, atol=1e-6)
        assert np.array_equal(back.labels, cloud.labels)


class TestRemap:
    def test_bundled_table_shape(self):
        table = RemapTable.load(BUNDLED_REMAP)
        assert table.num_classes == 19
        assert table.ignore_class == 19
        assert len(table.class_names) == 19

    def test_known_mappings(self):
        table = RemapTable.load()
        # raw 10 = car -> 0; raw 40 = road -> 8; raw 0 = unlabeled -> ignore
        assert table.apply([10])[0] == 0
        assert table.apply([40])[0] == 8
        assert table.apply([0])[0] == 19
        # moving car folds onto car; unknown raw ids fall to ignore
        assert table.apply([252])[0] == 0
        assert table.apply([12345])[0] == 19

    def test_instance_bits_survive_remap_path(self, tmp_path):
        points = np.zeros((3, 4), dtype="<f4")
        labels = np.array([(5 << 16) | 10, 40, 81], dtype="<u4")
        write_kitti_scan(tmp_path / "s.bin", points)
        write_labels(tmp_path / "s.label", labels)
        scan = read_kitti_scan(tmp_path / "s.bin", tmp_path / "s.label")
        cloud = scan_to_cloud(scan, remap=RemapTable.load())
        assert list(cloud.labels) == [0, 8, 18]

    def test_inverse_round_trip(self):
        table = RemapTable.load()
        train_ids = np.arange(19)
        raw = table.invert(train_ids)
        assert np.array_equal(table.apply(raw), train_ids)


class TestRunConfig:
    def test_production_defaults(self):
        cfg = RunConfig()
        assert cfg.attention_points == 176
        assert cfg.lr0 == pytest.approx(1e-2)
        assert cfg.decay == pytest.approx(0.95)
        assert cfg.epochs == 100
        assert cfg.points_per_sample == 45056
        assert cfg.batch_size == 5
        assert cfg.num_layers == 4
        assert cfg.k_neighbors == 16
        assert cfg.global_layers == (1, 2, 3, 4)

    def test_three_layer_precedence(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("epochs = 7\nlr0 = 0.5\n")
        cfg = build_run_config(path, {"lr0": 0.25})
        assert cfg.epochs == 7          # file beats default
        assert cfg.lr0 == 0.25          # flag beats file
        assert cfg.decay == 0.95        # default survives

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("epochz = 7\n")
        with pytest.raises(ConfigError):
            load_config_file(path)
        with pytest.raises(ConfigError):
            build_run_config(None, {"nope": 1})

    def test_comments_and_blank_lines(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("# comment\n\nheads = 2  # trailing\n")
        assert load_config_file(path) == {"heads": 2}

    def test_typed_parsing(self, tmp_path):
        path = tmp_path / "t.cfg"
        path.write_text("channel_widths = 4,8\nscalar_kernels = true\n"
                        "fps_start = none\ndownsample_ratio = 0.5\n")
        vals = load_config_file(path)
        assert vals == {"channel_widths": (4, 8), "scalar_kernels": True,
                        "fps_start": None, "downsample_ratio": 0.5}

    def test_bad_values_give_config_errors(self, tmp_path):
        for body in ("epochs = many", "scalar_kernels = maybe", "bench_sizes = 1,x"):
            path = tmp_path / "b.cfg"
            path.write_text(body + "\n")
            with pytest.raises(ConfigError):
                load_config_file(path)

    def test_write_read_round_trip(self, tmp_path):
        cfg = RunConfig(epochs=3, channel_widths=(4, 8), num_layers=2,
                        global_layers=(1,), fps_start=5)
        path = tmp_path / "w.cfg"
        write_config_file(cfg, path)
        assert build_run_config(path) == cfg

    def test_inconsistent_network_rejected(self):
        with pytest.raises(ConfigError):
            build_run_config(None, {"num_layers": 2})  # widths still have 4 entries


@pytest.fixture(scope="module")
def desk_flags(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli")
    flags = ["--num-layers", "2", "--channel-widths", "8,16", "--global-layers", "1,2",
             "--k-neighbors", "8", "--attention-points", "16", "--num-classes", "4",
             "--label-remap", "none", "--synth-scenes", "2", "--synth-points", "192",
             "--epochs", "2", "--batch-size", "2", "--points-per-sample", "192"]
    return out, flags


class TestCliCommands:
    def test_usage_error_exit_1(self):
        res = run_cli("train", "--no-such-flag")
        assert res.returncode == 1
        assert res.stderr.startswith("error[1] usage:")

    def test_config_error_exit_1(self):
        res = run_cli("train", "--num-layers", "2")
        assert res.returncode == 1
        assert "error[1]" in res.stderr

    def test_data_error_exit_2(self, tmp_path):
        bad = tmp_path / "bad.bin"
        bad.write_bytes(b"\x00" * 7)
        res = run_cli("infer", "--scan", str(bad), "--checkpoint", "missing.ckpt",
                      "--out-dir", str(tmp_path))
        assert res.returncode == 2
        assert res.stderr.startswith("error[2] data-format:")

    def test_train_eval_infer_pipeline(self, desk_flags):
        out, flags = desk_flags
        run_dir = out / "run"
        res = run_cli("train", "--out-dir", str(run_dir), *flags)
        assert res.returncode == 0, res.stderr
        assert (run_dir / "model.ckpt").exists()
        metrics = (run_dir / "metrics.csv").read_text().splitlines()
        assert metrics[0] == "epoch,step,lr,loss,acc,miou"

        res = run_cli("eval", "--checkpoint", str(run_dir / "model.ckpt"),
                      "--out-dir", str(run_dir), *flags)
        assert res.returncode == 0, res.stderr
        assert "mIoU" in res.stdout
        eval_lines = (run_dir / "eval.csv").read_text().splitlines()
        assert eval_lines[0] == "class,name,iou"
        assert eval_lines[-1].startswith("mean,")

        scene_dir = out / "scenes"
        res = run_cli("synth", "--out-dir", str(scene_dir), "--synth-scenes", "1",
                      "--synth-points", "192", "--num-classes", "4")
        assert res.returncode == 0, res.stderr
        scan_path = scene_dir / "scene_0000.bin"
        res = run_cli("infer", "--checkpoint", str(run_dir / "model.ckpt"),
                      "--scan", str(scan_path), "--out", str(out / "pred.label"),
                      "--label-remap", "none")
        assert res.returncode == 0, res.stderr
        assert (out / "pred.label").stat().st_size == 4 * 192

    def test_flag_overrides_config_file(self, desk_flags, tmp_path):
        out, flags = desk_flags
        cfg_file = tmp_path / "run.cfg"
        cfg_file.write_text("epochs = 1\nsynth_points = 160\n")
        run_dir = tmp_path / "run"
        res = run_cli("train", "--config", str(cfg_file), "--out-dir", str(run_dir),
                      *flags)  # flags set epochs=2 over the file's 1
        assert res.returncode == 0, res.stderr
        metrics = (run_dir / "metrics.csv").read_text().splitlines()
        epochs_seen = {line.split(",")[0] for line in metrics[1:]}
        assert epochs_seen == {"0", "1"}

    def test_synth_files_parse_back(self, tmp_path):
        res = run_cli("synth", "--out-dir", str(tmp_path), "--synth-scenes", "2",
                      "--synth-points", "128")
        assert res.returncode == 0, res.stderr
        pairs = scan_pairs_in_dir(tmp_path)
        assert len(pairs) == 2
        scan = read_kitti_scan(*pairs[0])
        assert scan.n == 128
        assert scan.labels is not None
