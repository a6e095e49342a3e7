"""Loss, class weights, optimizer, metrics, scenes, and the training loop."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cloudseg import tensor as T
from cloudseg.errors import DataFormatError, NumericError
from cloudseg.network import build_model
from cloudseg.tensor import RngState, Tensor
from cloudseg.training import (AdamState, ConfusionMatrix, SceneSpec, TrainConfig,
                               adam_step, class_weights_from_freq,
                               dataset_class_histogram, evaluate, lr_at_epoch, miou,
                               synth_scene, train, weighted_ce, write_metrics_csv)

from oracles import naive_miou, naive_weighted_ce
from test_network import desk_config


class TestWeightedCe:
    def test_confident_correct_has_negligible_loss(self):
        n, c = 6, 4
        labels = np.arange(n) % c
        logits = np.full((n, c), -50.0)
        logits[np.arange(n), labels] = 50.0   # margin 100
        loss = weighted_ce(Tensor(logits), labels, np.ones(c))
        assert float(loss.data) <= 1e-8

    def test_uniform_logits_give_log_c(self):
        loss = weighted_ce(Tensor(np.zeros((10, 4))), np.zeros(10, dtype=int), np.ones(4))
        assert float(loss.data) == pytest.approx(np.log(4.0), rel=1e-12)

    def test_matches_loop_oracle(self):
        rng = RngState(0)
        logits = rng.normal((16, 3))
        labels = rng.integers(0, 3, size=16)
        weights = np.array([1.0, 2.0, 3.0])
        ours = float(weighted_ce(Tensor(logits), labels, weights).data)
        assert ours == pytest.approx(naive_weighted_ce(logits, labels, weights), rel=1e-12)

    def test_unit_weights_equal_unweighted_mean(self):
        rng = RngState(1)
        logits = rng.normal((20, 5))
        labels = rng.integers(0, 5, size=20)
        ours = float(weighted_ce(Tensor(logits), labels, np.ones(5)).data)
        ls = T.log_softmax(Tensor(logits), axis=1).data
        plain = -ls[np.arange(20), labels].mean()
        assert abs(ours - plain) <= 1e-12

    def test_ignore_sentinel_excluded(self):
        logits = np.array([[10.0, -10.0], [0.0, 0.0]])
        labels = np.array([0, 2])          # second point ignored (sentinel == C)
        loss = weighted_ce(Tensor(logits), labels, np.ones(2))
        assert float(loss.data) == pytest.approx(0.0, abs=1e-8)

    def test_out_of_range_label_rejected(self):
        with pytest.raises(DataFormatError):
            weighted_ce(Tensor(np.zeros((2, 3))), np.array([0, 4]), np.ones(3))
        with pytest.raises(DataFormatError):
            weighted_ce(Tensor(np.zeros((2, 3))), np.array([-1, 0]), np.ones(3))

    def test_all_ignored_rejected(self):
        with pytest.raises(DataFormatError):
            weighted_ce(Tensor(np.zeros((2, 3))), np.array([3, 3]), np.ones(3))


class TestClassWeights:
    def test_balanced_counts_give_unit_weights(self):
        assert np.allclose(class_weights_from_freq([10, 10, 10, 10]), 1.0)

    def test_rare_class_weighs_more_and_mean_is_one(self):
        w = class_weights_from_freq([90, 10])
        assert w[1] > w[0]
        assert w.mean() == pytest.approx(1.0, rel=1e-12)

    def test_matches_closed_form(self):
        counts = np.array([75.0, 20.0, 5.0])
        freq = counts / counts.sum()
        raw = 1.0 / np.sqrt(freq + 1e-8)
        expect = raw / raw.mean()
        assert np.allclose(class_weights_from_freq(counts), expect, rtol=1e-12)

    def test_absent_class_gets_max_weight(self):
        w = class_weights_from_freq([50, 0, 10])
        assert w[1] == max(w)
        assert w.mean() == pytest.approx(1.0)

    def test_empty_histogram_rejected(self):
        with pytest.raises(DataFormatError):
            class_weights_from_freq([0, 0])


class TestAdam:
    def _params(self, values):
        return [("p", Tensor(np.array(values, dtype=float), requires_grad=True))]

    def test_zero_gradient_keeps_params(self):
        params = self._params([1.0, -2.0])
        params[0][1].grad = np.zeros(2)
        state = AdamState()
        adam_step(params, state, lr=0.1)
        adam_step(params, state, lr=0.1)
        assert np.array_equal(params[0][1].data, [1.0, -2.0])
        assert state.t == 2

    def test_constant_gradient_step_tends_to_lr(self):
        params = self._params([0.0])
        state = AdamState()
        prev = params[0][1].data.copy()
        for _ in range(200):
            params[0][1].grad = np.array([3.7])
            prev = params[0][1].data.copy()
            adam_step(params, state, lr=1e-2)
        assert abs(abs(float(prev - params[0][1].data)) - 1e-2) <= 1e-4

    def test_non_finite_gradient_rejects_step(self):
        params = self._params([1.0])
        params[0][1].grad = np.array([np.nan])
        state = AdamState()
        with pytest.raises(NumericError):
            adam_step(params, state, lr=0.1)
        assert params[0][1].data[0] == 1.0
        assert state.t == 0

    def test_quadratic_bowl_converges(self):
        target = np.array([0.8, -0.5, 0.3])
        p = Tensor(np.zeros(3), requires_grad=True)
        params = [("p", p)]
        state = AdamState()
        losses = []
        for _ in range(200):
            p.zero_grad()
            diff = T.sub(p, Tensor(target))
            loss = T.tsum(T.mul(diff, diff))
            loss.backward()
            losses.append(float(loss.data))
            adam_step(params, state, lr=1e-2)
        assert losses[-1] <= 1e-4
        tail = np.array(losses[10:])
        assert np.all(np.diff(tail) <= 1e-12)


class TestSchedule:
    def test_paper_defaults(self):
        cfg = TrainConfig()
        assert lr_at_epoch(cfg, 0) == pytest.approx(1e-2)
        assert lr_at_epoch(cfg, 1) == pytest.approx(0.0095)
        assert lr_at_epoch(cfg, 100) == pytest.approx(0.01 * 0.95 ** 100, rel=1e-12)
        assert lr_at_epoch(cfg, 100) == pytest.approx(5.92e-5, rel=1e-2)

    def test_negative_epoch_rejected(self):
        with pytest.raises(ValueError):
            lr_at_epoch(TrainConfig(), -1)


class TestMiou:
    def test_perfect_diagonal(self):
        cm = ConfusionMatrix(np.diag([5, 2, 9]))
        iou, mean = miou(cm)
        assert np.allclose(iou, 1.0)
        assert mean == 1.0

    def test_two_class_example(self):
        cm = ConfusionMatrix(np.array([[3, 1], [1, 3]]))
        iou, mean = miou(cm)
        assert np.allclose(iou, [0.6, 0.6])
        assert mean == pytest.approx(0.6)

    def test_absent_class_excluded(self):
        cm = ConfusionMatrix(np.array([[4, 0, 0], [0, 2, 0], [0, 0, 0]]))
        iou, mean = miou(cm)
        assert np.isnan(iou[2])
        assert mean == pytest.approx(1.0)
        _, mean_zeroed = miou(cm, absent_as_zero=True)
        assert mean_zeroed == pytest.approx(2 / 3)

    def test_matches_naive(self):
        counts = RngState(0).integers(0, 30, size=(5, 5))
        cm = ConfusionMatrix(counts)
        iou, mean = miou(cm)
        n_iou, n_mean = naive_miou(counts)
        assert np.allclose(iou, n_iou, equal_nan=True)
        assert mean == pytest.approx(n_mean)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2 ** 31))
    def test_invariant_under_class_relabeling(self, seed):
        rng = RngState(seed)
        counts = rng.integers(0, 50, size=(4, 4))
        perm = rng.permutation(4)
        iou, mean = miou(ConfusionMatrix(counts))
        iou_p, mean_p = miou(ConfusionMatrix(counts[np.ix_(perm, perm)]))
        assert np.allclose(iou[perm], iou_p, equal_nan=True)
        assert mean == pytest.approx(mean_p, rel=1e-12)

    def test_update_ignores_sentinel(self):
        cm = ConfusionMatrix.zeros(3)
        cm.update(np.array([0, 1, 3]), np.array([0, 2, 1]))  # label 3 = ignore
        assert cm.total == 2


class TestSynthScene:
    def test_single_class_plane(self):
        spec = SceneSpec(n_points=100, proportions=(1.0, 0.0, 0.0, 0.0))
        cloud = synth_scene(RngState(0), spec)
        assert np.array_equal(cloud.labels, np.zeros(100, dtype=int))

    def test_deterministic(self):
        a = synth_scene(RngState(7), SceneSpec(n_points=300))
        b = synth_scene(RngState(7), SceneSpec(n_points=300))
        assert np.array_equal(a.positions, b.positions)
        assert np.array_equal(a.labels, b.labels)

    def test_histogram_matches_proportions(self):
        spec = SceneSpec(n_points=2048)
        cloud = synth_scene(RngState(1), spec)
        hist = np.bincount(cloud.labels, minlength=4) / 2048
        assert np.abs(hist - np.array(spec.proportions)).max() <= 0.05

    def test_context_scene_separates_cluster_classes_by_distance(self):
        spec = SceneSpec(n_points=1024, kind="context")
        cloud = synth_scene(RngState(2), spec)
        building_xy = cloud.positions[cloud.labels == 1][:, :2].mean(axis=0)
        near = cloud.positions[cloud.labels == 2][:, :2]
        far = cloud.positions[cloud.labels == 3][:, :2]
        d_near = np.linalg.norm(near - building_xy, axis=1).max()
        d_far = np.linalg.norm(far - building_xy, axis=1).min()
        assert d_near < d_far

    def test_features_default_to_positions(self):
        cloud = synth_scene(RngState(3), SceneSpec(n_points=128))
        assert np.array_equal(cloud.features, cloud.positions)


class TestTrainLoop:
    def _setup(self, seed=0, n=128):
        cfg = desk_config(seed=seed)
        scenes = [synth_scene(RngState(100 + i), SceneSpec(n_points=n)) for i in range(2)]
        tc = TrainConfig(lr0=1e-2, epochs=2, batch_size=2, points_per_sample=n)
        return cfg, scenes, tc

    def test_zero_learning_rate_keeps_initialization(self):
        cfg, scenes, tc = self._setup()
        tc.lr0 = 0.0
        model = build_model(cfg)
        before = {n: p.data.copy() for n, p in model.named_parameters()}
        model, _ = train(model, scenes, tc, RngState(1), cfg)
        for n, p in model.named_parameters():
            assert np.array_equal(p.data, before[n]), n

    def test_fixed_seed_reproduces_losses(self):
        cfg, scenes, tc = self._setup()
        _, rows_a = train(build_model(cfg), scenes, tc, RngState(5), cfg)
        _, rows_b = train(build_model(cfg), scenes, tc, RngState(5), cfg)
        assert [r.loss for r in rows_a] == [r.loss for r in rows_b]

    def test_metrics_csv_format(self, tmp_path):
        cfg, scenes, tc = self._setup()
        _, rows = train(build_model(cfg), scenes, tc, RngState(2), cfg)
        path = tmp_path / "metrics.csv"
        write_metrics_csv(rows, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "epoch,step,lr,loss,acc,miou"
        assert len(lines) == len(rows) + 1
        for line in lines[1:]:
            parts = line.split(",")
            assert len(parts) == 6
            int(parts[0]), int(parts[1])
            [float(p) for p in parts[2:]]

    def test_oversampling_small_cloud(self):
        cfg, scenes, tc = self._setup(n=64)
        tc.points_per_sample = 128   # larger than the cloud: with replacement
        model, rows = train(build_model(cfg), scenes, tc, RngState(3), cfg)
        assert len(rows) == 2  # one step per epoch (2 clouds / batch of 2)

    def test_evaluate_counts_every_point(self):
        cfg, scenes, _ = self._setup()
        model = build_model(cfg)
        cm = evaluate(model, scenes, cfg, rng=RngState(0))
        assert cm.total == sum(s.n for s in scenes)

    def test_histogram_helper(self):
        cfg, scenes, _ = self._setup()
        hist = dataset_class_histogram(scenes, 4)
        assert hist.sum() == sum(s.n for s in scenes)
