"""Training and evaluation: weighted cross-entropy, Adam, IoU metrics,
synthetic labeled scenes, and the mini-batch training loop.

Scenes are generated rather than loaded: a desk-scale stand-in for real
outdoor scans, with an optional "context" variant whose two cluster
classes are locally identical and distinguishable only through their
distance to the nearest building (long-range cues).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import DataFormatError, NumericError
from .geometry import PointCloud
from .network import ModelState, NetworkConfig, build_model, forward
from .tensor import RngState, Tensor


@dataclass
class TrainConfig:
    """Optimization schedule; defaults mirror the production recipe."""

    lr0: float = 1e-2
    decay: float = 0.95        # per-epoch learning rate multiplier
    epochs: int = 100
    batch_size: int = 5
    points_per_sample: int = 45056
    grad_clip: Optional[float] = 5.0             # global-norm cap; None disables
    class_weights: Optional[np.ndarray] = None   # computed from data when None

    def __post_init__(self):
        if self.lr0 < 0:
            raise ValueError("lr0 must be nonnegative")
        if not 0.0 < self.decay <= 1.0:
            raise ValueError("decay must be in (0, 1]")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive")
        if self.class_weights is not None:
            self.class_weights = np.asarray(self.class_weights, dtype=np.float64)
            if np.any(self.class_weights <= 0):
                raise ValueError("class weights must be positive")


def lr_at_epoch(cfg: TrainConfig, epoch) -> float:
    """Exponential schedule: lr0 * decay^epoch."""
    if epoch < 0:
        raise ValueError("epoch must be nonnegative")
    return cfg.lr0 * cfg.decay ** epoch


# ---------------------------------------------------------------------------
# loss and class weighting


def weighted_ce(logits: Tensor, labels, weights) -> Tensor:
    """Class-weighted cross entropy over valid points.

    ``labels`` may use num_classes as an ignore sentinel; those points drop
    out of both the numerator and the weight normalizer.
    """
    labels = np.asarray(labels)
    weights = np.asarray(weights, dtype=np.float64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match logits rows {n}")
    if weights.shape != (c,):
        raise ValueError(f"need one weight per class, got {weights.shape} for {c} classes")
    if labels.min() < 0 or labels.max() > c:
        raise DataFormatError(f"labels outside [0, {c}] (with {c} the ignore sentinel)")
    valid = labels != c
    if not np.any(valid):
        raise DataFormatError("all points carry the ignore label")
    onehot = np.zeros((n, c))
    onehot[valid, labels[valid]] = 1.0
    w = np.zeros(n)
    w[valid] = weights[labels[valid]]
    nll = T.mul(T.tsum(T.mul(T.log_softmax(logits, axis=1), onehot), axis=1), -1.0)
    return T.div(T.tsum(T.mul(nll, w)), float(w.sum()))


def class_weights_from_freq(histogram, eps=1e-8):
    """Inverse-sqrt-frequency weights, normalized to mean one.

    Classes absent from the histogram get the largest weight computed for a
    present class.
    """
    hist = np.asarray(histogram, dtype=np.float64)
    total = hist.sum()
    if total <= 0:
        raise DataFormatError("label histogram is empty")
    freq = hist / total
    w = np.zeros_like(freq)
    present = hist > 0
    w[present] = 1.0 / np.sqrt(freq[present] + eps)
    if not np.all(present):
        w[~present] = w[present].max()
    return w / w.mean()


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def clip_gradients(params, max_norm):
    """Scale all gradients so the global L2 norm is at most ``max_norm``."""
    total = 0.0
    for _, p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = np.sqrt(total)
    if norm > max_norm:
        factor = max_norm / norm
        for _, p in params:
            if p.grad is not None:
                p.grad *= factor
    return norm


def adam_step(params, state: AdamState, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected adaptive-moment update over (name, Tensor) pairs.

    Missing gradients count as zero. Any non-finite gradient rejects the
    whole step before touching parameters or moments.
    """
    grads = {}
    for name, p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for '{name}'; step rejected")
        grads[name] = g
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, p in params:
        g = grads[name]
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


# ---------------------------------------------------------------------------
# confusion matrix and IoU


@dataclass
class ConfusionMatrix:
    """C x C count table; rows are true classes, columns predictions."""

    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ValueError("confusion matrix must be square")

    @classmethod
    def zeros(cls, num_classes):
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    @property
    def num_classes(self):
        return self.counts.shape[0]

    @property
    def total(self):
        return int(self.counts.sum())

    def update(self, true_labels, predictions):
        true_labels = np.asarray(true_labels)
        predictions = np.asarray(predictions)
        c = self.num_classes
        keep = (true_labels >= 0) & (true_labels < c)
        flat = true_labels[keep] * c + predictions[keep]
        self.counts += np.bincount(flat, minlength=c * c).reshape(c, c)
        return self

    def merge(self, other: "ConfusionMatrix"):
        self.counts += other.counts
        return self

    def accuracy(self):
        return float(np.diag(self.counts).sum() / max(self.total, 1))


def miou(cm: ConfusionMatrix, absent_as_zero=False):
    """Per-class IoU = TP / (TP + FP + FN) and its mean.

    Classes never seen nor predicted have no defined IoU; they are reported
    as NaN and skipped in the mean (or counted as zero if requested).
    """
    tp = np.diag(cm.counts).astype(np.float64)
    fp = cm.counts.sum(axis=0) - tp
    fn = cm.counts.sum(axis=1) - tp
    denom = tp + fp + fn
    iou = np.full(cm.num_classes, np.nan)
    present = denom > 0
    iou[present] = tp[present] / denom[present]
    if absent_as_zero:
        mean = float(np.where(present, np.nan_to_num(iou), 0.0).mean()) if cm.num_classes else 0.0
    else:
        mean = float(iou[present].mean()) if present.any() else 0.0
    return iou, mean


# ---------------------------------------------------------------------------
# synthetic scenes


DEFAULT_CLASS_NAMES = ("ground", "building", "trunk", "pedestrian")
CONTEXT_CLASS_NAMES = ("ground", "building", "near_cluster", "far_cluster")


@dataclass
class SceneSpec:
    """Layout of a generated scene; the context kind carries two cluster
    classes with identical local shape that differ only in building
    proximity."""

    n_points: int = 2048
    extent: float = 20.0
    kind: str = "default"
    proportions: tuple = None

    def __post_init__(self):
        if self.kind not in ("default", "context"):
            raise ValueError(f"unknown scene kind '{self.kind}'")
        if self.proportions is None:
            self.proportions = (0.55, 0.20, 0.125, 0.125) if self.kind == "default" \
                else (0.50, 0.20, 0.15, 0.15)
        if abs(sum(self.proportions) - 1.0) > 1e-9:
            raise ValueError("class proportions must sum to one")

    @property
    def num_classes(self):
        return len(self.proportions)

    @property
    def class_names(self):
        return DEFAULT_CLASS_NAMES if self.kind == "default" else CONTEXT_CLASS_NAMES


def _allocate_counts(n, proportions):
    raw = np.asarray(proportions) * n
    counts = np.floor(raw).astype(np.int64)
    # hand out the remainder by largest fractional part, ties by class order
    order = np.argsort(-(raw - counts), kind="stable")
    for i in range(n - counts.sum()):
        counts[order[i % len(counts)]] += 1
    return counts


def _ground_points(rng, count, extent):
    xy = rng.uniform((count, 2), -extent / 2, extent / 2)
    z = rng.normal((count,), scale=0.02)
    return np.column_stack([xy, z])


def _box_surface_points(rng, count, center, half_w, half_l, height):
    areas = np.array([
        2 * half_l * height, 2 * half_l * height,   # x walls
        2 * half_w * height, 2 * half_w * height,   # y walls
        4 * half_w * half_l,                        # roof
    ])
    # area-weighted face choice keeps density roughly uniform
    faces = np.searchsorted(np.cumsum(areas / areas.sum()), rng.uniform((count,)))
    u = rng.uniform((count,), -1, 1)
    v = rng.uniform((count,), 0, 1)
    pts = np.zeros((count, 3))
    for f in range(5):
        sel = faces == f
        if f < 2:
            pts[sel, 0] = (1 if f == 0 else -1) * half_w
            pts[sel, 1] = u[sel] * half_l
            pts[sel, 2] = v[sel] * height
        elif f < 4:
            pts[sel, 0] = u[sel] * half_w
            pts[sel, 1] = (1 if f == 2 else -1) * half_l
            pts[sel, 2] = v[sel] * height
        else:
            pts[sel, 0] = u[sel] * half_w
            pts[sel, 1] = v[sel] * 2 * half_l - half_l
            pts[sel, 2] = height
    return pts + np.array([center[0], center[1], 0.0])


def _cylinder_points(rng, count, center, radius, height):
    theta = rng.uniform((count,), 0, 2 * np.pi)
    z = rng.uniform((count,), 0, height)
    r = radius + rng.normal((count,), scale=0.01)
    return np.column_stack([center[0] + r * np.cos(theta),
                            center[1] + r * np.sin(theta), z])


def _blob_points(rng, count, center, sigma=0.25, z_center=0.8):
    pts = rng.normal((count, 3), scale=sigma)
    return pts + np.array([center[0], center[1], z_center])


def _ring_position(rng, anchor, lo, hi):
    angle = float(rng.uniform((), 0, 2 * np.pi))
    dist = float(rng.uniform((), lo, hi))
    return anchor + dist * np.array([np.cos(angle), np.sin(angle)])


def _split_counts(rng, total, chunk):
    """Split ``total`` points into cluster-sized groups of about ``chunk``."""
    n_groups = max(1, int(round(total / chunk)))
    base = total // n_groups
    counts = np.full(n_groups, base, dtype=np.int64)
    counts[: total - base * n_groups] += 1
    return counts


def synth_scene(rng: RngState, spec: SceneSpec = None) -> PointCloud:
    """Generate a labeled scene; deterministic given the rng state.

    The returned cloud carries features equal to its positions, ready for a
    3-channel-input network.
    """
    spec = spec or SceneSpec()
    counts = _allocate_counts(spec.n_points, spec.proportions)
    half = spec.extent / 2
    chunks, labels = [], []

    if spec.kind == "default":
        n_buildings = int(rng.integers(2, 4))
        buildings = []
        for _ in range(n_buildings):
            center = rng.uniform((2,), -half + 3, half - 3)
            buildings.append((center, float(rng.uniform((), 1.0, 2.0)),
                              float(rng.uniform((), 1.0, 2.0)), float(rng.uniform((), 3.0, 6.0))))
        for i, cnt in enumerate(_split_counts(rng, counts[1], counts[1] // n_buildings + 1)):
            c, hw, hl, h = buildings[i % n_buildings]
            chunks.append(_box_surface_points(rng, int(cnt), c, hw, hl, h))
            labels.append(np.full(int(cnt), 1))
        for cnt in _split_counts(rng, counts[2], 40):
            center = rng.uniform((2,), -half + 1, half - 1)
            chunks.append(_cylinder_points(rng, int(cnt), center,
                                           float(rng.uniform((), 0.15, 0.3)),
                                           float(rng.uniform((), 2.0, 4.0))))
            labels.append(np.full(int(cnt), 2))
        for cnt in _split_counts(rng, counts[3], 28):
            b = buildings[int(rng.integers(0, n_buildings))]
            center = _ring_position(rng, b[0], b[1] + 1.0, b[1] + 3.0)
            pts = _blob_points(rng, int(cnt), center, sigma=0.12, z_center=0.85)
            pts[:, 2] = rng.uniform((int(cnt),), 0.0, 1.7)
            chunks.append(pts)
            labels.append(np.full(int(cnt), 3))
    else:
        b_center = rng.uniform((2,), -3.0, 3.0)
        b_hw, b_hl = float(rng.uniform((), 1.2, 2.0)), float(rng.uniform((), 1.2, 2.0))
        chunks.append(_box_surface_points(rng, int(counts[1]), b_center, b_hw, b_hl,
                                          float(rng.uniform((), 4.0, 6.0))))
        labels.append(np.full(int(counts[1]), 1))
        for cls, lo, hi in ((2, 2.5, 4.5), (3, 9.0, 12.0)):
            for cnt in _split_counts(rng, counts[cls], 24):
                center = _ring_position(rng, b_center, lo, hi)
                chunks.append(_blob_points(rng, int(cnt), center))
                labels.append(np.full(int(cnt), cls))

    chunks.insert(0, _ground_points(rng, int(counts[0]), spec.extent))
    labels.insert(0, np.full(int(counts[0]), 0))
    positions = np.concatenate(chunks, axis=0)
    label_arr = np.concatenate(labels).astype(np.int64)
    order = rng.permutation(spec.n_points)
    positions, label_arr = positions[order], label_arr[order]
    return PointCloud(positions, features=positions.copy(), labels=label_arr)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class MetricRow:
    epoch: int
    step: int
    lr: float
    loss: float
    acc: float
    miou: float


def write_metrics_csv(rows, path):
    with open(path, "w", newline="") as fh:
        fh.write("epoch,step,lr,loss,acc,miou\n")
        for r in rows:
            fh.write(f"{r.epoch},{r.step},{r.lr:.9e},{r.loss:.9e},{r.acc:.6f},{r.miou:.6f}\n")


def _sample_cloud(cloud: PointCloud, count, rng: RngState) -> PointCloud:
    if cloud.n == count:
        return cloud
    replace = cloud.n < count
    idx = rng.choice(cloud.n, size=count, replace=replace)
    return cloud.select(np.sort(np.asarray(idx)))


def dataset_class_histogram(clouds, num_classes):
    hist = np.zeros(num_classes, dtype=np.int64)
    for c in clouds:
        if c.labels is None:
            raise ValueError("training clouds need labels")
        valid = c.labels[(c.labels >= 0) & (c.labels < num_classes)]
        hist += np.bincount(valid, minlength=num_classes)
    return hist


def train(model: ModelState, clouds, cfg: TrainConfig, rng: RngState,
          net_cfg: Optional[NetworkConfig] = None, steps_limit=None):
    """Mini-batch training with the exponential schedule.

    Returns (model, metric rows). Deterministic for a fixed rng when run
    single-threaded; aborts with NumericError on a non-finite loss.
    """
    net_cfg = net_cfg or model.config
    weights = cfg.class_weights
    if weights is None:
        weights = class_weights_from_freq(dataset_class_histogram(clouds, net_cfg.num_classes))
    params = model.named_parameters()
    state = AdamState()
    rows = []
    step = 0
    for epoch in range(cfg.epochs):
        lr = lr_at_epoch(cfg, epoch)
        order = rng.permutation(len(clouds))
        for lo in range(0, len(clouds), cfg.batch_size):
            batch = [clouds[i] for i in order[lo:lo + cfg.batch_size]]
            model.zero_grads()
            total = None
            cm = ConfusionMatrix.zeros(net_cfg.num_classes)
            for cloud in batch:
                sampled = _sample_cloud(cloud, cfg.points_per_sample, rng)
                logits = forward(sampled, model, net_cfg, rng=rng)
                loss = weighted_ce(logits, sampled.labels, weights)
                total = loss if total is None else T.add(total, loss)
                cm.update(sampled.labels, np.argmax(logits.data, axis=1))
            total = T.mul(total, 1.0 / len(batch))
            loss_val = float(total.data)
            if not np.isfinite(loss_val):
                raise NumericError(
                    f"non-finite loss at epoch {epoch} step {step}: {loss_val!r}; "
                    f"lr={lr:.3e}, batch size {len(batch)}")
            total.backward()
            if cfg.grad_clip is not None:
                clip_gradients(params, cfg.grad_clip)
            adam_step(params, state, lr)
            _, mean_iou = miou(cm)
            rows.append(MetricRow(epoch=epoch, step=step, lr=lr, loss=loss_val,
                                  acc=cm.accuracy(), miou=mean_iou))
            step += 1
            if steps_limit is not None and step >= steps_limit:
                return model, rows
    return model, rows


def evaluate(model: ModelState, clouds, net_cfg: Optional[NetworkConfig] = None,
             rng: Optional[RngState] = None) -> ConfusionMatrix:
    """Confusion matrix of the model over whole clouds (no subsampling)."""
    net_cfg = net_cfg or model.config
    rng = rng or RngState(net_cfg.seed)
    cm = ConfusionMatrix.zeros(net_cfg.num_classes)
    for cloud in clouds:
        if cloud.labels is None:
            raise ValueError("evaluation clouds need labels")
        logits = forward(cloud, model, net_cfg, rng=rng)
        cm.update(cloud.labels, np.argmax(logits.data, axis=1))
    return cm


# ---------------------------------------------------------------------------
# long-range context experiment (ablation directions)


CONTEXT_VARIANTS = ("full", "concat", "local")


def context_experiment_config(variant, seed=0) -> NetworkConfig:
    if variant not in CONTEXT_VARIANTS:
        raise ValueError(f"variant must be one of {CONTEXT_VARIANTS}")
    return NetworkConfig(
        num_layers=2,
        channel_widths=(16, 16),
        k_neighbors=8,
        downsample_ratio=0.25,
        attention_points=32,
        heads=4,
        global_layers=(1, 2) if variant != "local" else (),
        num_classes=4,
        in_dim=3,
        fusion_mode={"full": "orthogonal", "concat": "concat", "local": "local"}[variant],
        seed=seed,
    )


def run_context_experiment(variant, seed, n_train_scenes=8, n_eval_scenes=4,
                           scene_points=768, epochs=24, batch_size=2, lr0=5e-3):
    """Train one variant on context scenes and report held-out accuracy.

    The full and concat variants can exploit building proximity through the
    attention path; the local variant sees only per-neighborhood geometry.
    """
    spec = SceneSpec(n_points=scene_points, kind="context")
    data_rng = RngState(seed * 7919 + 13)
    train_scenes = [synth_scene(data_rng.child(i), spec) for i in range(n_train_scenes)]
    eval_scenes = [synth_scene(data_rng.child(1000 + i), spec) for i in range(n_eval_scenes)]
    net_cfg = context_experiment_config(variant, seed=seed)
    model = build_model(net_cfg, RngState(seed))
    tc = TrainConfig(lr0=lr0, decay=0.95, epochs=epochs, batch_size=batch_size,
                     points_per_sample=scene_points)
    model, _ = train(model, train_scenes, tc, RngState(seed + 1), net_cfg)
    cm = evaluate(model, eval_scenes, net_cfg, rng=RngState(seed + 2))
    return cm.accuracy()
