"""Global feature extraction with downsampled keys and values.

Queries come from all N points but keys/values come from a P-point
summary (farthest-point anchors, each averaging its K-neighborhood's
features), dropping attention cost from O(N^2 D) to O(N P D). A
residual feed-forward layer completes the block.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .geometry import PointCloud, fps, knn
from .nn import Linear, Mlp, collect_parameters
from .tensor import RngState, Tensor


@dataclass
class AvgTransformerParams:
    """Projections, output map and feed-forward of one attention block."""

    wq: Linear
    wk: Linear
    wv: Linear
    out_proj: Linear
    ffn: Mlp
    heads: int
    downsample_count: int
    normalize: bool = False  # optional pre-attention standardization, off by default

    def __post_init__(self):
        d = self.wq.in_dim
        if d % self.heads != 0:
            raise ValueError(f"width {d} not divisible by {self.heads} heads")
        if self.downsample_count < 1:
            raise ValueError("downsample target must be at least 1")

    @property
    def dim(self):
        return self.wq.in_dim

    @classmethod
    def create(cls, rng: RngState, dim, heads=4, downsample_count=176, ffn_dim=None,
               normalize=False, name="avgtr"):
        ffn_dim = ffn_dim or 2 * dim
        return cls(
            wq=Linear(dim, dim, rng, bias=False, name=f"{name}.wq"),
            wk=Linear(dim, dim, rng, bias=False, name=f"{name}.wk"),
            wv=Linear(dim, dim, rng, bias=False, name=f"{name}.wv"),
            out_proj=Linear(dim, dim, rng, name=f"{name}.out", scale=0.25),
            ffn=Mlp([dim, ffn_dim, dim], rng, name=f"{name}.ffn", final_scale=0.25),
            heads=heads,
            downsample_count=downsample_count,
            normalize=normalize,
        )

    def parameters(self):
        return collect_parameters(self.wq, self.wk, self.wv, self.out_proj, self.ffn)


@dataclass
class DownsampledKeys:
    """P anchor indices plus the averaged features of their neighborhoods."""

    anchor_indices: np.ndarray
    avg_features: Tensor
    anchor_positions: np.ndarray  # diagnostics only; attention never reads these

    def __post_init__(self):
        if len(np.unique(self.anchor_indices)) != len(self.anchor_indices):
            raise ValueError("anchor indices must be pairwise distinct")


@dataclass
class AttentionTrace:
    """Per-head weights and values captured for invariant checks."""

    weights: list = field(default_factory=list)      # H arrays of [N, P]
    values: list = field(default_factory=list)       # H arrays of [P, d/H]
    pre_residual: Optional[np.ndarray] = None        # [N, D] before the +X residual


def average_downsample(cloud: PointCloud, count, k, rng: RngState,
                       features: Optional[Tensor] = None, start=None) -> DownsampledKeys:
    """Summarize a cloud into ``count`` rows of K-neighborhood mean features.

    Farthest point sampling picks the anchors; each anchor's feature row is
    the mean over its K nearest neighbors among all N points.
    """
    if features is None:
        if cloud.features is None:
            raise ValueError("point cloud carries no features")
        features = Tensor(cloud.features)
    n = cloud.n
    if count > n:
        raise ValueError(f"downsample target {count} exceeds point count {n}")
    if k > n:
        raise ValueError(f"neighbor count {k} exceeds point count {n}")
    if start is None:
        start = int(rng.integers(0, n))
    anchors = fps(cloud.positions, count, start=start)
    nbrs = knn(cloud.positions[anchors], cloud.positions, k)
    grouped = T.gather(features, nbrs.indices)            # [P, K, D]
    avg = T.tmean(grouped, axis=1)
    return DownsampledKeys(anchor_indices=anchors, avg_features=avg,
                           anchor_positions=cloud.positions[anchors])


def _standardize(x: Tensor) -> Tensor:
    mu = T.tmean(x, axis=-1, keepdims=True)
    centered = T.sub(x, mu)
    var = T.tmean(T.mul(centered, centered), axis=-1, keepdims=True)
    return T.div(centered, T.power(T.add(var, 1e-6), 0.5))


def avg_attention(x: Tensor, a: Tensor, params: AvgTransformerParams,
                  trace: Optional[AttentionTrace] = None) -> Tensor:
    """Multi-head attention of N queries over P downsampled keys/values.

    Returns x + out_proj(concat_h softmax(q_h k_h^T / sqrt(d/H)) v_h); cost
    is O(N P D) in multiply-accumulates (see attention_mac_formula).
    """
    n, d = x.shape
    if a.shape[1] != d or d != params.dim:
        raise ValueError(f"width mismatch: x {x.shape}, keys {a.shape}, params dim {params.dim}")
    h = params.heads
    dh = d // h
    xq = _standardize(x) if params.normalize else x
    q, k, v = params.wq(xq), params.wk(a), params.wv(a)
    heads_out = []
    for i in range(h):
        qs = T.slice_axis(q, 1, i * dh, (i + 1) * dh)
        ks = T.slice_axis(k, 1, i * dh, (i + 1) * dh)
        vs = T.slice_axis(v, 1, i * dh, (i + 1) * dh)
        attn = T.softmax(T.mul(T.matmul(qs, T.transpose(ks)), 1.0 / np.sqrt(dh)), axis=-1)
        heads_out.append(T.matmul(attn, vs))
        if trace is not None:
            trace.weights.append(attn.data.copy())
            trace.values.append(vs.data.copy())
    pre = params.out_proj(T.concat(heads_out, axis=1))
    if trace is not None:
        trace.pre_residual = pre.data.copy()
    return T.add(x, pre)


def avg_transformer_block(cloud: PointCloud, params: AvgTransformerParams, rng: RngState,
                          k=16, features: Optional[Tensor] = None,
                          start=None) -> Tensor:
    """Full global block: downsample, attend, then a residual feed-forward."""
    if features is None:
        if cloud.features is None:
            raise ValueError("point cloud carries no features")
        features = Tensor(cloud.features)
    keys = average_downsample(cloud, min(params.downsample_count, cloud.n), min(k, cloud.n),
                              rng, features=features, start=start)
    t = avg_attention(features, keys.avg_features, params)
    tf = _standardize(t) if params.normalize else t
    return T.add(t, params.ffn(tf))


def attention_mac_formula(n, p, d, heads):
    """Closed-form matmul multiply-accumulates executed by avg_attention.

    Q projection (n d^2) + K,V projections (2 p d^2) + per-head score and
    value products (2 n p d) + output projection (n d^2). Linear in n for
    fixed p and d. ``heads`` does not change the total.
    """
    del heads
    return 2 * n * d * d + 2 * p * d * d + 2 * n * p * d


# ---------------------------------------------------------------------------
# wall-clock benchmark


@dataclass
class BenchRow:
    n: int
    method: str
    median_seconds: float
    reps: int


def _np_attention(x, a, weights, heads, block=2048):
    """Plain numpy forward of the attention math, blocked over query rows."""
    wq, wk, wv, wo, bo = weights
    d = x.shape[1]
    dh = d // heads
    q = x @ wq
    k = a @ wk
    v = a @ wv
    out = np.empty_like(x)
    scale = 1.0 / np.sqrt(dh)
    for lo in range(0, x.shape[0], block):
        hi = min(lo + block, x.shape[0])
        parts = []
        for i in range(heads):
            sl = slice(i * dh, (i + 1) * dh)
            s = (q[lo:hi, sl] @ k[:, sl].T) * scale
            s -= s.max(axis=1, keepdims=True)
            np.exp(s, out=s)
            s /= s.sum(axis=1, keepdims=True)
            parts.append(s @ v[:, sl])
        out[lo:hi] = np.concatenate(parts, axis=1)
    return out @ wo + bo + x


def bench_attention(sizes, p, repeats=3, dim=16, heads=4, seed=0, block=2048, dtype=np.float32):
    """Time downsampled-K/V attention against naive full self-attention.

    Returns BenchRows (one per size and method) holding median wall-clock
    seconds over ``repeats`` runs. Sizes must be ascending; the full method
    streams its N x N score matrix in row blocks to bound memory.
    """
    sizes = list(sizes)
    if sizes != sorted(sizes):
        raise ValueError("sizes must be ascending")
    if p < 1:
        raise ValueError("p must be positive")
    rng = RngState(seed)
    scale = np.sqrt(2.0 / dim)
    weights = tuple(w.astype(dtype) for w in (
        rng.normal((dim, dim), scale),
        rng.normal((dim, dim), scale),
        rng.normal((dim, dim), scale),
        rng.normal((dim, dim), scale),
        np.zeros(dim),
    ))
    rows = []
    for n in sizes:
        x = rng.normal((n, dim)).astype(dtype)
        a = x[:min(p, n)].copy()
        for method, keys in (("avg", a), ("full", x)):
            # the downsampled method is cheap: extra reps buy a stable median
            reps = repeats if method == "full" else max(repeats, 9)
            times = []
            _np_attention(x[:min(n, 4 * block)], keys[:min(len(keys), 4 * block)],
                          weights, heads, block)  # warm-up
            for _ in range(reps):
                t0 = time.perf_counter()
                _np_attention(x, keys, weights, heads, block)
                times.append(time.perf_counter() - t0)
            rows.append(BenchRow(n=n, method=method,
                                 median_seconds=float(np.median(times)), reps=reps))
    return rows


def write_bench_csv(rows, path):
    with open(path, "w", newline="") as fh:
        fh.write("n,method,median_seconds,reps\n")
        for r in rows:
            fh.write(f"{r.n},{r.method},{r.median_seconds:.9e},{r.reps}\n")


def fit_loglog_slope(rows, method):
    """Least-squares slope of log(time) vs log(n) for one method."""
    pts = [(r.n, r.median_seconds) for r in rows if r.method == method]
    if len(pts) < 2:
        raise ValueError(f"need at least two sizes for method '{method}'")
    ns, ts = zip(*pts)
    return float(np.polyfit(np.log(ns), np.log(ts), 1)[0])
