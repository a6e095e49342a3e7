"""Finite-difference verification of every differentiable path.

Each check builds a small randomized instance, wraps it in a scalar
function with fixed output weights (so re-evaluation is pure), and
compares the tape's gradients against central differences. The CLI's
grad-check command and the acceptance tests both run this suite.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .fusion import FusionParams, fuse, orthogonalize
from .geometry import PointCloud, self_knn
from .global_encoder import AvgTransformerParams, avg_transformer_block
from .local_encoder import SWConvParams, local_block, swconv
from .network import NetworkConfig, build_model, forward
from .tensor import RngState, Tensor, grad_check
from .training import SceneSpec, synth_scene, weighted_ce


def _away_from_kinks(x, margin=0.05, shift=0.1):
    """Nudge entries off rectifier kinks so central differences stay valid."""
    x = x.copy()
    x[np.abs(x) < margin] += shift
    return x


def _scalarize(raw_fn, inputs, wrng):
    """Wrap a tensor-valued function as sum(out * fixed_random_weights)."""
    probe = raw_fn(*inputs)
    cw = Tensor(wrng.normal(probe.shape))

    def fn(*ins):
        return T.tsum(T.mul(raw_fn(*ins), cw))

    return fn


def op_checks(seed, step=1e-5, tol=1e-4):
    """One grad check per primitive op; returns (name, report) pairs."""
    rng = RngState(seed)
    wrng = RngState(seed ^ 0x5EED)
    checks = []

    def run(name, raw_fn, inputs, op_tol=tol):
        fn = _scalarize(raw_fn, inputs, wrng)
        checks.append((name, grad_check(fn, inputs, step=step, tol=op_tol)))

    a = Tensor(rng.normal((3, 4)), requires_grad=True)
    b = Tensor(rng.normal((4, 2)), requires_grad=True)
    run("matmul", lambda a, b: T.matmul(a, b), [a, b])

    x = Tensor(rng.normal((2, 5)), requires_grad=True)
    run("softmax", lambda x: T.softmax(x, axis=-1), [x])
    x2 = Tensor(rng.normal((2, 5)), requires_grad=True)
    run("log_softmax", lambda x: T.log_softmax(x, axis=-1), [x2])

    u = Tensor(rng.normal((2, 3)), requires_grad=True)
    v = Tensor(rng.normal((3,)), requires_grad=True)   # broadcast partner
    run("add", lambda u, v: T.add(u, v), [u, v])
    run("sub", lambda u, v: T.sub(u, v), [u, v])
    run("mul", lambda u, v: T.mul(u, v), [u, v])
    v2 = Tensor(rng.normal((3,)) + 2.0, requires_grad=True)  # keep divisor away from 0
    run("div", lambda u, v: T.div(u, v), [u, v2])

    r = Tensor(_away_from_kinks(rng.normal((3, 4))), requires_grad=True)
    run("relu", lambda r: T.relu(r), [r])

    s = Tensor(rng.normal((2, 3, 4)), requires_grad=True)
    run("sum", lambda s: T.tsum(s, axis=1), [s])
    run("mean", lambda s: T.tmean(s, axis=(0, 2)), [s])
    run("reshape", lambda s: T.reshape(s, (6, 4)), [s])
    run("slice", lambda s: T.slice_axis(s, 2, 1, 3), [s])

    m = Tensor(rng.normal((4, 3)), requires_grad=True)
    run("transpose", lambda m: T.transpose(m), [m])
    g1 = Tensor(rng.normal((2, 3)), requires_grad=True)
    g2 = Tensor(rng.normal((4, 3)), requires_grad=True)
    run("concat", lambda g1, g2: T.concat([g1, g2], axis=0), [g1, g2])

    src = Tensor(rng.normal((5, 3)), requires_grad=True)
    idx = rng.integers(0, 5, size=(4, 2))
    run("gather", lambda src: T.gather(src, idx), [src])

    base = Tensor(rng.normal((5, 3)), requires_grad=True)
    upd = Tensor(rng.normal((8, 3)), requires_grad=True)
    sidx = rng.integers(0, 5, size=8)
    run("scatter_add", lambda base, upd: T.scatter_add(base, sidx, upd), [base, upd])

    p = Tensor(np.abs(rng.normal((3, 3))) + 0.5, requires_grad=True)
    run("pow", lambda p: T.power(p, 1.7), [p])
    run("exp", lambda p: T.exp(p), [p])
    run("log", lambda p: T.log(p), [p])
    return checks


def _random_cloud(rng, n, d):
    return PointCloud(rng.normal((n, 3)), features=rng.normal((n, d)))


def block_checks(seed, tol=1e-4):
    """Grad checks of the composite blocks at the spec's stated tolerances."""
    rng = RngState(seed)
    wrng = RngState(seed ^ 0xB10C)
    checks = []

    # similarity-weighted convolution on 32 points, K=8
    cloud = _random_cloud(rng, 32, 4)
    nbrs = self_knn(cloud, 8)
    params = SWConvParams.create(RngState(seed + 100), in_dim=4, conv_dim=4)
    leaves = [p for _, p in params.parameters()]
    names = [n for n, _ in params.parameters()]
    feats = Tensor(cloud.features, requires_grad=True)

    conv_fn = _scalarize(lambda *_: swconv(cloud, nbrs, params, features=feats),
                         leaves + [feats], wrng)
    checks.append(("swconv", grad_check(conv_fn, leaves + [feats], tol=tol,
                                        names=names + ["features"])))

    block_fn = _scalarize(lambda *_: local_block(cloud, nbrs, params, features=feats),
                          leaves + [feats], wrng)
    checks.append(("local_block", grad_check(block_fn, leaves + [feats], tol=tol,
                                             names=names + ["features"])))

    # global attention block: 48 points, 8 channels, 4 heads, P=8
    acloud = _random_cloud(rng, 48, 8)
    aparams = AvgTransformerParams.create(RngState(seed + 200), dim=8, heads=4, downsample_count=8)
    aleaves = [p for _, p in aparams.parameters()]
    anames = [n for n, _ in aparams.parameters()]
    afeats = Tensor(acloud.features, requires_grad=True)

    attn_fn = _scalarize(
        lambda *_: avg_transformer_block(acloud, aparams, RngState(seed + 7), k=4,
                                         features=afeats, start=0),
        aleaves + [afeats], wrng)
    checks.append(("avg_transformer_block",
                   grad_check(attn_fn, aleaves + [afeats], tol=tol,
                              names=anames + ["features"])))

    # orthogonal rejection on 8-dim rows (tighter tolerance; smooth function)
    fl = Tensor(rng.normal((16, 8)), requires_grad=True)
    fg = Tensor(rng.normal((16, 8)), requires_grad=True)
    orth_fn = _scalarize(lambda fl, fg: orthogonalize(fl, fg), [fl, fg], wrng)
    checks.append(("orthogonalize",
                   grad_check(orth_fn, [fl, fg], tol=1e-5, names=["f_local", "f_global"])))

    fparams = FusionParams.create(RngState(seed + 300), dim=8)
    fleaves = [p for _, p in fparams.parameters()]
    fnames = [n for n, _ in fparams.parameters()]
    fl2 = Tensor(rng.normal((32, 8)), requires_grad=True)
    fg2 = Tensor(rng.normal((32, 8)), requires_grad=True)
    fuse_fn = _scalarize(lambda *_: fuse(fl2, fg2, fparams), fleaves + [fl2, fg2], wrng)
    checks.append(("fuse", grad_check(fuse_fn, fleaves + [fl2, fg2], tol=tol,
                                      names=fnames + ["f_local", "f_global"])))

    # weighted cross entropy (already scalar; smooth in the logits)
    logits = Tensor(rng.normal((16, 3)), requires_grad=True)
    labels = rng.integers(0, 3, size=16)
    weights = np.array([1.0, 2.0, 3.0])
    checks.append(("weighted_ce",
                   grad_check(lambda lg: weighted_ce(lg, labels, weights),
                              [logits], tol=1e-6, names=["logits"])))
    return checks


def full_forward_check(seed, tol=1e-3, n_points=48):
    """End-to-end check: mean logit of a reduced-width network.

    Differentiates with respect to one parameter tensor from every module
    family (lift, kernels, attention, fusion, decoder, head) rather than all
    of them, keeping the finite-difference pass tractable.
    """
    cfg = NetworkConfig(num_layers=2, channel_widths=(4, 8), k_neighbors=4,
                        attention_points=8, heads=2, global_layers=(1, 2),
                        num_classes=3, in_dim=3, fps_start=0, seed=seed)
    model = build_model(cfg, RngState(seed))
    scene = synth_scene(RngState(seed + 50), SceneSpec(n_points=n_points))
    named = dict(model.named_parameters())
    picked = [
        "lift.0.w", "enc0.conv.g.1.w", "enc0.conv.phi.1.w", "enc0.conv.gamma.1.b",
        "enc1.attn.wq.w", "enc1.attn.ffn.1.b", "enc0.fusion.delta.0.w",
        "dec1.0.b", "head.w", "head.b",
    ]
    leaves = [named[n] for n in picked]

    def fn(*_):
        return T.tmean(forward(scene, model, cfg, rng=RngState(seed + 1)))

    return ("forward", grad_check(fn, leaves, tol=tol, names=picked))


def run_suite(seeds=(0,), include_forward=True, tol=1e-4):
    """Run every check at each seed; returns (name, report) pairs."""
    results = []
    for seed in seeds:
        results.extend((f"{name}[seed={seed}]", rep) for name, rep in op_checks(seed, tol=tol))
        results.extend((f"{name}[seed={seed}]", rep) for name, rep in block_checks(seed, tol=tol))
    if include_forward:
        name, rep = full_forward_check(seeds[0])
        results.append((f"{name}[seed={seeds[0]}]", rep))
    return results
