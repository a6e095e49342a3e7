"""Local feature extraction: point convolution with similarity weighting.

The baseline op sums kernel-modulated neighbor features; the weighted
variant additionally softmax-normalizes a learned score of the feature
difference between each neighbor and its query, so dissimilar neighbors
are suppressed. A residual block wraps the convolution between three
projection MLPs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .geometry import NeighborIndex, PointCloud
from .nn import Mlp, collect_parameters
from .tensor import RngState, Tensor


@dataclass
class SWConvParams:
    """Learnable pieces of one similarity-weighted convolution block.

    The position kernel, similarity scorer and feature transform emit
    ``conv_dim`` channels each (the kernel and scorer may emit a single
    shared channel in scalar mode); the block-level projections wrap the
    convolution in a residual.
    """

    g_mlp: Mlp        # position kernel, 3 -> conv_dim (or 1)
    phi_mlp: Mlp      # similarity score of feature differences, conv_dim -> conv_dim (or 1)
    psi_mlp: Mlp      # feature transform, conv_dim -> conv_dim
    alpha_mlp: Mlp    # conv output projection, conv_dim -> out_dim
    beta_mlp: Mlp     # input lift feeding the convolution, in_dim -> conv_dim
    gamma_mlp: Mlp    # residual path projection, in_dim -> out_dim
    psi_on_query: bool = False  # transform the query feature instead of the neighbor's

    def __post_init__(self):
        d = self.psi_mlp.out_dim
        for m, label in ((self.g_mlp, "position kernel"), (self.phi_mlp, "similarity score")):
            if m.out_dim not in (d, 1):
                raise ValueError(f"{label} width {m.out_dim} incompatible with feature width {d}")

    @property
    def conv_dim(self):
        return self.psi_mlp.out_dim

    @property
    def out_dim(self):
        return self.alpha_mlp.out_dim

    @classmethod
    def create(cls, rng: RngState, in_dim, conv_dim, out_dim=None, hidden=None,
               scalar_kernels=False, psi_on_query=False, name="swconv"):
        out_dim = out_dim or conv_dim
        hidden = hidden or conv_dim
        kw = 1 if scalar_kernels else conv_dim
        return cls(
            g_mlp=Mlp([3, hidden, kw], rng, name=f"{name}.g"),
            phi_mlp=Mlp([conv_dim, hidden, kw], rng, name=f"{name}.phi"),
            psi_mlp=Mlp([conv_dim, hidden, conv_dim], rng, name=f"{name}.psi"),
            alpha_mlp=Mlp([conv_dim, hidden, out_dim], rng, name=f"{name}.alpha", final_scale=0.5),
            beta_mlp=Mlp([in_dim, hidden, conv_dim], rng, name=f"{name}.beta"),
            gamma_mlp=Mlp([in_dim, hidden, out_dim], rng, name=f"{name}.gamma"),
            psi_on_query=psi_on_query,
        )

    def parameters(self):
        return collect_parameters(self.g_mlp, self.phi_mlp, self.psi_mlp,
                                  self.alpha_mlp, self.beta_mlp, self.gamma_mlp)


def _features_tensor(cloud: PointCloud, features: Optional[Tensor]):
    if features is not None:
        return features
    if cloud.features is None:
        raise ValueError("point cloud carries no features")
    return Tensor(cloud.features)


def _relative_positions(cloud: PointCloud, nbrs: NeighborIndex) -> Tensor:
    rel = cloud.positions[nbrs.indices] - cloud.positions[:, None, :]
    return Tensor(rel)


def _kernel_terms(cloud, nbrs, params, f):
    n, k = nbrs.indices.shape
    rel = _relative_positions(cloud, nbrs)
    g_out = params.g_mlp(rel)                                   # [N, K, conv_dim or 1]
    f_nbr = T.gather(f, nbrs.indices)                           # [N, K, D]
    if params.psi_on_query:
        psi_out = T.reshape(params.psi_mlp(f), (n, 1, params.conv_dim))
    else:
        psi_out = params.psi_mlp(f_nbr)
    return g_out, f_nbr, psi_out


def baseline_conv(cloud: PointCloud, nbrs: NeighborIndex, params: SWConvParams,
                  features: Optional[Tensor] = None) -> Tensor:
    """Plain kernel convolution: sum over neighbors of g(dx) * psi(f)."""
    f = _features_tensor(cloud, features)
    g_out, _, psi_out = _kernel_terms(cloud, nbrs, params, f)
    return T.tsum(T.mul(g_out, psi_out), axis=1)


def similarity_weights(f, nbrs: NeighborIndex, phi_mlp: Mlp) -> Tensor:
    """Softmax-normalized scores of neighbor-minus-query feature differences.

    For every query and channel the K weights sum to one; identical
    neighborhoods come out uniform at 1/K.
    """
    f = f if isinstance(f, Tensor) else Tensor(f)
    n = f.shape[0]
    f_nbr = T.gather(f, nbrs.indices)
    center = T.reshape(f, (n, 1, f.shape[1]))
    scores = phi_mlp(T.sub(f_nbr, center))
    return T.softmax(scores, axis=1)


def swconv(cloud: PointCloud, nbrs: NeighborIndex, params: SWConvParams,
           features: Optional[Tensor] = None) -> Tensor:
    """Similarity-weighted convolution over each K-neighborhood.

    out_i = sum_j g(x_j - x_i) * w(f_i, f_j) * psi(f_j), with w a per-channel
    softmax over the K neighbors. Forcing w uniform recovers baseline_conv/K.
    """
    f = _features_tensor(cloud, features)
    n = f.shape[0]
    g_out, f_nbr, psi_out = _kernel_terms(cloud, nbrs, params, f)
    center = T.reshape(f, (n, 1, f.shape[1]))
    w = T.softmax(params.phi_mlp(T.sub(f_nbr, center)), axis=1)
    return T.tsum(T.mul(T.mul(g_out, w), psi_out), axis=1)


def local_block(cloud: PointCloud, nbrs: NeighborIndex, params: SWConvParams,
                features: Optional[Tensor] = None) -> Tensor:
    """Residual local feature block: alpha(swconv(x, beta(f))) + gamma(f)."""
    f = _features_tensor(cloud, features)
    lifted = params.beta_mlp(f)
    conv = swconv(cloud, nbrs, params, features=lifted)
    return T.add(params.alpha_mlp(conv), params.gamma_mlp(f))


def local_dissimilarity(f, nbrs: NeighborIndex):
    """Largest pairwise feature distance inside each neighborhood.

    Diagnostic only (not differentiable): a region whose features agree
    scores 0; high values flag neighborhoods mixing unlike points.
    """
    f = np.asarray(f.data if isinstance(f, Tensor) else f, dtype=np.float64)
    grouped = f[nbrs.indices]                                    # [N, K, D]
    diffs = grouped[:, :, None, :] - grouped[:, None, :, :]      # [N, K, K, D]
    dists = np.sqrt((diffs ** 2).sum(axis=-1))
    return dists.max(axis=(1, 2))
