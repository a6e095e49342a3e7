"""Orthogonal fusion of local and global feature rows.

The global feature of each point is replaced by its component orthogonal
to the local feature (a per-row vector rejection), so the concatenation
fed to the output MLP carries no directionally redundant information.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .nn import Mlp, collect_parameters
from .tensor import RngState, Tensor


@dataclass
class FusionParams:
    """Output MLP mapping the concatenated [local, orthogonal] rows back to D."""

    delta_mlp: Mlp

    def __post_init__(self):
        if self.delta_mlp.in_dim != 2 * self.delta_mlp.out_dim:
            raise ValueError("fusion input width must be twice the feature width")

    @property
    def dim(self):
        return self.delta_mlp.out_dim

    @classmethod
    def create(cls, rng: RngState, dim, name="fusion"):
        return cls(delta_mlp=Mlp([2 * dim, dim], rng, final_relu=True, name=f"{name}.delta"))

    def parameters(self):
        return collect_parameters(self.delta_mlp)


def orthogonalize(f_local: Tensor, f_global: Tensor, eps=1e-12, squared_norm=True) -> Tensor:
    """Per-row rejection of the global feature from the local direction.

    Returns f_global - (<f_local, f_global> / (||f_local||^2 + eps)) f_local,
    which is orthogonal to f_local up to eps-scale residue. ``squared_norm=False``
    divides by the first power of the norm instead (not a true rejection;
    kept for comparison).
    """
    if f_local.shape != f_global.shape:
        raise ValueError(f"shape mismatch: {f_local.shape} vs {f_global.shape}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    dot = T.tsum(T.mul(f_local, f_global), axis=-1, keepdims=True)
    sq = T.tsum(T.mul(f_local, f_local), axis=-1, keepdims=True)
    denom = T.add(sq, eps) if squared_norm else T.add(T.power(sq, 0.5), eps)
    coef = T.div(dot, denom)
    return T.sub(f_global, T.mul(coef, f_local))


def fuse(f_local: Tensor, f_global: Tensor, params: FusionParams, eps=1e-12,
         squared_norm=True) -> Tensor:
    """Concatenate each local row with the orthogonalized global row and project."""
    f_orth = orthogonalize(f_local, f_global, eps=eps, squared_norm=squared_norm)
    return params.delta_mlp(T.concat([f_local, f_orth], axis=1))


def concat_fuse(f_local: Tensor, f_global: Tensor, params: FusionParams) -> Tensor:
    """Ablation: plain concatenation, skipping the orthogonal rejection."""
    return params.delta_mlp(T.concat([f_local, f_global], axis=1))
