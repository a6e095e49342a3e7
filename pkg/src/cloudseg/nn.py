"""Small learnable building blocks: linear layers and rectifier MLPs.

Every block exposes ``parameters()`` as (name, Tensor) pairs in a stable
order so optimizers and checkpoints can walk the model deterministically.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor, RngState


class Linear:
    """Affine map x @ w + b (bias optional)."""

    def __init__(self, in_dim, out_dim, rng: RngState, bias=True, name="linear", scale=1.0):
        self.name = name
        # He-style fan-in scaling keeps rectifier nets in a sane range;
        # residual branches pass scale < 1 so stacked blocks don't blow up.
        self.w = Tensor(rng.normal((in_dim, out_dim), scale=scale * np.sqrt(2.0 / in_dim)),
                        requires_grad=True, name=f"{name}.w")
        self.b = None
        if bias:
            # small random bias keeps rectifier kinks off the exact zero
            # inputs that self-neighborhoods produce
            self.b = Tensor(rng.normal((out_dim,), scale=0.05),
                            requires_grad=True, name=f"{name}.b")

    @property
    def in_dim(self):
        return self.w.shape[0]

    @property
    def out_dim(self):
        return self.w.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        lead = x.shape[:-1]
        flat = T.reshape(x, (-1, x.shape[-1])) if x.data.ndim != 2 else x
        y = T.matmul(flat, self.w)
        if self.b is not None:
            y = T.add(y, self.b)
        if x.data.ndim != 2:
            y = T.reshape(y, lead + (self.out_dim,))
        return y

    def parameters(self):
        out = [(self.w.name, self.w)]
        if self.b is not None:
            out.append((self.b.name, self.b))
        return out

    def zero_(self):
        self.w.data[...] = 0.0
        if self.b is not None:
            self.b.data[...] = 0.0
        return self


class Mlp:
    """Stack of Linear layers with rectifiers between them.

    ``widths`` lists every layer width, e.g. [3, 16, 8] is one hidden layer.
    The output is linear unless ``final_relu`` is set.
    """

    def __init__(self, widths, rng: RngState, bias=True, final_relu=False, name="mlp",
                 final_scale=1.0):
        if len(widths) < 2:
            raise ValueError("Mlp needs at least input and output widths")
        self.name = name
        self.final_relu = final_relu
        self.layers = [
            Linear(widths[i], widths[i + 1], rng, bias=bias, name=f"{name}.{i}",
                   scale=final_scale if i == len(widths) - 2 else 1.0)
            for i in range(len(widths) - 1)
        ]

    @property
    def in_dim(self):
        return self.layers[0].in_dim

    @property
    def out_dim(self):
        return self.layers[-1].out_dim

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1 or self.final_relu:
                x = T.relu(x)
        return x

    def parameters(self):
        out = []
        for layer in self.layers:
            out.extend(layer.parameters())
        return out

    def zero_(self):
        """Zero every weight and bias (isolation tests for residual paths)."""
        for layer in self.layers:
            layer.w.data[...] = 0.0
            if layer.b is not None:
                layer.b.data[...] = 0.0
        return self


def collect_parameters(*blocks):
    """Flatten (name, Tensor) pairs from blocks that expose parameters()."""
    out = []
    for block in blocks:
        if block is None:
            continue
        out.extend(block.parameters())
    return out
