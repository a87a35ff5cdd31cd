"""Masked autoregressive hypernetwork.

The network maps a batch of inputs ``x`` in R^d to one parameter block
per dimension, with binary masks guaranteeing that the block for
dimension t depends only on ``x_{<t}``. Degree assignment is
deterministic: input i has degree i (1-based), hidden units cycle
through degrees 1..d-1. With d = 1 every hidden unit gets degree 0, so
the whole input layer is masked away and each output block is a
trainable constant.
"""

from __future__ import annotations

import numpy as np

from .felu import elu
from .tensor import MaskedLinear, Tensor, linear, reshape


def made_degrees(d: int, hidden_sizes) -> tuple[np.ndarray, list]:
    if d < 1:
        raise ValueError("d must be >= 1")
    input_deg = np.arange(1, d + 1)
    hidden_degs = []
    for width in hidden_sizes:
        if d == 1:
            hidden_degs.append(np.zeros(width, dtype=np.int64))
        else:
            hidden_degs.append(1 + np.arange(width) % (d - 1))
    return input_deg, hidden_degs


def made_masks(d: int, hidden_sizes, params_per_dim: int) -> list[np.ndarray]:
    """Binary masks, layer by layer, each shaped [fan_out, fan_in].

    The output rows come in d consecutive blocks of ``params_per_dim``;
    block t (1-based) connects to a unit of degree m iff t > m.
    """
    input_deg, hidden_degs = made_degrees(d, hidden_sizes)
    prev = input_deg
    masks = []
    for deg in hidden_degs:
        masks.append((deg[:, None] >= prev[None, :]).astype(np.float64))
        prev = deg
    out_block_deg = np.repeat(np.arange(1, d + 1), params_per_dim)
    masks.append((out_block_deg[:, None] > prev[None, :]).astype(np.float64))
    return masks


class MadeHypernet:
    """MLP with ELU hidden layers emitting 3H+1 scalars per dimension.

    Hidden weights are Glorot-uniform; the output layer starts at zero
    weight with biases drawn so every emitted network begins as g == 0
    (w2 and b2 blocks zero, w1 and b1 blocks standard normal), i.e. the
    flow built on top starts as the identity.
    """

    def __init__(self, d: int, hidden_sizes, elf_hidden: int, seed: int = 0):
        if elf_hidden < 1:
            raise ValueError("elf_hidden must be >= 1")
        self.d = int(d)
        self.hidden_sizes = [int(w) for w in hidden_sizes]
        self.elf_hidden = int(elf_hidden)
        self.params_per_dim = 3 * self.elf_hidden + 1
        self.masks = made_masks(self.d, self.hidden_sizes, self.params_per_dim)

        rng = np.random.default_rng(seed)
        self.layers: list[MaskedLinear] = []
        fan_in = self.d
        for width, mask in zip(self.hidden_sizes, self.masks[:-1]):
            limit = np.sqrt(6.0 / (fan_in + width))
            weight = rng.uniform(-limit, limit, size=(width, fan_in))
            self.layers.append(MaskedLinear(
                weight=Tensor(weight, requires_grad=True),
                bias=Tensor(np.zeros(width), requires_grad=True),
                mask=mask,
            ))
            fan_in = width

        n_out = self.d * self.params_per_dim
        out_bias = np.zeros(n_out)
        h = self.elf_hidden
        for t in range(self.d):
            base = t * self.params_per_dim
            out_bias[base:base + h] = rng.standard_normal(h)          # w1
            out_bias[base + h:base + 2 * h] = rng.standard_normal(h)  # b1
        self.layers.append(MaskedLinear(
            weight=Tensor(np.zeros((n_out, fan_in)), requires_grad=True),
            bias=Tensor(out_bias, requires_grad=True),
            mask=self.masks[-1],
        ))

    def forward(self, x) -> Tensor:
        """[B, d] -> [B, d, 3H+1] parameter blocks."""
        h = x
        for layer in self.layers[:-1]:
            h = elu(layer(h))
        out = self.layers[-1](h)
        b = out.data.shape[0]
        return reshape(out, (b, self.d, self.params_per_dim))

    __call__ = forward

    def parameters(self) -> list[tuple[str, Tensor]]:
        params = []
        for i, layer in enumerate(self.layers):
            params.append((f"hn{i}.weight", layer.weight))
            params.append((f"hn{i}.bias", layer.bias))
        return params
