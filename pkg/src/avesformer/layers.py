"""Parameter containers shared by the query generator and the decoder."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Rng, Tensor, layer_norm, linear, relu

LN_EPS = 1e-5
FFN_RATIO = 4


@dataclass
class LayerNormParams:
    gamma: Tensor
    beta: Tensor

    @classmethod
    def identity(cls, dim: int) -> "LayerNormParams":
        return cls(np.ones(dim), np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, LN_EPS)


@dataclass
class FeedForwardParams:
    """Two linear layers with a ReLU between; weights stored as (in, out)."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, dim: int, rng: Rng, ratio: int = FFN_RATIO) -> "FeedForwardParams":
        hidden = ratio * dim
        b_in, b_hid = 1.0 / math.sqrt(dim), 1.0 / math.sqrt(hidden)
        return cls(
            rng.uniform((dim, hidden), -b_in, b_in),
            rng.uniform(hidden, -b_in, b_in),
            rng.uniform((hidden, dim), -b_hid, b_hid),
            rng.uniform(dim, -b_hid, b_hid),
        )

    @classmethod
    def zeros(cls, dim: int, ratio: int = FFN_RATIO) -> "FeedForwardParams":
        hidden = ratio * dim
        return cls(np.zeros((dim, hidden)), np.zeros(hidden), np.zeros((hidden, dim)), np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return linear(relu(linear(x, self.w1, self.b1)), self.w2, self.b2)
