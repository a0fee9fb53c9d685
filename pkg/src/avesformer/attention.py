"""Cross/multi-head attention and the attention-dissipation diagnostics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import Rng, ShapeError, Tensor, as_tensor, linear, matmul, softmax_rows

DEFAULT_NUM_HEADS = 8


@dataclass(frozen=True)
class AttentionResult:
    """Output rows, row-stochastic weights and the pre-softmax logits."""

    output: Tensor  # N x c
    weights: Tensor  # N x M
    logits: Tensor  # N x M


@dataclass(frozen=True)
class MultiHeadConfig:
    embed_dim: int
    num_heads: int = DEFAULT_NUM_HEADS
    use_projections: bool = True

    def __post_init__(self):
        if self.embed_dim < 1 or self.num_heads < 1:
            raise ValueError("embed_dim and num_heads must be positive")
        if self.embed_dim % self.num_heads:
            raise ValueError(
                f"embed_dim {self.embed_dim} is not divisible by num_heads {self.num_heads}"
            )

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads


@dataclass
class AttentionParams:
    """Projection weights stored as (in, out) matrices."""

    w_q: Tensor
    b_q: Tensor
    w_k: Tensor
    b_k: Tensor
    w_v: Tensor
    b_v: Tensor
    w_o: Tensor
    b_o: Tensor

    @classmethod
    def init(cls, dim: int, rng: Rng) -> "AttentionParams":
        bound = 1.0 / math.sqrt(dim)

        def u(*shape):
            return rng.uniform(shape, -bound, bound)

        return cls(u(dim, dim), u(dim), u(dim, dim), u(dim), u(dim, dim), u(dim), u(dim, dim), u(dim))

    @classmethod
    def zeros(cls, dim: int) -> "AttentionParams":
        z2, z1 = np.zeros((dim, dim)), np.zeros(dim)
        return cls(z2, z1, z2.copy(), z1.copy(), z2.copy(), z1.copy(), z2.copy(), z1.copy())


def cross_attention(query, key, value, scaled: bool = True) -> AttentionResult:
    """``Softmax(Q K^T [/ sqrt(c)]) V`` with weights and logits kept for inspection."""
    query = as_tensor(query, 2, "query")
    key = as_tensor(key, 2, "key")
    value = as_tensor(value, 2, "value")
    if query.shape[1] != key.shape[1]:
        raise ShapeError(f"query dim {query.shape[1]} != key dim {key.shape[1]}")
    if key.shape[0] != value.shape[0]:
        raise ShapeError(f"{key.shape[0]} keys but {value.shape[0]} values")
    logits = matmul(query, key.T)
    weights = softmax_rows(logits, d_k=query.shape[1] if scaled else None)
    return AttentionResult(matmul(weights, value), weights, logits)


def multi_head_attention(
    query,
    key,
    value,
    cfg: MultiHeadConfig,
    params: AttentionParams | None = None,
    return_heads: bool = False,
):
    """Scaled multi-head attention over ``cfg.num_heads`` column slices.

    With ``return_heads`` the per-head :class:`AttentionResult` list is returned
    alongside the N x D output.
    """
    query = as_tensor(query, 2, "query")
    key = as_tensor(key, 2, "key")
    value = as_tensor(value, 2, "value")
    d = cfg.embed_dim
    for name, t in (("query", query), ("key", key), ("value", value)):
        if t.shape[1] != d:
            raise ShapeError(f"{name} has dim {t.shape[1]}, config expects {d}")
    if cfg.use_projections != (params is not None):
        raise ValueError("projection params must be given iff use_projections is set")

    if params is not None:
        q = linear(query, params.w_q, params.b_q)
        k = linear(key, params.w_k, params.b_k)
        v = linear(value, params.w_v, params.b_v)
    else:
        q, k, v = query, key, value

    dh = cfg.head_dim
    heads = [
        cross_attention(q[:, s : s + dh], k[:, s : s + dh], v[:, s : s + dh], scaled=True)
        for s in range(0, d, dh)
    ]
    out = np.concatenate([h.output for h in heads], axis=1)
    if params is not None:
        out = linear(out, params.w_o, params.b_o)
    return (out, heads) if return_heads else out


def dissipation_index(result: AttentionResult) -> float:
    """Mean relative spread of output rows around their mean, clamped to [0, 1].

    Exactly 0.0 when every output row is identical.
    """
    out = result.output
    if out.shape[0] < 2:
        raise ValueError("dissipation index needs at least 2 output rows")
    if np.all(out == out[0]):
        return 0.0
    mean = out.mean(axis=0)
    spread = np.linalg.norm(out - mean, axis=1) / (np.linalg.norm(mean) + 1e-12)
    return float(min(max(spread.mean(), 0.0), 1.0))


def is_dissipated(result: AttentionResult, tol: float = 1e-9) -> bool:
    """True iff output rows collapse (index < tol) and every weight is 1/M within tol."""
    if tol <= 0:
        raise ValueError("tol must be > 0")
    m = result.weights.shape[1]
    uniform = bool(np.all(np.abs(result.weights - 1.0 / m) <= tol))
    return uniform and dissipation_index(result) < tol


def write_pgm(path: str | Path, weights) -> None:
    """Binary 8-bit PGM: width = columns, height = rows, linear map of [0, max] to [0, 255]."""
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 2:
        raise ShapeError("PGM export needs a 2-D matrix")
    top = float(w.max())
    scaled = np.zeros_like(w) if top <= 0 else np.clip(w, 0.0, None) / top * 255.0
    pixels = np.rint(scaled).astype(np.uint8)
    rows, cols = w.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes(order="C"))


def read_pgm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise ValueError("not a binary PGM")
    cols, rows, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError("only 8-bit PGM is supported")
    pixels = np.frombuffer(data[pos + 1 : pos + 1 + rows * cols], dtype=np.uint8)
    return pixels.reshape(rows, cols)
