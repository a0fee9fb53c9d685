"""Dense float64 array substrate.

Tensors are plain ``numpy.ndarray`` values of dtype float64. Every public op
validates its inputs, returns a fresh array and reports its cost to the active
:class:`OpCounter` (if any), which is how the profiler's instrumented oracle
sees the work actually executed.

Cost conventions (FLOPs, exact integers):

    matmul       2*m*k*n
    conv2d       2*C_out*C_in*K*K*H'*W'   (bias included)
    softmax      5*N*M                    (+ N*M for the optional 1/sqrt(d) scaling)
    layer_norm   8*elements
    elementwise  1 per output element
    resize       7 per output element     (only when the extents change)
"""

from __future__ import annotations

import contextvars
import math
from collections import Counter
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

Tensor = np.ndarray

_MASK64 = (1 << 64) - 1
_GOLDEN_GAMMA = 0x9E3779B97F4A7C15


class ShapeError(ValueError):
    """Raised when tensor extents violate an op's contract."""


# ---------------------------------------------------------------------------
# instrumentation
# ---------------------------------------------------------------------------


class OpCounter:
    """Accumulates FLOPs reported by tensor ops while active."""

    def __init__(self) -> None:
        self.flops = 0
        self.by_kind: Counter[str] = Counter()
        self.calls: Counter[str] = Counter()

    def add(self, kind: str, flops: int) -> None:
        self.flops += flops
        self.by_kind[kind] += flops
        self.calls[kind] += 1


_active_counter: contextvars.ContextVar[OpCounter | None] = contextvars.ContextVar(
    "avesformer_op_counter", default=None
)


@contextmanager
def count_ops() -> Iterator[OpCounter]:
    """Count FLOPs of every tensor op executed inside the block."""
    counter = OpCounter()
    token = _active_counter.set(counter)
    try:
        yield counter
    finally:
        _active_counter.reset(token)


def _tally(kind: str, flops: int) -> None:
    counter = _active_counter.get()
    if counter is not None:
        counter.add(kind, int(flops))


# ---------------------------------------------------------------------------
# construction / validation
# ---------------------------------------------------------------------------


def as_tensor(x, ndim: int | None = None, name: str = "tensor") -> Tensor:
    """Coerce ``x`` to a float64 array and check the tensor invariants."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        raise ShapeError(f"{name}: scalars are not tensors")
    if ndim is not None and arr.ndim != ndim:
        raise ShapeError(f"{name}: expected {ndim} dims, got shape {arr.shape}")
    if any(e < 1 for e in arr.shape):
        raise ShapeError(f"{name}: all extents must be >= 1, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: non-finite values")
    return arr


# ---------------------------------------------------------------------------
# deterministic generator
# ---------------------------------------------------------------------------


def splitmix64(state: int) -> tuple[int, int]:
    """One SplitMix64 step on Python ints: returns (new_state, output)."""
    state = (state + _GOLDEN_GAMMA) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


class Rng:
    """SplitMix64 stream generator.

    The n-th output (n = 1, 2, ...) is ``mix(seed + n * 0x9E3779B97F4A7C15)``
    with the standard SplitMix64 finalizer, so the stream depends only on the
    seed. Floats use the top 53 bits; normals use Box-Muller on pairs.
    """

    def __init__(self, seed: int) -> None:
        self.state = int(seed) & _MASK64

    def next_u64(self, n: int) -> np.ndarray:
        if n < 0:
            raise ValueError("n must be >= 0")
        idx = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + idx * np.uint64(_GOLDEN_GAMMA)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
            z = z ^ (z >> np.uint64(31))
        self.state = (self.state + n * _GOLDEN_GAMMA) & _MASK64
        return z

    def random(self, shape: int | Sequence[int]) -> Tensor:
        """Uniform draws in [0, 1)."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = math.prod(shape)
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return u.reshape(shape)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> Tensor:
        return low + (high - low) * self.random(shape)

    def normal(self, shape, std: float = 1.0) -> Tensor:
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = math.prod(shape)
        m = (n + 1) // 2
        u1 = 1.0 - self.random(m)  # (0, 1]
        u2 = self.random(m)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])
        return std * z[:n].reshape(shape)

    def integers(self, low: int, high: int, shape) -> np.ndarray:
        """Integers in [low, high)."""
        if high <= low:
            raise ValueError("empty integer range")
        return low + np.floor(self.random(shape) * (high - low)).astype(np.int64)

    def spawn(self, key: int) -> "Rng":
        """Independent child stream keyed by ``key``."""
        _, a = splitmix64(self.state ^ ((int(key) * 0xD1B54A32D192ED03) & _MASK64))
        return Rng(a)


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a = as_tensor(a, 2, "matmul lhs")
    b = as_tensor(b, 2, "matmul rhs")
    m, k = a.shape
    k2, n = b.shape
    if k != k2:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    _tally("matmul", 2 * m * k * n)
    return np.matmul(a, b)


def add(a, b) -> Tensor:
    """Elementwise sum; ``b`` may broadcast along leading axes (bias rows)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    out = a + b
    if out.shape != a.shape:
        raise ShapeError(f"add: {b.shape} does not broadcast onto {a.shape}")
    _tally("elementwise", out.size)
    return out


def scale(a, s: float) -> Tensor:
    a = np.asarray(a, dtype=np.float64)
    _tally("elementwise", a.size)
    return a * s


def relu(a) -> Tensor:
    a = np.asarray(a, dtype=np.float64)
    _tally("elementwise", a.size)
    return np.maximum(a, 0.0)


def logistic(a) -> Tensor:
    a = np.asarray(a, dtype=np.float64)
    _tally("elementwise", a.size)
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def linear(x, w, b=None) -> Tensor:
    """``x @ w (+ b)`` with ``w`` stored as (in, out)."""
    y = matmul(x, w)
    return y if b is None else add(y, b)


def softmax_rows(a, d_k: int | None = None) -> Tensor:
    """Row softmax with max subtraction; ``d_k`` enables 1/sqrt(d_k) pre-scaling."""
    a = as_tensor(a, 2, "softmax input")
    if d_k is not None:
        if d_k < 1:
            raise ValueError("d_k must be >= 1")
        a = scale(a, 1.0 / math.sqrt(d_k))
    n, m = a.shape
    _tally("softmax", 5 * n * m)
    z = a - a.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis."""
    x = as_tensor(x, name="layer_norm input")
    gamma = as_tensor(gamma, 1, "gamma")
    beta = as_tensor(beta, 1, "beta")
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"layer_norm: affine params must have shape ({c},)")
    if eps <= 0:
        raise ValueError("eps must be > 0")
    _tally("layer_norm", 8 * x.size)
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + eps) * gamma + beta


def conv_output_extent(n: int, k: int, stride: int, pad: int) -> int:
    span = n + 2 * pad - k
    if span < 0 or span % stride:
        raise ShapeError(
            f"conv2d: (extent {n} + 2*{pad} - {k}) is not a non-negative multiple of stride {stride}"
        )
    return span // stride + 1


def conv2d(x, w, bias=None, stride: int = 1, pad: int = 0) -> Tensor:
    """Zero-padded cross-correlation of a C_in x H x W map."""
    x = as_tensor(x, 3, "conv2d input")
    w = as_tensor(w, 4, "conv2d weight")
    c_out, c_in, kh, kw = w.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square and odd, got {kh}x{kw}")
    if x.shape[0] != c_in:
        raise ShapeError(f"conv2d: input has {x.shape[0]} channels, weight expects {c_in}")
    if stride < 1 or pad < 0:
        raise ValueError("conv2d: stride must be >= 1 and pad >= 0")
    k = kh
    h_out = conv_output_extent(x.shape[1], k, stride, pad)
    w_out = conv_output_extent(x.shape[2], k, stride, pad)
    if bias is not None:
        bias = as_tensor(bias, 1, "conv2d bias")
        if bias.shape != (c_out,):
            raise ShapeError(f"conv2d: bias must have shape ({c_out},)")
    _tally("conv2d", 2 * c_out * c_in * k * k * h_out * w_out)

    if k == 1 and pad == 0:
        cols = x[:, ::stride, ::stride].reshape(c_in, h_out * w_out)
    else:
        xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad))) if pad else x
        win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
        win = win[:, ::stride, ::stride]  # c_in, h_out, w_out, k, k
        cols = win.transpose(0, 3, 4, 1, 2).reshape(c_in * k * k, h_out * w_out)
    out = np.matmul(w.reshape(c_out, c_in * k * k), cols)
    if bias is not None:
        out += bias[:, None]
    return out.reshape(c_out, h_out, w_out)


def _resize_axis(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.maximum(src, 0.0)
    i0 = np.minimum(np.floor(src).astype(np.int64), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def bilinear_resize(x, height: int, width: int) -> Tensor:
    """Half-pixel (align_corners=False) bilinear resize of a C x h x w map."""
    x = as_tensor(x, 3, "resize input")
    if height < 1 or width < 1:
        raise ShapeError("resize: target extents must be >= 1")
    c, h, w = x.shape
    if (h, w) == (height, width):
        return x.copy()
    _tally("resize", 7 * c * height * width)
    y0, y1, fy = _resize_axis(h, height)
    x0, x1, fx = _resize_axis(w, width)
    fy = fy[:, None]
    fx = fx[None, :]
    top = x[:, y0][:, :, x0] * (1 - fx) + x[:, y0][:, :, x1] * fx
    bot = x[:, y1][:, :, x0] * (1 - fx) + x[:, y1][:, :, x1] * fx
    return top * (1 - fy) + bot * fy


def spatial_to_patches(x: Tensor) -> Tensor:
    """D x h x w map -> (h*w) x D patch rows in row-major pixel order."""
    d, h, w = x.shape
    return np.ascontiguousarray(x.reshape(d, h * w).T)


def patches_to_spatial(p: Tensor, h: int, w: int) -> Tensor:
    n, d = p.shape
    if n != h * w:
        raise ShapeError(f"cannot fold {n} patches into {h}x{w}")
    return np.ascontiguousarray(p.T.reshape(d, h, w))


# ---------------------------------------------------------------------------
# text serialization
# ---------------------------------------------------------------------------


def format_tensor(x) -> str:
    """Shape line then a values line, 17 significant digits, row-major."""
    x = np.asarray(x, dtype=np.float64)
    shape = " ".join(str(e) for e in x.shape)
    values = " ".join(f"{v:.17g}" for v in x.ravel())
    return f"{shape}\n{values}\n"


def parse_tensor(text: str) -> Tensor:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if len(lines) != 2:
        raise ValueError(f"tensor text must have 2 non-empty lines, got {len(lines)}")
    try:
        shape = tuple(int(tok) for tok in lines[0].split())
        values = np.array([float(tok) for tok in lines[1].split()], dtype=np.float64)
    except ValueError as exc:
        raise ValueError(f"malformed tensor text: {exc}") from None
    if not shape or math.prod(shape) != values.size:
        raise ValueError(f"shape {shape} does not match {values.size} values")
    return as_tensor(values.reshape(shape))


def save_tensor(path: str | Path, x) -> None:
    Path(path).write_text(format_tensor(x))


def load_tensor(path: str | Path) -> Tensor:
    return parse_tensor(Path(path).read_text())


def save_named(path: str | Path, tensors: dict[str, Tensor]) -> None:
    """Write several tensors, each in a ``[name]`` section."""
    chunks = [f"[{name}]\n{format_tensor(t)}" for name, t in tensors.items()]
    Path(path).write_text("".join(chunks))


def load_named(path: str | Path) -> dict[str, Tensor]:
    out: dict[str, Tensor] = {}
    name = None
    body: list[str] = []
    for line in Path(path).read_text().splitlines() + ["[]"]:
        if line.startswith("[") and line.endswith("]"):
            if name is not None:
                out[name] = parse_tensor("\n".join(body))
            name, body = line[1:-1], []
        elif line.strip():
            if name is None:
                raise ValueError("tensor data before the first [name] header")
            body.append(line)
    return out
