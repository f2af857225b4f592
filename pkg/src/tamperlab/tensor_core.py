"""Minimal dense tensors with tape-based reverse-mode differentiation.

Only the operations the detector needs are provided. Every operation is a
plain function that computes its forward value with numpy and, when a
:class:`Tape` is active and some input requires a gradient, records a
backward closure on that tape. :func:`backward_pass` replays the tape in
reverse order.

Production code runs in float32; gradient checks cast to float64.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

ArrayLike = Union[np.ndarray, float, Sequence]


class Tensor:
    """Dense array plus an optional gradient buffer of the same shape."""

    __slots__ = ("data", "grad", "requires_grad", "name", "__weakref__")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None,
                 dtype=np.float32):
        arr = np.array(data, dtype=dtype)
        if any(d <= 0 for d in arr.shape):
            raise ValueError(f"tensor shape entries must be positive, got {arr.shape}")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = False
        t.name = None
        return t

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, c: float) -> "Tensor":
        return scale(self, c)

    __rmul__ = __mul__


def _not_scalar(t: Tensor) -> float:
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x: Union[Tensor, ArrayLike], dtype=np.float32) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

Backward = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Node:
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: Backward
    op: str


class Tape:
    """Ordered record of executed differentiable operations.

    Use as a context manager; operations executed inside the ``with`` block
    are recorded. Tapes nest, the innermost one is active.
    """

    _stack: List["Tape"] = []

    def __init__(self) -> None:
        self.nodes: List[Node] = []

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)


def active_tape() -> Optional[Tape]:
    return Tape._stack[-1] if Tape._stack else None


def record_op(op: str, out_data: np.ndarray, inputs: Sequence[Tensor], backward: Backward) -> Tensor:
    """Wrap ``out_data`` as a tensor and record ``backward`` if needed.

    ``backward`` maps the output gradient to one gradient (or None) per input.
    """
    out = Tensor._wrap(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(Node(tuple(inputs), out, backward, op))
    return out


def backward_pass(tape: Tape, loss: Tensor, params: Iterable[Tensor] = ()) -> None:
    """Seed d(loss)=1 and push gradients back through ``tape``.

    Gradients are summed into ``.grad`` of every leaf that requires one.
    Any tensor in ``params`` that the loss does not reach gets a zero gradient.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward seed must be a scalar, got shape {loss.shape}")
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = {id(n.output) for n in tape.nodes}
    leaves: Dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key not in produced:
                leaves[key] = inp
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    if id(loss) not in produced and loss.requires_grad:
        leaves[id(loss)] = loss
    for key, leaf in leaves.items():
        g = grads[key].astype(leaf.data.dtype, copy=False).reshape(leaf.shape)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)


# ---------------------------------------------------------------------------
# Elementary ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return record_op("add", a.data + b.data, (a, b), lambda g: (g, g))


def scale(a: Tensor, c: float) -> Tensor:
    return record_op("scale", a.data * c, (a,), lambda g: (g * c,))


def tensor_sum(a: Tensor) -> Tensor:
    shape = a.shape
    return record_op("sum", np.asarray(a.data.sum(), dtype=a.data.dtype), (a,),
                     lambda g: (np.broadcast_to(g, shape).copy(),))


def add_n(terms: Sequence[Tensor]) -> Tensor:
    """Sum of equally shaped tensors."""
    out = terms[0].data.copy()
    for t in terms[1:]:
        if t.shape != terms[0].shape:
            raise ValueError(f"add_n: shape mismatch {t.shape} vs {terms[0].shape}")
        out = out + t.data
    return record_op("add_n", out, tuple(terms), lambda g: tuple(g for _ in terms))


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    old = a.shape
    return record_op("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: Tuple[int, ...]) -> Tensor:
    inv = tuple(np.argsort(axes))
    return record_op("transpose", np.ascontiguousarray(a.data.transpose(axes)), (a,),
                     lambda g: (g.transpose(inv),))


def take_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Gather ``a[idx]`` along the first axis (indices may repeat)."""
    idx = np.asarray(idx, dtype=np.int64)
    shape = a.shape

    def backward(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, idx, g)
        return (out,)

    return record_op("take_rows", a.data[idx], (a,), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record_op("relu", np.where(mask, x.data, 0).astype(x.data.dtype), (x,),
                     lambda g: (g * mask,))


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``weight @ x + bias`` for a vector, or row-wise for an (N, n) batch."""
    m, n = weight.shape
    if x.shape[-1] != n or x.data.ndim not in (1, 2):
        raise ValueError(f"linear: input width {x.shape[-1]} does not match weight width {n}")
    if bias.shape != (m,):
        raise ValueError(f"linear: bias length {bias.shape} does not match output width {m}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T + bias.data

    def backward(g):
        if xd.ndim == 1:
            return g @ wd, np.outer(g, xd), g
        return g @ wd, g.T @ xd, g.sum(axis=0)

    return record_op("linear", out, (x, weight, bias), backward)


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Zero-padded cross-correlation of a C_in x H x W input."""
    if x.data.ndim != 3:
        raise ValueError(f"conv2d: input must be C_in x H x W, got rank {x.data.ndim}")
    c_out, c_in, kh, kw = kernels.shape
    if kh != kw or kh % 2 == 0:
        raise ValueError(f"conv2d: kernel must be square with odd size, got {kh}x{kw}")
    if x.shape[0] != c_in:
        raise ValueError(f"conv2d: input channels {x.shape[0]} != kernel C_in {c_in}")
    if bias.shape != (c_out,):
        raise ValueError(f"conv2d: bias length {bias.shape} != C_out {c_out}")
    _, h, w = x.shape
    k = kh
    for dim_name, size in (("H", h), ("W", w)):
        span = size + 2 * pad - k
        if span < 0 or span % stride:
            raise ValueError(f"conv2d: {dim_name}={size} with pad={pad}, k={k}, stride={stride} "
                             "gives a non-integral output size")
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    # im2col once: rows ordered (C_in, ki, kj) to match the kernel layout
    cols = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    cols = np.ascontiguousarray(cols.transpose(0, 3, 4, 1, 2)).reshape(c_in * k * k, ho * wo)
    wd = kernels.data
    w2 = wd.reshape(c_out, c_in * k * k)
    out = (w2 @ cols).reshape(c_out, ho, wo) + bias.data[:, None, None]

    def backward(g):
        g2 = g.reshape(c_out, ho * wo)
        gw = (g2 @ cols.T).reshape(wd.shape)
        gb = g2.sum(axis=1)
        dcols = (w2.T @ g2).reshape(c_in, k, k, ho, wo)
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
        gx = gxp[:, pad:pad + h, pad:pad + w] if pad else gxp
        return gx, gw, gb

    return record_op("conv2d", out.astype(x.data.dtype, copy=False), (x, kernels, bias), backward)


def maxpool2d(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    """2x2 / stride-2 max pooling; ties go to the first element in row-major order."""
    if window != 2 or stride != 2:
        raise ValueError("maxpool2d supports window=2, stride=2 only")
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2d: spatial dims must be even, got {h}x{w}")
    blocks = x.data.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros((c, h // 2, w // 2, 4), dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        return (gb.reshape(c, h // 2, w // 2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h, w),)

    return record_op("maxpool2d", out, (x,), backward)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels: ArrayLike) -> Tensor:
    """Mean over rows of -log softmax(logits)[label]."""
    z = logits.data
    if z.ndim == 1:
        z = z[None, :]
    n, k = z.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != n:
        raise ValueError(f"softmax_cross_entropy: {labels.shape[0]} labels for {n} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"softmax_cross_entropy: label out of range [0, {k})")
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    nll = log_norm - shifted[np.arange(n), labels]
    loss = np.asarray(nll.mean(), dtype=z.dtype)
    shape = logits.shape

    def backward(g):
        p = np.exp(shifted - log_norm[:, None])
        p[np.arange(n), labels] -= 1
        return ((p * (g / n)).reshape(shape),)

    return record_op("softmax_cross_entropy", loss, (logits,), backward)


def smooth_l1_loss(pred: Tensor, target: Union[Tensor, np.ndarray]) -> Tensor:
    """Sum of 0.5 x^2 (|x| < 1) or |x| - 0.5 over x = pred - target."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.data.dtype)
    if t.shape != pred.shape:
        raise ValueError(f"smooth_l1_loss: shape mismatch {pred.shape} vs {t.shape}")
    x = pred.data - t
    small = np.abs(x) < 1
    loss = np.where(small, 0.5 * x * x, np.abs(x) - 0.5).sum()
    dx = np.where(small, x, np.sign(x))
    inputs = (pred, target) if isinstance(target, Tensor) else (pred,)

    def backward(g):
        return (g * dx, -g * dx)

    return record_op("smooth_l1_loss", np.asarray(loss, dtype=pred.data.dtype), inputs, backward)


def signed_sqrt_l2norm(x: Tensor) -> Tensor:
    """sign(x) * sqrt(|x|) followed by L2 normalisation (row-wise for 2-D input).

    A zero row maps to zero and passes zero gradient.
    """
    xd = x.data if x.data.ndim == 2 else x.data[None, :]
    y = np.sign(xd) * np.sqrt(np.abs(xd))
    norm = np.sqrt((y * y).sum(axis=1, keepdims=True))
    safe = np.where(norm > 0, norm, 1)
    z = y / safe
    with np.errstate(divide="ignore"):
        dy_dx = np.where(xd != 0, 0.5 / np.sqrt(np.abs(xd)), 0)
    shape = x.shape

    def backward(g):
        g2 = g.reshape(z.shape)
        gy = (g2 - z * (z * g2).sum(axis=1, keepdims=True)) / safe
        gy = np.where(norm > 0, gy, 0)
        return ((gy * dy_dx).reshape(shape).astype(g.dtype, copy=False),)

    return record_op("signed_sqrt_l2norm", z.reshape(shape).astype(x.data.dtype, copy=False), (x,), backward)


# ---------------------------------------------------------------------------
# Optimiser
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.001
    decay_step: int = 40_000
    decayed_rate: float = 0.0001
    momentum: float = 0.9
    clip_norm: Optional[float] = None  # rescale the joint gradient to at most this L2 norm

    def __post_init__(self):
        if self.learning_rate <= 0 or self.decayed_rate <= 0:
            raise ValueError("learning rates must be positive")
        if self.decay_step <= 0:
            raise ValueError("decay_step must be a positive integer")
        if not self.decayed_rate < self.learning_rate:
            raise ValueError("decayed_rate must be below learning_rate")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")

    def lr(self, step: int) -> float:
        return self.learning_rate if step < self.decay_step else self.decayed_rate


def sgd_step(params: Sequence[Tensor], config: SgdConfig, step: int,
             velocity: Optional[Dict[int, np.ndarray]] = None) -> float:
    """Momentum SGD update in place; clears gradients. Returns the learning rate used.

    ``velocity`` holds per-parameter momentum buffers across calls; pass the
    same dict every step (an empty dict starts from rest).
    """
    for p in params:
        if p.grad is None:
            raise ValueError(f"sgd_step: parameter {p.name or p.shape} has no gradient")
    lr = config.lr(step)
    factor = 1.0
    if config.clip_norm is not None:
        norm = float(np.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64))) for p in params)))
        if norm > config.clip_norm:
            factor = config.clip_norm / norm
    for p in params:
        g = p.grad if factor == 1.0 else p.grad * factor
        if config.momentum and velocity is not None:
            v = velocity.get(id(p))
            v = g.copy() if v is None else config.momentum * v + g
            velocity[id(p)] = v
            g = v
        p.data -= (lr * g).astype(p.data.dtype, copy=False)
        p.grad = None
    return lr


class SGD:
    """Stateful wrapper around :func:`sgd_step` that owns the momentum buffers."""

    def __init__(self, params: Sequence[Tensor], config: SgdConfig):
        self.params = list(params)
        self.config = config
        self.velocity: Dict[int, np.ndarray] = {}

    def step(self, step: int) -> float:
        return sgd_step(self.params, self.config, step, self.velocity)


# ---------------------------------------------------------------------------
# Verification
# ---------------------------------------------------------------------------

def finite_difference_check(fn: Callable[..., Tensor], inputs: Sequence[ArrayLike],
                            epsilon: float = 1e-3, max_coords: Optional[int] = None,
                            seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` receives float64 tensors (one per entry of ``inputs``) and must
    return a scalar tensor. All coordinates are checked unless ``max_coords``
    is given, in which case that many coordinates per input are sampled.
    """
    xs = [Tensor(np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64),
                 requires_grad=True, dtype=np.float64) for x in inputs]
    with Tape() as tape:
        out = fn(*xs)
    backward_pass(tape, out, xs)
    analytic = [x.grad.copy() for x in xs]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for x, a in zip(xs, analytic):
        flat = x.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + epsilon
            f_plus = float(fn(*xs).data)
            flat[i] = orig - epsilon
            f_minus = float(fn(*xs).data)
            flat[i] = orig
            num = (f_plus - f_minus) / (2 * epsilon)
            ana = float(a.reshape(-1)[i])
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# Checkpoint files
# ---------------------------------------------------------------------------

MAGIC = b"TMPL"
FORMAT_VERSION = 1


def save_tensors(path: Union[str, Path], tensors: Mapping[str, Union[Tensor, np.ndarray]]) -> None:
    """Write named float32 tensors in the TMPL little-endian layout."""
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(tensors))]
    for name, t in tensors.items():
        arr = np.ascontiguousarray(t.data if isinstance(t, Tensor) else t, dtype="<f4")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_tensors(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: not a TMPL checkpoint")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    out: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off:off + n].decode("utf-8")
        off += n
        (rank,) = struct.unpack_from("<I", buf, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        nbytes = 4 * math.prod(dims)
        out[name] = np.frombuffer(buf, dtype="<f4", count=math.prod(dims), offset=off).reshape(dims).astype(np.float32)
        off += nbytes
    if off != len(buf):
        raise ValueError(f"{path}: {len(buf) - off} trailing bytes")
    return out
