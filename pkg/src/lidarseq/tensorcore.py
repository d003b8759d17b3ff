"""Small reverse-mode autodiff engine over h x w x c feature maps.

Only the operations the two-branch network needs are provided.  Every
feature map is a single image laid out row-major as (h, w, channels); there
is no batch axis.  Horizontal convolution padding wraps around because the
azimuth axis of a range image is periodic.
"""
from __future__ import annotations

import contextlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .errors import ConfigurationError, FormatError, TrainingError, UsageError

_grad_enabled = True
_pattern_log = None


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording the graph (inference, finite differences)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def record_pattern():
    """Collect the piecewise-linear switching pattern (ReLU signs, pool winners).

    Yields a list that ReLU and max-pool ops append to while the context is
    open; :func:`grad_check` uses it to detect perturbations that cross a kink.
    """
    global _pattern_log
    prev = _pattern_log
    _pattern_log = []
    try:
        yield _pattern_log
    finally:
        _pattern_log = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype})"

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self):
        """Back-propagate from a scalar output, accumulating into leaf grads."""
        if self.data.size != 1:
            raise UsageError(f"backward() needs a scalar output, got shape {self.shape}")
        order = _topological(self)
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # intermediate grads are not needed once propagated
                node.grad = None if node._parents else node.grad


def _topological(root):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _result(data, parents, backward):
    """Wrap an op output, attaching the backward closure only when needed."""
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)
    return Tensor(data)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_map(x, what):
    if x.data.ndim != 3:
        raise ConfigurationError(f"{what} expects an h x w x c map, got shape {x.shape}")


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def conv2d(x, kernel, bias):
    """3x3 (or 1x1) convolution; output keeps the input's spatial size.

    ``kernel`` is (k, k, c_in, c_out) with k in {1, 3}; ``bias`` is (c_out,).
    Rows are zero padded, columns wrap around.
    """
    x, kernel, bias = _as_tensor(x), _as_tensor(kernel), _as_tensor(bias)
    _check_map(x, "conv2d")
    h, w, cin = x.shape
    ks = kernel.shape
    if len(ks) != 4 or ks[0] != ks[1] or ks[0] not in (1, 3) or ks[2] != cin:
        raise ConfigurationError(
            f"conv2d shape mismatch: input {x.shape} vs kernel {ks} "
            "(expected kernel (3, 3, c_in, c_out) or (1, 1, c_in, c_out))")
    cout = ks[3]
    if bias.shape != (cout,):
        raise ConfigurationError(f"conv2d bias shape {bias.shape} does not match kernel {ks}")
    k2 = kernel.data.reshape(-1, cout)
    if ks[0] == 3:
        cols = kernels.im2col3(x.data)
    else:
        cols = x.data.reshape(h * w, cin)
    out = (cols @ k2 + bias.data).reshape(h, w, cout)

    def backward(g):
        g2 = g.reshape(h * w, cout)
        if kernel.requires_grad:
            kernel._accumulate((cols.T @ g2).reshape(ks))
        if bias.requires_grad:
            bias._accumulate(g2.sum(axis=0, dtype=np.float64).astype(g.dtype))
        if x.requires_grad:
            dcols = g2 @ k2.T
            if ks[0] == 3:
                x._accumulate(kernels.col2im3(dcols, h, w, cin))
            else:
                x._accumulate(dcols.reshape(h, w, cin))

    return _result(out, (x, kernel, bias), backward)


def relu(x):
    x = _as_tensor(x)
    mask = x.data > 0
    if _pattern_log is not None:
        _pattern_log.append(mask)
    out = np.where(mask, x.data, 0).astype(x.dtype)

    def backward(g):
        x._accumulate(np.where(mask, g, 0).astype(g.dtype))

    return _result(out, (x,), backward)


def maxpool_w(x):
    """Max over horizontal column pairs: (h, w, c) -> (h, w/2, c).

    Returns ``(output, indices)`` where ``indices`` holds 0/1 for the winning
    column of each pair (ties resolve to the left column).
    """
    x = _as_tensor(x)
    _check_map(x, "maxpool_w")
    h, w, c = x.shape
    if w % 2:
        raise ConfigurationError(f"maxpool_w needs an even width, got shape {x.shape}")
    pairs = x.data.reshape(h, w // 2, 2, c)
    idx = (pairs[:, :, 1, :] > pairs[:, :, 0, :]).astype(np.int8)
    if _pattern_log is not None:
        _pattern_log.append(idx)
    out = np.where(idx == 1, pairs[:, :, 1, :], pairs[:, :, 0, :])

    def backward(g):
        gx = np.zeros((h, w // 2, 2, c), dtype=g.dtype)
        gx[:, :, 0, :] = np.where(idx == 0, g, 0)
        gx[:, :, 1, :] = np.where(idx == 1, g, 0)
        x._accumulate(gx.reshape(h, w, c))

    return _result(out, (x,), backward), idx


def upsample_w(x, factor):
    """Nearest-neighbour column replication by an integer factor."""
    x = _as_tensor(x)
    _check_map(x, "upsample_w")
    if not isinstance(factor, (int, np.integer)) or factor < 1:
        raise ConfigurationError(f"upsample_w factor must be a positive integer, got {factor!r}")
    if factor == 1:
        return x
    h, w, c = x.shape
    out = np.repeat(x.data, factor, axis=1)

    def backward(g):
        x._accumulate(g.reshape(h, w, factor, c).sum(axis=2, dtype=np.float64).astype(g.dtype))

    return _result(out, (x,), backward)


def softmax_pixels(x):
    """Per-pixel softmax over the channel axis, max-subtracted."""
    x = _as_tensor(x)
    if x.shape[-1] < 2:
        raise ConfigurationError(f"softmax_pixels needs at least 2 channels, got shape {x.shape}")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z.astype(np.float64))
    p64 = e / e.sum(axis=-1, keepdims=True)
    p = p64.astype(x.dtype)

    def backward(g):
        dot = (g.astype(np.float64) * p64).sum(axis=-1, keepdims=True)
        x._accumulate((p64 * (g - dot)).astype(g.dtype))

    return _result(p, (x,), backward)


def concat_channels(inputs):
    inputs = [_as_tensor(t) for t in inputs]
    if not inputs:
        raise ConfigurationError("concat_channels needs at least one input")
    if len(inputs) == 1:
        return inputs[0]
    hw = inputs[0].shape[:2]
    for t in inputs:
        _check_map(t, "concat_channels")
        if t.shape[:2] != hw:
            raise ConfigurationError(
                "concat_channels spatial mismatch: " + ", ".join(str(t.shape) for t in inputs))
    out = np.concatenate([t.data for t in inputs], axis=-1)
    offsets = np.cumsum([0] + [t.shape[-1] for t in inputs])

    def backward(g):
        for t, lo, hi in zip(inputs, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                t._accumulate(g[..., lo:hi])

    return _result(out, inputs, backward)


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ConfigurationError(f"add shape mismatch: {a.shape} vs {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _result(a.data + b.data, (a, b), backward)


def total_sum(x):
    x = _as_tensor(x)
    out = np.asarray(x.data.sum(dtype=np.float64), dtype=x.dtype)

    def backward(g):
        x._accumulate(np.broadcast_to(g, x.shape))

    return _result(out, (x,), backward)


def weighted_sum(x, weights):
    """Scalar ``sum(x * weights)`` with constant weights (test probes)."""
    x = _as_tensor(x)
    weights = np.asarray(weights, dtype=x.dtype)
    out = np.asarray((x.data.astype(np.float64) * weights).sum(), dtype=x.dtype)

    def backward(g):
        x._accumulate(g * weights)

    return _result(out, (x,), backward)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 3e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params, **hyper):
        state = cls(**hyper)
        for name, p in params.items():
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        return state


def adam_step(params, grads, state, lr=None):
    """One bias-corrected Adam update, in place on ``params`` and ``state``.

    ``grads`` maps every parameter name to a gradient array.  ``lr`` overrides
    ``state.lr`` for this step (used by learning-rate schedules).
    """
    missing = [name for name in params if grads.get(name) is None]
    if missing:
        raise TrainingError(f"missing gradient for parameter {missing[0]!r}"
                            + (f" (+{len(missing) - 1} more)" if len(missing) > 1 else ""))
    state.step += 1
    t = state.step
    lr = state.lr if lr is None else lr
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=p.data.dtype)
        if g.shape != p.shape:
            raise TrainingError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - update).astype(p.data.dtype)
    return params, state


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def _pattern_key(log):
    return b"".join(np.packbits(np.asarray(a, dtype=bool)).tobytes() for a in log)


def grad_check(fn, inputs, eps=1e-4, indices=None, floor=1e-7, skip_kinks=False):
    """Compare reverse-mode gradients against central finite differences.

    ``fn`` maps the tensors in ``inputs`` to a scalar tensor.  ``indices``
    optionally restricts the check to ``[(input_position, flat_index), ...]``.
    With ``skip_kinks`` a coordinate whose +/-eps perturbation changes any
    ReLU sign or pool winner is left out.  Returns ``(max_rel_err, checked)``.
    Run it on float64 tensors; float32 finite differences are too noisy.
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with record_pattern() as base_log:
        out = fn(*inputs)
    if np.asarray(out.data).size != 1:
        raise UsageError(f"grad_check needs a scalar-valued graph, got shape {out.shape}")
    base_key = _pattern_key(base_log)
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    if indices is None:
        indices = [(k, i) for k, t in enumerate(inputs) for i in range(t.data.size)]

    def probe(k, i, delta):
        flat = inputs[k].data.reshape(-1)
        old = flat[i]
        flat[i] = old + delta
        with no_grad(), record_pattern() as log:
            val = float(fn(*inputs).data)
        flat[i] = old
        return val, _pattern_key(log)

    worst, checked = 0.0, 0
    for k, i in indices:
        fp, kp = probe(k, i, eps)
        fm, km = probe(k, i, -eps)
        if skip_kinks and (kp != base_key or km != base_key):
            continue
        numeric = (fp - fm) / (2 * eps)
        a = float(analytic[k].reshape(-1)[i])
        err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
        worst = max(worst, err)
        checked += 1
    return worst, checked


# ---------------------------------------------------------------------------
# LSQW record files
# ---------------------------------------------------------------------------

MAGIC = b"LSQW"
FORMAT_VERSION = 1


def write_records(path, records):
    """Write ``(name, array)`` records as little-endian float32."""
    chunks = [MAGIC, struct.pack("<H", FORMAT_VERSION)]
    for name, arr in records:
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise FormatError(f"record {name!r} cannot be encoded")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


def read_records(path):
    """Parse a whole LSQW file; raises :class:`FormatError` before returning anything partial."""
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {buf[:4]!r}, expected {MAGIC!r}")
    if len(buf) < 6:
        raise FormatError(f"{path}: truncated header")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    pos, out = 6, {}
    try:
        while pos < len(buf):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            if pos + nlen > len(buf):
                raise FormatError(f"{path}: truncated record name")
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            count = int(np.prod(dims, dtype=np.int64))
            end = pos + 4 * count
            if end > len(buf):
                raise FormatError(f"{path}: truncated payload for {name!r}")
            out[name] = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(dims).copy()
            pos = end
    except struct.error as exc:
        raise FormatError(f"{path}: truncated record header ({exc})") from None
    return out


def pack_f64(value):
    """Store a float64 scalar losslessly as two float32 words."""
    return np.array([value], dtype="<f8").view("<f4")


def unpack_f64(words):
    return float(np.ascontiguousarray(words, dtype="<f4").view("<f8")[0])
