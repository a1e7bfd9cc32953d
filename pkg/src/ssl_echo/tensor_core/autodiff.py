"""Dense tensors with a recording tape for reverse-mode differentiation.

Arrays are numpy ndarrays (float64 by default, float32 via
:func:`set_default_dtype`). Operations record themselves on the
currently active :class:`Tape`; :func:`backward` replays the tape in
reverse recording order exactly once. Double backward is deliberately
unsupported: a tape can be consumed only once.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "ShapeError",
    "TapeError",
    "Tensor",
    "Tape",
    "backward",
    "set_default_dtype",
    "get_default_dtype",
    "matmul",
    "conv2d",
    "relu",
    "softmax",
    "log_softmax",
    "log",
    "clamp_min",
    "tensor_sum",
    "tensor_mean",
    "reshape",
    "batchnorm2d",
    "stop_recording",
]


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class TapeError(RuntimeError):
    """Tape used outside its single forward/backward life cycle."""


_DEFAULT_DTYPE = np.float64


def set_default_dtype(dtype):
    """Set global tensor precision (np.float64 or np.float32)."""
    global _DEFAULT_DTYPE
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}")
    _DEFAULT_DTYPE = dtype


def get_default_dtype():
    return _DEFAULT_DTYPE


class Tensor:
    """N-dimensional float array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.item())

    def detach(self):
        """View of the same data with gradient tracking off."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; scalars and ndarrays are wrapped as constants.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(other, mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of operations; recording order is topological order."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self._consumed = False

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self._nodes)


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class stop_recording:
    """Context manager suppressing tape recording for enclosed ops."""

    def __enter__(self):
        _TAPE_STACK.append(None)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is None
        return False


def _record(inputs, output, backward_fn):
    tape = _active_tape()
    if tape is not None and output.requires_grad:
        if tape._consumed:
            raise TapeError("cannot record onto a tape that was already backwarded")
        tape._nodes.append(_Node(tuple(inputs), output, backward_fn))


def _accumulate(t, g):
    if t.grad is None:
        t.grad = g if g.flags.owndata else g.copy()
    else:
        t.grad = t.grad + g


def backward(loss, tape):
    """Populate ``grad`` on every requires_grad leaf reachable from ``loss``.

    The tape is traversed exactly once in reverse recording order and is
    consumed afterwards; a second call raises :class:`TapeError`.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("loss must be a Tensor")
    if loss.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    if tape._consumed:
        raise TapeError("tape already consumed by a previous backward")
    tape._consumed = True

    loss.grad = np.ones_like(loss.data)
    produced = {id(node.output) for node in tape._nodes}
    for node in reversed(tape._nodes):
        gout = node.output.grad
        if gout is None:
            continue
        grads = node.backward_fn(gout)
        for inp, g in zip(node.inputs, grads):
            if g is None or not inp.requires_grad:
                continue
            _accumulate(inp, np.asarray(g))
    # Leaves recorded on the tape but never reached still get a grad.
    for node in tape._nodes:
        for inp in node.inputs:
            if inp.requires_grad and inp.grad is None and id(inp) not in produced:
                inp.grad = np.zeros_like(inp.data)


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data, requires_grad=a.requires_grad or b.requires_grad)

    def backward_fn(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))

    _record((a, b), out, backward_fn)
    return out


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data * b.data, requires_grad=a.requires_grad or b.requires_grad)

    def backward_fn(g):
        return (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape))

    _record((a, b), out, backward_fn)
    return out


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul requires (M,K)x(K,N), got {a.shape} and {b.shape}"
        )
    out = Tensor(a.data @ b.data, requires_grad=a.requires_grad or b.requires_grad)

    def backward_fn(g):
        return (g @ b.data.T, a.data.T @ g)

    _record((a, b), out, backward_fn)
    return out


def relu(x):
    x = _as_tensor(x)
    out = Tensor(np.maximum(x.data, 0.0), requires_grad=x.requires_grad)
    mask = x.data > 0

    def backward_fn(g):
        return (g * mask,)

    _record((x,), out, backward_fn)
    return out


def clamp_min(x, floor):
    """Elementwise max(x, floor); gradient flows only where x > floor."""
    x = _as_tensor(x)
    out = Tensor(np.maximum(x.data, floor), requires_grad=x.requires_grad)
    mask = x.data > floor

    def backward_fn(g):
        return (g * mask,)

    _record((x,), out, backward_fn)
    return out


def log(x):
    """Elementwise natural log; caller guarantees positivity (see clamp_min)."""
    x = _as_tensor(x)
    out = Tensor(np.log(x.data), requires_grad=x.requires_grad)

    def backward_fn(g):
        return (g / x.data,)

    _record((x,), out, backward_fn)
    return out


def softmax(logits, axis=-1):
    """Stable softmax along ``axis`` (max-subtraction)."""
    z = _as_tensor(logits)
    shifted = z.data - np.max(z.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / np.sum(e, axis=axis, keepdims=True)
    out = Tensor(p, requires_grad=z.requires_grad)

    def backward_fn(g):
        dot = np.sum(g * p, axis=axis, keepdims=True)
        return ((g - dot) * p,)

    _record((z,), out, backward_fn)
    return out


def log_softmax(logits, axis=-1):
    z = _as_tensor(logits)
    shifted = z.data - np.max(z.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    logp = shifted - lse
    out = Tensor(logp, requires_grad=z.requires_grad)
    p = np.exp(logp)

    def backward_fn(g):
        return (g - p * np.sum(g, axis=axis, keepdims=True),)

    _record((z,), out, backward_fn)
    return out


def tensor_sum(x, axis=None, keepdims=False):
    x = _as_tensor(x)
    out = Tensor(np.sum(x.data, axis=axis, keepdims=keepdims),
                 requires_grad=x.requires_grad)
    in_shape = x.shape

    def backward_fn(g):
        if axis is None:
            return (np.broadcast_to(g, in_shape).copy(),)
        if not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, tuple(a % len(in_shape) for a in axes))
        return (np.broadcast_to(g, in_shape).copy(),)

    _record((x,), out, backward_fn)
    return out


def tensor_mean(x, axis=None, keepdims=False):
    x = _as_tensor(x)
    if axis is None:
        n = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(tensor_sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x, shape):
    x = _as_tensor(x)
    out = Tensor(x.data.reshape(shape), requires_grad=x.requires_grad)
    in_shape = x.shape

    def backward_fn(g):
        return (g.reshape(in_shape),)

    _record((x,), out, backward_fn)
    return out


def _conv_out_dim(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def _im2col(xp, kh, kw, stride, oh, ow):
    # (B, C, oh, ow, kh, kw) windows -> (B, C*kh*kw, oh*ow) columns
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :oh, :ow]
    b, c = xp.shape[:2]
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(
        b, c * kh * kw, oh * ow
    )


def conv2d(x, kernel, stride=1, padding=0):
    """Cross-correlation of (B,C,H,W) input with (F,C,kh,kw) kernel."""
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(
            f"conv2d requires 4-D input and kernel, got {x.shape} and {kernel.shape}"
        )
    bsz, c, h, w = x.shape
    f, ck, kh, kw = kernel.shape
    if c != ck:
        raise ShapeError(
            f"conv2d channel mismatch: input {x.shape} vs kernel {kernel.shape}"
        )
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(
            f"conv2d window {kh}x{kw} exceeds padded input "
            f"{h + 2 * padding}x{w + 2 * padding}"
        )
    oh = _conv_out_dim(h, kh, stride, padding)
    ow = _conv_out_dim(w, kw, stride, padding)
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv2d produces empty output {oh}x{ow}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    k2 = kernel.data.reshape(f, c * kh * kw)
    out_data = (k2 @ cols).reshape(bsz, f, oh, ow)
    out = Tensor(out_data, requires_grad=x.requires_grad or kernel.requires_grad)

    def backward_fn(g):
        g2 = g.reshape(bsz, f, oh * ow)
        dk = None
        if kernel.requires_grad:
            dk = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(kernel.shape)
        dx = None
        if x.requires_grad:
            dcols = (k2.T @ g2).reshape(bsz, c, kh, kw, oh, ow)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * oh:stride,
                        j:j + stride * ow:stride] += dcols[:, :, i, j]
            dx = dxp[:, :, padding:padding + h, padding:padding + w]
        return (dx, dk)

    _record((x, kernel), out, backward_fn)
    return out


def batchnorm2d(x, gamma, beta, running_mean, running_var, training,
                momentum=0.9, eps=1e-5):
    """Per-channel batch normalization over a (B,C,H,W) tensor.

    In training mode normalizes by batch statistics and updates the
    running buffers in place (running = momentum*running + (1-m)*batch);
    in inference mode the running buffers are used and never touched.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if x.ndim != 4:
        raise ShapeError(f"batchnorm2d requires (B,C,H,W), got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"batchnorm2d affine shapes {gamma.shape}/{beta.shape} "
            f"do not match {c} channels"
        )
    axes = (0, 2, 3)
    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mean = running_mean
        var = running_var
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * invstd[None, :, None, None]
    out_data = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]
    out = Tensor(out_data,
                 requires_grad=x.requires_grad or gamma.requires_grad
                 or beta.requires_grad)

    def backward_fn(g):
        dgamma = np.sum(g * xhat, axis=axes) if gamma.requires_grad else None
        dbeta = np.sum(g, axis=axes) if beta.requires_grad else None
        dxhat = g * gamma.data[None, :, None, None]
        if training:
            m = x.shape[0] * x.shape[2] * x.shape[3]
            s1 = np.sum(dxhat, axis=axes)[None, :, None, None]
            s2 = np.sum(dxhat * xhat, axis=axes)[None, :, None, None]
            dx = (invstd[None, :, None, None] / m) * (m * dxhat - s1 - xhat * s2)
        else:
            dx = dxhat * invstd[None, :, None, None]
        return (dx, dgamma, dbeta)

    _record((x, gamma, beta), out, backward_fn)
    return out
