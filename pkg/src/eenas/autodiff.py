"""A small float64 tensor engine with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape` when at
least one input requires a gradient.  Outside a tape nothing is recorded,
which doubles as a no-grad mode for evaluation::

    with Tape() as tape:
        loss = cross_entropy(dense(x, w, b), y)
    tape.backward(loss)
    w.grad  # d loss / d w
"""

import struct
import threading

import numpy as np

from . import _kernels
from .errors import ContractViolation, MalformedFileError, NumericDomainError, ShapeError


class Tensor:
    """Dense float64 array that may take part in differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by a constant")
        return mul(self, 1.0 / float(other))


def as_tensor(value):
    return value if isinstance(value, Tensor) else Tensor(value)


class _Node:
    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op, inputs, output, backward_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


_local = threading.local()


def _tape_stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of primitive applications.

    Nodes are appended as operations execute, so the list is topologically
    ordered by construction and the backward pass is a reverse scan.
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, op, inputs, output, backward_fn):
        self.nodes.append(_Node(op, inputs, output, backward_fn))

    def backward(self, loss):
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it."""
        if not isinstance(loss, Tensor) or loss.size != 1:
            raise ContractViolation(f"backward needs a scalar loss, got shape {getattr(loss, 'shape', None)}")
        grads = {id(loss): np.ones_like(loss.data)}
        produced = set()
        for node in self.nodes:
            produced.add(id(node.output))
        if id(loss) not in produced and not loss.requires_grad:
            raise ContractViolation("loss is not reachable from the recorded tape")
        leaves = {}
        for node in reversed(self.nodes):
            g_out = grads.pop(id(node.output), None)
            if g_out is None:
                continue
            in_grads = node.backward_fn(g_out)
            for t, g in zip(node.inputs, in_grads):
                if g is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
                if key not in produced:
                    leaves[key] = t
        if loss.requires_grad and id(loss) not in produced:
            leaves[id(loss)] = loss
        for key, t in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            t.grad = g.copy() if t.grad is None else t.grad + g
        return {t.name or key: t.grad for key, t in leaves.items()}


def backward(tape, loss):
    """Functional spelling of :meth:`Tape.backward`."""
    return tape.backward(loss)


# --------------------------------------------------------------------------
# primitive helpers
# --------------------------------------------------------------------------


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericDomainError("non-finite value in primitive input")


def _emit(op, inputs, out_data, backward_fn):
    out = Tensor(out_data)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(op, tuple(inputs), out, backward_fn)
    return out


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# --------------------------------------------------------------------------
# primitives
# --------------------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_finite(a.data, b.data)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from exc
    return _emit("add", (a, b), out, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_finite(a.data, b.data)
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise ShapeError(f"sub: cannot broadcast {a.shape} with {b.shape}") from exc
    return _emit("sub", (a, b), out, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_finite(a.data, b.data)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from exc
    return _emit(
        "mul",
        (a, b),
        out,
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def relu(x):
    _check_finite(x.data)
    mask = x.data > 0
    return _emit("relu", (x,), x.data * mask, lambda g: (g * mask,))


def sigmoid(x):
    _check_finite(x.data)
    z = x.data
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _emit("sigmoid", (x,), out, lambda g: (g * out * (1.0 - out),))


def reshape(x, shape):
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from exc
    return _emit("reshape", (x,), out, lambda g: (g.reshape(x.shape),))


def flatten(x):
    """Collapse every axis after the batch axis."""
    if x.data.ndim < 2:
        raise ShapeError(f"flatten expects a batch axis, got shape {x.shape}")
    return reshape(x, (x.shape[0], -1))


def take(x, index, axis=1):
    """Select a single index along ``axis`` (dropping it)."""
    out = np.take(x.data, index, axis=axis)

    def bw(g):
        full = np.zeros_like(x.data)
        sl = [slice(None)] * x.data.ndim
        sl[axis] = index
        full[tuple(sl)] = g
        return (full,)

    return _emit("take", (x,), out, bw)


def total(x):
    """Sum of all elements as a scalar."""
    return _emit("sum", (x,), np.asarray(x.data.sum()), lambda g: (np.full(x.shape, float(g)),))


def mean(x):
    n = x.size
    return _emit("mean", (x,), np.asarray(x.data.mean()), lambda g: (np.full(x.shape, float(g) / n),))


def dense(x, w, b=None):
    """Fully-connected layer: ``x @ w.T + b`` with ``w`` shaped ``[n_out, n_in]``."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weight {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"dense: bias {b.shape} does not match {w.shape[0]} outputs")
    _check_finite(x.data, w.data)
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data

    def bw(g):
        gx = g @ w.data
        gw = g.T @ x.data
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    inputs = (x, w) if b is None else (x, w, b)
    return _emit("dense", inputs, out, bw)


def conv2d(x, w, b=None, stride=1, pad=0):
    """2-D cross-correlation over ``(N, C_in, H, W)`` with ``w`` of ``[C_out, C_in, K, K]``."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input and weight, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    cout, cin, k, k2 = w.shape
    if cin != c or k != k2:
        raise ShapeError(f"conv2d: input channels {c} vs weight {w.shape}")
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d: invalid stride {stride} / pad {pad}")
    ho = _kernels.conv_out_size(h, k, stride, pad)
    wo = _kernels.conv_out_size(wd, k, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {k} does not fit {h}x{wd} with pad {pad}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv2d: bias {b.shape} does not match {cout} outputs")
    _check_finite(x.data, w.data)
    cols = _kernels.im2col(x.data, k, stride, pad)  # (N, C*K*K, Ho*Wo)
    wm = w.data.reshape(cout, -1)
    out = np.matmul(wm, cols)
    if b is not None:
        out += b.data[:, None]
    out = out.reshape(n, cout, ho, wo)

    def bw(g):
        g3 = np.ascontiguousarray(g).reshape(n, cout, ho * wo)
        gw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        gx = None
        if x.requires_grad:
            gx = _kernels.col2im(np.matmul(wm.T, g3), x.shape, k, stride, pad)
        if b is None:
            return gx, gw
        return gx, gw, g3.sum(axis=(0, 2))

    inputs = (x, w) if b is None else (x, w, b)
    return _emit("conv2d", inputs, out, bw)


def maxpool2d(x, window):
    """Non-overlapping max pooling (stride equals window, floor mode)."""
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2d: expected 4-d input, got {x.shape}")
    window = int(window)
    if window < 1 or window > min(x.shape[2], x.shape[3]):
        raise ShapeError(f"maxpool2d: window {window} invalid for {x.shape[2]}x{x.shape[3]} map")
    _check_finite(x.data)
    out, arg = _kernels.maxpool_forward(x.data, window)
    return _emit("maxpool2d", (x,), out, lambda g: (_kernels.maxpool_backward(g, arg, x.shape, window),))


def softmax(x):
    """Softmax over the last axis."""
    _check_finite(x.data)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", (x,), out, bw)


def log_softmax_np(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits, labels):
    """Mean categorical cross-entropy of ``(N, C)`` logits against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ShapeError("cross_entropy: label out of range")
    _check_finite(logits.data)
    n = logits.shape[0]
    logp = log_softmax_np(logits.data)
    loss = -logp[np.arange(n), labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (p * (float(g) / n),)

    return _emit("cross_entropy", (logits,), np.asarray(loss), bw)


BCE_EPS = 1e-12


def binary_cross_entropy(p, target):
    """Mean binary cross-entropy of probabilities ``p`` against constant targets."""
    target = np.asarray(target, dtype=np.float64)
    if p.shape != target.shape:
        raise ShapeError(f"binary_cross_entropy: {p.shape} vs target {target.shape}")
    _check_finite(p.data)
    if np.any(p.data < 0) or np.any(p.data > 1):
        raise NumericDomainError("binary_cross_entropy expects probabilities in [0, 1]")
    q = np.clip(p.data, BCE_EPS, 1.0 - BCE_EPS)
    n = p.size
    loss = -(target * np.log(q) + (1.0 - target) * np.log(1.0 - q)).mean()

    def bw(g):
        return ((q - target) / (q * (1.0 - q)) * (float(g) / n),)

    return _emit("bce", (p,), np.asarray(loss), bw)


def mse(a, b):
    """Mean squared error between two same-shape tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse: {a.shape} vs {b.shape}")
    _check_finite(a.data, b.data)
    diff = a.data - b.data
    n = diff.size
    return _emit("mse", (a, b), np.asarray((diff**2).mean()), lambda g: (2.0 * diff * float(g) / n, -2.0 * diff * float(g) / n))


PRIMITIVES = {
    "conv2d": conv2d,
    "dense": dense,
    "relu": relu,
    "sigmoid": sigmoid,
    "maxpool2d": maxpool2d,
    "flatten": flatten,
    "softmax": softmax,
    "cross_entropy": cross_entropy,
    "add": add,
    "mul": mul,
    "mse": mse,
}


def primitive_forward(op_tag, inputs, **attrs):
    """Dispatch a primitive by name, e.g. ``primitive_forward("conv2d", [x, w], stride=2)``."""
    try:
        fn = PRIMITIVES[op_tag]
    except KeyError:
        raise ContractViolation(f"unknown primitive {op_tag!r}") from None
    return fn(*inputs, **attrs)


# --------------------------------------------------------------------------
# optimizers
# --------------------------------------------------------------------------


class Optimizer:
    """Plain gradient descent (``"sgd"``) or bias-corrected Adam (``"adam"``).

    ``step`` consumes the ``.grad`` of every parameter and clears it.  Moment
    buffers are keyed by parameter name, so the same optimizer can be fed the
    same dict of parameters across steps.
    """

    def __init__(self, algorithm="adam", lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        if algorithm not in ("sgd", "adam"):
            raise ContractViolation(f"unknown optimizer {algorithm!r}")
        self.algorithm = algorithm
        self.lr = float(lr)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {}
        self.v = {}
        self.steps = 0

    def step(self, params):
        items = list(params.items()) if isinstance(params, dict) else [(i, p) for i, p in enumerate(params)]
        for key, p in items:
            if p.grad is None:
                raise ContractViolation(f"parameter {key!r} has no gradient")
            if p.grad.shape != p.shape:
                raise ContractViolation(f"gradient shape {p.grad.shape} != parameter shape {p.shape} for {key!r}")
        self.steps += 1
        if self.algorithm == "sgd":
            for _, p in items:
                p.data = p.data - self.lr * p.grad
                p.grad = None
            return
        t = self.steps
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for key, p in items:
            m = self.m.get(key)
            if m is None:
                m = np.zeros_like(p.data)
                self.v[key] = np.zeros_like(p.data)
            v = self.v[key]
            m = self.beta1 * m + (1.0 - self.beta1) * p.grad
            v = self.beta2 * v + (1.0 - self.beta2) * p.grad**2
            self.m[key], self.v[key] = m, v
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.grad = None


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"NCHW1"


def save_checkpoint(params, path):
    """Write ``{name: Tensor | ndarray}`` in the flat NCHW1 layout (see docs/formats.md)."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        for name, value in params.items():
            arr = np.ascontiguousarray(value.data if isinstance(value, Tensor) else value, dtype="<f8")
            raw_name = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw_name)))
            fh.write(raw_name)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise MalformedFileError("missing NCHW1 magic", offset=0)
    pos = len(CHECKPOINT_MAGIC)
    out = {}

    def need(nbytes):
        if pos + nbytes > len(blob):
            raise MalformedFileError(f"truncated checkpoint record at byte {pos}", offset=pos)

    while pos < len(blob):
        need(4)
        (name_len,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        need(name_len + 4)
        name = blob[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        need(4 * rank)
        shape = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        need(8 * count)
        out[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * count
    return out
