"""
Dense tensors with reverse-mode automatic differentiation.

The graph is built while the forward pass runs (define-by-run): every
operation on a :class:`Tensor` that requires gradients records a node linking
its output to its inputs. :func:`backward` walks the graph of a scalar loss in
reverse topological order and populates ``grad`` on every tensor it reaches.

Example::

   >>> x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
   >>> loss = (x * x).sum()
   >>> backward(loss)
   >>> x.grad
   array([ 2., -4.,  6.])

The set of primitives is closed: it contains what the micro detector, its
training loss, the attack margin and the patch losses need.
"""

__all__ = [
    "Tensor",
    "Graph",
    "backward",
    "add",
    "sub",
    "mul",
    "linear",
    "conv2d",
    "activation",
    "sigmoid",
    "silu",
    "leaky_relu",
    "softmax",
    "exp",
    "reduce_sum",
    "reduce_mean",
    "reduce_max",
    "minimum",
    "take",
    "reshape",
    "resample",
    "bce_with_logits",
    "softmax_cross_entropy",
    "sgd_step",
    "clip_grad_norm",
    "SGD",
]

# Standard library modules.
import dataclasses

# Third party modules.
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# Local modules.

# Globals and constants variables.
LEAKY_RELU_SLOPE = 0.1

_ACTIVATIONS = ["sigmoid", "silu", "leaky_relu", "softmax"]


@dataclasses.dataclass(frozen=True)
class _Node:
    op: str
    inputs: tuple
    vjp: object


class Tensor:
    """
    Dense array of 64-bit floats with an optional gradient.

    :arg data: values, converted to a ``float64`` array (copied)
    :arg requires_grad: whether operations on this tensor are recorded
    """

    __slots__ = ("data", "grad", "requires_grad", "_node")

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._node = None

    @classmethod
    def _from_op(cls, data, op, inputs, vjp):
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=np.float64)
        out.grad = None
        out.requires_grad = any(t.requires_grad for t in inputs)
        out._node = _Node(op, inputs, vjp) if out.requires_grad else None
        return out

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def op(self):
        return None if self._node is None else self._node.op

    def item(self):
        if self.size != 1:
            raise ValueError(f"Tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(()))

    def numpy(self):
        return self.data.copy()

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self):
        return reduce_mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _as_tensor(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Graph:
    """
    Tensors reachable from a root, in topological order (inputs first).
    """

    def __init__(self, nodes):
        self.nodes = list(nodes)

    @classmethod
    def trace(cls, root):
        order = []
        visited = set()
        stack = [(root, False)]
        while stack:
            tensor, expanded = stack.pop()
            if expanded:
                order.append(tensor)
                continue
            if id(tensor) in visited:
                continue
            visited.add(id(tensor))
            stack.append((tensor, True))
            if tensor._node is not None:
                for inp in tensor._node.inputs:
                    if inp.requires_grad and id(inp) not in visited:
                        stack.append((inp, False))
        return cls(order)

    def __len__(self):
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)

    def backward(self, loss):
        if loss.size != 1:
            raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
        if not self.nodes or self.nodes[-1] is not loss:
            raise ValueError("loss is not the root of this graph")

        grads = {id(loss): np.ones_like(loss.data)}
        for tensor in reversed(self.nodes):
            grad = grads.pop(id(tensor), None)
            if grad is None:
                continue

            # Leaves accumulate, intermediate results are overwritten
            if tensor._node is None:
                tensor.grad = grad if tensor.grad is None else tensor.grad + grad
                continue
            tensor.grad = grad

            for inp, inp_grad in zip(tensor._node.inputs, tensor._node.vjp(grad)):
                if inp_grad is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + inp_grad
                else:
                    grads[key] = inp_grad


def backward(loss, graph=None):
    """
    Populates ``grad`` of every tensor reachable from the scalar *loss*.

    :arg loss: scalar tensor
    :arg graph: graph of *loss* (traced when ``None``)
    """
    if loss.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if graph is None:
        graph = Graph.trace(loss)
    graph.backward(loss)


# Elementwise arithmetic


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(a.data + b.data, "add", (a, b), vjp)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(a.data - b.data, "sub", (a, b), vjp)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._from_op(a.data * b.data, "mul", (a, b), vjp)


def exp(x):
    x = _as_tensor(x)
    out = np.exp(x.data)

    def vjp(g):
        return (g * out,)

    return Tensor._from_op(out, "exp", (x,), vjp)


def minimum(a, b):
    """
    Elementwise minimum; the gradient flows to *a* on ties.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    pick_a = a.data <= b.data

    def vjp(g):
        return (
            _unbroadcast(np.where(pick_a, g, 0.0), a.shape),
            _unbroadcast(np.where(pick_a, 0.0, g), b.shape),
        )

    return Tensor._from_op(np.minimum(a.data, b.data), "minimum", (a, b), vjp)


# Linear maps


def linear(a, b):
    """
    Matrix product of two 2-D tensors.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"Cannot multiply shapes {a.shape} and {b.shape}")

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor._from_op(a.data @ b.data, "linear", (a, b), vjp)


def conv2d(x, kernel, stride=1, pad=0):
    """
    2-D cross-correlation of a ``[h, w, cin]`` input with a
    ``[k, k, cin, cout]`` kernel.

    :arg stride: step between output locations (>= 1)
    :arg pad: zero padding added on every side (>= 0)
    :return: tensor ``[ho, wo, cout]`` with
        ``ho = (h + 2 * pad - k) // stride + 1``
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.data.ndim != 3:
        raise ValueError(f"Input must be [h, w, cin], got shape {x.shape}")
    if kernel.data.ndim != 4 or kernel.shape[0] != kernel.shape[1]:
        raise ValueError(f"Kernel must be [k, k, cin, cout], got shape {kernel.shape}")
    k = kernel.shape[0]
    if k % 2 == 0:
        raise ValueError(f"Kernel size must be odd, got {k}")
    if x.shape[2] != kernel.shape[2]:
        raise ValueError(
            f"Input has {x.shape[2]} channels but kernel expects {kernel.shape[2]}"
        )
    if stride < 1:
        raise ValueError(f"Stride must be >= 1, got {stride}")
    if pad < 0:
        raise ValueError(f"Padding must be >= 0, got {pad}")

    h, w, _cin = x.shape
    xp = np.pad(x.data, ((pad, pad), (pad, pad), (0, 0)))
    if xp.shape[0] < k or xp.shape[1] < k:
        raise ValueError(f"Kernel of size {k} larger than padded input {xp.shape[:2]}")

    # windows: [ho, wo, cin, k, k]
    windows = sliding_window_view(xp, (k, k), axis=(0, 1))[::stride, ::stride]
    ho, wo = windows.shape[:2]
    out = np.einsum("hwcij,ijco->hwo", windows, kernel.data)

    def vjp(g):
        grad_x = None
        grad_kernel = None
        if kernel.requires_grad:
            grad_kernel = np.einsum("hwcij,hwo->ijco", windows, g)
        if x.requires_grad:
            grad_xp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    grad_xp[
                        i : i + stride * (ho - 1) + 1 : stride,
                        j : j + stride * (wo - 1) + 1 : stride,
                        :,
                    ] += np.einsum("hwo,co->hwc", g, kernel.data[i, j])
            grad_x = grad_xp[pad : pad + h, pad : pad + w, :]
        return grad_x, grad_kernel

    return Tensor._from_op(out, "conv2d", (x, kernel), vjp)


def resample(x, rows, cols):
    """
    Separable linear resampling of a ``[p, q, c]`` tensor onto a
    ``[h, w, c]`` grid: ``out[:, :, c] = rows @ x[:, :, c] @ cols.T``.

    :arg rows: ``[h, p]`` interpolation matrix (constant)
    :arg cols: ``[w, q]`` interpolation matrix (constant)
    """
    x = _as_tensor(x)
    rows = np.asarray(rows, dtype=np.float64)
    cols = np.asarray(cols, dtype=np.float64)
    out = np.einsum("hp,pqc,wq->hwc", rows, x.data, cols)

    def vjp(g):
        return (np.einsum("hp,hwc,wq->pqc", rows, g, cols),)

    return Tensor._from_op(out, "resample", (x,), vjp)


# Activations


def _sigmoid(values):
    return 0.5 * (1.0 + np.tanh(0.5 * values))


def _softmax(values):
    shifted = values - values.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def sigmoid(x):
    x = _as_tensor(x)
    s = _sigmoid(x.data)

    def vjp(g):
        return (g * s * (1.0 - s),)

    return Tensor._from_op(s, "sigmoid", (x,), vjp)


def silu(x):
    x = _as_tensor(x)
    s = _sigmoid(x.data)

    def vjp(g):
        return (g * (s + x.data * s * (1.0 - s)),)

    return Tensor._from_op(x.data * s, "silu", (x,), vjp)


def leaky_relu(x, slope=LEAKY_RELU_SLOPE):
    x = _as_tensor(x)
    positive = x.data > 0

    def vjp(g):
        return (np.where(positive, g, slope * g),)

    return Tensor._from_op(np.where(positive, x.data, slope * x.data), "leaky_relu", (x,), vjp)


def softmax(x):
    """
    Softmax over the last dimension.
    """
    x = _as_tensor(x)
    s = _softmax(x.data)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return Tensor._from_op(s, "softmax", (x,), vjp)


def activation(x, kind):
    """
    Applies the activation *kind*: ``sigmoid``, ``silu``, ``leaky_relu``
    (slope 0.1) or ``softmax`` (last dimension).
    """
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "silu":
        return silu(x)
    if kind == "leaky_relu":
        return leaky_relu(x)
    if kind == "softmax":
        return softmax(x)
    raise ValueError(
        f"Unknown activation: {kind}. Valid activations: {', '.join(_ACTIVATIONS)}"
    )


# Reductions and indexing


def reduce_sum(x, axis=None):
    x = _as_tensor(x)
    kept = x.data.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (np.broadcast_to(g.reshape(kept.shape), x.shape).copy(),)

    out = kept.reshape(()) if axis is None else np.squeeze(kept, axis=axis)
    return Tensor._from_op(out, "sum", (x,), vjp)


def reduce_mean(x):
    x = _as_tensor(x)
    n = x.size

    def vjp(g):
        return (np.full(x.shape, float(g.reshape(())) / n),)

    return Tensor._from_op(x.data.mean(), "mean", (x,), vjp)


def reduce_max(x):
    """
    Maximum over all elements; the gradient flows to the first maximum.
    """
    x = _as_tensor(x)
    index = int(np.argmax(x.data))

    def vjp(g):
        grad = np.zeros(x.size)
        grad[index] = float(g.reshape(()))
        return (grad.reshape(x.shape),)

    return Tensor._from_op(x.data.reshape(-1)[index], "max", (x,), vjp)


def take(x, index):
    """
    Indexes *x* with any numpy index (integers, slices, integer arrays).
    """
    x = _as_tensor(x)

    def vjp(g):
        grad = np.zeros_like(x.data)
        np.add.at(grad, index, g)
        return (grad,)

    return Tensor._from_op(np.array(x.data[index]), "take", (x,), vjp)


def reshape(x, shape):
    x = _as_tensor(x)

    def vjp(g):
        return (g.reshape(x.shape),)

    return Tensor._from_op(x.data.reshape(shape), "reshape", (x,), vjp)


# Losses


def bce_with_logits(logits, targets, reduction="mean"):
    """
    Binary cross-entropy between ``sigmoid(logits)`` and *targets*, averaged
    (``reduction="mean"``) or summed (``reduction="sum"``) over elements.
    """
    if reduction not in ("mean", "sum"):
        raise ValueError(f"Unknown reduction: {reduction}")
    logits = _as_tensor(logits)
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != logits.shape:
        raise ValueError(f"Targets shape {t.shape} differs from logits {logits.shape}")
    x = logits.data
    losses = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))
    n = x.size if reduction == "mean" else 1

    def vjp(g):
        return (float(g.reshape(())) * (_sigmoid(x) - t) / n,)

    return Tensor._from_op(losses.sum() / n, "bce", (logits,), vjp)


def softmax_cross_entropy(logits, labels):
    """
    Mean cross-entropy of ``[n, N]`` logits against *n* integer labels.
    """
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(
            f"Expected [n, N] logits and n labels, got {logits.shape} and {labels.shape}"
        )
    x = logits.data
    n = x.shape[0]
    shifted = x - x.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    loss = -log_probs[rows, labels].mean()

    def vjp(g):
        grad = np.exp(log_probs)
        grad[rows, labels] -= 1.0
        return (float(g.reshape(())) * grad / n,)

    return Tensor._from_op(loss, "softmax_ce", (logits,), vjp)


# Optimization


def sgd_step(params, lr, momentum=0.0, buffers=None):
    """
    Updates *params* in place with stochastic gradient descent and clears
    their gradients.

    :arg params: tensors with ``grad`` populated
    :arg lr: learning rate
    :arg momentum: momentum factor (``0`` disables the buffers)
    :arg buffers: momentum buffers aligned with *params*, updated in place
        (a list of ``None`` on the first step)
    """
    for index, param in enumerate(params):
        if param.grad is None:
            raise ValueError(f"Parameter {index} of shape {param.shape} has no gradient")
    if momentum and buffers is None:
        raise ValueError("Momentum requires a list of buffers")

    for index, param in enumerate(params):
        grad = param.grad
        if momentum:
            buf = buffers[index]
            buf = grad.copy() if buf is None else momentum * buf + grad
            buffers[index] = buf
            grad = buf
        param.data -= lr * grad
        param.grad = None


def clip_grad_norm(params, max_norm):
    """
    Rescales the gradients of *params* in place so that their global
    Euclidean norm does not exceed *max_norm*.

    :return: norm before clipping
    """
    if max_norm <= 0:
        raise ValueError(f"Maximum norm must be > 0, got {max_norm}")
    grads = [param.grad for param in params if param.grad is not None]
    norm = float(np.sqrt(sum(float(np.sum(grad * grad)) for grad in grads)))
    if norm > max_norm:
        scale = max_norm / norm
        for param in params:
            if param.grad is not None:
                param.grad = param.grad * scale
    return norm


class SGD:
    """
    Stochastic gradient descent with momentum over a fixed list of tensors.
    With *clip_norm*, the global gradient norm is clipped before each step.
    """

    def __init__(self, params, lr, momentum=0.0, clip_norm=None):
        if lr < 0:
            raise ValueError(f"Learning rate must be >= 0, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.buffers = [None] * len(self.params)

    def step(self):
        if self.clip_norm is not None:
            clip_grad_norm(self.params, self.clip_norm)
        sgd_step(self.params, self.lr, self.momentum, self.buffers)

    def zero_grad(self):
        for param in self.params:
            param.grad = None
