"""Reverse-mode automatic differentiation over dense numpy arrays.

Tensors wrap numpy arrays and record the op graph during the forward pass.
``backward`` walks the graph once in reverse topological order, accumulating
gradients additively; the graph is discarded afterwards. ``stop_grad`` is a
first-class op: identity in the forward pass, zero in the backward pass.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "add", "sub", "mul", "div", "matmul", "exp", "log", "sqrt", "power",
    "sigmoid", "relu", "gelu", "tanh", "softplus", "softmax", "layer_norm",
    "tsum", "tmean", "concat", "reshape", "transpose", "patches",
    "stop_grad", "tmax", "tmin", "conv2d", "linear", "backward",
    "Adam", "grad_check",
]


class Tensor:
    """A dense real array with optional gradient tracking.

    ``data`` is a numpy array (dtype decides the working precision),
    ``grad`` is populated by :func:`backward` for every reachable tensor
    with ``requires_grad=True``. Tensors are immutable after creation
    except for grad accumulation.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._grad_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return stop_grad(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # operator sugar -----------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, key):
        return _index(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, grad_fn):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    return out


def _unbroadcast(grad, shape):
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


# primitive ops ----------------------------------------------------------

def add(a, b):
    a, b = _as_tensor(a, like=b if isinstance(b, Tensor) else None), _as_tensor(b, like=a if isinstance(a, Tensor) else None)
    _check_broadcast(a.data, b.data, "add")
    out = a.data + b.data

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), grad_fn)


def sub(a, b):
    a, b = _as_tensor(a, like=b if isinstance(b, Tensor) else None), _as_tensor(b, like=a if isinstance(a, Tensor) else None)
    _check_broadcast(a.data, b.data, "sub")
    out = a.data - b.data

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), grad_fn)


def mul(a, b):
    a, b = _as_tensor(a, like=b if isinstance(b, Tensor) else None), _as_tensor(b, like=a if isinstance(a, Tensor) else None)
    _check_broadcast(a.data, b.data, "mul")
    out = a.data * b.data

    def grad_fn(g):
        return (_unbroadcast(g * b.data, a.shape),
                _unbroadcast(g * a.data, b.shape))

    return _make(out, (a, b), grad_fn)


def div(a, b):
    a, b = _as_tensor(a, like=b if isinstance(b, Tensor) else None), _as_tensor(b, like=a if isinstance(a, Tensor) else None)
    _check_broadcast(a.data, b.data, "div")
    out = a.data / b.data

    def grad_fn(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(out, (a, b), grad_fn)


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError(f"matmul: operands must be >=2-D, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def grad_fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), grad_fn)


def exp(x):
    x = _as_tensor(x)
    out = np.exp(x.data)

    def grad_fn(g):
        return (g * out,)

    return _make(out, (x,), grad_fn)


def log(x):
    x = _as_tensor(x)
    if np.any(x.data <= 0):
        raise ValueError("log: input must be strictly positive")
    out = np.log(x.data)

    def grad_fn(g):
        return (g / x.data,)

    return _make(out, (x,), grad_fn)


def sqrt(x):
    x = _as_tensor(x)
    if np.any(x.data < 0):
        raise ValueError("sqrt: input must be nonnegative")
    out = np.sqrt(x.data)

    def grad_fn(g):
        return (g * (0.5 / out),)

    return _make(out, (x,), grad_fn)


def power(x, p):
    x = _as_tensor(x)
    p = float(p)
    if p != int(p) and np.any(x.data < 0):
        raise ValueError("power: negative base with non-integer exponent")
    out = x.data ** p

    def grad_fn(g):
        return (g * p * x.data ** (p - 1.0),)

    return _make(out, (x,), grad_fn)


def sigmoid(x):
    x = _as_tensor(x)
    d = x.data
    out = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                   np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))

    def grad_fn(g):
        return (g * out * (1.0 - out),)

    return _make(out, (x,), grad_fn)


def relu(x):
    x = _as_tensor(x)
    out = np.maximum(x.data, 0.0)

    def grad_fn(g):
        return (g * (x.data > 0),)

    return _make(out, (x,), grad_fn)


def tanh(x):
    x = _as_tensor(x)
    out = np.tanh(x.data)

    def grad_fn(g):
        return (g * (1.0 - out * out),)

    return _make(out, (x,), grad_fn)


_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu(x):
    """Gaussian error linear unit, tanh approximation."""
    x = _as_tensor(x)
    d = x.data
    inner = _GELU_C * (d + 0.044715 * d ** 3)
    t = np.tanh(inner)
    out = 0.5 * d * (1.0 + t)

    def grad_fn(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * d * d)
        return (g * (0.5 * (1.0 + t) + 0.5 * d * (1.0 - t * t) * dinner),)

    return _make(out, (x,), grad_fn)


def softplus(x):
    """log(1 + exp(x)), computed without overflow."""
    x = _as_tensor(x)
    d = x.data
    out = np.maximum(d, 0.0) + np.log1p(np.exp(-np.abs(d)))

    def grad_fn(g):
        s = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                     np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
        return (g * s,)

    return _make(out, (x,), grad_fn)


def softmax(x):
    """Softmax over the last axis."""
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        gy = g * out
        return (gy - out * gy.sum(axis=-1, keepdims=True),)

    return _make(out, (x,), grad_fn)


def layer_norm(x, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance (no affine)."""
    x = _as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = xc * inv

    def grad_fn(g):
        n = x.shape[-1]
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * out).mean(axis=-1, keepdims=True)
        return ((g - gm - out * gy) * inv,)

    return _make(out, (x,), grad_fn)


def tsum(x, axis=None, keepdims=False):
    x = _as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        g = np.asarray(g)
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        axes = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), grad_fn)


def tmean(x, axis=None, keepdims=False):
    x = _as_tensor(x)
    if axis is None:
        n = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= x.shape[ax]
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _make(out, tuple(tensors), grad_fn)


def reshape(x, shape):
    x = _as_tensor(x)
    out = x.data.reshape(shape)

    def grad_fn(g):
        return (g.reshape(x.shape),)

    return _make(out, (x,), grad_fn)


def transpose(x, axes=None):
    x = _as_tensor(x)
    out = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)

    def grad_fn(g):
        return (np.transpose(g, inv),)

    return _make(out, (x,), grad_fn)


def _index(x, key):
    x = _as_tensor(x)
    out = x.data[key]
    advanced = isinstance(key, (np.ndarray, list)) or (
        isinstance(key, tuple) and any(isinstance(k, (np.ndarray, list)) for k in key))

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        if advanced:
            np.add.at(gx, key, g)
        else:
            gx[key] += g
        return (gx,)

    return _make(out, (x,), grad_fn)


def patches(x, kernel, stride=1, padding=0):
    """Extract sliding conv patches: (B,C,H,W) -> (B, OH*OW, C*kh*kw)."""
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ValueError(f"patches: expected 4-D input, got shape {x.shape}")
    kh, kw = kernel
    s, p = stride, padding
    xd = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    b, c, hp, wp = xd.shape
    oh = (hp - kh) // s + 1
    ow = (wp - kw) // s + 1
    win = np.lib.stride_tricks.sliding_window_view(xd, (kh, kw), axis=(2, 3))
    win = win[:, :, ::s, ::s]  # (B,C,OH,OW,kh,kw)
    out = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b, oh * ow, c * kh * kw)

    def grad_fn(g):
        g6 = g.reshape(b, oh, ow, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
        gxp = np.zeros((b, c, hp, wp), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + s * oh:s, j:j + s * ow:s] += g6[:, :, :, :, i, j]
        if p:
            gxp = gxp[:, :, p:-p, p:-p]
        return (gxp,)

    return _make(out, (x,), grad_fn)


def stop_grad(x):
    """Identity forward, zero backward; output never requires grad."""
    x = _as_tensor(x)
    return Tensor(x.data)


# composites -------------------------------------------------------------

def tmax(a, b):
    """Elementwise maximum built from relu (subgradient to ``a`` at ties)."""
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    return add(a, relu(sub(b, a)))


def tmin(a, b):
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    return sub(a, relu(sub(a, b)))


def linear(x, w, bias=None):
    """x @ w (+ bias), with w shaped (in_features, out_features)."""
    out = matmul(x, w)
    if bias is not None:
        out = add(out, bias)
    return out


def conv2d(x, w, bias=None, stride=1, padding=0):
    """2-D convolution via im2col. w: (C_out, C_in, kh, kw)."""
    x = _as_tensor(x)
    co, ci, kh, kw = w.shape
    if x.shape[1] != ci:
        raise ValueError(f"conv2d: input has {x.shape[1]} channels, kernel expects {ci}")
    b, _, h, wd = x.shape
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    cols = patches(x, (kh, kw), stride=stride, padding=padding)  # (B, OH*OW, ci*kh*kw)
    wm = reshape(w, (co, ci * kh * kw)).transpose()
    out = matmul(cols, wm)  # (B, OH*OW, co)
    if bias is not None:
        out = add(out, bias)
    return transpose(reshape(out, (b, oh, ow, co)), (0, 3, 1, 2))


# backward ---------------------------------------------------------------

def _toposort(root):
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss):
    """Populate ``grad`` on every reachable tensor with requires_grad=True.

    The op graph is released afterwards; a second backward through the same
    graph is not supported.
    """
    if loss.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _toposort(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._grad_fn is None or node.grad is None:
            continue
        parent_grads = node._grad_fn(node.grad)
        for p, g in zip(node._parents, parent_grads):
            if not p.requires_grad:
                continue
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
            p.grad += g
    for node in order:
        node._parents = ()
        node._grad_fn = None


# optimizer --------------------------------------------------------------

class Adam:
    """Adam with decoupled weight decay over a named parameter dict."""

    def __init__(self, params, lr=2e-4, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=1e-4):
        if not isinstance(params, dict):
            params = {str(i): p for i, p in enumerate(params)}
        self.params = params
        self.lr = float(lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self._m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        """Apply one Adam update using the accumulated grads, then zero them."""
        for name, p in self.params.items():
            if p.grad is None:
                raise ValueError(f"adam_step: parameter '{name}' has no gradient")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            g = p.grad
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data -= self.lr * update.astype(p.data.dtype, copy=False)
            p.grad = None

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_arrays(self):
        """Moment arrays and counters as named float arrays (checkpointing)."""
        out = {}
        for k in self.params:
            out[f"adam.m.{k}"] = self._m[k]
            out[f"adam.v.{k}"] = self._v[k]
        out["adam.step"] = np.array([self.step_count], dtype=np.float64)
        return out

    def load_state_arrays(self, arrays):
        for k in self.params:
            self._m[k] = np.array(arrays[f"adam.m.{k}"], dtype=self._m[k].dtype)
            self._v[k] = np.array(arrays[f"adam.v.{k}"], dtype=self._v[k].dtype)
        self.step_count = int(round(float(arrays["adam.step"][0])))


# gradient checking ------------------------------------------------------

def grad_check(f, x, h=1e-5):
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a Tensor to a scalar Tensor. Error per coordinate is
    |analytic - numeric| / max(1, |analytic|).
    """
    if h <= 0:
        raise ValueError("grad_check: h must be positive")
    base = np.array(x.data, dtype=np.float64)
    xt = Tensor(base.copy(), requires_grad=True)
    out = f(xt)
    backward(out)
    analytic = xt.grad if xt.grad is not None else np.zeros_like(base)

    flat = base.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = float(f(Tensor(base.copy())).data)
        flat[i] = orig - h
        lo = float(f(Tensor(base.copy())).data)
        flat[i] = orig
        numeric[i] = (hi - lo) / (2.0 * h)
    numeric = numeric.reshape(base.shape)
    denom = np.maximum(1.0, np.abs(analytic))
    return float(np.max(np.abs(analytic - numeric) / denom))
