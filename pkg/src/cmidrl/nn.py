"""Small reverse-mode autodiff over dense numpy arrays.

All values are float64.  A :class:`Tensor` created by an op on tensors that
require gradients records its parents and a closure that pushes the output
gradient back to them; :meth:`Tensor.backward` walks that graph in reverse
topological order.
"""

from __future__ import annotations

import contextlib
import struct

import numpy as np

from .errors import ConfigurationError, UsageError

DTYPE = np.float64

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        """Same values, cut from the graph (a stop-gradient)."""
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self.data.size != 1:
            raise UsageError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise UsageError("backward() on a tensor that does not require grad")
        order = []
        seen = set()
        stack = [(self, False)]
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
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
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

    def __truediv__(self, other):
        return mul(self, 1.0 / other) if np.isscalar(other) else div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape),
                            _unbroadcast(-g * out / bd, bd.shape)))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def linear(x, weight, bias=None):
    """``x @ weight + bias`` as a single graph node."""
    xd, wd = x.data, weight.data
    out = xd @ wd
    if bias is None:
        return _make(out, (x, weight),
                     lambda g: (g @ wd.T if x.requires_grad else None, xd.T @ g))
    out += bias.data
    return _make(out, (x, weight, bias),
                 lambda g: (g @ wd.T if x.requires_grad else None, xd.T @ g, g.sum(axis=0)))


def tsum(a, axis=None, keepdims=False):
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), back)


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def relu(a):
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def tanh(a):
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a):
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a):
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def square(a):
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def softplus(a):
    ad = a.data
    out = np.logaddexp(0.0, ad)
    return _make(out, (a,), lambda g: (g * 0.5 * (1.0 + np.tanh(0.5 * ad)),))


def clip(a, lo, hi):
    """Clamp values; gradient is passed only where the input is inside [lo, hi]."""
    ad = a.data
    mask = (ad >= lo) & (ad <= hi)
    return _make(np.clip(ad, lo, hi), (a,), lambda g: (g * mask,))


def minimum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data <= b.data
    return _make(np.where(pick_a, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)))


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back)


def _is_basic_index(idx):
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(p is None or p is Ellipsis or isinstance(p, (int, np.integer, slice))
               for p in parts)


def getitem(a, idx):
    shape = a.shape
    basic = _is_basic_index(idx)

    def back(g):
        full = np.zeros(shape, dtype=DTYPE)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], (a,), back)


def tile_rows(a, reps):
    """Stack ``reps`` copies of a 2-D tensor vertically."""
    b, n = a.shape
    return _make(np.tile(a.data, (reps, 1)), (a,),
                 lambda g: (g.reshape(reps, b, n).sum(axis=0),))


def reshape(a, shape):
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def layer_norm(x, eps=1e-8):
    """Normalise each row to zero mean, unit variance (no affine terms)."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def back(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _make(xhat, (x,), back)


_ACTIVATIONS = {"relu": relu, "tanh": tanh, "sigmoid": sigmoid, "linear": None}


class Mlp:
    """Stack of dense layers.

    ``activations`` names the nonlinearity after each layer (``"linear"`` for
    none).  With ``output_norm=True`` the last linear layer is followed by
    layer normalisation with a learned gain/bias and a tanh, so every output
    lies in (-1, 1).
    """

    def __init__(self, widths, activations=None, output_norm=False, rng=None,
                 final_scale=1.0, name="mlp"):
        widths = [int(w) for w in widths]
        if len(widths) < 2 or min(widths) < 1:
            raise ConfigurationError(f"bad layer widths {widths}")
        nlayers = len(widths) - 1
        if activations is None:
            activations = ["relu"] * (nlayers - 1) + ["linear"]
        if len(activations) != nlayers:
            raise ConfigurationError("need one activation tag per layer")
        for tag in activations:
            if tag not in _ACTIVATIONS:
                raise ConfigurationError(f"unknown activation {tag!r}")
        rng = np.random.default_rng() if rng is None else rng
        self.widths = widths
        self.activations = list(activations)
        self.output_norm = output_norm
        self.name = name
        self.weights, self.biases = [], []
        for i in range(nlayers):
            bound = 1.0 / np.sqrt(widths[i])
            w = rng.uniform(-bound, bound, size=(widths[i], widths[i + 1]))
            b = rng.uniform(-bound, bound, size=widths[i + 1])
            if i == nlayers - 1:
                w *= final_scale
                b *= final_scale
            self.weights.append(Tensor(w, requires_grad=True))
            self.biases.append(Tensor(b, requires_grad=True))
        if output_norm:
            self.ln_gain = Tensor(np.ones(widths[-1]), requires_grad=True)
            self.ln_bias = Tensor(np.zeros(widths[-1]), requires_grad=True)
        self._name_params()

    @property
    def in_dim(self):
        return self.widths[0]

    @property
    def out_dim(self):
        return self.widths[-1]

    def parameters(self):
        params = []
        for w, b in zip(self.weights, self.biases):
            params += [w, b]
        if self.output_norm:
            params += [self.ln_gain, self.ln_bias]
        return params

    def __call__(self, x):
        return forward(self, x)

    def copy(self, name=None):
        """Independent deep copy (same values, fresh parameter tensors)."""
        clone = object.__new__(Mlp)
        clone.widths = list(self.widths)
        clone.activations = list(self.activations)
        clone.output_norm = self.output_norm
        clone.name = name or self.name
        clone.weights = [Tensor(w.data.copy(), True) for w in self.weights]
        clone.biases = [Tensor(b.data.copy(), True) for b in self.biases]
        if self.output_norm:
            clone.ln_gain = Tensor(self.ln_gain.data.copy(), True)
            clone.ln_bias = Tensor(self.ln_bias.data.copy(), True)
        clone._name_params()
        return clone

    def _name_params(self):
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            w.name, b.name = f"w{i}", f"b{i}"
        if self.output_norm:
            self.ln_gain.name, self.ln_bias.name = "ln_gain", "ln_bias"

    def state(self):
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_state(self, state):
        for p in self.parameters():
            if p.name not in state:
                raise ConfigurationError(f"{self.name}: missing parameter {p.name}")
            arr = np.asarray(state[p.name], dtype=DTYPE)
            if arr.shape != p.shape:
                raise ConfigurationError(
                    f"{self.name}.{p.name}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()


def forward(net, x, frozen=False):
    """Run ``x`` (batch x in_dim, or a single vector) through ``net``.

    With ``frozen=True`` the parameters are used as constants: gradients
    still flow to ``x`` but never to the network.
    """
    x = as_tensor(x)
    if x.shape[-1] != net.in_dim:
        raise ConfigurationError(
            f"{net.name}: input width {x.shape[-1]} != expected {net.in_dim}")
    squeeze = x.data.ndim == 1
    if squeeze:
        x = Tensor(x.data[None, :]) if not x.requires_grad else getitem(x, (None, slice(None)))
    h = x
    for w, b, tag in zip(net.weights, net.biases, net.activations):
        if frozen:
            w, b = w.detach(), b.detach()
        h = linear(h, w, b)
        act = _ACTIVATIONS[tag]
        if act is not None:
            h = act(h)
    if net.output_norm:
        gain, bias = net.ln_gain, net.ln_bias
        if frozen:
            gain, bias = gain.detach(), bias.detach()
        h = tanh(layer_norm(h) * gain + bias)
    if squeeze:
        h = h[0]
    return h


class Adam:
    """Bias-corrected Adam over a list of parameter tensors.

    :meth:`step` applies the update and clears the gradients.
    """

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.grad = None

    def state(self):
        return {"t": self.t, "m": [m.copy() for m in self.m], "v": [v.copy() for v in self.v]}


class ScaledMomentum:
    """Momentum steps preconditioned by another Adam's second moments.

    The first moment is private; each parameter's step is divided by the
    reference optimiser's bias-corrected RMS gradient.  A loss optimised this
    way moves parameters in proportion to its gradient size relative to the
    reference loss, so a constant factor on the loss is not normalised away
    as it would be by a separate Adam.
    """

    def __init__(self, params, reference, lr=1e-3, beta1=0.9):
        self.params = list(params)
        self.reference = reference
        self.lr = lr
        self.beta1 = beta1
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        index = {id(p): i for i, p in enumerate(reference.params)}
        missing = [p.name for p in self.params if id(p) not in index]
        if missing:
            raise ValueError(f"parameters not in the reference optimiser: {missing}")
        self._slots = [index[id(p)] for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        ref = self.reference
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - ref.beta2 ** max(ref.t, 1)
        for p, m, slot in zip(self.params, self.m, self._slots):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            scale = np.sqrt(ref.v[slot] / c2) + ref.eps
            p.data = p.data - self.lr * (m / c1) / scale
            p.grad = None


def adam_step(optimizer):
    optimizer.step()
    return optimizer.params


def soft_update(target, online, new_weight):
    """``target <- (1 - new_weight) * target + new_weight * online`` in place.

    ``target`` and ``online`` are Mlps or matching lists of tensors.
    """
    if not 0.0 <= new_weight <= 1.0:
        raise ConfigurationError(f"soft-update weight must be in [0, 1], got {new_weight}")
    tp = target.parameters() if hasattr(target, "parameters") else list(target)
    op = online.parameters() if hasattr(online, "parameters") else list(online)
    if len(tp) != len(op):
        raise ConfigurationError("target/online parameter counts differ")
    for t, o in zip(tp, op):
        if t.shape != o.shape:
            raise ConfigurationError(f"shape mismatch {t.shape} vs {o.shape}")
        t.data = (1.0 - new_weight) * t.data + new_weight * o.data
    return target


# Checkpoint file layout (little endian):
#   magic  b"CMIDCKPT"
#   uint32 version
#   uint32 tensor count
#   per tensor: uint16 name length, utf-8 name, uint8 ndim, ndim x uint32 dims,
#               prod(dims) x float64 values (row-major)
CKPT_MAGIC = b"CMIDCKPT"
CKPT_VERSION = 1


def save_checkpoint(path, arrays):
    """Write a ``{name: array}`` mapping in the versioned binary format."""
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<II", CKPT_VERSION, len(arrays)))
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype="<f8")
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path):
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:8] != CKPT_MAGIC:
        raise ConfigurationError(f"{path}: not a checkpoint file")
    version, count = struct.unpack_from("<II", buf, 8)
    if version != CKPT_VERSION:
        raise ConfigurationError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape).copy()
        pos += 8 * n
    return out
