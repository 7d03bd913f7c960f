"""Dense kernels with paired backward functions, and the parameter registry."""
from collections import OrderedDict

import numpy as np


class ParamStore:
    """Ordered registry of named parameter arrays with matching gradient buffers.

    Iteration order is registration order; checkpoints rely on it.
    """

    def __init__(self):
        self._values = OrderedDict()
        self._grads = OrderedDict()

    def register(self, name, value):
        if name in self._values:
            raise KeyError(f"parameter slot {name!r} already registered")
        value = np.ascontiguousarray(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise ValueError(f"parameter slot {name!r} has non-finite entries")
        self._values[name] = value
        self._grads[name] = np.zeros_like(value)
        return value

    def __getitem__(self, name):
        return self._values[name]

    def __contains__(self, name):
        return name in self._values

    def __len__(self):
        return len(self._values)

    def __iter__(self):
        return iter(self._values)

    def names(self):
        return list(self._values)

    def items(self):
        return self._values.items()

    def grad(self, name):
        return self._grads[name]

    def shape(self, name):
        return self._values[name].shape

    def zero_grad(self):
        for g in self._grads.values():
            g.fill(0.0)

    def accumulate(self, name, g):
        buf = self._grads[name]
        if buf.shape != np.shape(g):
            raise ValueError(f"gradient for {name!r} has shape {np.shape(g)}, expected {buf.shape}")
        buf += g

    def num_parameters(self):
        return sum(v.size for v in self._values.values())

    def copy(self):
        out = ParamStore()
        for name, value in self._values.items():
            out.register(name, value.copy())
        return out

    def shadow(self):
        """Store sharing these value arrays but owning fresh gradient buffers."""
        out = ParamStore()
        for name, value in self._values.items():
            out._values[name] = value
            out._grads[name] = np.zeros_like(value)
        return out

    def load_from(self, other):
        """Copy values slot by slot, in place, from another store with identical layout."""
        if other.names() != self.names():
            raise ValueError("parameter layouts differ")
        for name in self._values:
            if other[name].shape != self._values[name].shape:
                raise ValueError(f"shape mismatch in slot {name!r}")
            self._values[name][...] = other[name]


def _check_matmul(a, b):
    if a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")


def matmul(a, b):
    """``a @ b`` for ``a`` of shape (..., m) and a 2-D ``b`` of shape (m, n)."""
    _check_matmul(a, b)
    return a @ b


def matmul_backward(dout, a, b):
    """Gradients of ``a @ b``; leading batch axes of ``a`` are summed for ``db``."""
    da = dout @ b.T
    db = a.reshape(-1, a.shape[-1]).T @ dout.reshape(-1, dout.shape[-1])
    return da, db


def tmatmul(a, b):
    """``a.T @ b`` for 2-D arrays."""
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"transpose-matmul shape mismatch: {a.shape}^T @ {b.shape}")
    return a.T @ b


def tmatmul_backward(dout, a, b):
    return b @ dout.T, a @ dout


def row_softmax(x):
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def row_softmax_backward(dout, y):
    return y * (dout - (dout * y).sum(axis=-1, keepdims=True))


def logsumexp(x):
    m = x.max(axis=-1, keepdims=True)
    return (m + np.log(np.exp(x - m).sum(axis=-1, keepdims=True)))[..., 0]


def l1_norm(x):
    """Row-wise l1 norm (over the last axis)."""
    return np.abs(x).sum(axis=-1)


def l1_norm_backward(dout, x):
    # subgradient 0 at the kink
    return dout[..., None] * np.sign(x)


def l2_norm(x):
    """Row-wise Euclidean norm (over the last axis)."""
    return np.sqrt((x * x).sum(axis=-1))


def l2_norm_backward(dout, x, norm=None):
    if norm is None:
        norm = l2_norm(x)
    safe = np.where(norm > 0.0, norm, 1.0)
    scale = np.where(norm > 0.0, dout / safe, 0.0)
    return scale[..., None] * x


ACTIVATIONS = ("tanh", "softplus", "identity")


def activate(name, x):
    if name == "tanh":
        return np.tanh(x)
    if name == "softplus":
        return np.logaddexp(0.0, x)
    if name == "identity":
        return x
    raise ValueError(f"unknown activation {name!r}")


def activate_backward(name, dout, x, y):
    """Backward of ``y = activate(name, x)``."""
    if name == "tanh":
        return dout * (1.0 - y * y)
    if name == "softplus":
        return dout / (1.0 + np.exp(-x))
    if name == "identity":
        return dout
    raise ValueError(f"unknown activation {name!r}")


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return np.exp(-np.logaddexp(0.0, -x))


def glorot_uniform(rng, fan_in, fan_out, shape=None):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))
