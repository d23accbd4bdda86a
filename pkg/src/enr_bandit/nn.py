"""Dense-network substrate: parameter storage, MLPs, LayerNorm, losses and ADAM.

Everything runs in float64 on row-major batches: a forward pass accepts either
a single vector of shape ``(d,)`` or a batch of shape ``(n, d)``.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy.special import expit

__all__ = [
    "MlpSpec",
    "ParamSet",
    "Tape",
    "Adam",
    "glorot_init",
    "glorot_fill",
    "forward",
    "backward",
    "layer_norm",
    "layer_norm_backward",
    "loss",
    "bce_with_logits",
    "save_params",
    "load_params",
    "check_finite",
]

ACTIVATIONS = ("relu",)
OUTPUT_ACTIVATIONS = ("identity", "sigmoid")


def check_finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or Inf")


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_dims: tuple = ()
    output_dim: int = 1
    hidden_activation: str = "relu"
    output_activation: str = "identity"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        if any(int(d) <= 0 for d in dims):
            raise ValueError(f"all layer widths must be positive, got {dims}")
        if self.hidden_activation not in ACTIVATIONS:
            raise ValueError(f"unknown hidden activation {self.hidden_activation!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {self.output_activation!r}")

    @property
    def dims(self):
        return (self.input_dim, *self.hidden_dims, self.output_dim)

    @property
    def n_layers(self):
        return len(self.hidden_dims) + 1

    @property
    def representation_dim(self):
        """Width of the last hidden layer (the input width with no hidden layers)."""
        return self.dims[-2]

    def block_shapes(self, prefix=""):
        dims = self.dims
        shapes = []
        for i in range(self.n_layers):
            shapes.append((f"{prefix}W{i}", (dims[i], dims[i + 1])))
            shapes.append((f"{prefix}b{i}", (dims[i + 1],)))
        return shapes

    def n_params(self):
        return sum(int(np.prod(s)) for _, s in self.block_shapes())


class ParamSet:
    """Named parameter blocks backed by a single flat float64 buffer.

    ``params["W0"]`` returns a view, so writing through a block writes the flat
    buffer and vice versa. ``version`` is bumped by optimizer steps and lets a
    forward tape detect that the parameters moved underneath it.
    """

    def __init__(self, shapes, flat=None):
        self.shapes = [(str(n), tuple(int(d) for d in s)) for n, s in shapes]
        names = [n for n, _ in self.shapes]
        if len(set(names)) != len(names):
            raise ValueError("duplicate block names")
        self.offsets = {}
        off = 0
        for name, shape in self.shapes:
            size = int(np.prod(shape)) if shape else 1
            self.offsets[name] = (off, off + size, shape)
            off += size
        self.size = off
        if flat is None:
            flat = np.zeros(off)
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (off,):
            raise ValueError(f"flat buffer has shape {flat.shape}, expected ({off},)")
        self.flat = flat
        self.version = 0

    def __getitem__(self, name):
        start, stop, shape = self.offsets[name]
        return self.flat[start:stop].reshape(shape)

    def __setitem__(self, name, value):
        self[name][...] = value

    def __contains__(self, name):
        return name in self.offsets

    def __len__(self):
        return self.size

    @property
    def names(self):
        return [n for n, _ in self.shapes]

    def items(self):
        for name in self.names:
            yield name, self[name]

    def zeros_like(self):
        return ParamSet(self.shapes)

    def copy(self):
        out = ParamSet(self.shapes, self.flat.copy())
        out.version = self.version
        return out

    def merged(self, other):
        """New ParamSet holding the blocks of ``self`` followed by ``other``."""
        return ParamSet(self.shapes + other.shapes, np.concatenate([self.flat, other.flat]))

    def subset(self, names):
        """Copy of the named blocks, in the given order."""
        names = list(names)
        shapes = [(n, self.offsets[n][2]) for n in names]
        flat = np.concatenate([self[n].ravel() for n in names]) if names else np.zeros(0)
        return ParamSet(shapes, flat)

    def bump(self):
        self.version += 1


def glorot_fill(params, spec, rng, prefix=""):
    """Fill the blocks of ``spec`` inside ``params``: uniform weights, zero biases."""
    for i in range(spec.n_layers):
        fan_in, fan_out = spec.dims[i], spec.dims[i + 1]
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        params[f"{prefix}W{i}"] = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        params[f"{prefix}b{i}"] = 0.0
    return params


def glorot_init(spec, seed=None, prefix=""):
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    params = ParamSet(spec.block_shapes(prefix))
    return glorot_fill(params, spec, rng, prefix)


@dataclass
class Tape:
    """Activations recorded by :func:`forward`, consumed by :func:`backward`."""

    spec: MlpSpec
    params: ParamSet
    prefix: str
    version: int
    squeeze: bool
    inputs: list = field(default_factory=list)   # input to each layer
    pre: list = field(default_factory=list)      # pre-activation of each layer
    output: np.ndarray | None = None

    @property
    def representation(self):
        """Last hidden-layer activations (the raw input when there are no hidden layers)."""
        rep = self.inputs[-1]
        return rep[0] if self.squeeze else rep


def forward(spec, params, x, prefix=""):
    """Run the MLP on ``x`` and return ``(output, tape)``."""
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ValueError(f"input has shape {x.shape}, expected (*, {spec.input_dim})")
    tape = Tape(spec, params, prefix, params.version, squeeze)
    h = x
    last = spec.n_layers - 1
    for i in range(spec.n_layers):
        tape.inputs.append(h)
        a = h @ params[f"{prefix}W{i}"] + params[f"{prefix}b{i}"]
        tape.pre.append(a)
        if i < last:
            h = np.maximum(a, 0.0)
        elif spec.output_activation == "sigmoid":
            h = expit(a)
        else:
            h = a
    tape.output = h
    return (h[0] if squeeze else h), tape


def backward(tape, upstream, grads=None, input_grad=True):
    """Reverse pass for ``sum(output * upstream)``.

    Gradients are accumulated into ``grads`` (created when omitted) so that
    several sub-networks sharing one ParamSet layout can write into one buffer.
    Returns ``(grads, input_grad)``; the input gradient is ``None`` when
    ``input_grad=False``.
    """
    spec, params, prefix = tape.spec, tape.params, tape.prefix
    if tape.version != params.version:
        raise RuntimeError("stale tape: parameters changed since the forward pass")
    g = np.asarray(upstream, dtype=np.float64)
    if tape.squeeze:
        g = g.reshape(1, -1)
    if g.shape != tape.output.shape:
        raise ValueError(f"upstream gradient has shape {g.shape}, expected {tape.output.shape}")
    if grads is None:
        grads = params.zeros_like()
    last = spec.n_layers - 1
    if spec.output_activation == "sigmoid":
        out = tape.output
        g = g * out * (1.0 - out)
    for i in range(last, -1, -1):
        if i < last:
            g = g * (tape.pre[i] > 0.0)
        grads[f"{prefix}W{i}"] += tape.inputs[i].T @ g
        grads[f"{prefix}b{i}"] += g.sum(axis=0)
        if i == 0 and not input_grad:
            return grads, None
        g = g @ params[f"{prefix}W{i}"].T
    return grads, (g[0] if tape.squeeze else g)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize over the last axis and apply the affine map.

    Returns ``(out, cache)``; ``cache`` feeds :func:`layer_norm_backward`.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != np.shape(gain)[-1] or np.shape(gain) != np.shape(bias):
        raise ValueError("layer_norm gain/bias shape mismatch")
    if eps <= 0:
        raise ValueError("eps must be positive")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gain + bias, (xhat, inv)


def layer_norm_backward(cache, gain, upstream):
    """Returns ``(dx, dgain, dbias)``; parameter grads are summed over the batch."""
    xhat, inv = cache
    dy = np.asarray(upstream, dtype=np.float64)
    dxhat = dy * gain
    d = xhat.shape[-1]
    dx = inv * (dxhat - dxhat.sum(axis=-1, keepdims=True) / d
                - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True) / d)
    red = tuple(range(dy.ndim - 1))
    return dx, (dy * xhat).sum(axis=red), dy.sum(axis=red)


_P_CLAMP = 1e-7


def bce_with_logits(logit, target):
    """Binary cross-entropy on logits; returns ``(values, d/dlogit)``."""
    logit = np.asarray(logit, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    value = np.logaddexp(0.0, logit) - target * logit
    return value, expit(logit) - target


def loss(kind, prediction, target):
    """Per-sample loss and its derivative with respect to ``prediction``.

    ``bce`` takes a probability; it is clamped to [1e-7, 1 - 1e-7] and
    evaluated through the equivalent logit.
    """
    if kind == "mse":
        diff = prediction - target
        return diff * diff, 2.0 * diff
    if kind == "bce":
        if target not in (0, 1):
            raise ValueError(f"bce target must be 0 or 1, got {target!r}")
        if not 0.0 <= prediction <= 1.0:
            raise ValueError(f"bce prediction must be a probability, got {prediction!r}")
        p = min(max(float(prediction), _P_CLAMP), 1.0 - _P_CLAMP)
        logit = np.log(p) - np.log1p(-p)
        value, _ = bce_with_logits(logit, target)
        grad = (p - target) / (p * (1.0 - p))
        return float(value), float(grad)
    raise ValueError(f"unknown loss kind {kind!r}")


class Adam:
    """Bias-corrected ADAM over a whole ParamSet flat buffer."""

    def __init__(self, params, learning_rate=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(params.size)
        self.v = np.zeros(params.size)
        self.step_count = 0

    def step(self, params, grads):
        g = grads.flat if isinstance(grads, ParamSet) else np.asarray(grads)
        if g.shape != params.flat.shape or self.m.shape != g.shape:
            raise ValueError("gradient / parameter / moment shapes differ")
        self.step_count += 1
        _adam_kernel(params.flat, g, self.m, self.v, self.learning_rate, self.beta1, self.beta2,
                     self.eps, 1.0 - self.beta1 ** self.step_count,
                     1.0 - self.beta2 ** self.step_count)
        params.bump()
        return params


@numba.njit(cache=True)
def _adam_kernel(p, g, m, v, lr, b1, b2, eps, c1, c2):
    step = lr / c1
    inv_c2 = 1.0 / c2
    for i in range(p.shape[0]):
        gi = g[i]
        mi = b1 * m[i] + (1.0 - b1) * gi
        vi = b2 * v[i] + (1.0 - b2) * gi * gi
        m[i] = mi
        v[i] = vi
        p[i] -= step * mi / (np.sqrt(vi * inv_c2) + eps)


_MAGIC = "PARAMSET v1"


def save_params(params, file):
    """Write a text shape manifest followed by little-endian float64 values."""
    header = [_MAGIC, str(len(params.shapes))]
    for name, shape in params.shapes:
        header.append(" ".join([name, str(len(shape)), *map(str, shape)]))
    blob = ("\n".join(header) + "\n").encode("utf-8") + params.flat.astype("<f8").tobytes()
    if isinstance(file, (str, bytes)) or hasattr(file, "__fspath__"):
        with open(file, "wb") as fh:
            fh.write(blob)
    else:
        file.write(blob)


def load_params(file):
    if isinstance(file, (str, bytes)) or hasattr(file, "__fspath__"):
        with open(file, "rb") as fh:
            data = fh.read()
    else:
        data = file.read()
    buf = io.BytesIO(data)
    if buf.readline().decode().strip() != _MAGIC:
        raise ValueError("not a ParamSet file")
    n = int(buf.readline())
    shapes = []
    for _ in range(n):
        parts = buf.readline().decode().split()
        ndim = int(parts[1])
        shapes.append((parts[0], tuple(int(p) for p in parts[2:2 + ndim])))
    params = ParamSet(shapes)
    raw = buf.read()
    if len(raw) != 8 * params.size:
        raise ValueError(f"expected {params.size} values, found {len(raw) // 8}")
    params.flat[:] = np.frombuffer(raw, dtype="<f8")
    return params
