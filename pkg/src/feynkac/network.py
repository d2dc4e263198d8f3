"""Stacks of batch-normalised feedforward subnetworks.

One subnetwork per interior time step; all of them share an architecture so
their parameters are stored stacked along a leading axis of length K and
evaluated with batched matmuls. Every trainable scalar lives in a single flat
buffer (:class:`FlatParamView`), which is what the optimizer sees.

Per hidden layer: affine -> batch norm -> activation. The output layer is a
plain affine map. Gradients are written by hand:

* :func:`input_gradient` sweeps ``d out / d x`` with batch-norm statistics held
  fixed (batch statistics in train mode, running statistics in eval mode);
* :func:`parameter_gradient` back-propagates caller-supplied output adjoints
  through every recorded forward call, including the batch-statistics
  coupling in train mode.
"""

from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor_core import ContractViolation, RngStream

BN_EPS = 1e-6
BN_MOMENTUM = 0.99
CHECKPOINT_VERSION = 1

TRAIN, EVAL = "train", "eval"


class NonFiniteLossError(FloatingPointError):
    def __init__(self, value, context=None):
        where = f" ({context})" if context else ""
        super().__init__(f"loss is not finite: {value}{where}")
        self.value = value
        self.context = context


class FlatParamView:
    """Named array views into one contiguous float64 buffer.

    ``layout`` is a sequence of ``(name, shape)``; the index map is stable
    (layout order, C order within each array).
    """

    def __init__(self, layout: Sequence[tuple[str, tuple]], buffer: np.ndarray | None = None):
        self.layout = [(name, tuple(int(s) for s in shape)) for name, shape in layout]
        self.index = {}
        offset = 0
        for name, shape in self.layout:
            size = int(np.prod(shape)) if shape else 1
            self.index[name] = (offset, size, shape)
            offset += size
        if buffer is None:
            buffer = np.zeros(offset)
        elif buffer.shape != (offset,):
            raise ContractViolation(f"buffer length {buffer.shape} does not match layout size {offset}")
        self.buffer = buffer
        self.arrays = {
            name: buffer[o : o + n].reshape(shape) for name, (o, n, shape) in self.index.items()
        }

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __contains__(self, name: str) -> bool:
        return name in self.arrays

    @property
    def size(self) -> int:
        return self.buffer.size

    def flatten(self) -> np.ndarray:
        return self.buffer.copy()

    def unflatten(self, vector: np.ndarray) -> "FlatParamView":
        return FlatParamView(self.layout, np.array(vector, dtype=float, copy=True))

    def zeros_like(self) -> "FlatParamView":
        return FlatParamView(self.layout)

    def slice_indices(self, k: int) -> np.ndarray:
        """Flat indices of every entry belonging to subnet ``k`` (leading axis)."""
        parts = []
        for name, (o, n, shape) in self.index.items():
            if name.startswith(("W", "b", "gamma", "beta")) and shape:
                per = n // shape[0]
                parts.append(np.arange(o + k * per, o + (k + 1) * per))
        return np.concatenate(parts)


@dataclass(frozen=True)
class Architecture:
    d: int
    out_dim: int
    hidden: tuple
    n_subnets: int
    activation: str = "relu"
    batch_norm: bool = True
    with_initial: bool = False

    @property
    def widths(self) -> tuple:
        return (self.d, *self.hidden, self.out_dim)


class SubnetStack:
    """K subnetworks with identical architecture plus optional deep-BSDE scalars.

    ``params`` holds the trainable scalars (weights, biases, BN scale/shift,
    and ``u0``/``grad_u0`` when ``arch.with_initial``); ``stats`` holds the BN
    running means and variances.
    """

    def __init__(self, arch: Architecture, params: FlatParamView | None = None, stats: FlatParamView | None = None):
        self.arch = arch
        self.params = params or FlatParamView(param_layout(arch))
        self.stats = stats or FlatParamView(stats_layout(arch))

    @property
    def n_subnets(self) -> int:
        return self.arch.n_subnets

    @property
    def n_layers(self) -> int:
        return len(self.arch.hidden) + 1

    def copy(self) -> "SubnetStack":
        return SubnetStack(self.arch, self.params.unflatten(self.params.buffer), self.stats.unflatten(self.stats.buffer))


def param_layout(arch: Architecture) -> list:
    K = arch.n_subnets
    widths = arch.widths
    layout = []
    for layer in range(len(widths) - 1):
        layout.append((f"W{layer}", (K, widths[layer], widths[layer + 1])))
        layout.append((f"b{layer}", (K, widths[layer + 1])))
        if arch.batch_norm and layer < len(widths) - 2:
            layout.append((f"gamma{layer}", (K, widths[layer + 1])))
            layout.append((f"beta{layer}", (K, widths[layer + 1])))
    if arch.with_initial:
        layout.append(("u0", (1,)))
        layout.append(("grad_u0", (arch.d,)))
    return layout


def stats_layout(arch: Architecture) -> list:
    if not arch.batch_norm:
        return []
    K = arch.n_subnets
    out = []
    for layer, width in enumerate(arch.hidden):
        out.append((f"mean{layer}", (K, width)))
        out.append((f"var{layer}", (K, width)))
    return out


def trainable_count(arch: Architecture) -> int:
    return sum(int(np.prod(shape)) for _, shape in param_layout(arch))


def init_stack(
    rng: RngStream,
    d: int,
    n_subnets: int,
    out_dim: int = 1,
    *,
    hidden: Sequence[int] | None = None,
    activation: str = "relu",
    batch_norm: bool = True,
    with_initial: bool = False,
    initial_range: tuple = (0.0, 1.0),
    grad_initial_range: tuple = (-0.1, 0.1),
) -> SubnetStack:
    """Weights ~ N(0, 1/fan_in), biases 0, BN scale 1 / shift 0, running stats (0, 1)."""
    if d < 1 or n_subnets < 1 or out_dim < 1:
        raise ContractViolation("d, n_subnets and out_dim must all be >= 1")
    if activation not in _ACTIVATIONS:
        raise ContractViolation(f"unknown activation {activation!r}")
    hidden = tuple(hidden) if hidden is not None else (d + 10, d + 10)
    arch = Architecture(d, out_dim, hidden, n_subnets, activation, batch_norm, with_initial)
    stack = SubnetStack(arch)
    P = stack.params
    for layer in range(stack.n_layers):
        W = P[f"W{layer}"]
        fan_in = W.shape[1]
        W[...] = rng.normals(W.size).reshape(W.shape) / np.sqrt(fan_in)
        if batch_norm and layer < stack.n_layers - 1:
            P[f"gamma{layer}"][...] = 1.0
    for layer in range(len(hidden)):
        if batch_norm:
            stack.stats[f"var{layer}"][...] = 1.0
    if with_initial:
        lo, hi = initial_range
        P["u0"][...] = lo + (hi - lo) * (1.0 - rng.uniforms(1))
        lo, hi = grad_initial_range
        P["grad_u0"][...] = lo + (hi - lo) * (1.0 - rng.uniforms(d))
    return stack


# --- activations -------------------------------------------------------------

def _relu(y):
    return np.maximum(y, 0.0)


def _relu_slope(y, h):
    return y > 0.0


def _tanh_slope(y, h):
    return 1.0 - h * h


_ACTIVATIONS = {
    "relu": (_relu, _relu_slope),
    "tanh": (np.tanh, _tanh_slope),
    "identity": (lambda y: y, lambda y, h: np.ones_like(y)),
}


# --- kernels -----------------------------------------------------------------

def _select(subnet):
    if subnet is None:
        return slice(None), False
    if isinstance(subnet, slice):
        return subnet, False
    k = int(subnet)
    return slice(k, k + 1), True


def _as_stacked(x: np.ndarray, single: bool, d: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if single:
        if x.ndim != 2 or x.shape[1] != d:
            raise ContractViolation(f"expected input of shape (B, {d}), got {x.shape}")
        return x[None]
    if x.ndim != 3 or x.shape[2] != d:
        raise ContractViolation(f"expected stacked input of shape (K, B, {d}), got {x.shape}")
    return x


def _forward(stack: SubnetStack, x: np.ndarray, mode: str, ks: slice, update_stats: bool):
    arch = stack.arch
    P, S = stack.params, stack.stats
    act, _ = _ACTIVATIONS[arch.activation]
    if mode not in (TRAIN, EVAL):
        raise ContractViolation(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == TRAIN and arch.batch_norm and x.shape[1] < 2:
        raise ContractViolation("batch too small for batch statistics")
    h = x
    layers = []
    for layer in range(len(arch.hidden)):
        a = np.matmul(h, P[f"W{layer}"][ks])
        a += P[f"b{layer}"][ks][:, None, :]
        if arch.batch_norm:
            if mode == TRAIN:
                mu = a.mean(axis=1)
                a -= mu[:, None, :]
                var = np.einsum("kbh,kbh->kh", a, a) / a.shape[1]
                if update_stats:
                    rm, rv = S[f"mean{layer}"], S[f"var{layer}"]
                    rm[ks] = BN_MOMENTUM * rm[ks] + (1.0 - BN_MOMENTUM) * mu
                    rv[ks] = BN_MOMENTUM * rv[ks] + (1.0 - BN_MOMENTUM) * var
            else:
                a -= S[f"mean{layer}"][ks][:, None, :]
                var = S[f"var{layer}"][ks]
            inv = 1.0 / np.sqrt(var + BN_EPS)
            a *= inv[:, None, :]
            xhat = a
            y = xhat * P[f"gamma{layer}"][ks][:, None, :]
            y += P[f"beta{layer}"][ks][:, None, :]
        else:
            inv = xhat = None
            y = a
        out = act(y)
        layers.append((h, xhat, inv, y, out))
        h = out
    last = len(arch.hidden)
    result = np.matmul(h, P[f"W{last}"][ks])
    result += P[f"b{last}"][ks][:, None, :]
    return result, _Cache(ks, mode, x, layers, h)


@dataclass
class _Cache:
    ks: slice
    mode: str
    x: np.ndarray
    layers: list
    top: np.ndarray


def _input_sweep(stack: SubnetStack, cache: _Cache) -> np.ndarray:
    arch = stack.arch
    P = stack.params
    _, slope = _ACTIVATIONS[arch.activation]
    ks = cache.ks
    last = len(arch.hidden)
    w_out = P[f"W{last}"][ks][:, :, 0]  # (k, h)
    g = np.broadcast_to(w_out[:, None, :], cache.top.shape)
    for layer in reversed(range(len(arch.hidden))):
        h_in, xhat, inv, y, out = cache.layers[layer]
        gy = g * slope(y, out)
        if arch.batch_norm:
            gy = gy * (P[f"gamma{layer}"][ks] * inv)[:, None, :]
        g = np.matmul(gy, np.swapaxes(P[f"W{layer}"][ks], 1, 2))
    return g


def _backward(stack: SubnetStack, cache: _Cache, g_out: np.ndarray, grads: FlatParamView) -> None:
    arch = stack.arch
    P = stack.params
    _, slope = _ACTIVATIONS[arch.activation]
    ks = cache.ks
    last = len(arch.hidden)
    grads[f"W{last}"][ks] += np.matmul(np.swapaxes(cache.top, 1, 2), g_out)
    grads[f"b{last}"][ks] += g_out.sum(axis=1)
    g = np.matmul(g_out, np.swapaxes(P[f"W{last}"][ks], 1, 2))
    for layer in reversed(range(len(arch.hidden))):
        h_in, xhat, inv, y, out = cache.layers[layer]
        gy = g * slope(y, out)
        if arch.batch_norm:
            gy_xhat = np.einsum("kbh,kbh->kh", gy, xhat)
            gy_sum = gy.sum(axis=1)
            grads[f"gamma{layer}"][ks] += gy_xhat
            grads[f"beta{layer}"][ks] += gy_sum
            scale = P[f"gamma{layer}"][ks] * inv
            if cache.mode == TRAIN:
                B = gy.shape[1]
                # inv * (gx - mean(gx) - xhat * mean(gx * xhat)) with gx = gamma * gy
                ga = gy - (gy_sum / B)[:, None, :]
                ga -= xhat * (gy_xhat / B)[:, None, :]
                ga *= scale[:, None, :]
            else:
                ga = gy * scale[:, None, :]
        else:
            ga = gy
        grads[f"W{layer}"][ks] += np.matmul(np.swapaxes(h_in, 1, 2), ga)
        grads[f"b{layer}"][ks] += ga.sum(axis=1)
        if layer > 0:
            g = np.matmul(ga, np.swapaxes(P[f"W{layer}"][ks], 1, 2))


# --- public services ---------------------------------------------------------

def forward(stack: SubnetStack, x: np.ndarray, mode: str = EVAL, subnet=None, update_stats: bool | None = None) -> np.ndarray:
    """Network outputs.

    ``subnet`` is an int (x of shape (B, d) -> (B, out)), a slice or None for
    all subnets (x of shape (k, B, d) -> (k, B, out)). Train mode updates the
    running statistics unless ``update_stats=False``.
    """
    ks, single = _select(subnet)
    xs = _as_stacked(x, single, stack.arch.d)
    if update_stats is None:
        update_stats = mode == TRAIN
    out, _ = _forward(stack, xs, mode, ks, update_stats)
    return out[0] if single else out


def value_and_input_gradient(stack: SubnetStack, x: np.ndarray, mode: str = EVAL, subnet=None):
    """``(u, grad_x u)``; never touches running statistics."""
    if stack.arch.out_dim != 1:
        raise ContractViolation(f"input_gradient needs out_dim == 1, stack has {stack.arch.out_dim}")
    ks, single = _select(subnet)
    xs = _as_stacked(x, single, stack.arch.d)
    out, cache = _forward(stack, xs, mode, ks, False)
    grad = _input_sweep(stack, cache)
    if single:
        return out[0, :, 0], grad[0]
    return out[..., 0], grad


def input_gradient(stack: SubnetStack, x: np.ndarray, mode: str = EVAL, subnet=None) -> np.ndarray:
    return value_and_input_gradient(stack, x, mode, subnet)[1]


class Recorder:
    """Records forward calls so their outputs can be differentiated later."""

    def __init__(self, stack: SubnetStack):
        self.stack = stack
        self.caches: list[_Cache] = []
        self.singles: list[bool] = []
        self.direct: dict[str, np.ndarray] = {}

    def forward(self, x, mode: str = TRAIN, subnet=None, update_stats: bool = False) -> np.ndarray:
        ks, single = _select(subnet)
        xs = _as_stacked(x, single, self.stack.arch.d)
        out, cache = _forward(self.stack, xs, mode, ks, update_stats)
        self.caches.append(cache)
        self.singles.append(single)
        return out[0] if single else out

    def param(self, name: str) -> np.ndarray:
        return self.stack.params[name]

    def accumulate(self, name: str, grad: np.ndarray) -> None:
        """Add a gradient for a parameter used directly by the loss (e.g. ``u0``)."""
        if name in self.direct:
            self.direct[name] = self.direct[name] + grad
        else:
            self.direct[name] = np.array(grad, dtype=float)


LossEvaluation = Callable[[Recorder], tuple]


def parameter_gradient(stack: SubnetStack, loss_evaluation: LossEvaluation, context=None):
    """Exact gradient of a scalar loss built from recorded forward calls.

    ``loss_evaluation(recorder)`` returns ``(loss, adjoints)`` where
    ``adjoints[i]`` is ``d loss / d output_i`` for the i-th recorded call
    (same shape as that output, or None). Anything the loss computed outside
    the recorder is a constant for differentiation. Returns ``(loss, grads)``.
    """
    rec = Recorder(stack)
    loss, adjoints = loss_evaluation(rec)
    loss = float(loss)
    if not np.isfinite(loss):
        raise NonFiniteLossError(loss, context)
    grads = stack.params.zeros_like()
    if len(adjoints) != len(rec.caches):
        raise ContractViolation(f"{len(adjoints)} adjoints for {len(rec.caches)} recorded calls")
    for cache, single, adj in zip(rec.caches, rec.singles, adjoints):
        if adj is None:
            continue
        adj = np.asarray(adj, dtype=float)
        if single:
            adj = adj[None]
        if adj.ndim == 2:
            adj = adj[..., None]
        _backward(stack, cache, adj, grads)
    for name, g in rec.direct.items():
        grads[name][...] += g
    return loss, grads


# --- checkpoints -------------------------------------------------------------

def stack_to_bytes(stack: SubnetStack, extra: dict | None = None, arrays: dict | None = None) -> bytes:
    """Serialise as ``.npz``.

    Members: ``meta`` (UTF-8 JSON: format, version, architecture, layouts,
    caller ``extra``), ``params`` and ``stats`` (flat float64 buffers in
    layout order) and any caller ``arrays`` stored as ``x_<name>``.
    """
    meta = {
        "format": "feynkac-subnet-stack",
        "version": CHECKPOINT_VERSION,
        "architecture": asdict(stack.arch),
        "param_layout": stack.params.layout,
        "stats_layout": stack.stats.layout,
        "extra": extra or {},
    }
    members = {
        "meta": np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
        "params": stack.params.buffer,
        "stats": stack.stats.buffer,
    }
    for name, value in (arrays or {}).items():
        members[f"x_{name}"] = np.asarray(value)
    buf = io.BytesIO()
    np.savez(buf, **members)
    return buf.getvalue()


def stack_from_bytes(raw: bytes) -> tuple[SubnetStack, dict, dict]:
    """Inverse of :func:`stack_to_bytes`: ``(stack, extra, arrays)``."""
    with np.load(io.BytesIO(raw)) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        if meta.get("format") != "feynkac-subnet-stack" or meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint: {meta.get('format')} v{meta.get('version')}")
        a = dict(meta["architecture"])
        a["hidden"] = tuple(a["hidden"])
        arch = Architecture(**a)
        params = FlatParamView(param_layout(arch), data["params"].astype(float).copy())
        stats = FlatParamView(stats_layout(arch), data["stats"].astype(float).copy())
        arrays = {k[2:]: data[k].copy() for k in data.files if k.startswith("x_")}
    return SubnetStack(arch, params, stats), meta["extra"], arrays


def save_stack(stack: SubnetStack, filename, extra: dict | None = None, arrays: dict | None = None) -> None:
    with open(filename, "wb") as fh:
        fh.write(stack_to_bytes(stack, extra, arrays))


def load_stack(filename) -> tuple[SubnetStack, dict, dict]:
    with open(filename, "rb") as fh:
        return stack_from_bytes(fh.read())
