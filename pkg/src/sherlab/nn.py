"""Small fully-connected networks in plain numpy.

Forward/backward passes, batch normalization, Adam with global-norm
clipping, and input-layer expansion used when a curriculum stage adds
new input dimensions.

Parameters are treated as values: every update returns a new
:class:`MLPParams` and never mutates the arrays of the old one.

Binary snapshot layout (little-endian)::

    magic      4 bytes   b"SMLP"
    version    uint32    currently 1
    n_layers   uint32
    seed       int64
    per layer header (n_layers times):
        in_dim     uint32
        out_dim    uint32
        activation uint8    0=relu 1=tanh 2=linear
        bn         uint8    0/1
        reserved   uint16
    per layer payload, float64, in layer order:
        W (out_dim x in_dim, row-major), b (out_dim)
        if bn: gamma, beta, running_mean, running_var (out_dim each), momentum (1)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

ACTIVATIONS = ("relu", "tanh", "linear")
BN_EPS = 1e-5
BN_MOMENTUM = 0.99


class ShapeError(ValueError):
    pass


class NetworkStateError(RuntimeError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: str = "relu"
    batch_norm: bool = False

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise ShapeError(f"layer dims must be >= 1, got {self.in_dim}->{self.out_dim}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass(frozen=True)
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM


@dataclass(frozen=True)
class Layer:
    W: np.ndarray
    b: np.ndarray
    activation: str
    bn: Optional[BatchNormState] = None

    @property
    def in_dim(self) -> int:
        return self.W.shape[1]

    @property
    def out_dim(self) -> int:
        return self.W.shape[0]


@dataclass(frozen=True)
class MLPParams:
    layers: tuple
    seed: int = 0

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def arrays(self) -> list:
        """Trainable arrays in canonical order: W, b[, gamma, beta] per layer."""
        out = []
        for layer in self.layers:
            out.extend([layer.W, layer.b])
            if layer.bn is not None:
                out.extend([layer.bn.gamma, layer.bn.beta])
        return out

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "MLPParams":
        """Rebuild with new trainable arrays (same order as :meth:`arrays`)."""
        it = iter(arrays)
        layers = []
        for layer in self.layers:
            W, b = next(it), next(it)
            bn = layer.bn
            if bn is not None:
                bn = replace(bn, gamma=next(it), beta=next(it))
            layers.append(replace(layer, W=W, b=b, bn=bn))
        return replace(self, layers=tuple(layers))

    def specs(self) -> list:
        return [LayerSpec(l.in_dim, l.out_dim, l.activation, l.bn is not None) for l in self.layers]


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: MLPParams, **kw) -> "AdamState":
        arrs = params.arrays()
        return cls([np.zeros_like(a) for a in arrs], [np.zeros_like(a) for a in arrs], **kw)


@dataclass
class ForwardCache:
    params_id: int
    mode: str
    inputs: list = field(default_factory=list)       # layer inputs
    xhat: list = field(default_factory=list)         # normalized pre-activations (bn only)
    inv_std: list = field(default_factory=list)
    batch_mean: list = field(default_factory=list)
    batch_var: list = field(default_factory=list)
    outputs: list = field(default_factory=list)      # post-activation outputs


def _init_weights(rng: np.random.Generator, out_dim: int, in_dim: int, fan_in=None) -> np.ndarray:
    bound = np.sqrt(1.0 / (in_dim if fan_in is None else fan_in))
    return rng.uniform(-bound, bound, size=(out_dim, in_dim))


def mlp_init(specs: Sequence[LayerSpec], seed: int) -> MLPParams:
    """Initialize weights uniformly in +-sqrt(1/fan_in); biases zero."""
    if not specs:
        raise ShapeError("need at least one layer")
    for a, b in zip(specs, specs[1:]):
        if a.out_dim != b.in_dim:
            raise ShapeError(f"dimension mismatch: {a.out_dim} -> {b.in_dim}")
    rng = np.random.default_rng(seed)
    layers = []
    for s in specs:
        W = _init_weights(rng, s.out_dim, s.in_dim)
        bn = None
        if s.batch_norm:
            bn = BatchNormState(
                gamma=np.ones(s.out_dim),
                beta=np.zeros(s.out_dim),
                running_mean=np.zeros(s.out_dim),
                running_var=np.ones(s.out_dim),
            )
        layers.append(Layer(W=W, b=np.zeros(s.out_dim), activation=s.activation, bn=bn))
    return MLPParams(layers=tuple(layers), seed=seed)


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    return z


def _activation_grad(y: np.ndarray, kind: str) -> np.ndarray:
    # derivative expressed through the post-activation output
    if kind == "relu":
        return (y > 0.0).astype(y.dtype)
    if kind == "tanh":
        return 1.0 - y * y
    return np.ones_like(y)


def mlp_forward(params: MLPParams, batch: np.ndarray, mode: str = "train"):
    """Run the network on a ``B x in_dim`` batch.

    Returns ``(output, cache)``. In ``train`` mode batch-norm layers use batch
    statistics (which are recorded in the cache, see :func:`apply_bn_stats`);
    in ``eval`` mode they use the running statistics.
    """
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        raise ShapeError(f"expected batch width {params.in_dim}, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite network input")
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    cache = ForwardCache(params_id=id(params), mode=mode)
    for layer in params.layers:
        cache.inputs.append(x)
        z = x @ layer.W.T + layer.b
        if layer.bn is not None:
            if mode == "train":
                if x.shape[0] < 2:
                    raise ShapeError("train-mode batch norm needs batch size >= 2")
                mu = z.mean(axis=0)
                var = z.var(axis=0)
            else:
                mu = layer.bn.running_mean
                var = layer.bn.running_var
            inv_std = 1.0 / np.sqrt(var + BN_EPS)
            xhat = (z - mu) * inv_std
            cache.xhat.append(xhat)
            cache.inv_std.append(inv_std)
            cache.batch_mean.append(mu)
            cache.batch_var.append(var)
            z = layer.bn.gamma * xhat + layer.bn.beta
        else:
            cache.xhat.append(None)
            cache.inv_std.append(None)
            cache.batch_mean.append(None)
            cache.batch_var.append(None)
        x = _activate(z, layer.activation)
        cache.outputs.append(x)
    return x, cache


def mlp_backward(params: MLPParams, cache: ForwardCache, grad_output: np.ndarray):
    """Backpropagate ``grad_output`` (dL/d output).

    Returns ``(grads, grad_input)`` where ``grads`` follows the order of
    :meth:`MLPParams.arrays`.
    """
    if cache.params_id != id(params) or len(cache.inputs) != len(params.layers):
        raise NetworkStateError("cache was not produced by a forward pass on these params")
    g = np.asarray(grad_output, dtype=np.float64)
    if g.shape != cache.outputs[-1].shape:
        raise ShapeError(f"grad_output shape {g.shape} != output shape {cache.outputs[-1].shape}")
    per_layer = []
    for i in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[i]
        g = g * _activation_grad(cache.outputs[i], layer.activation)
        bn_grads = ()
        if layer.bn is not None:
            xhat = cache.xhat[i]
            dgamma = np.sum(g * xhat, axis=0)
            dbeta = np.sum(g, axis=0)
            dxhat = g * layer.bn.gamma
            if cache.mode == "train":
                n = g.shape[0]
                g = (cache.inv_std[i] / n) * (
                    n * dxhat - dxhat.sum(axis=0) - xhat * np.sum(dxhat * xhat, axis=0)
                )
            else:
                # running statistics are constants, so batch norm is a fixed affine map
                g = dxhat * cache.inv_std[i]
            bn_grads = (dgamma, dbeta)
        x = cache.inputs[i]
        dW = g.T @ x
        db = g.sum(axis=0)
        per_layer.append((dW, db) + bn_grads)
        g = g @ layer.W
    grads = []
    for item in reversed(per_layer):
        grads.extend(item)
    return grads, g


def apply_bn_stats(params: MLPParams, cache: ForwardCache) -> MLPParams:
    """Fold the batch statistics of a train-mode forward into the running stats."""
    if cache.mode != "train":
        return params
    layers = []
    for layer, mu, var in zip(params.layers, cache.batch_mean, cache.batch_var):
        if layer.bn is None:
            layers.append(layer)
            continue
        m = layer.bn.momentum
        bn = replace(
            layer.bn,
            running_mean=m * layer.bn.running_mean + (1.0 - m) * mu,
            running_var=m * layer.bn.running_var + (1.0 - m) * var,
        )
        layers.append(replace(layer, bn=bn))
    return replace(params, layers=tuple(layers))


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def clip_by_global_norm(grads: Sequence[np.ndarray], clip_norm: float) -> list:
    norm = global_norm(grads)
    if norm <= clip_norm or norm == 0.0:
        return list(grads)
    scale = clip_norm / norm
    return [g * scale for g in grads]


def adam_step(params: MLPParams, grads: Sequence[np.ndarray], state: AdamState,
              lr: float = 1e-3, clip_norm: Optional[float] = 3.0):
    """One bias-corrected Adam update after global-norm clipping.

    Returns ``(new_params, new_state)``; the inputs are left untouched.
    """
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    arrays = params.arrays()
    if len(grads) != len(arrays) or any(g.shape != a.shape for g, a in zip(grads, arrays)):
        raise ShapeError("gradient shapes do not match parameters")
    if not all(np.all(np.isfinite(g)) for g in grads):
        raise FloatingPointError("non-finite gradient; update refused")
    if clip_norm is not None:
        grads = clip_by_global_norm(grads, clip_norm)
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_arrays, new_m, new_v = [], [], []
    for a, g, m, v in zip(arrays, grads, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        step = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_arrays.append(a - step)
        new_m.append(m)
        new_v.append(v)
    new_state = AdamState(new_m, new_v, t, b1, b2, state.eps)
    return params.with_arrays(new_arrays), new_state


def _new_column_positions(in_dim: int, added_dims: int, positions) -> np.ndarray:
    total = in_dim + added_dims
    if positions is None:
        return np.arange(in_dim, total)
    pos = np.asarray(sorted(positions), dtype=int)
    if len(pos) != added_dims or len(set(pos.tolist())) != added_dims:
        raise ValueError("positions must list added_dims distinct indices")
    if added_dims and (pos[0] < 0 or pos[-1] >= total):
        raise ValueError(f"positions must lie in [0, {total})")
    return pos


def _insert_columns(W: np.ndarray, new_cols: np.ndarray, pos: np.ndarray) -> np.ndarray:
    total = W.shape[1] + new_cols.shape[1]
    out = np.empty((W.shape[0], total))
    mask = np.ones(total, dtype=bool)
    mask[pos] = False
    out[:, mask] = W
    out[:, pos] = new_cols
    return out


def expand_input_layer(params: MLPParams, added_dims: int, alpha: float, seed: int,
                       positions: Optional[Sequence[int]] = None) -> MLPParams:
    """Add ``added_dims`` input columns to the first layer.

    New columns come from the regular initializer (fan-in of the widened
    layer) scaled by ``alpha``; ``alpha=0`` gives zero columns, so the
    network ignores the new inputs. ``positions`` are the indices of the
    new columns in the widened input (default: appended at the end).
    """
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    if added_dims < 0:
        raise ValueError("added_dims must be >= 0")
    if added_dims == 0:
        return params
    first = params.layers[0]
    pos = _new_column_positions(first.in_dim, added_dims, positions)
    rng = np.random.default_rng(seed)
    new_cols = _init_weights(rng, first.out_dim, added_dims, fan_in=first.in_dim + added_dims) * alpha
    W = _insert_columns(first.W, new_cols, pos)
    layers = (replace(first, W=W),) + tuple(params.layers[1:])
    return replace(params, layers=layers)


def expand_adam_state(state: AdamState, added_dims: int,
                      positions: Optional[Sequence[int]] = None) -> AdamState:
    """Widen the first-layer moment accumulators with zero columns."""
    if added_dims == 0:
        return state
    pos = _new_column_positions(state.m[0].shape[1], added_dims, positions)
    zeros = np.zeros((state.m[0].shape[0], added_dims))
    m = [_insert_columns(state.m[0], zeros, pos)] + list(state.m[1:])
    v = [_insert_columns(state.v[0], zeros, pos)] + list(state.v[1:])
    return AdamState(m, v, state.t, state.beta1, state.beta2, state.eps)


def drop_input_columns(params: MLPParams, positions: Sequence[int]) -> MLPParams:
    """Inverse of :func:`expand_input_layer`: remove first-layer input columns."""
    first = params.layers[0]
    keep = np.setdiff1d(np.arange(first.in_dim), np.asarray(positions, dtype=int))
    layers = (replace(first, W=first.W[:, keep]),) + tuple(params.layers[1:])
    return replace(params, layers=layers)


def polyak_blend(target: MLPParams, live: MLPParams, tau: float) -> MLPParams:
    """``tau * live + (1 - tau) * target`` over weights and batch-norm state."""
    layers = []
    for lt, ll in zip(target.layers, live.layers):
        W = tau * ll.W + (1.0 - tau) * lt.W
        b = tau * ll.b + (1.0 - tau) * lt.b
        bn = lt.bn
        if bn is not None:
            bn = replace(
                bn,
                gamma=tau * ll.bn.gamma + (1.0 - tau) * bn.gamma,
                beta=tau * ll.bn.beta + (1.0 - tau) * bn.beta,
                running_mean=tau * ll.bn.running_mean + (1.0 - tau) * bn.running_mean,
                running_var=tau * ll.bn.running_var + (1.0 - tau) * bn.running_var,
            )
        layers.append(replace(lt, W=W, b=b, bn=bn))
    return replace(target, layers=tuple(layers))


def copy_params(params: MLPParams) -> MLPParams:
    layers = []
    for l in params.layers:
        bn = l.bn
        if bn is not None:
            bn = replace(bn, gamma=bn.gamma.copy(), beta=bn.beta.copy(),
                         running_mean=bn.running_mean.copy(), running_var=bn.running_var.copy())
        layers.append(replace(l, W=l.W.copy(), b=l.b.copy(), bn=bn))
    return replace(params, layers=tuple(layers))


def params_equal(a: MLPParams, b: MLPParams) -> bool:
    """Bit-level equality, including batch-norm running statistics."""
    if len(a.layers) != len(b.layers):
        return False
    for la, lb in zip(a.layers, b.layers):
        if la.activation != lb.activation or (la.bn is None) != (lb.bn is None):
            return False
        pairs = [(la.W, lb.W), (la.b, lb.b)]
        if la.bn is not None:
            pairs += [(la.bn.gamma, lb.bn.gamma), (la.bn.beta, lb.bn.beta),
                      (la.bn.running_mean, lb.bn.running_mean),
                      (la.bn.running_var, lb.bn.running_var)]
            if la.bn.momentum != lb.bn.momentum:
                return False
        if any(x.shape != y.shape or x.tobytes() != y.tobytes() for x, y in pairs):
            return False
    return True


# -- serialization ----------------------------------------------------------

_MAGIC = b"SMLP"
_VERSION = 1
_HEAD = struct.Struct("<4sIIq")
_LAYER = struct.Struct("<IIBBH")


def params_to_bytes(params: MLPParams) -> bytes:
    parts = [_HEAD.pack(_MAGIC, _VERSION, len(params.layers), params.seed)]
    for l in params.layers:
        parts.append(_LAYER.pack(l.in_dim, l.out_dim, ACTIVATIONS.index(l.activation),
                                 int(l.bn is not None), 0))
    for l in params.layers:
        parts.append(np.ascontiguousarray(l.W, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(l.b, dtype="<f8").tobytes())
        if l.bn is not None:
            for a in (l.bn.gamma, l.bn.beta, l.bn.running_mean, l.bn.running_var):
                parts.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
            parts.append(struct.pack("<d", l.bn.momentum))
    return b"".join(parts)


def params_from_bytes(data: bytes, offset: int = 0):
    """Parse a snapshot; returns ``(params, end_offset)``."""
    magic, version, n_layers, seed = _HEAD.unpack_from(data, offset)
    if magic != _MAGIC:
        raise ValueError("not an MLP snapshot")
    if version != _VERSION:
        raise ValueError(f"unsupported snapshot version {version}")
    offset += _HEAD.size
    headers = []
    for _ in range(n_layers):
        headers.append(_LAYER.unpack_from(data, offset))
        offset += _LAYER.size

    def take(count):
        nonlocal offset
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset).astype(np.float64)
        offset += 8 * count
        return arr

    layers = []
    for in_dim, out_dim, act, has_bn, _ in headers:
        W = take(in_dim * out_dim).reshape(out_dim, in_dim)
        b = take(out_dim)
        bn = None
        if has_bn:
            gamma, beta, rm, rv = (take(out_dim) for _ in range(4))
            (momentum,) = struct.unpack_from("<d", data, offset)
            offset += 8
            bn = BatchNormState(gamma, beta, rm, rv, momentum)
        layers.append(Layer(W=W, b=b, activation=ACTIVATIONS[act], bn=bn))
    return MLPParams(layers=tuple(layers), seed=seed), offset


def drop_adam_columns(state: AdamState, positions: Sequence[int]) -> AdamState:
    keep = np.setdiff1d(np.arange(state.m[0].shape[1]), np.asarray(positions, dtype=int))
    m = [state.m[0][:, keep]] + list(state.m[1:])
    v = [state.v[0][:, keep]] + list(state.v[1:])
    return AdamState(m, v, state.t, state.beta1, state.beta2, state.eps)
