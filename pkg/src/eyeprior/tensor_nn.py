"""Dense numerical core: fixed-topology MLPs with explicit forward/backward
passes, a bias-corrected adaptive-moment optimizer with decoupled weight
decay, finite-difference gradient verification, and the binary checkpoint
block format shared by all learnable state.

Hidden layers are always ReLU; the output layer is configurable
("none", "softplus_shifted", "sigmoid").  All operations follow the dtype
of their inputs, so the same code runs in float32 for training and float64
for verification.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit as _sigmoid

from .errors import ConfigError, NonFiniteError, IoError, ShapeMismatchError
from .rng import stream

OUTPUT_ACTIVATIONS = ("none", "softplus_shifted", "sigmoid")


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return _sigmoid(x)


def _apply_output_activation(kind, z):
    if kind == "none":
        return z
    if kind == "softplus_shifted":
        return softplus(z - 1.0)
    if kind == "sigmoid":
        return sigmoid(z)
    raise ConfigError(f"unknown output activation {kind!r}")


def _output_activation_grad(kind, z, y):
    if kind == "none":
        return None  # identity
    if kind == "softplus_shifted":
        return sigmoid(z - 1.0)
    if kind == "sigmoid":
        return y * (1.0 - y)
    raise ConfigError(f"unknown output activation {kind!r}")


@dataclass
class MlpParams:
    """Weights of a fixed-topology MLP.

    layers: list of (W, b) with W shaped (out, in) and b shaped (out,).
    Hidden activations are ReLU; ``output_activation`` applies to the last
    layer's full output vector.
    """

    layers: list
    output_activation: str = "none"

    def __post_init__(self):
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ConfigError(f"unknown output activation {self.output_activation!r}")
        for k, (w, b) in enumerate(self.layers):
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise ShapeMismatchError(f"layer {k}: W {w.shape} and b {b.shape} do not chain")
            if k > 0 and w.shape[1] != self.layers[k - 1][0].shape[0]:
                raise ShapeMismatchError(
                    f"layer {k} expects input {w.shape[1]}, previous layer outputs "
                    f"{self.layers[k - 1][0].shape[0]}"
                )

    @property
    def in_dim(self):
        return self.layers[0][0].shape[1]

    @property
    def out_dim(self):
        return self.layers[-1][0].shape[0]

    def astype(self, dtype):
        return MlpParams(
            [(w.astype(dtype), b.astype(dtype)) for w, b in self.layers],
            self.output_activation,
        )


@dataclass
class MlpCache:
    """Activation record from a forward pass; consumed by mlp_backward."""

    params: MlpParams
    inputs: list  # per-layer post-activation inputs, inputs[0] is x
    z_out: np.ndarray  # pre-activation of the last layer
    y: np.ndarray
    squeeze: bool


@dataclass
class MlpGrads:
    """Gradients shaped identically to an MlpParams (one (dW, db) per layer)."""

    layers: list


def mlp_init(dims, output_activation="none", *, seed=0, dtype=np.float32, zero_last=False):
    """Uniform fan-in init; optionally zero the output layer so the net
    starts as a constant function (near-empty fields, stable color)."""
    rng = stream(seed, "mlp_init")
    layers = []
    for k in range(len(dims) - 1):
        fan_in = dims[k]
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(dims[k + 1], dims[k])).astype(dtype)
        b = rng.uniform(-bound, bound, size=(dims[k + 1],)).astype(dtype)
        if zero_last and k == len(dims) - 2:
            w[:] = 0.0
            b[:] = 0.0
        layers.append((w, b))
    return MlpParams(layers, output_activation)


def mlp_forward(params: MlpParams, x, need_cache=True):
    """Evaluate the MLP on x shaped (in,) or (N, in).

    Returns (y, cache); cache is None when need_cache is False.
    """
    x = np.asarray(x)
    squeeze = x.ndim == 1
    a = x[None, :] if squeeze else x
    if a.ndim != 2 or a.shape[1] != params.in_dim:
        raise ShapeMismatchError(
            f"mlp_forward: input shape {x.shape} incompatible with in_dim {params.in_dim}"
        )
    inputs = [a]
    n = len(params.layers)
    for k, (w, b) in enumerate(params.layers):
        z = a @ w.T + b
        if k < n - 1:
            a = np.maximum(z, 0.0)
            inputs.append(a)
        else:
            z_out = z
            a = _apply_output_activation(params.output_activation, z)
    y = a[0] if squeeze else a
    cache = MlpCache(params, inputs, z_out, a, squeeze) if need_cache else None
    return y, cache


def mlp_backward(params: MlpParams, cache: MlpCache, dy):
    """Gradients of <dy, y> w.r.t. the input and every parameter.

    Returns (dx, MlpGrads).  The cache must come from a forward pass of the
    same MlpParams object.
    """
    if cache is None or cache.params is not params:
        raise ConfigError("mlp_backward: cache does not match these parameters")
    dy = np.asarray(dy)
    if cache.squeeze:
        dy = dy[None, :]
    if dy.shape != cache.y.shape:
        raise ShapeMismatchError(
            f"mlp_backward: output grad {dy.shape} does not match output {cache.y.shape}"
        )
    act_grad = _output_activation_grad(params.output_activation, cache.z_out, cache.y)
    delta = dy if act_grad is None else dy * act_grad
    grads = [None] * len(params.layers)
    for k in range(len(params.layers) - 1, -1, -1):
        w, _ = params.layers[k]
        a_in = cache.inputs[k]
        dw = delta.T @ a_in
        db = delta.sum(axis=0)
        grads[k] = (dw, db)
        delta = delta @ w
        if k > 0:
            delta = delta * (cache.inputs[k] > 0)
    dx = delta[0] if cache.squeeze else delta
    return dx, MlpGrads(grads)


def mlp_blocks(params: MlpParams, prefix: str):
    """Flatten an MLP into the named-block dict used by the optimizer and
    the checkpoint format."""
    out = {}
    for k, (w, b) in enumerate(params.layers):
        out[f"{prefix}.w{k}"] = w
        out[f"{prefix}.b{k}"] = b
    return out


def mlp_grad_blocks(grads: MlpGrads, prefix: str):
    out = {}
    for k, (dw, db) in enumerate(grads.layers):
        out[f"{prefix}.w{k}"] = dw
        out[f"{prefix}.b{k}"] = db
    return out


# ---------------------------------------------------------------------------
# Optimizer


@dataclass
class AdamState:
    """Adaptive-moment state for a dict of named parameter blocks."""

    m: dict
    v: dict
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-15
    weight_decay: float = 0.0


def adam_init(params: dict, lr=1e-3, beta1=0.9, beta2=0.99, eps=1e-15, weight_decay=0.0):
    m = {k: np.zeros_like(p) for k, p in params.items()}
    v = {k: np.zeros_like(p) for k, p in params.items()}
    return AdamState(m, v, 0, lr, beta1, beta2, eps, weight_decay)


def adam_step(state: AdamState, params: dict, grads: dict, lr=None):
    """One bias-corrected update, in place.  Decoupled weight decay is
    applied when state.weight_decay > 0.  A non-finite gradient rejects the
    whole step and leaves params and state untouched.
    """
    if set(grads) != set(params):
        raise ShapeMismatchError(
            f"adam_step: grad keys {sorted(set(params) ^ set(grads))} do not match params"
        )
    for k in params:
        if grads[k].shape != params[k].shape:
            raise ShapeMismatchError(
                f"adam_step: block {k!r} grad shape {grads[k].shape} != param {params[k].shape}"
            )
    for k in sorted(params):
        if not np.all(np.isfinite(grads[k])):
            raise NonFiniteError(f"adam_step: non-finite gradient in block {k!r}")
    lr = state.lr if lr is None else float(lr)
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for k in sorted(params):
        p, g = params[k], grads[k]
        m, v = state.m[k], state.v[k]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay > 0.0:
            update = update + state.weight_decay * p
        p -= lr * update
    return params, state


def clip_global_norm(grads: dict, max_norm: float):
    """Scale all blocks so the global L2 norm is at most max_norm.
    Returns the pre-clip norm."""
    total = 0.0
    for k in sorted(grads):
        total += float(np.sum(np.square(grads[k].astype(np.float64))))
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for k in grads:
            grads[k] *= scale
    return norm


# ---------------------------------------------------------------------------
# Gradient verification


def grad_check(fn, params: dict, h: float, samples_per_block=None, seed=0, floor=1e-8):
    """Max relative error between fn's analytic gradients and central
    finite differences.

    fn(params) must return (scalar_loss, grads_dict).  Finite differences
    are evaluated with parameters promoted to float64 (the perturbation
    response would otherwise drown in single-precision rounding), while the
    analytic gradients come from fn at the native dtype.  Relative error is
    |a - cd| / max(|a|, |cd|, floor).  When samples_per_block is given only
    that many coordinates per block are probed (seeded choice); otherwise
    every coordinate is checked.
    """
    if h <= 0:
        raise ConfigError("grad_check: h must be positive")
    _, analytic = fn(params)
    p64 = {k: v.astype(np.float64) for k, v in params.items()}
    rng = stream(seed, "grad_check")
    worst = 0.0
    for k in sorted(params):
        n = params[k].size
        if samples_per_block is None or samples_per_block >= n:
            idx = np.arange(n)
        else:
            idx = rng.choice(n, size=samples_per_block, replace=False)
        flat = p64[k].reshape(-1)
        a_flat = np.asarray(analytic[k], dtype=np.float64).reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            f_plus = fn(p64)[0]
            flat[i] = orig - h
            f_minus = fn(p64)[0]
            flat[i] = orig
            cd = (f_plus - f_minus) / (2.0 * h)
            a = a_flat[i]
            rel = abs(a - cd) / max(abs(a), abs(cd), floor)
            if rel > worst:
                worst = rel
    return float(worst)


# ---------------------------------------------------------------------------
# Checkpoint block format

_MAGIC = b"EPCK"
_VERSION = 1


def save_blocks(path, blocks: dict, header: dict | None = None):
    """Versioned little-endian binary: magic, version, a JSON hyperparameter
    header, block count, then per block (name, shape, raw float32 row-major).
    Writes are atomic (temp file + rename)."""
    import json
    import os

    header_bytes = json.dumps(header or {}, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<I", _VERSION))
    buf.write(struct.pack("<I", len(header_bytes)))
    buf.write(header_bytes)
    buf.write(struct.pack("<I", len(blocks)))
    for name in sorted(blocks):
        arr = np.ascontiguousarray(blocks[name], dtype=np.float32)
        name_b = name.encode("utf-8")
        buf.write(struct.pack("<H", len(name_b)))
        buf.write(name_b)
        buf.write(struct.pack("<B", arr.ndim))
        for d in arr.shape:
            buf.write(struct.pack("<Q", d))
        buf.write(arr.tobytes(order="C"))
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(buf.getvalue())
    os.replace(tmp, path)


def load_blocks(path):
    """Inverse of save_blocks; returns (blocks, header)."""
    import json

    with open(path, "rb") as f:
        data = f.read()
    view = memoryview(data)
    if bytes(view[:4]) != _MAGIC:
        raise IoError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", view, 4)
    if version != _VERSION:
        raise IoError(f"{path}: unsupported checkpoint version {version}")
    (hlen,) = struct.unpack_from("<I", view, 8)
    off = 12
    header = json.loads(bytes(view[off : off + hlen]).decode("utf-8")) if hlen else {}
    off += hlen
    (count,) = struct.unpack_from("<I", view, off)
    off += 4
    blocks = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", view, off)
        off += 2
        name = bytes(view[off : off + nlen]).decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<B", view, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}Q", view, off)
        off += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(view, dtype="<f4", count=size, offset=off).reshape(shape)
        off += 4 * size
        blocks[name] = arr.copy()
    return blocks, header


def blocks_checksum(blocks: dict) -> str:
    """Stable content hash of a block dict (name, shape, and raw bytes)."""
    import hashlib

    hsh = hashlib.sha256()
    for name in sorted(blocks):
        arr = np.ascontiguousarray(blocks[name])
        hsh.update(name.encode("utf-8"))
        hsh.update(str(arr.shape).encode())
        hsh.update(arr.tobytes(order="C"))
    return hsh.hexdigest()
