"""Training objectives: masked photometric L1, a multi-scale gradient
perceptual proxy, the codebook KL regularizer, color-network weight decay,
and their mode-dependent weighted sums.

Every loss returns (value, gradients) with gradients shaped like its
differentiated inputs, so the trainer can route them without recomputation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, EmptyMaskError, ShapeMismatchError
from .tensor_nn import MlpGrads, MlpParams


@dataclass
class LossWeights:
    """Scalar weights of the total objective.

    percept_enabled disables the perceptual term entirely for
    strict-ablation runs while keeping the call contract.
    """

    lambda_percept: float = 0.002
    lambda_kl: float = 1e-8
    lambda_reg: float = 1e-5
    saturation_threshold: float = 0.85
    percept_enabled: bool = True

    def __post_init__(self):
        for name in ("lambda_percept", "lambda_kl", "lambda_reg"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ConfigError(f"{name} must be finite and nonnegative, got {v}")


def rgb_loss(pred, target, mask=None, saturation_threshold=0.85):
    """Mean absolute error over usable pixels.

    Pixels whose target intensity exceeds the saturation threshold are
    excluded on top of the supplied validity mask.  Returns (value, dpred)
    with dpred zero on masked pixels and at exact ties (subgradient 0).
    Raises EmptyMaskError when nothing is left to supervise.
    """
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeMismatchError(f"rgb_loss: pred {pred.shape} vs target {target.shape}")
    usable = target <= saturation_threshold
    if mask is not None:
        mask = np.asarray(mask).astype(bool)
        if mask.shape != target.shape:
            raise ShapeMismatchError(f"rgb_loss: mask {mask.shape} vs target {target.shape}")
        usable &= mask
    n = int(usable.sum())
    if n == 0:
        raise EmptyMaskError("rgb_loss: no usable pixels after masking")
    diff = np.where(usable, pred - target, 0.0)
    value = float(np.abs(diff).sum()) / n
    dpred = np.sign(diff) / n
    return value, dpred.astype(pred.dtype)


def kl_loss(codebook):
    """Mean over entries of 0.5 ||z||^2: the KL divergence of a unit-variance
    Gaussian at z from the standard normal, constants dropped.

    Accepts a LatentCodebook or a raw (n, dim) array; returns (value,
    per-entry gradients).
    """
    vectors = getattr(codebook, "vectors", codebook)
    vectors = np.asarray(vectors)
    if vectors.ndim != 2 or vectors.shape[0] == 0:
        raise ConfigError("kl_loss: need a nonempty (n, dim) codebook")
    n = vectors.shape[0]
    value = 0.5 * float(np.sum(np.square(vectors.astype(np.float64)))) / n
    grads = vectors / n
    return value, grads


def _avg_pool2(img):
    h, w = img.shape
    img = img[: h - h % 2, : w - w % 2]
    return 0.25 * (img[0::2, 0::2] + img[0::2, 1::2] + img[1::2, 0::2] + img[1::2, 1::2])


def _avg_pool2_backward(grad, shape):
    out = np.zeros(shape, dtype=grad.dtype)
    gh, gw = grad.shape
    g = 0.25 * grad
    out[0 : 2 * gh : 2, 0 : 2 * gw : 2] += g
    out[0 : 2 * gh : 2, 1 : 2 * gw : 2] += g
    out[1 : 2 * gh : 2, 0 : 2 * gw : 2] += g
    out[1 : 2 * gh : 2, 1 : 2 * gw : 2] += g
    return out


def perceptual_proxy(pred, target, scales=3):
    """Multi-scale gradient-difference loss standing in for a learned
    perceptual metric.

    At each of ``scales`` dyadic scales the horizontal and vertical
    finite-difference images of pred and target are compared with L1.
    Invariant to uniform intensity offsets.  Patches must be at least 8x8.
    Returns (value, dpred).
    """
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeMismatchError(f"perceptual_proxy: {pred.shape} vs {target.shape}")
    if pred.ndim != 2 or min(pred.shape) < 8:
        raise ConfigError(f"perceptual_proxy: patch {pred.shape} too small (need >= 8x8)")
    value = 0.0
    p, t = pred, target
    pyramid = []
    for s in range(scales):
        dx_p, dx_t = np.diff(p, axis=1), np.diff(t, axis=1)
        dy_p, dy_t = np.diff(p, axis=0), np.diff(t, axis=0)
        sx = np.sign(dx_p - dx_t)
        sy = np.sign(dy_p - dy_t)
        value += float(np.abs(dx_p - dx_t).mean() + np.abs(dy_p - dy_t).mean())
        pyramid.append((p.shape, sx / dx_p.size, sy / dy_p.size))
        if s < scales - 1:
            p, t = _avg_pool2(p), _avg_pool2(t)
    value /= scales
    # backward, top of the pyramid first
    grad = None
    for shape, sx, sy in reversed(pyramid):
        g = np.zeros(shape, dtype=pred.dtype)
        g[:, 1:] += sx
        g[:, :-1] -= sx
        g[1:, :] += sy
        g[:-1, :] -= sy
        if grad is not None:
            g = g + _avg_pool2_backward(grad, shape)
        grad = g
    return value, grad / scales


def weight_reg(color_net: MlpParams):
    """0.5 sum of squared weights of the color network, biases excluded.
    Returns (value, MlpGrads)."""
    value = 0.0
    layers = []
    for w, b in color_net.layers:
        value += 0.5 * float(np.sum(np.square(w.astype(np.float64))))
        layers.append((w.copy(), np.zeros_like(b)))
    return value, MlpGrads(layers)


_MODE_COMPONENTS = {
    "pretrain": ("rgb", "percept", "kl", "reg"),
    "latent_opt": ("rgb",),
    "finetune": ("rgb", "percept", "reg"),
}


def _scale_grad(grad, s):
    if isinstance(grad, np.ndarray):
        return grad * s
    if isinstance(grad, MlpGrads):
        return MlpGrads([(dw * s, db * s) for dw, db in grad.layers])
    if isinstance(grad, dict):
        return {k: _scale_grad(v, s) for k, v in grad.items()}
    raise ConfigError(f"total_loss: cannot scale gradient of type {type(grad)!r}")


def total_loss(components: dict, weights: LossWeights, mode: str):
    """Combine loss components for one of the three optimization stages.

    components maps name -> (value, grads).  pretrain uses
    rgb + lp*percept + lkl*kl + lreg*reg; finetune drops the KL term;
    latent_opt is rgb only (extra components are ignored, matching the
    stage contract).  A missing required component is an error.
    Returns (total, {name: weighted grads}).
    """
    if mode not in _MODE_COMPONENTS:
        raise ConfigError(f"total_loss: unknown mode {mode!r}")
    required = [c for c in _MODE_COMPONENTS[mode]]
    if not weights.percept_enabled and "percept" in required:
        required.remove("percept")
    missing = [c for c in required if c not in components]
    if missing:
        raise ConfigError(f"total_loss: mode {mode!r} missing components {missing}")
    factor = {
        "rgb": 1.0,
        "percept": weights.lambda_percept,
        "kl": weights.lambda_kl,
        "reg": weights.lambda_reg,
    }
    total = 0.0
    grads = {}
    for name in required:
        value, grad = components[name]
        total += factor[name] * float(value)
        grads[name] = _scale_grad(grad, factor[name])
    return total, grads
