"""Camera ray generation (pinhole + 2-term radial distortion, posed in the
Central Pupil Frame) and differentiable volume rendering.

Points map to pixels through x_cam = R x_cpf + t, perspective division,
radial distortion r_d = r (1 + k1 r^2 + k2 r^4), and the pinhole
intrinsics.  Ray generation inverts the distortion by fixed-point
iteration.  Compositing discretizes the transmittance integral with
alpha_j = 1 - exp(-sigma_j delta_j) and exclusive cumulative products;
the background is fixed to black.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import ConfigError, NumericError, ShapeMismatchError
from .field import FieldParams, field_eval
from .parallel import chunk_slices, run_chunks
from .rng import stream


@dataclass
class Camera:
    """Pinhole camera with radial distortion, posed camera-from-CPF."""

    fx: float
    fy: float
    cx: float
    cy: float
    k1: float
    k2: float
    rotation: np.ndarray  # (3, 3), camera-from-CPF
    translation: np.ndarray  # (3,), meters
    width: int
    height: int
    near: float = 0.005
    far: float = 0.25

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.rotation.shape != (3, 3) or self.translation.shape != (3,):
            raise ShapeMismatchError("camera pose must be (3,3) rotation and (3,) translation")
        if not np.allclose(self.rotation @ self.rotation.T, np.eye(3), atol=1e-6):
            raise ConfigError("camera rotation is not orthonormal")
        if not (0 < self.near < self.far):
            raise ConfigError(f"camera needs 0 < near < far, got {self.near}, {self.far}")
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigError("focal lengths must be positive")

    @property
    def center(self):
        """Camera center in CPF coordinates."""
        return -self.rotation.T @ self.translation

    def to_dict(self):
        d = asdict(self)
        d["rotation"] = self.rotation.reshape(-1).tolist()
        d["translation"] = self.translation.tolist()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["rotation"] = np.asarray(d["rotation"], dtype=np.float64).reshape(3, 3)
        d["translation"] = np.asarray(d["translation"], dtype=np.float64)
        return cls(**d)


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float
    far: float


def look_at(position, target, up=(0.0, 1.0, 0.0)):
    """camera-from-CPF rotation whose +z axis points from position to target
    (pixel y grows downward, matching image row order)."""
    position = np.asarray(position, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - position
    nz = np.linalg.norm(z)
    if nz < 1e-12:
        raise ConfigError("look_at: position and target coincide")
    z = z / nz
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    nx = np.linalg.norm(x)
    if nx < 1e-9:
        raise ConfigError("look_at: view direction parallel to up")
    x = x / nx
    y = np.cross(z, x)
    r = np.stack([x, y, z], axis=0)
    t = -r @ position
    return r, t


def project(cam: Camera, points):
    """Project CPF points (N, 3) to pixel coords (N, 2) via the forward
    distortion model.  Points behind the camera get NaN."""
    p = np.atleast_2d(np.asarray(points, dtype=np.float64))
    xc = p @ cam.rotation.T + cam.translation
    z = xc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        xn = xc[:, 0] / z
        yn = xc[:, 1] / z
    r2 = xn * xn + yn * yn
    f = 1.0 + cam.k1 * r2 + cam.k2 * r2 * r2
    u = cam.fx * xn * f + cam.cx
    v = cam.fy * yn * f + cam.cy
    uv = np.stack([u, v], axis=1)
    uv[z <= 0] = np.nan
    return uv


def _undistort(cam: Camera, xd, yd, max_iter=10, tol=1e-9):
    """Invert r_d = r (1 + k1 r^2 + k2 r^4) by fixed-point iteration."""
    x, y = xd.copy(), yd.copy()
    for _ in range(max_iter):
        r2 = x * x + y * y
        f = 1.0 + cam.k1 * r2 + cam.k2 * r2 * r2
        x_new = xd / f
        y_new = yd / f
        delta = np.maximum(np.abs(x_new - x), np.abs(y_new - y))
        x, y = x_new, y_new
        if np.all(delta < tol):
            return x, y
    # re-check residual through the forward model
    r2 = x * x + y * y
    f = 1.0 + cam.k1 * r2 + cam.k2 * r2 * r2
    bad = np.maximum(np.abs(x * f - xd), np.abs(y * f - yd)) > 1e-6
    if np.any(bad):
        i = int(np.argmax(bad))
        raise NumericError(
            f"undistortion did not converge for normalized coords ({xd.flat[i]:.4f}, {yd.flat[i]:.4f})"
        )
    return x, y


def generate_rays(cam: Camera, uv):
    """Vectorized ray generation for subpixel coords uv (N, 2).

    Returns (origins (N, 3), directions (N, 3)) in CPF; directions unit."""
    uv = np.atleast_2d(np.asarray(uv, dtype=np.float64))
    if np.any((uv[:, 0] < 0) | (uv[:, 0] > cam.width) | (uv[:, 1] < 0) | (uv[:, 1] > cam.height)):
        raise ConfigError("pixel coordinates outside image bounds")
    xd = (uv[:, 0] - cam.cx) / cam.fx
    yd = (uv[:, 1] - cam.cy) / cam.fy
    x, y = _undistort(cam, xd, yd)
    d_cam = np.stack([x, y, np.ones_like(x)], axis=1)
    d_cam /= np.linalg.norm(d_cam, axis=1, keepdims=True)
    d = d_cam @ cam.rotation  # R^T d_cam
    o = np.broadcast_to(cam.center, d.shape)
    return o.copy(), d


def generate_ray(cam: Camera, pixel):
    """Single-ray convenience wrapper around generate_rays."""
    o, d = generate_rays(cam, np.asarray(pixel, dtype=np.float64)[None, :])
    return Ray(o[0], d[0], cam.near, cam.far)


def pixel_grid(cam: Camera):
    """Subpixel centers of every pixel, row-major (v outer, u inner)."""
    u = np.arange(cam.width) + 0.5
    v = np.arange(cam.height) + 0.5
    uu, vv = np.meshgrid(u, v)
    return np.stack([uu.ravel(), vv.ravel()], axis=1)


# ---------------------------------------------------------------------------
# Sampling along rays


def sample_ray(near, far, n_samples, stratified=False, rng=None):
    """t-values for one ray or a batch.

    near/far may be scalars or (R,) arrays.  Unstratified sampling uses
    stratum midpoints; stratified draws one uniform jitter per stratum from
    the provided generator.  Results are sorted by construction.
    """
    if n_samples < 2:
        raise ConfigError("sample_ray: need at least 2 samples")
    near = np.asarray(near, dtype=np.float64)
    far = np.asarray(far, dtype=np.float64)
    scalar = near.ndim == 0 and far.ndim == 0
    near = np.atleast_1d(near)[:, None]
    far = np.atleast_1d(far)[:, None]
    base = np.arange(n_samples, dtype=np.float64)[None, :]
    if stratified:
        if rng is None:
            raise ConfigError("stratified sampling requires an rng stream")
        jitter = rng.random((near.shape[0], n_samples))
    else:
        jitter = 0.5
    t = near + (base + jitter) / n_samples * (far - near)
    return t[0] if scalar else t


def segment_lengths(t, near, far):
    """Voronoi segment of [near, far] owned by each sample; positive, sums
    to far - near exactly."""
    t = np.atleast_2d(np.asarray(t, dtype=np.float64))
    near = np.broadcast_to(np.asarray(near, dtype=np.float64), (t.shape[0],))
    far = np.broadcast_to(np.asarray(far, dtype=np.float64), (t.shape[0],))
    mid = 0.5 * (t[:, 1:] + t[:, :-1])
    lo = np.concatenate([near[:, None], mid], axis=1)
    hi = np.concatenate([mid, far[:, None]], axis=1)
    return hi - lo


@dataclass
class RaySamples:
    """Discretization of rays: sorted t-values, per-sample density and
    color, and the segment lengths delta."""

    t: np.ndarray  # (R, S)
    delta: np.ndarray  # (R, S)
    sigma: np.ndarray  # (R, S)
    color: np.ndarray  # (R, S, C)

    def __post_init__(self):
        if np.any(self.delta <= 0):
            raise ConfigError("RaySamples: segment lengths must be positive")
        if np.any(np.diff(self.t, axis=-1) < 0):
            raise ConfigError("RaySamples: t-values must be sorted")


def composite(samples: RaySamples, background=0.0):
    """Alpha-composite samples front to back.

    Returns (pixel colors (R, C), weights (R, S), final transmittance (R,)).
    background defaults to black.
    """
    sigma = samples.sigma
    delta = samples.delta.astype(sigma.dtype)
    alpha = -np.expm1(-sigma * delta)
    one_minus = 1.0 - alpha
    # exclusive cumulative product: T_j = prod_{k<j} (1 - alpha_k)
    trans = np.cumprod(one_minus, axis=-1)
    t_final = trans[:, -1]
    trans = np.concatenate([np.ones_like(trans[:, :1]), trans[:, :-1]], axis=-1)
    weights = trans * alpha
    color = np.einsum("rs,rsc->rc", weights, samples.color)
    bg = np.asarray(background, dtype=color.dtype)
    color = color + t_final[:, None] * bg
    return color, weights, t_final


def composite_backward(samples: RaySamples, dcolor_pixel, background=0.0):
    """Exact adjoint of composite w.r.t. per-sample sigma and color.

    dcolor_pixel is (R, C).  Returns (dsigma (R, S), dcolor (R, S, C)).
    Uses dL/dsigma_j = delta_j (T_{j+1} c_j - S_j) . dpix with
    S_j = sum_{k>j} w_k c_k + T_final * bg, which avoids dividing by
    (1 - alpha) and stays stable at full saturation.
    """
    sigma = samples.sigma
    delta = samples.delta.astype(sigma.dtype)
    alpha = -np.expm1(-sigma * delta)
    cum = np.cumprod(1.0 - alpha, axis=-1)
    t_final = cum[:, -1]
    trans = np.concatenate([np.ones_like(cum[:, :1]), cum[:, :-1]], axis=-1)
    weights = trans * alpha
    trans_next = trans * (1.0 - alpha)

    dpix = np.atleast_2d(np.asarray(dcolor_pixel))
    dcolor = weights[:, :, None] * dpix[:, None, :]
    cdot = np.einsum("rsc,rc->rs", samples.color, dpix)
    wc = weights * cdot
    bg = np.broadcast_to(np.asarray(background, dtype=dpix.dtype), dpix.shape)
    bg_dot = np.einsum("rc,rc->r", bg, dpix)
    suffix = np.cumsum(wc[:, ::-1], axis=-1)[:, ::-1]
    suffix = np.concatenate([suffix[:, 1:], np.zeros_like(suffix[:, :1])], axis=-1)
    suffix = suffix + (t_final * bg_dot)[:, None]
    dsigma = delta * (trans_next * cdot - suffix)
    return dsigma, dcolor


# ---------------------------------------------------------------------------
# Full-frame rendering


def render_image(
    params: FieldParams,
    cam: Camera,
    latents,
    n_samples=32,
    background=0.0,
    seed=0,
    stratified=False,
    threads=1,
    chunk=2048,
):
    """Render a full frame from the conditional field.

    latents is (s_hat, g_hat, l_hat) (each a vector; g_hat is the encoded
    gaze).  Returns a (H, W) float image for single-channel fields, else
    (H, W, C).  Deterministic given the seed.
    """
    s_hat, g_hat, l_hat = latents
    uv = pixel_grid(cam)
    origins, dirs = generate_rays(cam, uv)
    n = uv.shape[0]

    def run(a, b):
        o, d = origins[a:b], dirs[a:b]
        rng = stream(seed, "render", a) if stratified else None
        t = sample_ray(
            np.full(b - a, cam.near),
            np.full(b - a, cam.far),
            n_samples,
            stratified,
            rng,
        )
        delta = segment_lengths(t, cam.near, cam.far)
        pts = o[:, None, :] + t[:, :, None] * d[:, None, :]
        flat_pts = pts.reshape(-1, 3)
        flat_dirs = np.repeat(d, n_samples, axis=0)
        sigma, color, _, _ = field_eval(params, flat_pts, flat_dirs, s_hat, g_hat, l_hat)
        rs = RaySamples(
            t,
            delta,
            sigma.reshape(b - a, n_samples),
            color.reshape(b - a, n_samples, -1),
        )
        pix, _, _ = composite(rs, background)
        return pix

    parts = run_chunks(run, chunk_slices(n, chunk), threads)
    img = np.concatenate(parts, axis=0)
    channels = img.shape[1]
    img = img.reshape(cam.height, cam.width, channels)
    return img[:, :, 0] if channels == 1 else img
