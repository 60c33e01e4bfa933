"""Input featurization: multi-resolution hash-grid positional encoding with
progressive level activation, plus sinusoidal encodings for gaze angles and
view directions.

Grid levels run from a base to a finest resolution on a geometric schedule.
Each level stores a table of small feature vectors; a query point is
trilinearly interpolated from the 8 corners of its cell.  Corners map to
table slots directly while the level's vertex count fits in the table and
by spatial hashing (coordinate-prime-multiply XOR) beyond that.  Levels at
or above ``active_levels`` contribute exact zeros, which is how training
unlocks fine detail progressively.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeMismatchError
from .rng import stream

_HASH_PRIMES = np.array([1, 2654435761, 805459861], dtype=np.uint32)

# Corner visit order for trilinear interpolation (x fastest).
_CORNERS = np.array(
    [[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0], [0, 0, 1], [1, 0, 1], [0, 1, 1], [1, 1, 1]],
    dtype=np.int64,
)


def level_resolutions(levels, base_resolution, finest_resolution):
    if levels < 1:
        raise ConfigError("hash grid needs at least one level")
    if levels == 1:
        return np.array([base_resolution], dtype=np.int64)
    b = np.exp((np.log(finest_resolution) - np.log(base_resolution)) / (levels - 1))
    return np.floor(base_resolution * b ** np.arange(levels)).astype(np.int64)


@dataclass
class Diagnostics:
    """Counters for recoverable input anomalies (clamped points, renormalized
    directions)."""

    out_of_bounds: int = 0
    renormalized_dirs: int = 0


@dataclass
class HashGridParams:
    """Multi-resolution feature grid.

    tables is one (levels, table_size, features_per_level) array; slot
    layout per level is documented in hash_encode.  bounds_center and
    bounds_half_extent define the axis-aligned cube mapped to [0, 1]^3.
    """

    levels: int = 16
    features_per_level: int = 2
    base_resolution: int = 16
    finest_resolution: int = 1024
    table_size: int = 2**19
    tables: np.ndarray = None
    active_levels: int = None
    bounds_center: tuple = (0.0, 0.0, 0.0)
    bounds_half_extent: float = 0.12

    def __post_init__(self):
        if self.table_size & (self.table_size - 1):
            raise ConfigError("table_size must be a power of two")
        self.resolutions = level_resolutions(
            self.levels, self.base_resolution, self.finest_resolution
        )
        if self.active_levels is None:
            self.active_levels = self.levels
        if not 1 <= self.active_levels <= self.levels:
            raise ConfigError(f"active_levels must be in [1, {self.levels}]")
        if self.tables is None:
            raise ConfigError("tables must be provided (use init_hash_grid)")
        expected = (self.levels, self.table_size, self.features_per_level)
        if self.tables.shape != expected:
            raise ShapeMismatchError(f"tables shape {self.tables.shape}, expected {expected}")
        # Dense direct indexing needs every vertex of the level to fit.
        self.dense = (self.resolutions + 1) ** 3 <= self.table_size

    @property
    def out_dim(self):
        return self.levels * self.features_per_level


def init_hash_grid(
    levels=16,
    features_per_level=2,
    base_resolution=16,
    finest_resolution=1024,
    table_size=2**19,
    bounds_center=(0.0, 0.0, 0.0),
    bounds_half_extent=0.12,
    seed=0,
    dtype=np.float32,
    init_scale=1e-4,
):
    rng = stream(seed, "hash_grid")
    tables = rng.uniform(
        -init_scale, init_scale, size=(levels, table_size, features_per_level)
    ).astype(dtype)
    return HashGridParams(
        levels,
        features_per_level,
        base_resolution,
        finest_resolution,
        table_size,
        tables,
        None,
        tuple(bounds_center),
        float(bounds_half_extent),
    )


def normalize_positions(grid: HashGridParams, x, diag: Diagnostics | None = None):
    """Map scene coordinates to [0, 1]^3, clamping out-of-bounds points."""
    x = np.atleast_2d(np.asarray(x))
    center = np.asarray(grid.bounds_center, dtype=x.dtype)
    u = (x - center) / (2.0 * grid.bounds_half_extent) + 0.5
    if diag is not None:
        diag.out_of_bounds += int(np.sum(np.any((u < 0.0) | (u > 1.0), axis=1)))
    return np.clip(u, 0.0, 1.0)


def _corner_indices_weights(grid: HashGridParams, u, levels=None):
    """Per level: table slot indices (N, 8) and trilinear weights (N, 8).

    Returns idx (N, levels, 8) int64 offset into the flattened
    (levels * table_size) table and weights (N, levels, 8) in u's dtype.
    """
    n = u.shape[0]
    levels = grid.levels if levels is None else levels
    idx = np.empty((n, levels, 8), dtype=np.int64)
    wts = np.empty((n, levels, 8), dtype=u.dtype)
    for lvl in range(levels):
        res = int(grid.resolutions[lvl])
        xs = u * res
        x0 = np.minimum(np.floor(xs), res - 1).astype(np.int64)
        f = xs - x0
        corners = x0[:, None, :] + _CORNERS[None, :, :]  # (N, 8, 3)
        if grid.dense[lvl]:
            stride = res + 1
            slot = corners[..., 0] + stride * (corners[..., 1] + stride * corners[..., 2])
        else:
            c = corners.astype(np.uint32)
            slot = (
                (c[..., 0] * _HASH_PRIMES[0])
                ^ (c[..., 1] * _HASH_PRIMES[1])
                ^ (c[..., 2] * _HASH_PRIMES[2])
            ) & np.uint32(grid.table_size - 1)
            slot = slot.astype(np.int64)
        idx[:, lvl, :] = slot + lvl * grid.table_size
        w = np.where(_CORNERS[None, :, :] == 1, f[:, None, :], 1.0 - f[:, None, :])
        wts[:, lvl, :] = w[..., 0] * w[..., 1] * w[..., 2]
    return idx, wts


def hash_encode(grid: HashGridParams, x, diag: Diagnostics | None = None, cache=None):
    """Encode points x (N, 3) or (3,) into (N, levels * features) features.

    When ``cache`` is a dict the corner indices/weights are stored there for
    hash_encode_backward.
    """
    x = np.asarray(x)
    squeeze = x.ndim == 1
    u = normalize_positions(grid, x, diag)
    active = grid.active_levels
    idx, wts = _corner_indices_weights(grid, u, levels=active)
    n = idx.shape[0]
    fpl = grid.features_per_level
    flat_tables = grid.tables.reshape(grid.levels * grid.table_size, fpl)
    gathered = np.take(flat_tables, idx.reshape(n, active * 8), axis=0)
    gathered = gathered.reshape(n * active, 8, fpl)
    feats = np.zeros((n, grid.levels, fpl), dtype=gathered.dtype)
    feats[:, :active, :] = (wts.reshape(n * active, 1, 8) @ gathered).reshape(n, active, fpl)
    feats = feats.reshape(n, grid.levels * fpl)
    if cache is not None:
        cache["idx"] = idx
        cache["weights"] = wts
        cache["n"] = n
        cache["active"] = active
    return feats[0] if squeeze else feats


def hash_encode_backward(grid: HashGridParams, cache, dfeat):
    """Adjoint of hash_encode w.r.t. table entries.

    dfeat is (N, levels * features).  Returns a dense (levels, table_size,
    features) gradient array; only slots touched by the forward pass (at
    most 8 per point per active level) are nonzero.  Position gradients are
    not produced: positions are never optimized.
    """
    idx, wts = cache["idx"], cache["weights"]
    n, active = cache["n"], cache["active"]
    fpl = grid.features_per_level
    dfeat = np.asarray(dfeat).reshape(n, grid.levels, fpl)
    size = grid.levels * grid.table_size
    out = np.empty((grid.levels, grid.table_size, fpl))
    flat_idx = idx.ravel()
    for f in range(fpl):
        contrib = wts * dfeat[:, :active, None, f]
        acc = np.bincount(flat_idx, weights=contrib.ravel(), minlength=size)
        out[..., f] = acc.reshape(grid.levels, grid.table_size)
    if active < grid.levels:
        out[active:] = 0.0
    return out.astype(grid.tables.dtype)


# ---------------------------------------------------------------------------
# Sinusoidal encodings


@dataclass
class GazeEncodingConfig:
    """Fixed-frequency sinusoidal encoding of (pitch, yaw) in radians.

    Output is component-major, frequency-minor:
    [sin(f1 p), cos(f1 p), ..., sin(fF p), cos(fF p), sin(f1 y), ...].
    """

    frequencies: tuple = (1.0, 2.0, 4.0, 8.0)
    input_dim: int = 2

    def __post_init__(self):
        f = np.asarray(self.frequencies, dtype=np.float64)
        if len(f) == 0 or np.any(np.diff(f) <= 0):
            raise ConfigError("frequencies must be strictly increasing and nonempty")

    @property
    def out_dim(self):
        return self.input_dim * 2 * len(self.frequencies)


@dataclass
class DirEncodingConfig:
    """Sinusoidal encoding of a unit view direction (3 components)."""

    frequencies: tuple = (1.0, 2.0, 4.0, 8.0)
    unit_tol: float = 1e-4

    @property
    def out_dim(self):
        return 3 * 2 * len(self.frequencies)


def _sinusoid(values, frequencies):
    """values (N, D) -> (N, D * 2 * F), component-major, frequency-minor,
    sin before cos at each frequency."""
    v = np.atleast_2d(np.asarray(values))
    freqs = np.asarray(frequencies, dtype=v.dtype)
    phase = v[:, :, None] * freqs[None, None, :]  # (N, D, F)
    out = np.empty(v.shape + (2 * len(freqs),), dtype=v.dtype)
    out[..., 0::2] = np.sin(phase)
    out[..., 1::2] = np.cos(phase)
    return out.reshape(v.shape[0], -1)


def gaze_encode(gaze, cfg: GazeEncodingConfig = None):
    """Encode gaze (pitch, yaw) or an (N, 2) batch of gazes."""
    cfg = cfg or GazeEncodingConfig()
    gaze = np.asarray(gaze, dtype=np.float64)
    squeeze = gaze.ndim == 1
    g = np.atleast_2d(gaze)
    if g.shape[1] != cfg.input_dim:
        raise ShapeMismatchError(f"gaze_encode: expected {cfg.input_dim} components, got {g.shape}")
    if not np.all(np.isfinite(g)):
        raise ConfigError("gaze_encode: gaze must be finite")
    enc = _sinusoid(g, cfg.frequencies)
    return enc[0] if squeeze else enc


def dir_encode(v, cfg: DirEncodingConfig = None, diag: Diagnostics | None = None):
    """Encode unit view directions (3,) or (N, 3); non-unit inputs are
    normalized and counted in the diagnostics."""
    cfg = cfg or DirEncodingConfig()
    v = np.asarray(v)
    squeeze = v.ndim == 1
    vv = np.atleast_2d(v)
    if vv.shape[1] != 3:
        raise ShapeMismatchError(f"dir_encode: expected 3 components, got {vv.shape}")
    norms = np.linalg.norm(vv, axis=1)
    bad = np.abs(norms - 1.0) > cfg.unit_tol
    if np.any(bad):
        if diag is not None:
            diag.renormalized_dirs += int(bad.sum())
        vv = vv / norms[:, None]
    enc = _sinusoid(vv, cfg.frequencies)
    return enc[0] if squeeze else enc
