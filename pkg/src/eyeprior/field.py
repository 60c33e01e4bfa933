"""Conditional radiance function with disentangled conditioning.

A density network maps (hash features of x, subject latent, gaze encoding)
to a nonnegative density and a geometric feature vector; a color network
maps (geometric features, view-direction encoding, light latent) to
channel values in [0, 1].  The light latent never reaches the density
network (unless the ablation flag deliberately breaks that), so geometry
is structurally independent of lighting.

Latent vectors for subjects and lights live in codebooks and are trained
auto-decoder style; the gaze conditioning is a fixed sinusoidal encoding
of the (pitch, yaw) label so ground-truth gaze survives every stage.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor_nn
from .encoders import (
    DirEncodingConfig,
    GazeEncodingConfig,
    HashGridParams,
    dir_encode,
    gaze_encode,
    hash_encode,
    hash_encode_backward,
    init_hash_grid,
)
from .errors import ConfigError, ShapeMismatchError, UnknownIdError, IoError
from .rng import stream
from .tensor_nn import MlpParams, mlp_init, sigmoid, softplus


@dataclass
class FieldConfig:
    """Hyperparameters of the conditional field.

    Defaults are the full-scale values; ``desk()`` returns a configuration
    small enough to train on a laptop CPU in minutes.
    """

    levels: int = 16
    features_per_level: int = 2
    base_resolution: int = 16
    finest_resolution: int = 1024
    table_size: int = 2**19
    density_hidden: int = 384
    density_layers: int = 4
    color_hidden: int = 384
    color_layers: int = 4
    geo_features: int = 31
    subject_dim: int = 256
    light_dim: int = 8
    gaze_frequencies: tuple = (1.0, 2.0, 4.0, 8.0)
    dir_frequencies: tuple = (1.0, 2.0, 4.0, 8.0)
    channels: int = 1
    # sigma = density_scale * softplus(raw + density_shift): near-empty at
    # init yet able to reach opaque-surface densities with moderate raw values
    density_shift: float = -7.0
    density_scale: float = 50.0
    bounds_center: tuple = (0.0, 0.0, 0.0)
    bounds_half_extent: float = 0.12
    # ablation toggles (all off = the default architecture)
    single_frame_latent: bool = False
    light_to_density: bool = False
    learned_gaze_codebook: bool = False

    @classmethod
    def desk(cls, **overrides):
        base = dict(
            levels=6,
            table_size=2**14,
            density_hidden=64,
            density_layers=3,
            color_hidden=64,
            color_layers=3,
        )
        base.update(overrides)
        return cls(**base)

    @property
    def feat_dim(self):
        return self.levels * self.features_per_level

    @property
    def gaze_dim(self):
        return 2 * 2 * len(self.gaze_frequencies)

    @property
    def dir_dim(self):
        return 3 * 2 * len(self.dir_frequencies)

    @property
    def frame_dim(self):
        return self.subject_dim + self.gaze_dim + self.light_dim

    @property
    def density_in(self):
        if self.single_frame_latent:
            return self.feat_dim + self.frame_dim
        extra = self.light_dim if self.light_to_density else 0
        return self.feat_dim + self.subject_dim + self.gaze_dim + extra

    @property
    def density_out(self):
        return 1 + self.geo_features

    @property
    def color_in(self):
        lat = self.frame_dim if self.single_frame_latent else self.light_dim
        return self.geo_features + self.dir_dim + lat

    def gaze_cfg(self):
        return GazeEncodingConfig(frequencies=tuple(self.gaze_frequencies))

    def dir_cfg(self):
        return DirEncodingConfig(frequencies=tuple(self.dir_frequencies))

    def to_dict(self):
        d = asdict(self)
        d["gaze_frequencies"] = list(self.gaze_frequencies)
        d["dir_frequencies"] = list(self.dir_frequencies)
        d["bounds_center"] = list(self.bounds_center)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("gaze_frequencies", "dir_frequencies", "bounds_center"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


class LatentCodebook:
    """id -> learnable vector map with a stable row order (sorted ids)."""

    def __init__(self, ids, dim, vectors=None, *, seed=0, init_scale=1e-4, dtype=np.float32):
        self.ids = sorted(ids, key=str)
        self.dim = int(dim)
        self.index = {i: row for row, i in enumerate(self.ids)}
        if vectors is not None:
            vectors = np.asarray(vectors)
            if vectors.shape != (len(self.ids), self.dim):
                raise ShapeMismatchError(
                    f"codebook vectors {vectors.shape}, expected {(len(self.ids), self.dim)}"
                )
            self.vectors = vectors
        else:
            rng = stream(seed, "codebook", str(len(self.ids)))
            self.vectors = rng.uniform(
                -init_scale, init_scale, size=(len(self.ids), self.dim)
            ).astype(dtype)

    def __len__(self):
        return len(self.ids)

    def __contains__(self, key):
        return key in self.index

    def row(self, key):
        if key not in self.index:
            raise UnknownIdError("codebook", key)
        return self.index[key]

    def lookup(self, key):
        """Return the stored vector as a view (writes go to the codebook)."""
        return self.vectors[self.row(key)]


def mean_latent(codebook: LatentCodebook):
    """Arithmetic mean over all entries; the retargeting initialization."""
    if len(codebook) == 0:
        raise ConfigError("mean_latent: empty codebook")
    return codebook.vectors.mean(axis=0)


def interpolate_latents(a, b, t):
    """Linear interpolation between two (subject, gaze, light) triples.

    Gaze is interpolated as raw (pitch, yaw) before encoding.  t must lie
    in [0, 1].
    """
    if not 0.0 <= t <= 1.0:
        raise ConfigError(f"interpolate_latents: t={t} outside [0, 1]")
    out = []
    for xa, xb in zip(a, b):
        xa, xb = np.asarray(xa), np.asarray(xb)
        if xa.shape != xb.shape:
            raise ShapeMismatchError(f"latent shapes {xa.shape} vs {xb.shape}")
        out.append((1.0 - t) * xa + t * xb)
    return tuple(out)


@dataclass
class FieldParams:
    """All learnable state: hash tables, both networks, codebooks."""

    cfg: FieldConfig
    grid: HashGridParams
    density_net: MlpParams
    color_net: MlpParams
    subject_codebook: LatentCodebook
    light_codebook: LatentCodebook
    gaze_codebook: LatentCodebook | None = None

    def blocks(self):
        out = {"grid.tables": self.grid.tables}
        out.update(tensor_nn.mlp_blocks(self.density_net, "density"))
        out.update(tensor_nn.mlp_blocks(self.color_net, "color"))
        out["codebook.subject"] = self.subject_codebook.vectors
        out["codebook.light"] = self.light_codebook.vectors
        if self.gaze_codebook is not None:
            out["codebook.gaze"] = self.gaze_codebook.vectors
        return out

    def copy(self):
        dup = copy.deepcopy(self)
        return dup


def init_field(cfg: FieldConfig, subject_ids, light_ids, *, seed=0, gaze_ids=None):
    """Fresh parameters: near-empty density, mid-gray color, tiny codebooks."""
    grid = init_hash_grid(
        levels=cfg.levels,
        features_per_level=cfg.features_per_level,
        base_resolution=cfg.base_resolution,
        finest_resolution=cfg.finest_resolution,
        table_size=cfg.table_size,
        bounds_center=cfg.bounds_center,
        bounds_half_extent=cfg.bounds_half_extent,
        seed=seed,
    )
    density_dims = [cfg.density_in] + [cfg.density_hidden] * (cfg.density_layers - 1)
    density_dims += [cfg.density_out]
    color_dims = [cfg.color_in] + [cfg.color_hidden] * (cfg.color_layers - 1) + [cfg.channels]
    density_net = mlp_init(density_dims, "none", seed=seed + 1, zero_last=True)
    color_net = mlp_init(color_dims, "none", seed=seed + 2, zero_last=True)
    subj_dim = cfg.frame_dim if cfg.single_frame_latent else cfg.subject_dim
    subject_codebook = LatentCodebook(subject_ids, subj_dim, seed=seed + 3)
    light_codebook = LatentCodebook(light_ids, cfg.light_dim, seed=seed + 4)
    gaze_codebook = None
    if cfg.learned_gaze_codebook:
        if gaze_ids is None:
            raise ConfigError("learned_gaze_codebook requires gaze_ids at init")
        gaze_codebook = LatentCodebook(gaze_ids, cfg.gaze_dim, seed=seed + 5)
    return FieldParams(cfg, grid, density_net, color_net, subject_codebook, light_codebook, gaze_codebook)


def gaze_key(gaze):
    """Stable codebook key for a gaze label (learned-gaze ablation only)."""
    return f"{float(gaze[0]):.6f},{float(gaze[1]):.6f}"


def lookup_latents(params: FieldParams, subject_id, light_id):
    """Fetch (subject, light) latent rows; views, so gradient steps written
    through the optimizer reach the codebook."""
    return (
        params.subject_codebook.lookup(subject_id),
        params.light_codebook.lookup(light_id),
    )


def _check_latent(name, vec, dim, n):
    vec = np.asarray(vec)
    if vec.ndim == 1:
        if vec.shape[0] != dim:
            raise ShapeMismatchError(f"{name} latent has dim {vec.shape[0]}, expected {dim}")
    elif vec.ndim == 2:
        if vec.shape != (n, dim):
            raise ShapeMismatchError(f"{name} latent batch {vec.shape}, expected {(n, dim)}")
    else:
        raise ShapeMismatchError(f"{name} latent must be 1-D or 2-D")
    return vec


def _seg_matmul(segments, w, bias):
    """z = sum_i seg_i @ W_i^T + bias where W is column-partitioned to match
    the segment widths.  1-D segments broadcast across the batch."""
    col = 0
    z = None
    for seg in segments:
        width = seg.shape[-1]
        wi = w[:, col : col + width]
        col += width
        term = seg @ wi.T
        z = term if z is None else z + term
    if col != w.shape[1]:
        raise ShapeMismatchError(f"segment widths sum to {col}, weight expects {w.shape[1]}")
    return z + bias


def field_eval(
    params: FieldParams,
    x,
    v,
    s_hat,
    g_hat,
    l_hat,
    diag=None,
    need_cache=False,
):
    """Evaluate the field at points x (N, 3) viewed along v (N, 3).

    Latents may be single vectors (shared by the whole batch, the training
    fast path) or per-sample (N, dim) arrays.  Returns (sigma, color, geo)
    plus a cache when requested.  With default flags (sigma, geo) are
    computed without ever touching l_hat.
    """
    cfg = params.cfg
    x = np.atleast_2d(np.asarray(x))
    v = np.atleast_2d(np.asarray(v))
    n = x.shape[0]
    if v.shape[0] == 1 and n > 1:
        v = np.broadcast_to(v, (n, 3))
    if x.shape != (n, 3) or v.shape != (n, 3):
        raise ShapeMismatchError(f"field_eval: x {x.shape}, v {v.shape}")

    if cfg.single_frame_latent:
        f_hat = _check_latent("frame", s_hat, cfg.frame_dim, n)
        density_segs_extra = [f_hat]
        color_lat = f_hat
    else:
        s_hat = _check_latent("subject", s_hat, cfg.subject_dim, n)
        g_hat = _check_latent("gaze", g_hat, cfg.gaze_dim, n)
        l_hat = _check_latent("light", l_hat, cfg.light_dim, n)
        density_segs_extra = [s_hat, g_hat] + ([l_hat] if cfg.light_to_density else [])
        color_lat = l_hat

    dtype = params.grid.tables.dtype
    hash_cache = {} if need_cache else None
    feat = hash_encode(params.grid, x.astype(dtype), diag, cache=hash_cache)

    # density network, first layer split by input segment
    dlayers = params.density_net.layers
    segs = [feat] + [s.astype(dtype) for s in density_segs_extra]
    z = _seg_matmul(segs, dlayers[0][0], dlayers[0][1])
    d_inputs = [segs]
    for w, b in dlayers[1:]:
        a = np.maximum(z, 0.0)
        d_inputs.append(a)
        z = a @ w.T + b
    sigma_raw = z[:, 0]
    geo = z[:, 1:]
    sigma = cfg.density_scale * softplus(sigma_raw + cfg.density_shift)

    dir_feat = dir_encode(v.astype(np.float64), cfg.dir_cfg(), diag).astype(dtype)
    clayers = params.color_net.layers
    csegs = [geo, dir_feat, color_lat.astype(dtype)]
    zc = _seg_matmul(csegs, clayers[0][0], clayers[0][1])
    c_inputs = [csegs]
    for w, b in clayers[1:]:
        a = np.maximum(zc, 0.0)
        c_inputs.append(a)
        zc = a @ w.T + b
    color = sigmoid(zc)

    cache = None
    if need_cache:
        cache = {
            "hash": hash_cache,
            "d_inputs": d_inputs,
            "sigma_raw": sigma_raw,
            "c_inputs": c_inputs,
            "color": color,
            "n": n,
        }
    return sigma, color, geo, cache


def field_backward(params: FieldParams, cache, dsigma, dcolor, dgeo=None, wrt="all"):
    """Adjoint of field_eval.

    dsigma (N,), dcolor (N, C), optional dgeo (N, geo_features).  Returns
    (block_grads, latent_grads) where block_grads covers grid tables and
    both networks (empty when wrt == "latents") and latent_grads has keys
    "s", "g", "l" shaped like the latents passed to field_eval (summed over
    the batch for broadcast latents).
    """
    cfg = params.cfg
    n = cache["n"]
    want_blocks = wrt == "all"
    dsigma = np.asarray(dsigma).reshape(n)
    dcolor = np.atleast_2d(np.asarray(dcolor))

    blocks = {}
    # color net backward (sigmoid output)
    color = cache["color"]
    delta = dcolor * color * (1.0 - color)
    clayers = params.color_net.layers
    c_inputs = cache["c_inputs"]
    for k in range(len(clayers) - 1, 0, -1):
        w, _ = clayers[k]
        a_in = c_inputs[k]
        if want_blocks:
            blocks[f"color.w{k}"] = delta.T @ a_in
            blocks[f"color.b{k}"] = delta.sum(axis=0)
        delta = (delta @ w) * (a_in > 0)
    w0c = clayers[0][0]
    csegs = c_inputs[0]
    if want_blocks:
        dW0c = np.empty_like(w0c)
        col = 0
        for seg in csegs:
            width = seg.shape[-1]
            if seg.ndim == 2:
                dW0c[:, col : col + width] = delta.T @ seg
            else:
                dW0c[:, col : col + width] = np.outer(delta.sum(axis=0), seg)
            col += width
        blocks["color.w0"] = dW0c
        blocks["color.b0"] = delta.sum(axis=0)
    geo_w = w0c[:, : cfg.geo_features]
    lat_col = cfg.geo_features + cfg.dir_dim
    lat_w = w0c[:, lat_col:]
    dgeo_total = delta @ geo_w
    if dgeo is not None:
        dgeo_total = dgeo_total + dgeo
    dl = delta @ lat_w
    if csegs[2].ndim == 1:
        dl = dl.sum(axis=0)

    # density net backward
    sigma_raw = cache["sigma_raw"]
    dsig_raw = dsigma * cfg.density_scale * sigmoid(sigma_raw + cfg.density_shift)
    delta_d = np.concatenate([dsig_raw[:, None], dgeo_total], axis=1)
    dlayers = params.density_net.layers
    d_inputs = cache["d_inputs"]
    for k in range(len(dlayers) - 1, 0, -1):
        w, _ = dlayers[k]
        a_in = d_inputs[k]
        if want_blocks:
            blocks[f"density.w{k}"] = delta_d.T @ a_in
            blocks[f"density.b{k}"] = delta_d.sum(axis=0)
        delta_d = (delta_d @ w) * (a_in > 0)
    w0d = dlayers[0][0]
    dsegs = d_inputs[0]
    if want_blocks:
        dW0d = np.empty_like(w0d)
        col = 0
        for seg in dsegs:
            width = seg.shape[-1]
            if seg.ndim == 2:
                dW0d[:, col : col + width] = delta_d.T @ seg
            else:
                dW0d[:, col : col + width] = np.outer(delta_d.sum(axis=0), seg)
            col += width
        blocks["density.w0"] = dW0d
        blocks["density.b0"] = delta_d.sum(axis=0)

    feat_dim = cfg.feat_dim
    dfeat = delta_d @ w0d[:, :feat_dim]
    latents = {}
    col = feat_dim
    if cfg.single_frame_latent:
        w_f = w0d[:, col : col + cfg.frame_dim]
        ds = delta_d @ w_f
        if dsegs[1].ndim == 1:
            ds = ds.sum(axis=0)
        # the frame latent also feeds the color net, so both paths contribute
        latents["s"] = ds + dl
        latents["g"] = None
        latents["l"] = None
    else:
        w_s = w0d[:, col : col + cfg.subject_dim]
        col += cfg.subject_dim
        w_g = w0d[:, col : col + cfg.gaze_dim]
        col += cfg.gaze_dim
        ds = delta_d @ w_s
        dg = delta_d @ w_g
        if dsegs[1].ndim == 1:
            ds = ds.sum(axis=0)
        if dsegs[2].ndim == 1:
            dg = dg.sum(axis=0)
        if cfg.light_to_density:
            w_l = w0d[:, col : col + cfg.light_dim]
            dl_extra = delta_d @ w_l
            if dsegs[3].ndim == 1:
                dl_extra = dl_extra.sum(axis=0)
            dl = dl + dl_extra
        latents["s"] = ds
        latents["g"] = dg
        latents["l"] = dl

    if want_blocks:
        blocks["grid.tables"] = hash_encode_backward(params.grid, cache["hash"], dfeat)
    return blocks, latents


# ---------------------------------------------------------------------------
# Checkpoints


def field_save(path, params: FieldParams, extra: dict | None = None):
    header = {
        "kind": "field",
        "cfg": params.cfg.to_dict(),
        "subject_ids": [str(i) for i in params.subject_codebook.ids],
        "light_ids": [str(i) for i in params.light_codebook.ids],
        "active_levels": int(params.grid.active_levels),
    }
    if params.gaze_codebook is not None:
        header["gaze_ids"] = [str(i) for i in params.gaze_codebook.ids]
    if extra:
        header["extra"] = extra
    tensor_nn.save_blocks(path, params.blocks(), header)


def _mlp_from_blocks(blocks, prefix, n_layers, activation="none"):
    layers = []
    for k in range(n_layers):
        layers.append((blocks[f"{prefix}.w{k}"], blocks[f"{prefix}.b{k}"]))
    return MlpParams(layers, activation)


def field_load(path):
    """Load a FieldParams checkpoint; returns (params, extra_header)."""
    blocks, header = tensor_nn.load_blocks(path)
    if header.get("kind") != "field":
        raise IoError(f"{path}: not a field checkpoint")
    cfg = FieldConfig.from_dict(header["cfg"])
    grid = HashGridParams(
        cfg.levels,
        cfg.features_per_level,
        cfg.base_resolution,
        cfg.finest_resolution,
        cfg.table_size,
        blocks["grid.tables"],
        int(header.get("active_levels", cfg.levels)),
        tuple(cfg.bounds_center),
        cfg.bounds_half_extent,
    )
    density = _mlp_from_blocks(blocks, "density", cfg.density_layers)
    color = _mlp_from_blocks(blocks, "color", cfg.color_layers)
    subj_dim = cfg.frame_dim if cfg.single_frame_latent else cfg.subject_dim
    subject = LatentCodebook(header["subject_ids"], subj_dim, blocks["codebook.subject"])
    light = LatentCodebook(header["light_ids"], cfg.light_dim, blocks["codebook.light"])
    gaze_cb = None
    if "codebook.gaze" in blocks:
        gaze_cb = LatentCodebook(header["gaze_ids"], cfg.gaze_dim, blocks["codebook.gaze"])
    params = FieldParams(cfg, grid, density, color, subject, light, gaze_cb)
    return params, header.get("extra", {})
