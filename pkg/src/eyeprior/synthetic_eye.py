"""Procedural ground-truth eye scenes and their exact analytic renderer.

A scene is a Lambertian-shaded eyeball sphere (sclera / iris / pupil
regions defined by the angle to the gaze axis), an eyelid plane in front
of it with a gaze-coupled horizontal slit, and a skin backdrop plane
behind it.  Closed-form ray intersections give exact images, exact pupil
projections, and labels that are correct by construction, which is what
makes these scenes usable as oracles for the learned pipeline.

The eyelid slit couples to pitch: aperture(pitch) = a0 + a1 * pitch
(clamped), with the slit center also tracking pitch, so looking down
strictly reduces the visible iris, looking up reveals it.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .dataset_io import FrameRecord, ViewRecord, save_dataset
from .errors import ConfigError, DataError
from .renderer import Camera, generate_rays, look_at, project
from .rng import stream


def gaze_direction(pitch, yaw):
    """Unit gaze vector: d = (cos p sin y, sin p, cos p cos y)."""
    pitch = np.asarray(pitch, dtype=np.float64)
    yaw = np.asarray(yaw, dtype=np.float64)
    return np.stack(
        [np.cos(pitch) * np.sin(yaw), np.sin(pitch), np.cos(pitch) * np.cos(yaw)], axis=-1
    )


def gaze_from_direction(d):
    """Inverse of gaze_direction; exact for |pitch| < pi/2."""
    d = np.asarray(d, dtype=np.float64)
    return float(np.arcsin(d[..., 1])), float(np.arctan2(d[..., 0], d[..., 2]))


@dataclass
class SyntheticEyeSpec:
    """Parametric ground-truth eye scene in CPF coordinates (meters).

    The eye center sits at (half_ipd, 0, -eyeball_radius) plus the
    per-subject offset, so the gaze-(0,0) pupil lands exactly on the CPF
    origin plane at (half_ipd, 0, 0).
    """

    eyeball_radius: float = 0.012
    iris_angle: float = 0.42  # angular radius, rad
    pupil_angle: float = 0.14
    sclera_albedo: float = 0.78
    iris_albedo: float = 0.30
    pupil_albedo: float = 0.02
    skin_albedo: float = 0.62
    # eyelid slit: total angular aperture a0 + a1 * pitch, center tracks pitch
    aperture_a0: float = 0.62
    aperture_a1: float = 1.25
    lid_center_0: float = -0.19
    lid_center_slope: float = 0.975
    half_ipd: float = 0.0315
    center_offset: tuple = (0.0, 0.0, 0.0)  # per-subject jitter
    lid_gap: float = 0.0015  # lid plane sits this far in front of the cornea
    backdrop_gap: float = 0.004  # backdrop this far behind the eyeball
    ambient: float = 0.35
    lights: dict = field(
        default_factory=lambda: {
            "l0": ((-0.35, 0.55, 0.76), 1.0),
            "l1": ((0.55, 0.15, 0.82), 0.55),
        }
    )
    jitter_seed: int = 0

    def __post_init__(self):
        if not 0 < self.pupil_angle < self.iris_angle:
            raise ConfigError("pupil angular radius must be positive and below the iris radius")
        for name in ("sclera_albedo", "iris_albedo", "pupil_albedo", "skin_albedo"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        lights = {}
        for lid, (direction, gain) in self.lights.items():
            d = np.asarray(direction, dtype=np.float64)
            d = d / np.linalg.norm(d)
            if not 0.3 <= gain <= 1.0:
                raise ConfigError(f"light {lid!r} gain {gain} outside [0.3, 1.0]")
            lights[lid] = (d, float(gain))
        self.lights = lights

    @property
    def eye_center(self):
        off = np.asarray(self.center_offset, dtype=np.float64)
        return np.array([self.half_ipd, 0.0, -self.eyeball_radius]) + off

    @property
    def lid_z(self):
        return self.eye_center[2] + self.eyeball_radius + self.lid_gap

    @property
    def backdrop_z(self):
        return self.eye_center[2] - self.eyeball_radius - self.backdrop_gap

    def aperture(self, pitch):
        return float(np.clip(self.aperture_a0 + self.aperture_a1 * pitch, 0.0, 0.5 * np.pi))

    def lid_band(self, pitch):
        """(y_low, y_high) of the open slit on the lid plane, CPF y."""
        ap = self.aperture(pitch)
        center = self.lid_center_0 + self.lid_center_slope * pitch
        lim = 0.5 * np.pi - 1e-6
        e_up = np.clip(center + 0.5 * ap, -lim, lim)
        e_lo = np.clip(center - 0.5 * ap, -lim, lim)
        r = self.eyeball_radius
        cy = self.eye_center[1]
        return cy + r * np.sin(e_lo), cy + r * np.sin(e_up)

    def pupil_center(self, gaze):
        return self.eye_center + self.eyeball_radius * gaze_direction(gaze[0], gaze[1])


def subject_variant(base: SyntheticEyeSpec, subject_index: int) -> SyntheticEyeSpec:
    """Per-subject shape/appearance jitter, deterministic in the seed."""
    rng = stream(base.jitter_seed, "subject", subject_index)
    u = lambda a, b: float(rng.uniform(a, b))
    return replace(
        base,
        eyeball_radius=base.eyeball_radius * u(0.92, 1.08),
        iris_angle=base.iris_angle * u(0.86, 1.14),
        pupil_angle=base.pupil_angle * u(0.82, 1.18),
        sclera_albedo=float(np.clip(base.sclera_albedo + u(-0.05, 0.04), 0.0, 0.84)),
        iris_albedo=float(np.clip(base.iris_albedo + u(-0.08, 0.08), 0.05, 0.5)),
        skin_albedo=float(np.clip(base.skin_albedo + u(-0.07, 0.07), 0.2, 0.8)),
        aperture_a0=base.aperture_a0 + u(-0.05, 0.05),
        lid_center_0=base.lid_center_0 + u(-0.03, 0.03),
        center_offset=(u(-0.002, 0.002), u(-0.002, 0.002), u(-0.002, 0.002)),
    )


def _shade(spec: SyntheticEyeSpec, albedo, normals, light_id):
    direction, gain = spec.lights[light_id]
    lamb = np.maximum(normals @ direction, 0.0)
    return gain * albedo * (spec.ambient + (1.0 - spec.ambient) * lamb)


def pupil_pixel(spec: SyntheticEyeSpec, gaze, cam: Camera):
    """Analytic projection of the pupil center plus a visibility flag
    (inside the lid slit, on the camera-facing hemisphere)."""
    p = spec.pupil_center(gaze)
    uv = project(cam, p[None, :])[0]
    normal = (p - spec.eye_center) / spec.eyeball_radius
    facing = normal @ (cam.center - p) > 0.0
    y_lo, y_hi = spec.lid_band(gaze[0])
    o = cam.center
    tz = (spec.lid_z - o[2]) / (p[2] - o[2]) if p[2] != o[2] else np.inf
    y_cross = o[1] + tz * (p[1] - o[1])
    visible = bool(facing and y_lo < y_cross < y_hi and np.all(np.isfinite(uv)))
    return uv, visible


def oracle_render(spec: SyntheticEyeSpec, gaze, light_id, cam: Camera, supersample=4):
    """Exact render of the scene through the camera's distortion model.

    Returns (image (H, W) float32 in [0, 1], info dict with the analytic
    pupil-center pixel, its visibility, and a blank-image flag).
    """
    if light_id not in spec.lights:
        raise DataError(f"unknown light id: {light_id!r}")
    pitch, yaw = float(gaze[0]), float(gaze[1])
    gdir = gaze_direction(pitch, yaw)
    center = spec.eye_center
    r = spec.eyeball_radius
    y_lo, y_hi = spec.lid_band(pitch)

    ss = int(supersample)
    h, w = cam.height, cam.width
    sub = (np.arange(ss) + 0.5) / ss
    uu = (np.arange(w)[:, None] + sub[None, :]).reshape(-1)
    vv = (np.arange(h)[:, None] + sub[None, :]).reshape(-1)
    u_grid, v_grid = np.meshgrid(uu, vv)
    uv = np.stack([u_grid.ravel(), v_grid.ravel()], axis=1)
    origins, dirs = generate_rays(cam, uv)
    n = uv.shape[0]
    value = np.zeros(n)
    hit_any = np.zeros(n, dtype=bool)

    dz = dirs[:, 2]
    moving = np.abs(dz) > 1e-12

    # eyelid plane with an open slit
    t_lid = np.where(moving, (spec.lid_z - origins[:, 2]) / np.where(moving, dz, 1.0), -1.0)
    lid_pt_y = origins[:, 1] + t_lid * dirs[:, 1]
    lid_hit = (t_lid > 0) & ~((lid_pt_y > y_lo) & (lid_pt_y < y_hi))
    plane_n = np.array([0.0, 0.0, 1.0])
    value[lid_hit] = _shade(
        spec, spec.skin_albedo, np.broadcast_to(plane_n, (int(lid_hit.sum()), 3)), light_id
    )
    hit_any |= lid_hit
    free = ~lid_hit

    # eyeball sphere
    oc = origins - center
    b = np.einsum("nd,nd->n", oc, dirs)
    c = np.einsum("nd,nd->n", oc, oc) - r * r
    disc = b * b - c
    sph = free & (disc > 0)
    t_sph = -b - np.sqrt(np.where(disc > 0, disc, 0.0))
    sph &= t_sph > 0
    if np.any(sph):
        pts = origins[sph] + t_sph[sph, None] * dirs[sph]
        normals = (pts - center) / r
        ang = np.arccos(np.clip(normals @ gdir, -1.0, 1.0))
        albedo = np.where(
            ang <= spec.pupil_angle,
            spec.pupil_albedo,
            np.where(ang <= spec.iris_angle, spec.iris_albedo, spec.sclera_albedo),
        )
        value[sph] = _shade(spec, albedo, normals, light_id)
        hit_any |= sph

    # skin backdrop
    rest = free & ~sph
    t_back = np.where(moving, (spec.backdrop_z - origins[:, 2]) / np.where(moving, dz, 1.0), -1.0)
    back = rest & (t_back > 0)
    value[back] = _shade(
        spec, spec.skin_albedo, np.broadcast_to(plane_n, (int(back.sum()), 3)), light_id
    )
    hit_any |= back

    # rays were laid out (v outer with ss sub-rows, u inner with ss sub-cols)
    img = value.reshape(h, ss, w, ss).mean(axis=(1, 3))

    uv_pupil, visible = pupil_pixel(spec, (pitch, yaw), cam)
    info = {
        "pupil_px": uv_pupil,
        "pupil_visible": visible,
        "blank": not bool(hit_any.any()),
    }
    return img.astype(np.float32), info


# ---------------------------------------------------------------------------
# Camera rigs


def _make_camera(position, target, fov_x_deg, image_size, k1, k2, spec=None):
    r, t = look_at(position, target)
    half = image_size / 2.0
    fx = half / np.tan(np.deg2rad(fov_x_deg) / 2.0)
    cam = Camera(fx, fx, half, half, k1, k2, r, t, image_size, image_size)
    if spec is not None:
        cam = fit_bounds(cam, spec)
    return cam


def fit_bounds(cam: Camera, spec: SyntheticEyeSpec, margin=1.1):
    """Set near/far from the actual scene geometry: rays must start before
    the lid plane and reach the backdrop across the full field of view."""
    edge = np.linspace(0.5, cam.width - 0.5, 9)
    uu, vv = np.meshgrid(edge, np.linspace(0.5, cam.height - 0.5, 9))
    uv = np.stack([uu.ravel(), vv.ravel()], axis=1)
    origins, dirs = generate_rays(cam, uv)
    dz = dirs[:, 2]
    ok = dz < -1e-9
    if not np.any(ok):
        return cam
    t_lid = (spec.lid_z - origins[ok, 2]) / dz[ok]
    t_back = (spec.backdrop_z - origins[ok, 2]) / dz[ok]
    near = max(1e-3, float(t_lid.min()) / margin)
    far = float(t_back.max()) * margin
    return Camera(
        cam.fx, cam.fy, cam.cx, cam.cy, cam.k1, cam.k2,
        cam.rotation, cam.translation, cam.width, cam.height, near, far,
    )


_EYE_TARGET = np.array([0.0315, 0.0, -0.004])

_RIG_POSES = {
    "temporal_single": [
        ("temporal", (0.072, -0.010, 0.038), 52.0, -0.12, 0.015),
    ],
    "frontal_five": [
        ("frame_nasal", (0.012, -0.020, 0.035), 58.0, -0.10, 0.012),
        ("frame_center", (0.032, -0.027, 0.032), 60.0, -0.10, 0.012),
        ("frame_temporal", (0.052, -0.019, 0.035), 58.0, -0.10, 0.012),
        ("distant_a", (0.020, 0.012, 0.076), 34.0, -0.05, 0.0),
        ("distant_b", (0.046, 0.015, 0.074), 34.0, -0.05, 0.0),
    ],
}

# two auxiliary oblique cameras used by the view-sparsification studies
_AUX_POSES = [
    ("aux_upper", (0.024, 0.024, 0.052), 46.0, -0.08, 0.01),
    ("aux_lower", (0.056, -0.028, 0.048), 46.0, -0.08, 0.01),
]


def target_rig(preset, image_size=64, spec: SyntheticEyeSpec | None = None):
    """Calibrated camera sets in CPF with documented fixed poses.

    "temporal_single" is the one oblique target camera aimed at the pupil;
    "frontal_five" is the source rig (three frame cameras plus two distant
    ones).  Returns a list of (camera_id, Camera).
    """
    if preset not in _RIG_POSES:
        raise ConfigError(f"unknown rig preset {preset!r} (temporal_single | frontal_five)")
    spec = spec or SyntheticEyeSpec()
    out = []
    for name, pos, fov, k1, k2 in _RIG_POSES[preset]:
        out.append((name, _make_camera(pos, _EYE_TARGET, fov, image_size, k1, k2, spec)))
    return out


def aux_rig(image_size=64, spec: SyntheticEyeSpec | None = None):
    """Extra oblique cameras for dense-rig experiments."""
    spec = spec or SyntheticEyeSpec()
    return [
        (name, _make_camera(pos, _EYE_TARGET, fov, image_size, k1, k2, spec))
        for name, pos, fov, k1, k2 in _AUX_POSES
    ]


def gaze_grid(pitch_range_deg=(-20, 20), yaw_range_deg=(-20, 20), n_pitch=3, n_yaw=3):
    """Regular (pitch, yaw) grid in radians."""
    pitches = np.deg2rad(np.linspace(*pitch_range_deg, n_pitch))
    yaws = np.deg2rad(np.linspace(*yaw_range_deg, n_yaw))
    return [(float(p), float(y)) for p in pitches for y in yaws]


def generate_dataset(
    out_dir,
    n_subjects,
    gazes,
    light_ids,
    rig,
    seed=0,
    base_spec: SyntheticEyeSpec | None = None,
    supersample=4,
    subject_offset=0,
    provenance="synthetic eye scenes",
):
    """Render a labeled multi-view dataset to disk.

    One frame per (subject, gaze, light); gaze labels are exact by
    construction.  rig is a list of (camera_id, Camera).  Subject geometry
    is jittered deterministically from the seed.  Returns the Dataset.
    """
    if not gazes or not light_ids or not rig:
        raise ConfigError("generate_dataset: gazes, lights, and rig must be nonempty")
    base = replace(base_spec or SyntheticEyeSpec(), jitter_seed=seed)
    cameras = dict(rig)
    frames = []
    images = {}
    for si in range(n_subjects):
        spec = subject_variant(base, subject_offset + si)
        subject_id = f"s{subject_offset + si:03d}"
        for gi, gaze in enumerate(gazes):
            for light_id in light_ids:
                if light_id not in spec.lights:
                    raise DataError(f"unknown light id: {light_id!r}")
                frame_id = f"{subject_id}_g{gi:02d}_{light_id}"
                views = []
                for cam_id, cam in rig:
                    img, info = oracle_render(spec, gaze, light_id, cam, supersample)
                    images[(frame_id, cam_id)] = img
                    views.append(
                        ViewRecord(
                            cam_id,
                            "",
                            None,
                            (float(info["pupil_px"][0]), float(info["pupil_px"][1])),
                            info["pupil_visible"],
                        )
                    )
                frames.append(FrameRecord(frame_id, subject_id, gaze, light_id, views))
    return save_dataset(out_dir, cameras, frames, images, provenance=provenance)
