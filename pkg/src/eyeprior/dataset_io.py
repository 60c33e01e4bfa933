"""On-disk dataset model, Central-Pupil-Frame alignment, and validity
masking.

Layout of a dataset directory:

    manifest.jsonl    header line, then one frame record per line
    cameras.jsonl     one camera record per line
    masks/<cam>.png   optional per-camera validity masks
    images/*.png      8-bit grayscale previews
    images/*.f32      raw float planes (u32 width, u32 height, then
                      little-endian float32 row-major); preferred on load

Alignment is tracked as a cumulative rigid transform applied lazily to the
original camera poses, so aligning by t and then by -t restores bitwise
identical extrinsics.
"""

from __future__ import annotations

import json
import os
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError, IoError, ShapeMismatchError
from .renderer import Camera

MANIFEST_VERSION = 1


# ---------------------------------------------------------------------------
# Image planes


def write_png(path, img):
    arr = np.asarray(img)
    if arr.ndim != 2:
        raise ShapeMismatchError(f"write_png expects a 2-D grayscale image, got {arr.shape}")
    u8 = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(u8, mode="L").save(path)


def read_png(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float32) / 255.0


def write_f32(path, img):
    arr = np.ascontiguousarray(np.asarray(img), dtype="<f4")
    if arr.ndim != 2:
        raise ShapeMismatchError(f"write_f32 expects a 2-D image, got {arr.shape}")
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(struct.pack("<II", w, h))
        f.write(arr.tobytes(order="C"))


def read_f32(path):
    with open(path, "rb") as f:
        data = f.read()
    w, h = struct.unpack_from("<II", data, 0)
    img = np.frombuffer(data, dtype="<f4", count=w * h, offset=8)
    return img.reshape(h, w).copy()


# ---------------------------------------------------------------------------
# Records


@dataclass
class ViewRecord:
    camera_id: str
    image: str  # png path relative to the dataset root
    raw: str | None = None  # f32 path, preferred when present
    pupil_px: tuple | None = None
    pupil_visible: bool | None = None

    def to_dict(self):
        d = {"camera_id": self.camera_id, "image": self.image}
        if self.raw is not None:
            d["raw"] = self.raw
        if self.pupil_px is not None:
            d["pupil_px"] = [float(self.pupil_px[0]), float(self.pupil_px[1])]
        if self.pupil_visible is not None:
            d["pupil_visible"] = bool(self.pupil_visible)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(
            d["camera_id"],
            d["image"],
            d.get("raw"),
            tuple(d["pupil_px"]) if "pupil_px" in d else None,
            d.get("pupil_visible"),
        )


@dataclass
class FrameRecord:
    """One capture instant: labels plus the set of views."""

    frame_id: str
    subject_id: str
    gaze: tuple  # (pitch, yaw) radians
    light_id: str
    views: list

    def to_dict(self):
        return {
            "type": "frame",
            "frame_id": self.frame_id,
            "subject_id": self.subject_id,
            "gaze": [float(self.gaze[0]), float(self.gaze[1])],
            "light_id": self.light_id,
            "views": [v.to_dict() for v in self.views],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            d["frame_id"],
            d["subject_id"],
            (float(d["gaze"][0]), float(d["gaze"][1])),
            d["light_id"],
            [ViewRecord.from_dict(v) for v in d["views"]],
        )


class Dataset:
    """In-memory dataset with lazy image loading and lazy CPF alignment."""

    def __init__(self, root, cameras, frames, masks=None, provenance="", version=MANIFEST_VERSION):
        self.root = root
        self.base_cameras = dict(cameras)
        self.frames = list(frames)
        self.masks = dict(masks or {})
        self.provenance = provenance
        self.version = version
        self.align_rotation = np.eye(3)
        self.align_offset = np.zeros(3)
        self._image_cache = {}
        self._camera_cache = None

    @property
    def cameras(self):
        """Effective cameras under the cumulative alignment transform."""
        if self._camera_cache is None:
            out = {}
            for cid, cam in self.base_cameras.items():
                r = cam.rotation @ self.align_rotation.T
                t = cam.rotation @ self.align_offset + cam.translation
                out[cid] = Camera(
                    cam.fx, cam.fy, cam.cx, cam.cy, cam.k1, cam.k2,
                    r, t, cam.width, cam.height, cam.near, cam.far,
                )
            self._camera_cache = out
        return self._camera_cache

    def image(self, frame_idx, view_idx):
        key = (frame_idx, view_idx)
        if key not in self._image_cache:
            view = self.frames[frame_idx].views[view_idx]
            if view.raw is not None:
                img = read_f32(os.path.join(self.root, view.raw))
            else:
                img = read_png(os.path.join(self.root, view.image))
            self._image_cache[key] = img
        return self._image_cache[key]

    def subject_ids(self):
        return sorted({f.subject_id for f in self.frames})

    def light_ids(self):
        return sorted({f.light_id for f in self.frames})


def save_dataset(root, cameras, frames, images, masks=None, provenance=""):
    """Write a dataset directory.

    cameras: {camera_id: Camera}; frames: list of FrameRecord whose view
    image paths will be filled in; images: {(frame_id, camera_id): (H, W)
    float array}.  Returns the loaded-back Dataset.
    """
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    if masks:
        os.makedirs(os.path.join(root, "masks"), exist_ok=True)
        for cid, m in masks.items():
            write_png(os.path.join(root, "masks", f"{cid}.png"), np.asarray(m, dtype=np.float64))
    with open(os.path.join(root, "cameras.jsonl"), "w") as f:
        for cid in sorted(cameras):
            rec = {"camera_id": cid}
            rec.update(cameras[cid].to_dict())
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    lines = [
        json.dumps(
            {"type": "header", "version": MANIFEST_VERSION, "provenance": provenance},
            sort_keys=True,
        )
    ]
    for fr in frames:
        for view in fr.views:
            stem = f"{fr.frame_id}_{view.camera_id}"
            img = images[(fr.frame_id, view.camera_id)]
            view.image = f"images/{stem}.png"
            view.raw = f"images/{stem}.f32"
            write_png(os.path.join(root, view.image), img)
            write_f32(os.path.join(root, view.raw), img)
        lines.append(json.dumps(fr.to_dict(), sort_keys=True))
    with open(os.path.join(root, "manifest.jsonl"), "w") as f:
        f.write("\n".join(lines) + "\n")
    return load_dataset(root)


def load_dataset(root):
    """Load and validate a dataset directory; every violation is collected
    and reported in one DataError."""
    manifest_path = os.path.join(root, "manifest.jsonl")
    cameras_path = os.path.join(root, "cameras.jsonl")
    if not os.path.exists(manifest_path):
        raise IoError(f"{root}: missing manifest.jsonl")
    if not os.path.exists(cameras_path):
        raise IoError(f"{root}: missing cameras.jsonl")
    cameras = {}
    with open(cameras_path) as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            cid = rec.pop("camera_id")
            cameras[cid] = Camera.from_dict(rec)
    problems = []
    frames = []
    provenance = ""
    version = None
    with open(manifest_path) as f:
        for ln, line in enumerate(f):
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec.get("type") == "header":
                version = rec.get("version")
                provenance = rec.get("provenance", "")
                if version != MANIFEST_VERSION:
                    raise IoError(f"{root}: manifest version {version} unsupported")
            elif rec.get("type") == "frame":
                frames.append(FrameRecord.from_dict(rec))
            else:
                problems.append(f"line {ln + 1}: unknown record type {rec.get('type')!r}")
    if version is None:
        raise IoError(f"{root}: manifest has no header line")
    seen = set()
    for fr in frames:
        if fr.frame_id in seen:
            problems.append(f"duplicate frame id {fr.frame_id!r}")
        seen.add(fr.frame_id)
        for view in fr.views:
            if view.camera_id not in cameras:
                problems.append(f"frame {fr.frame_id!r}: unknown camera id {view.camera_id!r}")
            path = view.raw or view.image
            if not os.path.exists(os.path.join(root, path)):
                problems.append(f"frame {fr.frame_id!r}: missing image {path}")
    if problems:
        raise DataError(f"{root}: invalid dataset:\n  " + "\n  ".join(problems))
    masks = {}
    masks_dir = os.path.join(root, "masks")
    if os.path.isdir(masks_dir):
        for name in sorted(os.listdir(masks_dir)):
            if name.endswith(".png"):
                masks[name[:-4]] = read_png(os.path.join(masks_dir, name)) > 0.5
    if not frames:
        warnings.warn(f"{root}: dataset has an empty frame table (render-only)")
    return Dataset(root, cameras, frames, masks, provenance, version)


def cpf_align(dataset: Dataset, pupil_midpoint, rotation=None):
    """Re-express all camera poses so pupil_midpoint becomes the origin
    (optionally rotating into a new frame).  Returns a new Dataset; the
    input is untouched.  Intrinsics are untouched by construction."""
    m = np.asarray(pupil_midpoint, dtype=np.float64)
    if m.shape != (3,):
        raise ShapeMismatchError("pupil_midpoint must be a 3-vector")
    if rotation is None:
        r_new = np.eye(3)
    else:
        r_new = np.asarray(rotation, dtype=np.float64)
        if r_new.shape != (3, 3) or not np.allclose(r_new @ r_new.T, np.eye(3), atol=1e-9) or not np.isclose(np.linalg.det(r_new), 1.0, atol=1e-9):
            raise ConfigError("cpf_align: rotation must be a proper orthonormal rotation")
    out = Dataset(
        dataset.root,
        dataset.base_cameras,
        dataset.frames,
        dataset.masks,
        dataset.provenance,
        dataset.version,
    )
    # compose: p'' = R_n (R_p (p - m_p) - m_n)  =>  accumulated transform
    out.align_rotation = r_new @ dataset.align_rotation
    out.align_offset = dataset.align_offset + dataset.align_rotation.T @ m
    out._image_cache = dataset._image_cache
    return out


def apply_masks(images, masks, saturation_threshold=0.85):
    """Per-pixel usability flags: validity mask AND not saturated.

    images and masks are parallel lists; a mask may be None (all valid).
    """
    flags = []
    for img, mask in zip(images, masks):
        img = np.asarray(img)
        usable = img <= saturation_threshold
        if mask is not None:
            mask = np.asarray(mask)
            if mask.shape != img.shape:
                raise ShapeMismatchError(
                    f"apply_masks: mask {mask.shape} vs image {img.shape}"
                )
            usable &= mask.astype(bool)
        flags.append(usable)
    return flags
