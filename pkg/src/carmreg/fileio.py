"""On-disk formats: raw volumes/images with JSON headers, transforms, PGM export.

Raw payloads are little-endian float32 with x (or u) varying fastest, which
matches the C-contiguous [z, y, x] / [v, u] layout used in memory.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .core import CArmCamera, Image2D, RigidTransform, Volume


class MalformedHeaderError(ValueError):
    """Header JSON is unparseable or missing required fields."""


class DataSizeMismatchError(ValueError):
    """Raw payload length disagrees with the header dims."""


def _strip(path, suffix: str) -> Path:
    s = str(path)
    if s.endswith(suffix):
        s = s[: -len(suffix)]
    elif s.endswith(".json") or s.endswith(".raw"):
        s = s.rsplit(".", 2)[0]
    return Path(s)


def _read_header(path: Path, required: tuple[str, ...]) -> dict:
    if not path.exists():
        raise FileNotFoundError(f"header not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            header = json.load(fh)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise MalformedHeaderError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(header, dict):
        raise MalformedHeaderError(f"{path}: header must be a JSON object")
    missing = [k for k in required if k not in header]
    if missing:
        raise MalformedHeaderError(f"{path}: missing fields {missing}")
    return header


def _dump_json(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def save_volume(volume: Volume, path) -> Path:
    """Write <stem>.vol.json and <stem>.vol.raw; returns the header path."""
    stem = _strip(path, ".vol.json")
    nx, ny, nz = volume.dims
    header = {
        "dims": [nx, ny, nz],
        "spacing_mm": [float(s) for s in volume.spacing_mm],
        "origin_mm": [float(o) for o in volume.origin_mm],
        "fov_diameter_cm": volume.fov_diameter_cm,
        "dtype": "f32le",
    }
    _dump_json(header, stem.with_suffix(".vol.json"))
    volume.data.astype("<f4").tofile(stem.with_suffix(".vol.raw"))
    return stem.with_suffix(".vol.json")


def load_volume(path) -> Volume:
    stem = _strip(path, ".vol.json")
    header_path = stem.with_suffix(".vol.json")
    header = _read_header(header_path, ("dims", "spacing_mm", "origin_mm", "dtype"))
    if header["dtype"] != "f32le":
        raise MalformedHeaderError(f"{header_path}: unsupported dtype {header['dtype']!r}")
    dims = header["dims"]
    if len(dims) != 3 or any(int(d) <= 0 or int(d) != d for d in dims):
        raise MalformedHeaderError(f"{header_path}: bad dims {dims}")
    nx, ny, nz = (int(d) for d in dims)
    raw_path = stem.with_suffix(".vol.raw")
    if not raw_path.exists():
        raise FileNotFoundError(f"raw payload not found: {raw_path}")
    expected = nx * ny * nz * 4
    actual = os.path.getsize(raw_path)
    if actual != expected:
        raise DataSizeMismatchError(
            f"{raw_path}: expected {expected} bytes for dims {dims}, found {actual}")
    data = np.fromfile(raw_path, dtype="<f4").reshape(nz, ny, nx)
    return Volume(data, header["spacing_mm"], header["origin_mm"],
                  header.get("fov_diameter_cm"))


def save_image(image: Image2D, path) -> Path:
    """Write <stem>.img.json and <stem>.img.raw; returns the header path."""
    stem = _strip(path, ".img.json")
    nu, nv = image.dims
    header = {
        "dims": [nu, nv],
        "pixel_pitch_mm": float(image.pixel_pitch_mm),
        "fov_diameter_cm": image.fov_diameter_cm,
        "dtype": "f32le",
    }
    _dump_json(header, stem.with_suffix(".img.json"))
    image.data.astype("<f4").tofile(stem.with_suffix(".img.raw"))
    return stem.with_suffix(".img.json")


def load_image(path) -> Image2D:
    stem = _strip(path, ".img.json")
    header_path = stem.with_suffix(".img.json")
    header = _read_header(header_path, ("dims", "pixel_pitch_mm", "dtype"))
    if header["dtype"] != "f32le":
        raise MalformedHeaderError(f"{header_path}: unsupported dtype {header['dtype']!r}")
    dims = header["dims"]
    if len(dims) != 2 or any(int(d) <= 0 or int(d) != d for d in dims):
        raise MalformedHeaderError(f"{header_path}: bad dims {dims}")
    nu, nv = (int(d) for d in dims)
    raw_path = stem.with_suffix(".img.raw")
    if not raw_path.exists():
        raise FileNotFoundError(f"raw payload not found: {raw_path}")
    expected = nu * nv * 4
    actual = os.path.getsize(raw_path)
    if actual != expected:
        raise DataSizeMismatchError(
            f"{raw_path}: expected {expected} bytes for dims {dims}, found {actual}")
    data = np.fromfile(raw_path, dtype="<f4").reshape(nv, nu)
    return Image2D(data, header["pixel_pitch_mm"], header.get("fov_diameter_cm"))


def export_pgm(image: Image2D, path, window: tuple[float, float] | None = None) -> Path:
    """16-bit binary PGM with window scaling (defaults to the data range)."""
    if window is None:
        lo, hi = float(image.data.min()), float(image.data.max())
    else:
        lo, hi = float(window[0]), float(window[1])
    if hi <= lo:
        hi = lo + 1.0
    scaled = np.clip((image.data.astype(np.float64) - lo) / (hi - lo), 0.0, 1.0)
    pix = np.round(scaled * 65535.0).astype(">u2")
    nu, nv = image.dims
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{nu} {nv}\n65535\n".encode("ascii"))
        fh.write(pix.tobytes())
    return path


def transform_to_dict(t: RigidTransform) -> dict:
    return {
        "rotation": [float(x) for x in t.rotation.reshape(9)],
        "translation_mm": [float(x) for x in t.translation_mm],
    }


def transform_from_dict(d: dict) -> RigidTransform:
    try:
        rot = np.asarray(d["rotation"], dtype=np.float64).reshape(3, 3)
        trans = np.asarray(d["translation_mm"], dtype=np.float64).reshape(3)
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedHeaderError(f"bad transform record: {exc}") from exc
    return RigidTransform(rot, trans)


def save_transform(t: RigidTransform, path) -> Path:
    path = Path(path)
    _dump_json(transform_to_dict(t), path)
    return path


def load_transform(path) -> RigidTransform:
    header = _read_header(Path(path), ("rotation", "translation_mm"))
    return transform_from_dict(header)


def camera_to_dict(camera: CArmCamera) -> dict:
    return {
        "source_to_iso_mm": camera.source_to_iso_mm,
        "source_to_detector_mm": camera.source_to_detector_mm,
        "detector_dims": list(camera.detector_dims),
        "pixel_pitch_mm": camera.pixel_pitch_mm,
        "carm_rotation_deg": camera.carm_rotation_deg,
        "carm_angulation_deg": camera.carm_angulation_deg,
        "fov_diameter_cm": camera.fov_diameter_cm,
    }


def camera_from_dict(d: dict) -> CArmCamera:
    try:
        return CArmCamera(
            source_to_iso_mm=float(d["source_to_iso_mm"]),
            source_to_detector_mm=float(d["source_to_detector_mm"]),
            detector_dims=tuple(int(x) for x in d["detector_dims"]),
            pixel_pitch_mm=float(d["pixel_pitch_mm"]),
            carm_rotation_deg=float(d["carm_rotation_deg"]),
            carm_angulation_deg=float(d["carm_angulation_deg"]),
            fov_diameter_cm=float(d["fov_diameter_cm"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedHeaderError(f"bad camera record: {exc}") from exc


def save_camera(camera: CArmCamera, path) -> Path:
    path = Path(path)
    _dump_json(camera_to_dict(camera), path)
    return path


def load_camera(path) -> CArmCamera:
    header = _read_header(Path(path), ("source_to_iso_mm", "source_to_detector_mm",
                                       "detector_dims", "pixel_pitch_mm"))
    return camera_from_dict(header)


__all__ = [
    "DataSizeMismatchError", "MalformedHeaderError", "camera_from_dict",
    "camera_to_dict", "export_pgm", "load_camera", "load_image",
    "load_transform", "load_volume", "save_camera", "save_image",
    "save_transform", "save_volume", "transform_from_dict", "transform_to_dict",
]
