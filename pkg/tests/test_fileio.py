"""Raw/JSON round-trips and failure modes of the on-disk formats."""

import json

import numpy as np
import pytest

from carmreg.core import CArmCamera, Image2D, RigidTransform, Volume, rotation_about_axis
from carmreg.fileio import (
    DataSizeMismatchError,
    MalformedHeaderError,
    export_pgm,
    load_camera,
    load_image,
    load_transform,
    load_volume,
    save_camera,
    save_image,
    save_transform,
    save_volume,
)


def test_volume_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(7)
    data = rng.normal(size=(5, 4, 3)).astype(np.float32)
    vol = Volume(data, (0.5, 0.75, 1.25), (-1.0, -2.0, -3.0), fov_diameter_cm=22.0)
    save_volume(vol, tmp_path / "test")
    back = load_volume(tmp_path / "test.vol.json")
    np.testing.assert_array_equal(back.data, vol.data)
    np.testing.assert_array_equal(back.spacing_mm, vol.spacing_mm)
    np.testing.assert_array_equal(back.origin_mm, vol.origin_mm)
    assert back.fov_diameter_cm == 22.0
    assert back.dims == (3, 4, 5)


def test_volume_raw_is_x_fastest(tmp_path):
    data = np.arange(24, dtype=np.float32).reshape(2, 3, 4)  # [z, y, x]
    save_volume(Volume(data, (1, 1, 1), (0, 0, 0)), tmp_path / "v")
    raw = np.fromfile(tmp_path / "v.vol.raw", dtype="<f4")
    # flat order must walk x first, then y, then z
    np.testing.assert_array_equal(raw[:4], [0, 1, 2, 3])
    np.testing.assert_array_equal(raw[4:8], [4, 5, 6, 7])
    header = json.loads((tmp_path / "v.vol.json").read_text())
    assert header["dims"] == [4, 3, 2]


def test_image_roundtrip(tmp_path):
    rng = np.random.default_rng(11)
    img = Image2D(rng.normal(size=(6, 8)).astype(np.float32), 1.5, fov_diameter_cm=27.0)
    save_image(img, tmp_path / "shot")
    back = load_image(tmp_path / "shot")
    np.testing.assert_array_equal(back.data, img.data)
    assert back.pixel_pitch_mm == 1.5
    assert back.dims == (8, 6)


def test_missing_file_raises_file_not_found(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_volume(tmp_path / "nope.vol.json")


def test_malformed_header_rejected(tmp_path):
    (tmp_path / "bad.vol.json").write_text("{ not json")
    with pytest.raises(MalformedHeaderError):
        load_volume(tmp_path / "bad.vol.json")


def test_header_missing_fields_rejected(tmp_path):
    (tmp_path / "bad.vol.json").write_text(json.dumps({"dims": [2, 2, 2]}))
    with pytest.raises(MalformedHeaderError):
        load_volume(tmp_path / "bad.vol.json")


def test_size_mismatch_rejected(tmp_path):
    data = np.zeros((2, 2, 2), dtype=np.float32)
    save_volume(Volume(data, (1, 1, 1), (0, 0, 0)), tmp_path / "v")
    with open(tmp_path / "v.vol.raw", "ab") as fh:
        fh.write(b"\x00\x00\x00\x00")
    with pytest.raises(DataSizeMismatchError):
        load_volume(tmp_path / "v")


def test_image_size_mismatch_rejected(tmp_path):
    save_image(Image2D(np.zeros((3, 3), dtype=np.float32), 1.0), tmp_path / "i")
    (tmp_path / "i.img.raw").write_bytes(b"\x00" * 8)
    with pytest.raises(DataSizeMismatchError):
        load_image(tmp_path / "i")


def test_transform_roundtrip_exact(tmp_path):
    t = RigidTransform(rotation_about_axis([1.0, 2.0, 0.5], 35.0),
                       [0.125, -7.5, 3.0])
    save_transform(t, tmp_path / "t.json")
    back = load_transform(tmp_path / "t.json")
    # JSON float encoding round-trips doubles exactly
    np.testing.assert_array_equal(back.rotation, t.rotation)
    np.testing.assert_array_equal(back.translation_mm, t.translation_mm)
    header = json.loads((tmp_path / "t.json").read_text())
    assert len(header["rotation"]) == 9


def test_camera_roundtrip(tmp_path):
    cam = CArmCamera(810.0, 1195.0, (128, 96), 2.0, 30.0, -15.0, 12.0)
    save_camera(cam, tmp_path / "cam.json")
    assert load_camera(tmp_path / "cam.json") == cam


def test_pgm_export(tmp_path):
    img = Image2D(np.array([[0.0, 1.0], [2.0, 4.0]], dtype=np.float32), 1.0)
    out = export_pgm(img, tmp_path / "img.pgm")
    blob = out.read_bytes()
    assert blob.startswith(b"P5\n2 2\n65535\n")
    pix = np.frombuffer(blob[len(b"P5\n2 2\n65535\n"):], dtype=">u2").reshape(2, 2)
    np.testing.assert_array_equal(pix, [[0, 16384], [32768, 65535]])


def test_pgm_window_clamps(tmp_path):
    img = Image2D(np.array([[-5.0, 0.5], [1.0, 50.0]], dtype=np.float32), 1.0)
    out = export_pgm(img, tmp_path / "w.pgm", window=(0.0, 1.0))
    pix = np.frombuffer(out.read_bytes()[len(b"P5\n2 2\n65535\n"):], dtype=">u2")
    np.testing.assert_array_equal(pix, [0, 32768, 65535, 65535])
