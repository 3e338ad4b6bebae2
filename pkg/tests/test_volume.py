import json

import numpy as np
import pytest

from core.volume import (
    LandmarkSet,
    MaskVolume,
    Volume,
    check_same_geometry,
    load_landmarks,
    load_mask,
    load_volume,
    save_landmarks,
    save_volume,
)
from utils.errors import GeometryError, VolumeFormatError


def _write_pair(base, dims, values, spacing=(1.0, 1.0, 1.0)):
    with open(f"{base}.json", "w") as f:
        json.dump({"dims": list(dims), "spacing": list(spacing), "dtype": "f32", "order": "x-fastest"}, f)
    np.asarray(values, dtype="<f4").tofile(f"{base}.raw")


def test_load_decodes_x_fastest(tmp_path):
    base = str(tmp_path / "vol")
    _write_pair(base, (2, 2, 2), np.arange(8))
    volume = load_volume(base)
    assert volume.dims == (2, 2, 2)
    assert volume.data[0, 0, 0] == 0
    assert volume.data[1, 0, 0] == 1
    assert volume.data[0, 1, 0] == 2
    assert volume.data[0, 0, 1] == 4
    assert volume.data[1, 1, 1] == 7


def test_load_accepts_either_member_of_the_pair(tmp_path):
    base = str(tmp_path / "vol")
    _write_pair(base, (2, 2, 2), np.arange(8))
    assert np.array_equal(load_volume(base + ".json").data, load_volume(base + ".raw").data)


def test_payload_size_mismatch_is_rejected(tmp_path):
    base = str(tmp_path / "short")
    _write_pair(base, (2, 2, 2), np.arange(7))
    with pytest.raises(VolumeFormatError):
        load_volume(base)


def test_missing_payload_raises_file_not_found(tmp_path):
    base = str(tmp_path / "lonely")
    with open(f"{base}.json", "w") as f:
        json.dump({"dims": [2, 2, 2], "spacing": [1, 1, 1]}, f)
    with pytest.raises(FileNotFoundError):
        load_volume(base)


def test_non_finite_payload_is_rejected(tmp_path):
    base = str(tmp_path / "nan")
    values = np.zeros(8)
    values[3] = np.nan
    _write_pair(base, (2, 2, 2), values)
    with pytest.raises(VolumeFormatError):
        load_volume(base)


def test_save_zero_volume_writes_float_zeros(tmp_path):
    base = str(tmp_path / "zeros")
    save_volume(Volume((4, 4, 4), (1.0, 1.0, 1.0), np.zeros((4, 4, 4))), base)
    raw = (tmp_path / "zeros.raw").read_bytes()
    assert len(raw) == 256
    assert raw == bytes(256)


def test_save_records_spacing_as_written(tmp_path):
    base = str(tmp_path / "spaced")
    save_volume(Volume((2, 2, 2), (0.7, 0.7, 0.7), np.ones((2, 2, 2))), base)
    header = json.loads((tmp_path / "spaced.json").read_text())
    assert header["spacing"] == [0.7, 0.7, 0.7]
    assert header["dims"] == [2, 2, 2]


def test_save_load_is_bit_identical(tmp_path, rng):
    volume = Volume((5, 4, 3), (0.5, 1.0, 2.0), rng.normal(size=(5, 4, 3)))
    save_volume(volume, str(tmp_path / "rt"))
    loaded = load_volume(str(tmp_path / "rt"))
    assert loaded.dims == volume.dims
    assert loaded.spacing == volume.spacing
    assert loaded.data.tobytes() == volume.data.tobytes()


def test_normalize_rescales_to_unit_range(tmp_path):
    base = str(tmp_path / "ramp")
    _write_pair(base, (2, 2, 2), np.arange(8) * 3.0 + 10.0)
    volume = load_volume(base, normalize=True)
    assert volume.data.min() == 0.0
    assert volume.data.max() == pytest.approx(1.0)


def test_volume_is_read_only():
    volume = Volume((2, 2, 2), (1.0, 1.0, 1.0), np.zeros((2, 2, 2)))
    with pytest.raises(ValueError):
        volume.data[0, 0, 0] = 1.0


def test_volume_rejects_shape_mismatch():
    with pytest.raises(GeometryError):
        Volume((2, 2, 2), (1.0, 1.0, 1.0), np.zeros((2, 2, 3)))


def test_load_mask_binarizes(tmp_path):
    base = str(tmp_path / "mask")
    _write_pair(base, (2, 2, 2), [0.0, 0.2, 0.5, 0.7, 1.0, 0.49, 0.51, 0.0])
    mask = load_mask(base)
    assert isinstance(mask, MaskVolume)
    assert mask.data.ravel(order="F").tolist() == [0, 0, 1, 1, 1, 0, 1, 0]


def test_mask_rejects_values_outside_unit_interval():
    with pytest.raises(VolumeFormatError):
        MaskVolume((2, 2, 2), (1.0, 1.0, 1.0), np.full((2, 2, 2), 1.5))


def test_landmark_row_parses(tmp_path):
    path = tmp_path / "lm.csv"
    path.write_text("L1,3.5,2.0,1.0\n")
    landmarks = load_landmarks(str(path))
    assert landmarks.ids == ("L1",)
    assert landmarks.points.tolist() == [[3.5, 2.0, 1.0]]


def test_landmark_file_with_header_and_seven_rows(tmp_path):
    rows = ["id,x,y,z"] + [f"P{i},{i},{i},{i}" for i in range(7)]
    path = tmp_path / "lm.csv"
    path.write_text("\n".join(rows) + "\n")
    assert load_landmarks(str(path)).count == 7


def test_empty_landmark_file_is_rejected(tmp_path):
    path = tmp_path / "empty.csv"
    path.write_text("")
    with pytest.raises(VolumeFormatError):
        load_landmarks(str(path))


def test_duplicate_landmark_ids_are_rejected():
    with pytest.raises(VolumeFormatError):
        LandmarkSet(np.zeros((2, 3)), ("A", "A"))


def test_out_of_bounds_landmarks_raise_in_strict_mode(tmp_path):
    path = tmp_path / "lm.csv"
    path.write_text("A,1,1,1\nB,9,1,1\n")
    with pytest.raises(GeometryError, match="B"):
        load_landmarks(str(path), dims=(8, 8, 8), strict=True)
    assert load_landmarks(str(path), dims=(8, 8, 8)).count == 2


def test_landmarks_round_trip(tmp_path):
    landmarks = LandmarkSet(np.array([[0.1, 2.25, 3.0], [4.0, 5.5, 6.125]]), ("a", "b"))
    save_landmarks(landmarks, str(tmp_path / "lm.csv"))
    loaded = load_landmarks(str(tmp_path / "lm.csv"))
    assert loaded.ids == landmarks.ids
    assert np.array_equal(loaded.points, landmarks.points)


def test_check_same_geometry():
    a = Volume((2, 2, 2), (1.0, 1.0, 1.0), np.zeros((2, 2, 2)))
    b = Volume((2, 2, 3), (1.0, 1.0, 1.0), np.zeros((2, 2, 3)))
    check_same_geometry(a, a)
    with pytest.raises(GeometryError):
        check_same_geometry(a, b)
