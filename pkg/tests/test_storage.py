"""Tests for dataset, map and checkpoint storage."""

import hashlib
import struct

import numpy as np
import pandas as pd
import pytest

from src.py_pacnn.core.exceptions import FormatError
from src.py_pacnn.core.gt_maps import LinearProfile, TanhFitParams
from src.py_pacnn.core.model import ModelParams
from src.py_pacnn.core.storage import (
    DatasetStore,
    decode_checkpoint,
    decode_map,
    decode_rle,
    encode_checkpoint,
    encode_map,
    encode_rle,
    read_annotations,
    read_checkpoint,
    read_map,
    write_checkpoint,
    write_map,
    write_pgm,
    write_table,
)


@pytest.fixture
def params():
    """Provide a small parameter set with metadata."""
    rng = np.random.default_rng(1)
    return ModelParams(
        {"conv.weight": rng.normal(size=(2, 1, 3, 3)).astype(np.float32), "pa.alpha": np.array([1.5], np.float32)},
        {"density_scale": 100.0},
    )


def test_map_header_layout():
    """Test that a map starts with magic, version, width and height."""
    data = encode_map(np.zeros((2, 3)))
    assert data[:4] == b"PACM"
    assert data[4] == 1
    assert struct.unpack("<II", data[5:13]) == (3, 2)
    assert len(data) == 13 + 4 * 6


def test_map_values_survive_as_float32(tmp_path):
    """Test that float32 map values are written and read back exactly."""
    values = np.random.default_rng(0).normal(size=(5, 7)).astype(np.float32)
    write_map(tmp_path / "m.pacm", values)
    np.testing.assert_array_equal(read_map(tmp_path / "m.pacm"), values)


def test_map_bad_magic():
    """Test that a map with the wrong magic is rejected."""
    data = bytearray(encode_map(np.zeros((1, 1))))
    data[:4] = b"NOPE"
    with pytest.raises(FormatError):
        decode_map(bytes(data))


def test_map_truncated_payload():
    """Test that truncated maps and headers are rejected."""
    with pytest.raises(FormatError):
        decode_map(encode_map(np.zeros((3, 3)))[:-2])
    with pytest.raises(FormatError):
        decode_map(b"PAC")


def test_map_rejects_non_2d():
    """Test that only 2D arrays can be encoded as maps."""
    with pytest.raises(FormatError):
        encode_map(np.zeros((1, 2, 2)))


def test_checkpoint_write_and_read(tmp_path, params):
    """Test that a checkpoint keeps arrays and metadata and is identified by its sha256."""
    checkpoint = write_checkpoint(tmp_path / "model.pacp", params)
    loaded = read_checkpoint(tmp_path / "model.pacp")
    assert set(loaded.arrays) == {"conv.weight", "pa.alpha"}
    np.testing.assert_array_equal(loaded.arrays["conv.weight"], params.arrays["conv.weight"])
    assert loaded.meta == {"density_scale": 100.0}
    assert checkpoint == hashlib.sha256((tmp_path / "model.pacp").read_bytes()).hexdigest()


def test_identical_params_give_identical_ids(tmp_path, params):
    """Test that equal parameters produce equal checkpoint ids."""
    first = write_checkpoint(tmp_path / "a.pacp", params)
    second = write_checkpoint(tmp_path / "b.pacp", params.copy())
    assert first == second


def test_checkpoint_trailing_bytes(params):
    """Test that bytes after the last record are rejected."""
    with pytest.raises(FormatError):
        decode_checkpoint(encode_checkpoint(params) + b"\x00")


def test_checkpoint_truncated(params):
    """Test that a truncated checkpoint is rejected."""
    with pytest.raises(FormatError):
        decode_checkpoint(encode_checkpoint(params)[:-8])


def test_checkpoint_bad_magic(params):
    """Test that a checkpoint with the wrong magic is rejected."""
    with pytest.raises(FormatError):
        decode_checkpoint(b"XXXX" + encode_checkpoint(params)[4:])


def test_rle_mask():
    """Test that RLE counts cover the mask and start with a false run."""
    mask = np.zeros((4, 5), dtype=bool)
    mask[1:3, 2:] = True
    rle = encode_rle(mask)
    assert sum(rle.counts) == 20
    np.testing.assert_array_equal(decode_rle(rle), mask)

    starts_true = np.ones((2, 2), dtype=bool)
    assert encode_rle(starts_true).counts == [0, 4]


def test_scenes_round_trip(tmp_path, scenes):
    """Test that scenes keep heads, ROI, image, camera and horizon through storage."""
    scenes[0].roi = np.ones((scenes[0].height, scenes[0].width), dtype=bool)
    scenes[0].roi[:10] = False
    store = DatasetStore(tmp_path / "ds")
    store.write_scenes(scenes)

    loaded = store.read_scenes()
    assert [s.id for s in loaded] == [s.id for s in scenes]
    np.testing.assert_array_equal(loaded[0].heads, scenes[0].heads)
    np.testing.assert_array_equal(loaded[0].roi, scenes[0].roi)
    np.testing.assert_array_equal(loaded[1].image, scenes[1].image)
    assert loaded[2].camera == scenes[2].camera
    assert loaded[2].horizon_row == scenes[2].horizon_row


def test_read_without_images(tmp_path, scenes):
    """Test that scenes can be read without loading images."""
    store = DatasetStore(tmp_path / "ds")
    store.write_scenes(scenes)
    assert all(s.image is None for s in store.read_scenes(with_images=False))


def test_multi_channel_images(tmp_path, make_scene):
    """Test that a three-channel image is stored per channel and restacked in order."""
    scene = make_scene([[1.0, 1.0]], image=np.arange(3 * 32 * 32, dtype=np.float32).reshape(3, 32, 32))
    store = DatasetStore(tmp_path / "ds")
    store.write_scenes([scene])
    np.testing.assert_array_equal(store.read_scenes()[0].image, scene.image)


def test_multi_channel_images_with_dotted_ids(tmp_path, make_scene):
    """Test that scene ids containing dots or glob characters keep their own channels."""
    rng = np.random.default_rng(4)
    ids = ["cam.1", "cam.1.c1", "site[2].v1.0"]
    scenes = [make_scene([[1.0, 1.0]], scene_id=i, image=rng.normal(size=(3, 32, 32)).astype(np.float32))
              for i in ids]  # fmt: skip
    store = DatasetStore(tmp_path / "ds")
    store.write_scenes(scenes)

    loaded = store.read_scenes()
    assert [s.id for s in loaded] == ids
    for original, restored in zip(scenes, loaded, strict=True):
        assert restored.image.shape == (3, 32, 32)
        np.testing.assert_array_equal(restored.image, original.image)


def test_missing_dataset(tmp_path):
    """Test that reading a directory without scenes.jsonl fails."""
    with pytest.raises(FileNotFoundError):
        DatasetStore(tmp_path / "nothing").read_scenes()


def test_fits_round_trip(tmp_path):
    """Test that tanh and linear perspective fits are written and read back."""
    store = DatasetStore(tmp_path)
    fits = {"a": TanhFitParams(a=1.0, b=0.1, c=2.0, residual_rms=0.01, n_rows_used=5), "b": LinearProfile(0.2, 1.0)}
    store.write_fits(fits)
    assert store.read_fits() == fits


def test_ground_truth_maps(tmp_path):
    """Test that density and perspective GT maps are stored per scene."""
    store = DatasetStore(tmp_path)
    store.write_ground_truth("s", np.ones((4, 4)), np.full((4, 4), 0.5))
    assert store.read_density("s").sum() == 16.0
    assert store.read_perspective("s")[0, 0] == 0.5


def test_invalid_annotation_line(tmp_path):
    """Test that a malformed annotation record raises FormatError."""
    path = tmp_path / "scenes.jsonl"
    path.write_text('{"id": "x", "width": "wide"}\n', encoding="utf-8")
    with pytest.raises(FormatError):
        read_annotations(path)


def test_pgm_heatmap(tmp_path):
    """Test that a heatmap is min-max scaled into an 8-bit PGM."""
    write_pgm(tmp_path / "h.pgm", np.array([[0.0, 1.0], [2.0, 4.0]]))
    data = (tmp_path / "h.pgm").read_bytes()
    header = b"P5\n2 2\n255\n"
    assert data.startswith(header)
    assert list(data[len(header) :]) == [0, 64, 128, 255]


def test_pgm_of_constant_map(tmp_path):
    """Test that a constant map is written as all zeros."""
    write_pgm(tmp_path / "h.pgm", np.full((2, 3), 7.0))
    assert set((tmp_path / "h.pgm").read_bytes()[len(b"P5\n3 2\n255\n") :]) == {0}


@pytest.mark.parametrize("name", ["table.csv", "table.jsonl"])
def test_write_table(tmp_path, name):
    """Test that result tables are written as CSV or JSON lines."""
    table = pd.DataFrame({"id": ["a", "b"], "error": [0.5, -1.0]})
    write_table(tmp_path / name, table)
    if name.endswith(".csv"):
        loaded = pd.read_csv(tmp_path / name)
    else:
        loaded = pd.read_json(tmp_path / name, lines=True)
    assert loaded["error"].tolist() == [0.5, -1.0]
