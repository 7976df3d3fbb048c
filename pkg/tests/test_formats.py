import gzip
import shutil
import struct
import subprocess

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from genint.exceptions import FormatError
from genint.formats import (
    file_checksum,
    load_idx,
    read_json,
    read_tensor_file,
    tensor_from_bytes,
    tensor_to_bytes,
    write_idx_images,
    write_idx_labels,
    write_json,
    write_tensor_file,
)

shapes = st.lists(st.integers(0, 5), min_size=0, max_size=4).map(tuple)


@settings(max_examples=60)
@given(arrays(np.float32, shapes, elements=st.floats(width=32, allow_nan=True, allow_infinity=True)))
def test_gint_round_trip_is_bit_exact(arr):
    back = tensor_from_bytes(tensor_to_bytes(arr))
    assert back.shape == arr.shape
    assert back.tobytes() == arr.astype("<f4").tobytes()


def test_gint_header_layout():
    raw = tensor_to_bytes(np.zeros((2, 3), np.float32))
    assert raw[:4] == b"GINT"
    assert struct.unpack("<I", raw[4:8])[0] == 1
    assert raw[8] == 0 and raw[9] == 2
    assert struct.unpack("<II", raw[10:18]) == (2, 3)
    assert len(raw) == 18 + 6 * 4


@pytest.mark.parametrize(
    "mutate, message",
    [
        (lambda r: b"GINX" + r[4:], "bad magic"),
        (lambda r: r[:4] + struct.pack("<I", 2) + r[8:], "version"),
        (lambda r: r[:8] + bytes([7]) + r[9:], "dtype"),
        (lambda r: r[:-1], "payload"),
    ],
)
def test_gint_corruptions_are_reported(mutate, message):
    raw = tensor_to_bytes(np.arange(6, dtype=np.float32).reshape(2, 3))
    with pytest.raises(FormatError, match=message):
        tensor_from_bytes(mutate(raw))


def test_gint_file_round_trip(tmp_path):
    arr = np.random.default_rng(0).normal(size=(3, 4, 5)).astype(np.float32)
    write_tensor_file(tmp_path / "t.gint", arr)
    assert read_tensor_file(tmp_path / "t.gint").tobytes() == arr.tobytes()


@settings(max_examples=25, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(0, 4), st.integers(1, 6), st.integers(1, 6))))
def test_idx_images_round_trip(tmp_path_factory, pixels):
    path = tmp_path_factory.mktemp("idx") / "images-idx3-ubyte"
    write_idx_images(path, pixels)
    loaded = load_idx(path)
    assert loaded.shape == pixels.shape + (1,)
    np.testing.assert_array_equal(np.rint(loaded[..., 0] * 255).astype(np.uint8), pixels)


def test_idx_labels_round_trip_and_gzip(tmp_path):
    labels = np.array([3, 1, 4, 1, 5, 9], dtype=np.uint8)
    path = tmp_path / "labels-idx1-ubyte"
    write_idx_labels(path, labels)
    np.testing.assert_array_equal(load_idx(path), labels)
    with open(path, "rb") as src, gzip.open(str(path) + ".gz", "wb") as dst:
        shutil.copyfileobj(src, dst)
    np.testing.assert_array_equal(load_idx(str(path) + ".gz"), labels)


def test_idx_header_matches_reference_layout(tmp_path):
    path = tmp_path / "x"
    write_idx_images(path, np.zeros((2, 3, 4), np.uint8))
    raw = path.read_bytes()
    assert struct.unpack(">IIII", raw[:16]) == (0x803, 2, 3, 4)
    assert len(raw) == 16 + 24


def test_idx_wrong_magic(tmp_path):
    path = tmp_path / "bad"
    path.write_bytes(struct.pack(">II", 0x1234, 0))
    with pytest.raises(FormatError, match="0x00001234"):
        load_idx(path)


def test_idx_truncated_payload(tmp_path):
    path = tmp_path / "short"
    path.write_bytes(struct.pack(">IIII", 0x803, 2, 2, 2) + b"\x00" * 5)
    with pytest.raises(FormatError, match="payload length"):
        load_idx(path)


@pytest.mark.skipif(shutil.which("git") is None, reason="git unavailable")
def test_checksum_agrees_with_git_hash_object(tmp_path):
    path = tmp_path / "blob"
    path.write_bytes(b"some bytes\n\x00\x01")
    expected = subprocess.run(["git", "hash-object", str(path)], capture_output=True, text=True, check=True).stdout.strip()
    assert file_checksum(path) == expected


def test_json_is_stable(tmp_path):
    write_json(tmp_path / "a.json", {"b": 1, "a": [1.5, 2]})
    first = (tmp_path / "a.json").read_bytes()
    write_json(tmp_path / "a.json", read_json(tmp_path / "a.json"))
    assert (tmp_path / "a.json").read_bytes() == first
