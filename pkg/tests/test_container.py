import struct

import numpy as np
import pytest

from motionspace import container
from motionspace.errors import CorruptArtifactError


def test_roundtrip(tmp_path):
    arrays = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "scalar": np.float32(2.5), "empty": np.zeros((0, 3))}
    container.save(tmp_path / "x.bin", arrays, {"k": [1, 2]})
    back, meta = container.load(tmp_path / "x.bin")
    assert list(back) == ["a", "scalar", "empty"]
    assert np.array_equal(back["a"], arrays["a"]) and back["scalar"].shape == () and back["empty"].shape == (0, 3)
    assert meta == {"k": [1, 2]}


def test_layout_is_little_endian_float32():
    blob = container.encode({"v": np.array([1.0, -2.0])})
    assert blob[:4] == b"MSPC"
    version, hlen = struct.unpack("<IQ", blob[4:16])
    assert version == container.VERSION
    assert blob[16 + hlen:] == np.array([1.0, -2.0], dtype="<f4").tobytes()


def test_encoding_is_deterministic():
    a = {"x": np.ones(3)}
    assert container.encode(a, {"b": 1, "a": 2}) == container.encode(a, {"a": 2, "b": 1})


@pytest.mark.parametrize("mutate", [
    lambda b: b"XXXX" + b[4:],
    lambda b: b[:4] + struct.pack("<I", 99) + b[8:],
    lambda b: b[:-4],
    lambda b: b[:10],
    lambda b: b[:16] + b"}" + b[17:],
])
def test_corruption_detected(tmp_path, mutate):
    blob = container.encode({"x": np.ones((4, 4))}, {"m": 1})
    (tmp_path / "c.bin").write_bytes(mutate(blob))
    with pytest.raises(CorruptArtifactError):
        container.load(tmp_path / "c.bin")


def test_missing_file_is_corrupt_artifact(tmp_path):
    with pytest.raises(CorruptArtifactError):
        container.load(tmp_path / "nope.bin")


def test_atomic_write_leaves_no_temp_files(tmp_path):
    container.atomic_write(tmp_path / "sub" / "f.txt", "hello")
    container.atomic_write(tmp_path / "sub" / "f.txt", "again")
    assert (tmp_path / "sub" / "f.txt").read_text() == "again"
    assert [p.name for p in (tmp_path / "sub").iterdir()] == ["f.txt"]
