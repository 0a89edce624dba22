import struct

import numpy as np
import pytest

from toposeg import formats
from toposeg.errors import InvalidConfig


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {"enc.w1": rng.normal(size=(4, 3, 3, 3)), "scalar": np.array(2.5), "empty": np.zeros((0, 2)), "é": np.arange(3.0)}
    path = tmp_path / "m.bin"
    formats.save_checkpoint(path, arrays)
    back = formats.load_checkpoint(path)
    assert list(back) == list(arrays)
    for k in arrays:
        assert back[k].shape == arrays[k].shape and np.array_equal(back[k], arrays[k])


def test_checkpoint_byte_layout(tmp_path):
    path = tmp_path / "m.bin"
    formats.save_checkpoint(path, {"ab": np.array([[1.0, 2.0]])})
    blob = path.read_bytes()
    expect = b"TSCK" + struct.pack("<II", 1, 1) + struct.pack("<H", 2) + b"ab" + bytes([2]) + struct.pack("<II", 1, 2)
    expect += struct.pack("<2d", 1.0, 2.0)
    assert blob == expect


@pytest.mark.parametrize(
    "mutate",
    [
        lambda b: b"XXXX" + b[4:],
        lambda b: b[:4] + struct.pack("<I", 9) + b[8:],
        lambda b: b + b"\0",
        lambda b: b[:-3],
        lambda b: b[:10],
    ],
)
def test_corrupt_checkpoints_rejected(tmp_path, mutate):
    path = tmp_path / "m.bin"
    formats.save_checkpoint(path, {"w": np.ones((2, 2))})
    path.write_bytes(mutate(path.read_bytes()))
    with pytest.raises(ValueError):
        formats.load_checkpoint(path)


def test_rgb_round_trip_png_and_ppm(tmp_path):
    img = np.random.default_rng(1).integers(0, 256, (5, 7, 3)).astype(np.uint8)
    for name in ("a.png", "a.ppm"):
        formats.write_rgb(tmp_path / name, img)
        assert np.array_equal(formats.read_rgb(tmp_path / name), img)
    assert (tmp_path / "a.ppm").read_bytes().startswith(b"P6")


def test_write_rgb_rejects_wrong_dtype(tmp_path):
    with pytest.raises(ValueError):
        formats.write_rgb(tmp_path / "a.png", np.zeros((2, 2, 3)))


@pytest.mark.parametrize("bits", [8, 16])
def test_gray_round_trip(tmp_path, bits):
    top = (1 << bits) - 1
    img = np.random.default_rng(bits).integers(0, top + 1, (6, 4))
    img[0, 0] = top
    path = tmp_path / "d.pgm"
    formats.write_gray(path, img, bits)
    assert path.read_bytes().startswith(b"P5")
    assert np.array_equal(formats.read_gray(path), img)


def test_gray_rejects_out_of_range_and_colour(tmp_path):
    with pytest.raises(ValueError):
        formats.write_gray(tmp_path / "d.pgm", np.array([[256]]), 8)
    formats.write_rgb(tmp_path / "c.png", np.zeros((2, 2, 3), np.uint8))
    with pytest.raises(ValueError):
        formats.read_gray(tmp_path / "c.png")


def test_flat_config_parsing():
    text = "# comment\nalpha = 1.5\n\nnames = a, b  # trailing\n"
    assert formats.parse_flat_config(text) == {"alpha": "1.5", "names": "a, b"}
    values = {"x": 0.1, "flag": True, "seq": (1, 2), "name": "k"}
    assert formats.parse_flat_config(formats.format_flat_config(values)) == {"x": "0.1", "flag": "true", "seq": "1,2", "name": "k"}


@pytest.mark.parametrize("text", ["novalue\n", " = 3\n", "a = 1\na = 2\n"])
def test_flat_config_errors(text):
    with pytest.raises(InvalidConfig):
        formats.parse_flat_config(text)


def test_typed_config_values():
    assert formats.config_ints("1, 2,3", "k") == (1, 2, 3)
    assert formats.config_floats("0.5,1", "k") == (0.5, 1.0)
    assert formats.config_bool("Yes", "k") is True
    for fn, raw in [(formats.config_ints, "1.5"), (formats.config_float, "x"), (formats.config_int, "2.0"), (formats.config_bool, "maybe")]:
        with pytest.raises(InvalidConfig):
            fn(raw, "k")


def test_csv_and_json_text():
    assert formats.csv_text(("a", "b"), [(1, 0.1), ("", 2)]) == "a,b\n1,0.1\n,2\n"
    assert formats.json_text({"b": 1, "a": [1.5]}) == '{"a": [1.5], "b": 1}'
