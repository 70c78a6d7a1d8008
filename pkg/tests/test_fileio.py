import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from sparsesplat.fileio import (ImageFormatError, load_pfm, load_png, mask_from_png, mask_to_png, read_json,
                                save_pfm, save_png, write_json)


@pytest.mark.parametrize("shape", [(7, 9, 3), (7, 9)])
def test_png_round_trip_on_8bit_grid(tmp_path, rng, shape):
    img = rng.integers(0, 256, size=shape) / 255.0
    save_png(img, tmp_path / "a.png")
    np.testing.assert_array_equal(load_png(tmp_path / "a.png"), img)


def test_png_quantization_error_bounded(tmp_path, rng):
    img = rng.uniform(size=(10, 10, 3))
    save_png(img, tmp_path / "a.png")
    assert np.abs(load_png(tmp_path / "a.png") - img).max() <= 0.5 / 255 + 1e-12


@pytest.mark.parametrize("shape", [(5, 4), (5, 4, 3)])
def test_pfm_round_trip_float32_exact(tmp_path, rng, shape):
    a = rng.normal(scale=100, size=shape).astype(np.float32).astype(np.float64)
    save_pfm(a, tmp_path / "d.pfm")
    np.testing.assert_array_equal(load_pfm(tmp_path / "d.pfm"), a)


def test_pfm_layout_bottom_up_little_endian(tmp_path):
    a = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    save_pfm(a, tmp_path / "d.pfm")
    raw = (tmp_path / "d.pfm").read_bytes()
    assert raw.startswith(b"Pf\n2 3\n-1.0\n")
    body = np.frombuffer(raw[len(b"Pf\n2 3\n-1.0\n"):], dtype="<f4")
    np.testing.assert_array_equal(body, [5, 6, 3, 4, 1, 2])


def test_pfm_big_endian_accepted(tmp_path):
    a = np.arange(6, dtype=">f4").reshape(2, 3)
    (tmp_path / "b.pfm").write_bytes(b"Pf\n3 2\n1.0\n" + a[::-1].tobytes())
    np.testing.assert_array_equal(load_pfm(tmp_path / "b.pfm"), a)


def test_pfm_errors(tmp_path):
    (tmp_path / "x.pfm").write_bytes(b"P6\n1 1\n-1\n")
    with pytest.raises(ImageFormatError):
        load_pfm(tmp_path / "x.pfm")
    (tmp_path / "t.pfm").write_bytes(b"Pf\n2 2\n-1.0\n" + b"\0" * 12)
    with pytest.raises(ImageFormatError, match="expected 4"):
        load_pfm(tmp_path / "t.pfm")
    with pytest.raises(ImageFormatError):
        save_pfm(np.zeros((2, 2, 2)), tmp_path / "y.pfm")


def test_mask_round_trip_and_validation(tmp_path, rng):
    m = rng.choice([0.0, 0.5, 1.0], size=(6, 8))
    mask_to_png(m, tmp_path / "m.png")
    np.testing.assert_array_equal(mask_from_png(tmp_path / "m.png"), m)
    save_png(np.full((3, 3), 0.3), tmp_path / "bad.png")
    with pytest.raises(ImageFormatError):
        mask_from_png(tmp_path / "bad.png")


def test_json_round_trip_atomic(tmp_path):
    payload = {"b": [1, 2.5, None], "a": {"x": "y"}, "f": 0.1 + 0.2}
    write_json(tmp_path / "p.json", payload)
    assert read_json(tmp_path / "p.json") == payload
    assert [p.name for p in tmp_path.iterdir()] == ["p.json"]


@settings(max_examples=30, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(1, 6)),
              elements=st.floats(allow_nan=False, allow_infinity=False, width=32)))
def test_pfm_round_trip_property(tmp_path_factory, a):
    path = tmp_path_factory.mktemp("pfm") / "p.pfm"
    save_pfm(a, path)
    np.testing.assert_array_equal(load_pfm(path), a.astype(np.float64))
