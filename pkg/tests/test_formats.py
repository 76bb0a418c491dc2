"""Round-trip tests for the binary image formats."""

import numpy as np
import pytest

from occgeom import formats


class TestPfm:
    def test_roundtrip_float32_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        data = rng.uniform(0, 50, size=(13, 17)).astype(np.float32).astype(np.float64)
        p = tmp_path / "d.pfm"
        formats.write_pfm(p, data)
        back = formats.read_pfm(p)
        assert np.array_equal(back, data)

    def test_header_is_little_endian_negative_scale(self, tmp_path):
        p = tmp_path / "d.pfm"
        formats.write_pfm(p, np.zeros((2, 3)))
        head = p.read_bytes()[:16]
        assert head.startswith(b"Pf\n3 2\n-1.0\n")

    def test_rejects_non_2d(self, tmp_path):
        with pytest.raises(ValueError):
            formats.write_pfm(tmp_path / "x.pfm", np.zeros((2, 2, 2)))


class TestPgm:
    def test_pgm16_roundtrip(self, tmp_path):
        rng = np.random.default_rng(1)
        data = rng.integers(0, 65536, size=(7, 9)).astype(np.uint16)
        p = tmp_path / "d.pgm"
        formats.write_pgm16(p, data)
        back = formats.read_pgm(p)
        assert np.array_equal(back, data)

    def test_pgm8_roundtrip(self, tmp_path):
        data = np.array([[0, 128], [255, 7]], dtype=np.uint8)
        p = tmp_path / "m.pgm"
        formats.write_pgm8(p, data)
        assert np.array_equal(formats.read_pgm(p), data)


class TestPpm:
    def test_roundtrip_quantized(self, tmp_path):
        rng = np.random.default_rng(2)
        img = rng.uniform(size=(6, 5, 3))
        p = tmp_path / "i.ppm"
        formats.write_ppm(p, img)
        back = formats.read_ppm(p)
        assert back.shape == img.shape
        assert np.max(np.abs(back - img)) <= 0.5 / 255 + 1e-12

    def test_exact_on_quantized_values(self, tmp_path):
        img = np.array([[[0, 127, 255]]], dtype=np.float64) / 255.0
        p = tmp_path / "q.ppm"
        formats.write_ppm(p, img)
        assert np.array_equal(formats.read_ppm(p), img)
