import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from camscope.cam import Heatmap
from camscope.render import (JET_ANCHORS, ImageFormatError, RgbImage, apply_colormap, colorize_labels,
                             hstack, normalize_heatmap, overlay, read_netpbm_bytes, read_pgm_ppm,
                             round_half_up, tensor_to_rgb, vstack, write_pgm, write_ppm)


class TestNormalize:
    def test_minmax_example(self):
        np.testing.assert_allclose(normalize_heatmap(np.array([0.0, 5.0, 10.0])), [0.0, 0.5, 1.0], atol=0)

    def test_constant_map(self):
        np.testing.assert_array_equal(normalize_heatmap(np.full((3, 3), 7.0)), np.full((3, 3), 0.5))

    def test_accepts_heatmap(self):
        hm = Heatmap(np.array([[-1.0, 2.0]]), np.array([[0.0, 2.0]]))
        np.testing.assert_array_equal(normalize_heatmap(hm), [[0.0, 1.0]])

    def test_none_clamps(self):
        np.testing.assert_array_equal(normalize_heatmap(np.array([-1.0, 0.3, 4.0]), "none"), [0.0, 0.3, 1.0])

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (4, 4), elements=st.floats(-1e6, 1e6)))
    def test_range(self, m):
        n = normalize_heatmap(m)
        assert n.min() >= 0.0 and n.max() <= 1.0


class TestColormap:
    def test_anchors_exact(self):
        for pos, rgb in JET_ANCHORS:
            assert tuple(apply_colormap(np.array([[pos]])).pixels[0, 0]) == rgb

    def test_midpoint_rounds_half_up(self):
        # halfway between (5,255,255) and (255,255,0): blue 127.5 -> 128
        assert tuple(apply_colormap(np.array([[0.5]])).pixels[0, 0]) == (130, 255, 128)

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            apply_colormap(np.array([[1.2]]))
        with pytest.raises(ValueError):
            apply_colormap(np.array([[np.nan]]))

    def test_channels_monotone_within_segments(self):
        for (p0, c0), (p1, c1) in zip(JET_ANCHORS, JET_ANCHORS[1:]):
            px = apply_colormap(np.linspace(p0, p1, 50)[None]).pixels[0].astype(int)
            for ch in range(3):
                d = np.diff(px[:, ch])
                assert (d >= 0).all() if c1[ch] >= c0[ch] else (d <= 0).all()

    def test_round_half_up(self):
        np.testing.assert_array_equal(round_half_up(np.array([0.5, 1.49, 2.5, 254.5])), [1, 1, 3, 255])


class TestOverlay:
    def test_alpha_extremes_and_half(self):
        base = RgbImage(np.zeros((1, 1, 3), np.uint8))
        heat = RgbImage(np.full((1, 1, 3), 255, np.uint8))
        assert overlay(base, heat, 0.0).pixels[0, 0, 0] == 0
        assert overlay(base, heat, 1.0).pixels[0, 0, 0] == 255
        assert overlay(base, heat, 0.5).pixels[0, 0, 0] == 128

    def test_mismatched_extents(self):
        with pytest.raises(ValueError):
            overlay(RgbImage(np.zeros((2, 2, 3))), RgbImage(np.zeros((2, 3, 3))))

    def test_alpha_range(self):
        img = RgbImage(np.zeros((1, 1, 3)))
        with pytest.raises(ValueError):
            overlay(img, img, 1.5)


class TestComposition:
    def test_stack_extents(self):
        a = RgbImage(np.zeros((2, 3, 3)))
        b = RgbImage(np.zeros((4, 1, 3)))
        assert (hstack([a, b]).height, hstack([a, b]).width) == (4, 6)
        assert (vstack([a, b]).height, vstack([a, b]).width) == (8, 3)

    def test_label_colours(self):
        px = colorize_labels(np.array([[0, 1]])).pixels
        assert tuple(px[0, 0]) == (0, 0, 0)
        assert tuple(px[0, 1]) != (0, 0, 0)

    def test_gray_to_rgb(self):
        from camscope.autodiff import Tensor
        img = tensor_to_rgb(Tensor(np.array([[[[0.0, 1.0]]]])))
        assert img.pixels.tolist() == [[[0, 0, 0], [255, 255, 255]]]


class TestNetpbm:
    def test_single_white_pixel(self, tmp_path):
        p = tmp_path / "w.pgm"
        p.write_bytes(b"P5\n1 1\n255\n\xff")
        t = read_pgm_ppm(p)
        assert t.shape == (1, 1, 1, 1) and t.data[0, 0, 0, 0] == 1.0

    def test_comments_allowed(self, tmp_path):
        p = tmp_path / "c.pgm"
        p.write_bytes(b"P5\n# made by hand\n2 1\n255\n\x00\x80")
        np.testing.assert_array_equal(read_netpbm_bytes(p), [[0, 128]])

    def test_ppm_round_trip(self, tmp_path, rng):
        px = rng.integers(0, 256, size=(5, 7, 3), dtype=np.uint8)
        p = tmp_path / "x.ppm"
        write_ppm(RgbImage(px), p)
        assert p.read_bytes()[:11] == b"P6\n7 5\n255\n"
        np.testing.assert_array_equal(read_netpbm_bytes(p), px)
        t = read_pgm_ppm(p)
        assert t.shape == (1, 3, 5, 7)
        np.testing.assert_array_equal(round_half_up(t.data[0].transpose(1, 2, 0) * 255), px)

    def test_pgm_round_trip(self, tmp_path, rng):
        px = rng.integers(0, 256, size=(3, 4), dtype=np.uint8)
        p = tmp_path / "x.pgm"
        write_pgm(px, p)
        np.testing.assert_array_equal(read_netpbm_bytes(p), px)

    def test_writes_are_deterministic(self, tmp_path, rng):
        img = apply_colormap(rng.random((6, 6)))
        write_ppm(img, tmp_path / "a.ppm")
        write_ppm(img, tmp_path / "b.ppm")
        assert (tmp_path / "a.ppm").read_bytes() == (tmp_path / "b.ppm").read_bytes()

    @pytest.mark.parametrize("raw,offset", [
        (b"P3\n1 1\n255\n\x00", 0),
        (b"P5\nx 1\n255\n\x00", 3),
        (b"P5\n1 1\n65535\n\x00\x00", 7),
        (b"P5\n0 1\n255\n", 3),
    ])
    def test_malformed_header_offsets(self, tmp_path, raw, offset):
        p = tmp_path / "bad.pgm"
        p.write_bytes(raw)
        with pytest.raises(ImageFormatError) as exc:
            read_netpbm_bytes(p)
        assert exc.value.offset == offset
        assert f"offset {offset}" in str(exc.value)

    def test_truncated_payload(self, tmp_path):
        p = tmp_path / "short.ppm"
        p.write_bytes(b"P6\n2 2\n255\n" + bytes(5))
        with pytest.raises(ImageFormatError, match="truncated"):
            read_netpbm_bytes(p)
