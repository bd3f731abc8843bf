import struct

import numpy as np
import pytest

from camscope import autodiff as ad
from camscope.autodiff import ShapeError
from camscope.unet import (MAGIC, WIDE_CHANNELS, ConfigError, UNetConfig, WeightFileError,
                           build_unet, forward, load_weights, predict_classes, save_weights)


def conv_params(cin, cout, k=3):
    return cout * cin * k * k + cout


class TestConfig:
    @pytest.mark.parametrize("kwargs,field", [
        (dict(depth=1, channels=(4,)), "depth"),
        (dict(depth=2, channels=(4,)), "channels"),
        (dict(depth=2, channels=(4, 0)), "channels"),
        (dict(depth=2, channels=(4, 2), num_classes=1), "num_classes"),
    ])
    def test_invalid_field_named(self, kwargs, field):
        with pytest.raises(ConfigError) as exc:
            UNetConfig(**kwargs)
        assert exc.value.field == field


class TestBuild:
    def test_full_width_configuration_parameter_count(self):
        model = build_unet(UNetConfig(depth=4, channels=WIDE_CHANNELS, in_channels=1, num_classes=3))
        expected = (
            conv_params(1, 64) + conv_params(64, 64)
            + conv_params(64, 128) + conv_params(128, 128)
            + conv_params(128, 256) + conv_params(256, 256)
            + conv_params(256, 512) + conv_params(512, 512)
            + conv_params(512, 256) + conv_params(512, 256) + conv_params(256, 256)
            + conv_params(256, 128) + conv_params(256, 128) + conv_params(128, 128)
            + conv_params(128, 64) + conv_params(128, 64) + conv_params(64, 64)
            + conv_params(64, 3, k=1)
        )
        assert model.parameter_count() == expected

    def test_seeded_build_is_bitwise_reproducible(self):
        a = build_unet(UNetConfig(depth=2, channels=(8, 4), seed=0))
        b = build_unet(UNetConfig(depth=2, channels=(8, 4), seed=0))
        assert list(a.params) == list(b.params)
        for k in a.params:
            assert a.params[k].tobytes() == b.params[k].tobytes()

    def test_he_std_for_fan_in_144(self):
        # bottleneck.conv1 maps the 16-channel top level to 32 channels: fan_in = 16 * 3 * 3
        model = build_unet(UNetConfig(depth=2, channels=(32, 16), seed=11))
        w = model.params["bottleneck.conv1.weight"]
        assert w.shape == (32, 16, 3, 3)
        target = np.sqrt(2 / 144)
        assert abs(w.std() - target) / target < 0.10

    def test_all_finite(self, desk_model):
        assert all(np.isfinite(p).all() for p in desk_model.params.values())


class TestForward:
    def test_logit_shape(self, small_model, rng):
        logits, _, _ = forward(small_model, rng.random((1, 1, 12, 10)))
        assert logits.shape == (1, 3, 12, 10)

    def test_bottleneck_resolution(self, desk_model, rng):
        _, caps, _ = forward(desk_model, rng.random((1, 1, 64, 64)))
        shapes = {c.name: c.tensor.shape for c in caps}
        assert shapes["bottleneck"] == (1, 64, 8, 8)
        assert shapes["enc1.post"] == (1, 8, 64, 64)
        assert shapes["dec1.post"] == (1, 8, 64, 64)
        assert [c.name for c in caps] == desk_model.capture_names
        assert len(set(shapes)) == len(caps)

    def test_zero_weights_give_bias(self, rng):
        model = build_unet(UNetConfig(depth=2, channels=(4, 2), num_classes=3))
        for k in model.params:
            model.params[k] = np.zeros_like(model.params[k])
        model.params["head.bias"] = np.array([0.5, -1.0, 2.0])
        logits, _, _ = forward(model, rng.random((1, 1, 4, 6)))
        for c, v in enumerate([0.5, -1.0, 2.0]):
            np.testing.assert_array_equal(logits.data[0, c], np.full((4, 6), v))

    def test_indivisible_input_names_divisor(self, desk_model):
        with pytest.raises(ShapeError, match="divisible by 8"):
            forward(desk_model, np.zeros((1, 1, 60, 64)))

    def test_wrong_channel_count(self, small_model):
        with pytest.raises(ShapeError):
            forward(small_model, np.zeros((1, 3, 8, 8)))

    def test_softmax_normalised(self, small_model, rng):
        logits, _, _ = forward(small_model, rng.random((1, 1, 8, 8)))
        np.testing.assert_allclose(ad.softmax_channels(logits).data.sum(axis=1), 1.0, atol=1e-12)

    def test_logits_bitwise_reproducible(self, small_model, rng):
        x = rng.random((1, 1, 8, 8))
        assert forward(small_model, x)[0].data.tobytes() == forward(small_model, x)[0].data.tobytes()

    def test_captures_are_live_tape_nodes(self, small_model, rng):
        logits, caps, tape = forward(small_model, rng.random((1, 1, 8, 8)))
        s1, s2 = rng.normal(size=logits.shape), rng.normal(size=logits.shape)
        for cap in caps:
            assert tape.tensors[cap.node] is cap.tensor
        g = []
        for seed in (s1, s2):
            y = ad.sum_all(ad.mul(logits, tape.leaf(seed)))
            g.append(tape.backward(y, [caps[0].node])[caps[0].node].data)
        assert np.abs(g[0]).max() > 0
        assert not np.allclose(g[0], g[1])

    def test_parameter_leaves_registered(self, small_model):
        _, _, tape = forward(small_model, np.zeros((1, 1, 4, 4)))
        assert set(small_model.params) <= set(tape.leaves)


class TestPredict:
    def test_larger_channel_wins(self):
        logits = np.zeros((1, 2, 3, 3))
        logits[0, 1] = 1.0
        np.testing.assert_array_equal(predict_classes(logits), np.ones((3, 3)))

    def test_ties_go_low(self):
        np.testing.assert_array_equal(predict_classes(np.zeros((1, 4, 2, 2))), np.zeros((2, 2)))

    def test_matches_loop_oracle(self, rng):
        logits = rng.integers(0, 3, size=(1, 4, 5, 6)).astype(float)  # many ties
        expected = np.zeros((5, 6), int)
        for i in range(5):
            for j in range(6):
                best = 0
                for c in range(1, 4):
                    if logits[0, c, i, j] > logits[0, best, i, j]:
                        best = c
                expected[i, j] = best
        np.testing.assert_array_equal(predict_classes(logits), expected)


class TestWeightFile:
    def test_round_trip_bitwise(self, small_model, tmp_path):
        p = tmp_path / "m.csw"
        save_weights(small_model, p)
        loaded = load_weights(p)
        assert loaded.config == small_model.config
        for k, v in small_model.params.items():
            assert loaded.params[k].tobytes() == v.tobytes()
        save_weights(loaded, tmp_path / "again.csw")
        assert (tmp_path / "again.csw").read_bytes() == p.read_bytes()

    def test_header_layout(self, small_model, tmp_path):
        p = tmp_path / "m.csw"
        save_weights(small_model, p)
        raw = p.read_bytes()
        assert raw[:8] == MAGIC == b"CAMSCOPE"
        assert struct.unpack("<H", raw[8:10]) == (1,)
        assert struct.unpack("<IIIIII", raw[10:34]) == (2, 8, 4, 1, 3, 3)
        count, nlen = struct.unpack("<IH", raw[34:40])
        assert count == len(small_model.params)
        assert raw[40:40 + nlen].decode() == "enc1.conv1.weight"

    def test_bad_magic(self, small_model, tmp_path):
        p = tmp_path / "m.csw"
        save_weights(small_model, p)
        p.write_bytes(b"XAMSCOPE" + p.read_bytes()[8:])
        with pytest.raises(WeightFileError, match="bad magic"):
            load_weights(p)

    def test_depth_mismatch(self, tmp_path):
        p = tmp_path / "deep.csw"
        save_weights(build_unet(UNetConfig(depth=4, channels=(16, 8, 4, 2))), p)
        with pytest.raises(WeightFileError, match="shape mismatch"):
            load_weights(p, UNetConfig(depth=2, channels=(8, 4)))

    def test_truncated(self, small_model, tmp_path):
        p = tmp_path / "m.csw"
        save_weights(small_model, p)
        p.write_bytes(p.read_bytes()[:-5])
        with pytest.raises(WeightFileError, match="truncated"):
            load_weights(p)
