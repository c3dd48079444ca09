import numpy as np
import pytest

from boostdream_sidecar import wire


class TestWire:
    def test_roundtrip_bit_exact(self):
        rng = np.random.default_rng(0)
        for shape in ((4,), (3, 5), (2, 6, 3)):
            arr = rng.standard_normal(shape).astype(np.float32).astype(np.float64)
            out = wire.decode(wire.encode(arr), "x")
            assert np.array_equal(out, arr)
            assert out.shape == shape

    def test_f32_quantization_is_the_only_loss(self):
        arr = np.array([0.1, 1.0 / 3.0, np.pi])
        out = wire.decode(wire.encode(arr), "x")
        assert np.array_equal(out, arr.astype(np.float32).astype(np.float64))

    def test_length_mismatch_names_field(self):
        enc = wire.encode(np.zeros((2, 2)))
        enc["shape"] = [2, 3]
        with pytest.raises(wire.WireError, match="'payload'"):
            wire.decode(enc, "payload")

    def test_bad_dtype(self):
        enc = wire.encode(np.zeros(3))
        enc["dtype"] = "f64"
        with pytest.raises(wire.WireError, match="dtype"):
            wire.decode(enc, "x")

    def test_bad_base64(self):
        enc = wire.encode(np.zeros(3))
        enc["data"] = "!!!not-base64!!!"
        with pytest.raises(wire.WireError, match="base64"):
            wire.decode(enc, "x")

    def test_not_an_object(self):
        with pytest.raises(wire.WireError):
            wire.decode("nope", "x")
