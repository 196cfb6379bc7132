import math

import numpy as np
import pytest

from fixedpoint import (EncodingOverflow, FpParams, Saturation, ScaleError, centered, decode_scalar, decode_vector,
                        encode_scalar, encode_vector, on_grid, requantize)
from ntt import largest_prime_below

P = largest_prime_below(1 << 40, 2)


@pytest.fixture
def fp():
    return FpParams(10, P, 16.0)


class TestScalar:
    def test_known_value(self, fp):
        assert encode_scalar(1.5, fp) == 1536
        assert decode_scalar(1536, fp, 10) == 1.5

    def test_negative_uses_centered_residue(self, fp):
        e = encode_scalar(-0.25, fp)
        assert e == P - 256
        assert decode_scalar(e, fp, 10) == -0.25

    def test_rounds_half_up_on_grid(self, fp):
        assert encode_scalar(1 / 2048, fp) == 1
        assert encode_scalar(0.4 / 1024, fp) == 0

    def test_product_scale_decodes(self, fp):
        e = encode_scalar(1.5, fp) * encode_scalar(-2.0, fp) % P
        assert decode_scalar(e, fp, 20) == -3.0

    def test_other_scales_rejected(self, fp):
        with pytest.raises(ScaleError):
            decode_scalar(5, fp, 15)

    def test_non_finite_rejected(self, fp):
        with pytest.raises(ValueError):
            encode_scalar(math.nan, fp)

    def test_overflow_without_saturation(self, fp):
        with pytest.raises(EncodingOverflow):
            encode_scalar(2.0 ** 30, fp, saturate=False)

    def test_saturation_clamps_and_counts(self, fp):
        sat = Saturation()
        e = encode_scalar(100.0, fp, saturation=sat)
        assert decode_scalar(e, fp, 10) == 16.0
        assert sat.count == 1


class TestVector:
    def test_matches_scalar_path(self, fp, rng):
        x = np.round(rng.uniform(-8, 8, 200) * 1024) / 1024
        enc = encode_vector(x, fp)
        assert [int(v) for v in enc] == [encode_scalar(float(v), fp) for v in x]
        np.testing.assert_array_equal(decode_vector(enc, fp, 10), x)

    def test_empty(self, fp):
        assert encode_vector([], fp).size == 0

    def test_saturation_count(self, fp):
        sat = Saturation()
        enc = encode_vector([20.0, -30.0, 1.0], fp, saturation=sat)
        assert sat.count == 2
        np.testing.assert_array_equal(decode_vector(enc, fp, 10), [16.0, -16.0, 1.0])

    def test_centered_array(self):
        np.testing.assert_array_equal(centered(np.array([0, 1, P - 1, P // 2 + 1]), P), [0, 1, -1, -(P // 2)])


class TestRequantize:
    def test_scalar_and_vector(self, fp):
        assert requantize(1.2345, fp) == round(1.2345 * 1024) / 1024
        np.testing.assert_array_equal(requantize(np.array([0.0004, -0.0006]), fp), [0.0, -1 / 1024])

    def test_on_grid_units(self):
        np.testing.assert_array_equal(on_grid([0.5, -0.25], 10), [512, -256])


class TestParams:
    def test_modulus_too_small_for_accumulation(self):
        with pytest.raises(ValueError):
            FpParams(10, 1_000_003, 16.0)

    def test_even_modulus_rejected(self):
        with pytest.raises(ValueError):
            FpParams(10, 2 ** 40, 16.0)

    def test_with_scale_keeps_ring(self, fp):
        nl = fp.with_scale(16)
        assert nl.plaintext_modulus == P and nl.scale_bits == 16 and nl.clip_bound == fp.clip_bound


class TestGuardBits:
    @pytest.fixture
    def gfp(self):
        return FpParams(10, P, 16.0, guard_bits=4)

    def test_guarded_product_decodes(self, gfp):
        # an f-grid weight scaled by 2^-4 lands between f-grid points
        kv = 11 / 1024 / 16
        assert encode_scalar(kv, gfp) == 1
        w = encode_scalar(kv, gfp, scale_bits=14)
        x = encode_scalar(-2.5, gfp)
        assert decode_scalar(w * x % P, gfp, 24) == -2.5 * kv

    def test_accepted_scales(self, gfp, fp):
        assert gfp.scales == (10, 20, 14, 24)
        assert fp.scales == (10, 20)
        decode_vector([1, 2], gfp, 14)
        with pytest.raises(ScaleError):
            decode_scalar(5, fp, 24)
        with pytest.raises(ScaleError):
            decode_scalar(5, gfp, 15)

    def test_negative_guard_rejected(self):
        with pytest.raises(ValueError):
            FpParams(10, P, 16.0, guard_bits=-1)

    def test_guard_counts_toward_modulus_bound(self):
        p = largest_prime_below(1 << 30, 2)
        FpParams(10, p, 16.0)
        with pytest.raises(ValueError):
            FpParams(10, p, 16.0, guard_bits=8)
