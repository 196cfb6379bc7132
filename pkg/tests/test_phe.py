import math

import numpy as np
import pytest

from ntt import crt_prime_below, largest_prime_below, ntt_for
from phe import (DepthError, OpCounters, Owner, OwnerMismatchError, PackedPlaintext, ParameterError, PheParams,
                 ScaleMismatchError, keygen, make_backend)


def grid(rng, lo, hi, size, bits=10):
    return np.round(rng.uniform(lo, hi, size) * (1 << bits)) / (1 << bits)


class TestNtt:
    def test_round_trip(self):
        p = largest_prime_below(1 << 40, 32)
        t = ntt_for(16, p)
        a = np.arange(16, dtype=object) * 12345 % p
        assert list(t.inverse(t.forward(a))) == list(a)

    def test_pointwise_product_is_negacyclic(self):
        p = largest_prime_below(1 << 30, 16)
        t = ntt_for(8, p)
        rng = np.random.default_rng(0)
        a = [int(v) for v in rng.integers(0, 100, 8)]
        b = [int(v) for v in rng.integers(0, 100, 8)]
        want = [0] * 8
        for i in range(8):
            for j in range(8):
                k, s = (i + j) % 8, 1 if i + j < 8 else -1
                want[k] += s * a[i] * b[j]
        got = t.inverse(t.forward(np.array(a, dtype=object)) * t.forward(np.array(b, dtype=object)) % p)
        assert [int(v) for v in got] == [w % p for w in want]

    def test_crt_partner(self):
        p = largest_prime_below(1 << 40, 128)
        q1 = largest_prime_below(1 << 56, 128)
        q2 = crt_prime_below(1 << 62, 64, p, q1)
        assert q2 % 128 == 1 and q1 * q2 % p == 1 and q2 < 1 << 62


class TestParams:
    def test_generate(self):
        params = PheParams.generate(n=64)
        assert params.p % 128 == 1 and params.p < 1 << 40 and params.p.bit_length() == 40
        q1, q2 = params.q_primes
        assert q1 * q2 % params.p == 1
        assert params.ct_bytes == 11 + 2 * 64 * 2 * 8

    def test_rejects_non_power_of_two(self):
        with pytest.raises(ParameterError):
            PheParams.generate(n=48)

    def test_rejects_wide_plaintext(self):
        with pytest.raises(ParameterError):
            PheParams.generate(n=64, plaintext_bits=50)

    def test_digest_depends_on_n(self):
        assert PheParams.generate(n=64).digest != PheParams.generate(n=128).digest

    def test_keygen_deterministic(self, small_params):
        a = keygen(small_params, Owner.CLIENT, 5)
        assert a == keygen(small_params, Owner.CLIENT, 5)
        assert a != keygen(small_params, Owner.SERVER, 5)
        assert set(np.unique(a.coeffs)) <= {-1, 0, 1}


class TestContract:
    def test_encrypt_decrypt(self, backend, small_params, small_fp, client_key, rng):
        x = grid(rng, -8, 8, small_params.n)
        ct = backend.encrypt(PackedPlaintext.from_values(x, small_fp, small_params.n), client_key)
        np.testing.assert_array_equal(backend.decrypt(ct, client_key).decode(small_fp), x)
        assert ct.owner == Owner.CLIENT and ct.mult_depth == 0

    def test_add_and_multiply(self, backend, small_params, small_fp, client_key, rng):
        n = small_params.n
        x, y, w = grid(rng, -4, 4, n), grid(rng, -4, 4, n), grid(rng, -2, 2, n)
        enc = lambda v: backend.encrypt(PackedPlaintext.from_values(v, small_fp, n), client_key)
        plain = lambda v, s=None: PackedPlaintext.from_values(v, small_fp, n, scale_bits=s)
        s = backend.add_ct(enc(x), enc(y))
        s = backend.add_plain(s, plain(w))
        prod = backend.mul_plain(s, plain(w))
        prod = backend.add_plain(prod, plain(x * 0.5, 20))
        out = backend.decrypt(prod, client_key)
        assert out.scale_bits == 20
        np.testing.assert_array_equal(out.decode(small_fp), (x + y + w) * w + x * 0.5)

    def test_counters(self, backend, small_params, small_fp, client_key):
        pt = PackedPlaintext.from_values([1.0], small_fp, small_params.n)
        ct = backend.encrypt(pt, client_key)
        backend.mul_plain(backend.add_ct(ct, ct), pt)
        backend.add_plain(ct, pt)
        c = backend.counters_snapshot()
        assert (c.encrypt, c.add_ct, c.add_plain, c.mult_plain, c.perm) == (1, 1, 1, 1, 0)
        assert c.mult == 1 and c.add == 2
        backend.counters_reset()
        assert backend.counters_snapshot() == OpCounters()
        assert c.mult == 1

    def test_depth_limit(self, backend, small_params, small_fp, client_key):
        pt = PackedPlaintext.from_values([1.0], small_fp, small_params.n)
        ct = backend.mul_plain(backend.encrypt(pt, client_key), pt)
        with pytest.raises(DepthError):
            backend.mul_plain(ct, pt)

    def test_owner_enforced(self, backend, small_params, small_fp, client_key, server_key):
        pt = PackedPlaintext.from_values([1.0], small_fp, small_params.n)
        a = backend.encrypt(pt, client_key)
        b = backend.encrypt(pt, server_key)
        with pytest.raises(OwnerMismatchError):
            backend.decrypt(a, server_key)
        with pytest.raises(OwnerMismatchError):
            backend.add_ct(a, b)

    def test_scale_enforced(self, backend, small_params, small_fp, client_key):
        pt = PackedPlaintext.from_values([1.0], small_fp, small_params.n)
        ct = backend.encrypt(pt, client_key)
        with pytest.raises(ScaleMismatchError):
            backend.add_plain(ct, PackedPlaintext.from_values([1.0], small_fp, small_params.n, scale_bits=20))
        with pytest.raises(ScaleMismatchError):
            backend.add_ct(ct, backend.mul_plain(ct, pt))

    def test_foreign_params_rejected(self, backend, small_fp, client_key):
        other = PheParams.generate(n=128)
        foreign = make_backend("clear", other, seed=0)
        ct = foreign.encrypt(PackedPlaintext.from_values([1.0], small_fp, 128), keygen(other, Owner.CLIENT, 1))
        with pytest.raises(ParameterError):
            backend.decrypt(ct, client_key)

    def test_serialization(self, backend, small_params, small_fp, client_key):
        ct = backend.encrypt(PackedPlaintext.from_values([0.5, -3.0], small_fp, small_params.n), client_key)
        data = backend.serialize(ct)
        assert len(data) == small_params.ct_bytes
        back = backend.deserialize(data)
        assert backend.serialize(back) == data
        assert back.owner == ct.owner and back.scale_bits == ct.scale_bits
        np.testing.assert_array_equal(backend.decrypt(back, client_key).decode(small_fp)[:2], [0.5, -3.0])
        with pytest.raises(ValueError):
            backend.deserialize(data[:-1])

    def test_noise_budget(self, backend, small_params, small_fp, client_key):
        ct = backend.encrypt(PackedPlaintext.from_values([1.0], small_fp, small_params.n), client_key)
        budget = backend.noise_budget(ct, client_key)
        if backend.kind == "clear":
            assert math.isinf(budget)
        else:
            assert budget > 20


class TestBackendEquivalence:
    """Random depth-1 programs decrypt identically on both backends."""

    @pytest.mark.parametrize("count", [40, pytest.param(1000, marks=pytest.mark.slow)])
    def test_random_sequences(self, small_params, small_fp, client_key, count):
        rng = np.random.default_rng(99)
        n = small_params.n
        clear = make_backend("clear", small_params, seed=1)
        rlwe = make_backend("rlwe", small_params, seed=2)
        for _ in range(count):
            vals = [grid(rng, -2, 2, n) for _ in range(4)]
            multiply = rng.random() < 0.5
            outs = []
            for be in (clear, rlwe):
                a = be.encrypt(PackedPlaintext.from_values(vals[0], small_fp, n), client_key)
                b = be.encrypt(PackedPlaintext.from_values(vals[1], small_fp, n), client_key)
                s = be.add_plain(be.add_ct(a, b), PackedPlaintext.from_values(vals[2], small_fp, n))
                if multiply:
                    s = be.mul_plain(s, PackedPlaintext.from_values(vals[3], small_fp, n))
                outs.append(be.decrypt(s, client_key).slots)
            np.testing.assert_array_equal(outs[0], outs[1])
