"""
Symmetric BFV backend over Z_q[X]/(X^n + 1) with q = q1*q2 in residue form.

Ciphertexts are kept in the NTT domain per residue (c0_i, c1_i) with
c0 + c1*s = Delta*m + e. Slot batching is the negacyclic NTT mod p:
slot vector -> coefficients by the inverse transform, coefficients -> slots
by the forward one.
"""
from __future__ import annotations

import numpy as np

from ntt import ntt_for
from phe import (HeBackend, NoiseBudgetExhausted, PackedPlaintext, SecretKey)


class RlweBackend(HeBackend):
    kind = "rlwe"

    def __init__(self, params, seed=None):
        super().__init__(params, seed)
        n = params.n
        self._ntt_p = ntt_for(n, params.p)
        self._ntt_q = [ntt_for(n, qi) for qi in params.q_primes]
        q = params.q
        self._crt = [(q // qi) * pow(q // qi, -1, qi) for qi in params.q_primes]
        self._key_cache = {}

    # -- ring helpers ----------------------------------------------------------
    def _secret_ntt(self, key: SecretKey):
        fp = key.fingerprint
        if fp not in self._key_cache:
            s = key.coeffs.astype(np.int64)
            self._key_cache[fp] = [t.forward((s % t.modulus).astype(object)) for t in self._ntt_q]
        return self._key_cache[fp]

    def _plain_coeffs(self, pt: PackedPlaintext) -> np.ndarray:
        return self._ntt_p.inverse(pt.slots.astype(object))

    def _lift(self, coeffs) -> list:
        """Integer polynomial -> NTT form per residue."""
        return [t.forward(coeffs % t.modulus) for t in self._ntt_q]

    def _scaled_message(self, pt: PackedPlaintext) -> list:
        return self._lift(self._plain_coeffs(pt) * self.params.delta)

    def _noise(self) -> np.ndarray:
        e = np.rint(self.rng.normal(0.0, self.params.sigma, self.params.n)).astype(np.int64)
        return e.astype(object)

    def _phase(self, ct, key) -> np.ndarray:
        """Centered c0 + c1*s over Z_q, coefficient form."""
        s = self._secret_ntt(key)
        r = self.params.residues
        acc = 0
        for i, t in enumerate(self._ntt_q):
            x = (ct.parts[i] + ct.parts[r + i] * s[i]) % t.modulus
            acc = acc + t.inverse(x) * self._crt[i]
        q = self.params.q
        acc = acc % q
        return np.where(acc > q // 2, acc - q, acc)

    def _round(self, phase):
        p, q, delta = self.params.p, self.params.q, self.params.delta
        m = (phase * p + q // 2) // q % p
        v = (phase - m * delta) % q
        v = np.where(v > q // 2, v - q, v)
        worst = max(abs(int(x)) for x in v)
        budget = max(0, (delta // 2).bit_length() - 1 - worst.bit_length())
        return m, budget

    # -- contract ---------------------------------------------------------------
    def encrypt(self, pt, key):
        self._check_plain(pt)
        self.counters.encrypt += 1
        s = self._secret_ntt(key)
        coeffs = self._plain_coeffs(pt) * self.params.delta + self._noise()
        body = self._lift(coeffs)
        c0, c1 = [], []
        for i, t in enumerate(self._ntt_q):
            a = self.rng.integers(0, t.modulus, self.params.n, dtype=np.int64).astype(object)
            c0.append((body[i] - a * s[i]) % t.modulus)
            c1.append(a)
        return self._wrap(c0 + c1, pt.scale_bits, key.owner, 0)

    def decrypt(self, ct, key):
        self._check_owner(ct, key)
        self.counters.decrypt += 1
        m, budget = self._round(self._phase(ct, key))
        if budget <= 0:
            raise NoiseBudgetExhausted("noise reached the decryption bound; parameters are too small")
        slots = self._ntt_p.forward(m)
        return PackedPlaintext(slots.astype(np.int64), ct.scale_bits)

    def add_ct(self, a, b):
        self._check_pair(a, b)
        self.counters.add_ct += 1
        parts = [(x + y) % t.modulus for x, y, t in zip(a.parts, b.parts, self._ntt_q * 2)]
        return self._wrap(parts, a.scale_bits, a.owner, max(a.mult_depth, b.mult_depth))

    def add_plain(self, a, u):
        self._check_add_plain(a, u)
        self.counters.add_plain += 1
        r = self.params.residues
        m = self._scaled_message(u)
        parts = [(a.parts[i] + m[i]) % self._ntt_q[i].modulus for i in range(r)] + list(a.parts[r:])
        return self._wrap(parts, a.scale_bits, a.owner, a.mult_depth)

    def mul_plain(self, a, u):
        self._check_mul_plain(a, u)
        self.counters.mult_plain += 1
        p = self.params.p
        c = self._plain_coeffs(u)
        c = np.where(c > p // 2, c - p, c)
        w = self._lift(c)
        r = self.params.residues
        parts = [a.parts[k] * w[k % r] % self._ntt_q[k % r].modulus for k in range(2 * r)]
        return self._wrap(parts, a.scale_bits + u.scale_bits, a.owner, 1)

    def noise_budget(self, ct, key):
        self._check_owner(ct, key)
        return self._round(self._phase(ct, key))[1]

    def _words(self, ct):
        return np.concatenate([np.asarray(part, dtype=object).astype(np.uint64) for part in ct.parts])

    def _parts(self, words):
        n, r = self.params.n, self.params.residues
        parts = []
        for k in range(2 * r):
            chunk = words[k * n:(k + 1) * n]
            if (chunk >= np.uint64(self._ntt_q[k % r].modulus)).any():
                raise ValueError("ciphertext residue out of range")
            parts.append(chunk.astype(np.int64).astype(object))
        return parts
