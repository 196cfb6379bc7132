"""
Negacyclic number-theoretic transform over Z_m[X]/(X^n + 1), plus the search
for NTT-friendly primes used by the RLWE backend and the slot batching.

Arrays hold Python ints (numpy object dtype) so 62-bit moduli multiply
exactly; the butterflies are vectorized per stage.
"""
from __future__ import annotations

import random
from functools import lru_cache

import numpy as np
from sympy import isprime


def is_power_of_two(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


def largest_prime_below(bound: int, step: int) -> int:
    """Largest prime < bound that is 1 mod step."""
    x = ((bound - 2) // step) * step + 1
    while x > step:
        if isprime(x):
            return x
        x -= step
    raise ValueError(f"no prime = 1 mod {step} below {bound}")


def crt_prime_below(bound: int, n: int, p: int, partner: int) -> int:
    """Largest prime x < bound with x = 1 mod 2n and x * partner = 1 mod p."""
    two_n = 2 * n
    target = pow(partner, -1, p)
    t = ((target - 1) * pow(two_n, -1, p)) % p
    x0 = 1 + two_n * t
    step = two_n * p
    j = (bound - 1 - x0) // step
    while j >= 0:
        x = x0 + j * step
        if x != partner and isprime(x):
            return x
        j -= 1
    raise ValueError(f"no prime below 2^{bound.bit_length() - 1} matching the CRT conditions")


def primitive_2n_root(n: int, m: int, seed: int = 7) -> int:
    """psi with psi^n = -1 mod m; m must be prime and 1 mod 2n."""
    if (m - 1) % (2 * n):
        raise ValueError(f"{m} is not 1 mod {2 * n}")
    rng = random.Random(seed)
    for _ in range(1000):
        psi = pow(rng.randrange(2, m - 1), (m - 1) // (2 * n), m)
        if pow(psi, n, m) == m - 1:
            return psi
    raise ValueError(f"no primitive {2 * n}-th root of unity mod {m}")


def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def _powers(base: int, count: int, m: int) -> np.ndarray:
    out = np.empty(count, dtype=object)
    acc = 1
    for i in range(count):
        out[i] = acc
        acc = acc * base % m
    return out


class NegacyclicNtt:
    """Evaluation at the odd powers of psi, natural order in and out."""

    def __init__(self, n: int, modulus: int):
        if not is_power_of_two(n):
            raise ValueError(f"n must be a power of two, got {n}")
        self.n = n
        self.modulus = m = modulus
        psi = primitive_2n_root(n, m)
        psi_inv = pow(psi, -1, m)
        omega = psi * psi % m
        omega_inv = pow(omega, -1, m)
        self.psi_pow = _powers(psi, n, m)
        n_inv = pow(n, -1, m)
        self.psi_inv_pow_scaled = np.array([v * n_inv % m for v in _powers(psi_inv, n, m)], dtype=object)
        self.rev = _bit_reverse(n)
        self._fwd = {}
        self._inv = {}
        half = 1
        while half < n:
            self._fwd[half] = _powers(pow(omega, n // (2 * half), m), half, m)
            self._inv[half] = _powers(pow(omega_inv, n // (2 * half), m), half, m)
            half *= 2

    def _butterflies(self, a: np.ndarray, twiddles) -> np.ndarray:
        m = self.modulus
        a = a[self.rev]
        half = 1
        while half < self.n:
            blocks = a.reshape(-1, 2 * half)
            u = blocks[:, :half]
            v = blocks[:, half:] * twiddles[half] % m
            a = np.concatenate([(u + v) % m, (u - v) % m], axis=1).reshape(-1)
            half *= 2
        return a

    def forward(self, coeffs) -> np.ndarray:
        a = np.asarray(coeffs, dtype=object) * self.psi_pow % self.modulus
        return self._butterflies(a, self._fwd)

    def inverse(self, evals) -> np.ndarray:
        a = self._butterflies(np.asarray(evals, dtype=object) % self.modulus, self._inv)
        return a * self.psi_inv_pow_scaled % self.modulus


@lru_cache(maxsize=16)
def ntt_for(n: int, modulus: int) -> NegacyclicNtt:
    return NegacyclicNtt(n, modulus)
