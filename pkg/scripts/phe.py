"""
Packed homomorphic encryption contract shared by both backends.

Only the operations the inference protocol needs exist here: encrypt,
decrypt, ciphertext+ciphertext add, ciphertext+plaintext add and
ciphertext x plaintext multiply. There is no rotation. Every operation bumps
the per-session OpCounters of the backend instance that performed it.

Backends
--------
- ClearBackend: slots held in the clear, ownership/scale/depth rules enforced,
  noise budget reported as infinite. Serializes to the RLWE wire size.
- RlweBackend (rlwe.py): symmetric BFV over a two-prime residue system.

Usage
-----
    params = PheParams.generate(n=4096)
    be = make_backend("rlwe", params, seed=1)
    sk = be.keygen(Owner.CLIENT, seed=7)
    ct = be.encrypt(PackedPlaintext.from_values([0.5, -1], fp, params.n), sk)
"""
from __future__ import annotations

import hashlib
import logging
import math
import struct
from dataclasses import dataclass, fields, replace
from enum import IntEnum
from functools import lru_cache
from typing import Optional, Tuple

import numpy as np
from sympy import isprime

from fixedpoint import FpParams, decode_vector, encode_vector
from ntt import crt_prime_below, is_power_of_two, largest_prime_below

log = logging.getLogger(__name__)

CT_HEADER = struct.Struct("<8sBBB")
MAX_PLAINTEXT_BITS = 41


class PheError(Exception):
    pass


class ParameterError(PheError):
    pass


class OwnerMismatchError(PheError):
    pass


class ScaleMismatchError(PheError):
    pass


class DepthError(PheError):
    pass


class NoiseBudgetExhausted(PheError):
    pass


class Owner(IntEnum):
    CLIENT = 1
    SERVER = 2


@dataclass(frozen=True)
class PheParams:
    n: int
    p: int
    q_primes: Tuple[int, ...]
    sigma: float = 3.2

    @classmethod
    def generate(cls, n: int = 4096, plaintext_bits: int = 40, sigma: float = 3.2) -> "PheParams":
        return _generate(n, plaintext_bits, sigma)

    @property
    def q(self) -> int:
        return math.prod(self.q_primes)

    @property
    def delta(self) -> int:
        return self.q // self.p

    @property
    def residues(self) -> int:
        return len(self.q_primes)

    @property
    def ct_bytes(self) -> int:
        return CT_HEADER.size + 2 * self.n * self.residues * 8

    @property
    def digest(self) -> bytes:
        text = f"{self.n}|{self.p}|{','.join(map(str, self.q_primes))}|{self.sigma}"
        return hashlib.sha256(text.encode()).digest()[:8]

    def validate(self):
        if not is_power_of_two(self.n):
            raise ParameterError(f"n={self.n} is not a power of two")
        two_n = 2 * self.n
        if self.p.bit_length() > MAX_PLAINTEXT_BITS:
            raise ParameterError(f"plaintext modulus wider than {MAX_PLAINTEXT_BITS} bits")
        if not isprime(self.p) or self.p % two_n != 1:
            raise ParameterError(f"p={self.p} is not a prime = 1 mod {two_n}")
        if not self.q_primes:
            raise ParameterError("empty ciphertext modulus")
        for qi in self.q_primes:
            if qi.bit_length() > 63 or not isprime(qi) or qi % two_n != 1:
                raise ParameterError(f"q factor {qi} is not an NTT-friendly prime below 2^63")
        if self.delta.bit_length() < self.p.bit_length() + 16:
            raise ParameterError("ciphertext modulus too small for plaintext multiplication")
        if self.sigma <= 0:
            raise ParameterError("sigma must be positive")

    def fp(self, scale_bits: int = 10, clip_bound: float = 16.0, guard_bits: int = 0) -> FpParams:
        return FpParams(scale_bits, self.p, clip_bound, guard_bits=guard_bits)


@lru_cache(maxsize=32)
def _generate(n: int, plaintext_bits: int, sigma: float) -> PheParams:
    if not is_power_of_two(n):
        raise ParameterError(f"n={n} is not a power of two")
    if not 20 <= plaintext_bits <= MAX_PLAINTEXT_BITS:
        raise ParameterError(f"plaintext_bits must be in [20, {MAX_PLAINTEXT_BITS}]")
    p = largest_prime_below(1 << plaintext_bits, 2 * n)
    q1 = largest_prime_below(1 << 56, 2 * n)
    # q1*q2 = 1 mod p keeps Delta*p = q-1, so plaintext products add no q-mod-p term
    q2 = crt_prime_below(1 << 62, n, p, q1)
    params = PheParams(n=n, p=p, q_primes=(q1, q2), sigma=sigma)
    params.validate()
    log.debug("generated params n=%d p=%d (%d bits) q=%d bits", n, p, p.bit_length(), params.q.bit_length())
    return params


@dataclass(eq=False)
class SecretKey:
    owner: Owner
    coeffs: np.ndarray
    params_digest: bytes

    @property
    def fingerprint(self) -> bytes:
        return hashlib.sha256(bytes([self.owner]) + self.coeffs.tobytes()).digest()[:8]

    def __eq__(self, other):
        if not isinstance(other, SecretKey):
            return NotImplemented
        return (self.owner == other.owner and self.params_digest == other.params_digest
                and np.array_equal(self.coeffs, other.coeffs))


@dataclass(eq=False)
class PackedPlaintext:
    slots: np.ndarray
    scale_bits: int

    @classmethod
    def from_values(cls, values, fp: FpParams, n: int, *, scale_bits: Optional[int] = None,
                    saturate: bool = False, saturation=None) -> "PackedPlaintext":
        enc = encode_vector(values, fp, scale_bits=scale_bits, saturate=saturate, saturation=saturation)
        if enc.size > n:
            raise ValueError(f"{enc.size} values do not fit in {n} slots")
        slots = np.zeros(n, dtype=np.int64)
        slots[:enc.size] = enc
        return cls(slots, fp.scale_bits if scale_bits is None else scale_bits)

    def decode(self, fp: FpParams) -> np.ndarray:
        return decode_vector(self.slots, fp, self.scale_bits)


@dataclass(frozen=True, eq=False)
class Ciphertext:
    parts: Tuple[np.ndarray, ...]
    scale_bits: int
    owner: Owner
    mult_depth: int
    params_digest: bytes


@dataclass
class OpCounters:
    mult_plain: int = 0
    add_ct: int = 0
    add_plain: int = 0
    perm: int = 0
    encrypt: int = 0
    decrypt: int = 0
    bytes_sent: int = 0
    bytes_received: int = 0

    @property
    def mult(self) -> int:
        return self.mult_plain

    @property
    def add(self) -> int:
        return self.add_ct + self.add_plain

    def __add__(self, other: "OpCounters") -> "OpCounters":
        return OpCounters(**{f.name: getattr(self, f.name) + getattr(other, f.name) for f in fields(self)})

    def __sub__(self, other: "OpCounters") -> "OpCounters":
        return OpCounters(**{f.name: getattr(self, f.name) - getattr(other, f.name) for f in fields(self)})

    def as_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["mult"] = self.mult
        d["add"] = self.add
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "OpCounters":
        return cls(**{f.name: int(d.get(f.name, 0)) for f in fields(cls)})


def mulmod(a: np.ndarray, b: np.ndarray, p: int) -> np.ndarray:
    """Slotwise a*b mod p on int64 without overflow (p < 2^41)."""
    hi = b >> 20
    lo = b & ((1 << 20) - 1)
    t = (a * hi) % p
    return ((t << 20) + a * lo) % p


class HeBackend:
    """Common contract; subclasses implement the ring arithmetic."""

    kind = "abstract"

    def __init__(self, params: PheParams, seed: Optional[int] = None):
        params.validate()
        self.params = params
        self.rng = np.random.default_rng(seed)
        self.counters = OpCounters()

    # -- keys ---------------------------------------------------------------
    def keygen(self, owner: Owner, seed: int) -> SecretKey:
        return keygen(self.params, owner, seed)

    # -- bookkeeping ----------------------------------------------------------
    def counters_snapshot(self) -> OpCounters:
        return replace(self.counters)

    def counters_reset(self):
        self.counters = OpCounters()

    def _check_plain(self, pt: PackedPlaintext):
        if pt.slots.shape != (self.params.n,):
            raise ValueError(f"plaintext must have exactly {self.params.n} slots")

    def _check_ct(self, ct: Ciphertext):
        if ct.params_digest != self.params.digest:
            raise ParameterError("ciphertext was produced under different parameters")

    def _check_owner(self, ct: Ciphertext, key: SecretKey):
        self._check_ct(ct)
        if ct.owner != key.owner:
            raise OwnerMismatchError(f"{ct.owner.name}-owned ciphertext, {key.owner.name} key")

    def _check_pair(self, a: Ciphertext, b: Ciphertext):
        self._check_ct(a)
        self._check_ct(b)
        if a.owner != b.owner:
            raise OwnerMismatchError("cannot add ciphertexts under different keys")
        if a.scale_bits != b.scale_bits:
            raise ScaleMismatchError(f"scale {a.scale_bits} vs {b.scale_bits}")

    def _check_add_plain(self, a: Ciphertext, u: PackedPlaintext):
        self._check_ct(a)
        self._check_plain(u)
        if a.scale_bits != u.scale_bits:
            raise ScaleMismatchError(f"ciphertext scale {a.scale_bits} vs plaintext scale {u.scale_bits}")

    def _check_mul_plain(self, a: Ciphertext, u: PackedPlaintext):
        self._check_ct(a)
        self._check_plain(u)
        if a.mult_depth != 0:
            raise DepthError("plaintext multiplication on a depth-1 ciphertext")

    def _wrap(self, parts, scale_bits: int, owner: Owner, depth: int) -> Ciphertext:
        return Ciphertext(tuple(parts), scale_bits, owner, depth, self.params.digest)

    # -- wire form ------------------------------------------------------------
    def serialize(self, ct: Ciphertext) -> bytes:
        self._check_ct(ct)
        header = CT_HEADER.pack(ct.params_digest, int(ct.owner), ct.scale_bits, ct.mult_depth)
        return header + self._words(ct).astype("<u8").tobytes()

    def deserialize(self, data: bytes) -> Ciphertext:
        if len(data) != self.params.ct_bytes:
            raise ValueError(f"ciphertext is {len(data)} bytes, expected {self.params.ct_bytes}")
        digest, owner, scale, depth = CT_HEADER.unpack_from(data, 0)
        if digest != self.params.digest:
            raise ParameterError("ciphertext params digest does not match this session")
        if depth > 1:
            raise DepthError(f"ciphertext claims depth {depth}")
        words = np.frombuffer(data, dtype="<u8", offset=CT_HEADER.size)
        return self._wrap(self._parts(words), scale, Owner(owner), depth)

    # -- contract -------------------------------------------------------------
    def encrypt(self, pt: PackedPlaintext, key: SecretKey) -> Ciphertext:
        raise NotImplementedError

    def decrypt(self, ct: Ciphertext, key: SecretKey) -> PackedPlaintext:
        raise NotImplementedError

    def add_ct(self, a: Ciphertext, b: Ciphertext) -> Ciphertext:
        raise NotImplementedError

    def add_plain(self, a: Ciphertext, u: PackedPlaintext) -> Ciphertext:
        raise NotImplementedError

    def mul_plain(self, a: Ciphertext, u: PackedPlaintext) -> Ciphertext:
        raise NotImplementedError

    def noise_budget(self, ct: Ciphertext, key: SecretKey) -> float:
        raise NotImplementedError

    def _words(self, ct: Ciphertext) -> np.ndarray:
        raise NotImplementedError

    def _parts(self, words: np.ndarray):
        raise NotImplementedError


def keygen(params: PheParams, owner: Owner, seed: int) -> SecretKey:
    """Ternary secret polynomial, deterministic in (owner, seed)."""
    params.validate()
    rng = np.random.default_rng([int(seed), int(owner)])
    coeffs = rng.integers(-1, 2, size=params.n, dtype=np.int8)
    return SecretKey(Owner(owner), coeffs, params.digest)


class ClearBackend(HeBackend):
    kind = "clear"

    def encrypt(self, pt, key):
        self._check_plain(pt)
        self.counters.encrypt += 1
        return self._wrap((pt.slots.astype(np.int64) % self.params.p,), pt.scale_bits, key.owner, 0)

    def decrypt(self, ct, key):
        self._check_owner(ct, key)
        self.counters.decrypt += 1
        return PackedPlaintext(ct.parts[0].copy(), ct.scale_bits)

    def add_ct(self, a, b):
        self._check_pair(a, b)
        self.counters.add_ct += 1
        return self._wrap(((a.parts[0] + b.parts[0]) % self.params.p,), a.scale_bits, a.owner,
                          max(a.mult_depth, b.mult_depth))

    def add_plain(self, a, u):
        self._check_add_plain(a, u)
        self.counters.add_plain += 1
        return self._wrap(((a.parts[0] + u.slots) % self.params.p,), a.scale_bits, a.owner, a.mult_depth)

    def mul_plain(self, a, u):
        self._check_mul_plain(a, u)
        self.counters.mult_plain += 1
        return self._wrap((mulmod(a.parts[0], u.slots.astype(np.int64), self.params.p),),
                          a.scale_bits + u.scale_bits, a.owner, 1)

    def noise_budget(self, ct, key):
        self._check_owner(ct, key)
        return math.inf

    def _words(self, ct):
        words = np.zeros(2 * self.params.n * self.params.residues, dtype=np.uint64)
        words[:self.params.n] = ct.parts[0].astype(np.uint64)
        return words

    def _parts(self, words):
        slots = words[:self.params.n].astype(np.int64)
        if (slots >= self.params.p).any() or words[self.params.n:].any():
            raise ValueError("non-canonical clear ciphertext")
        return (slots,)


def make_backend(kind: str, params: PheParams, seed: Optional[int] = None) -> HeBackend:
    if kind == "clear":
        return ClearBackend(params, seed)
    if kind == "rlwe":
        from rlwe import RlweBackend
        return RlweBackend(params, seed)
    raise ValueError(f"unknown backend {kind!r} (expected clear or rlwe)")
