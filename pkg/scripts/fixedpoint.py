"""
Signed fixed-point encoding between reals and the plaintext ring Z_p.

Values are encoded as round(x * 2^s) mod p with the centered representative
convention: residues above p//2 decode as negatives. Fresh values carry scale
f (FpParams.scale_bits); a single plaintext multiplication yields scale 2f,
which decode accepts and requantize folds back to the f-bit grid. With
guard_bits g > 0, one operand may carry f+g bits instead, so f+g and 2f+g
decode as well.

Usage
-----
    fp = FpParams(scale_bits=10, plaintext_modulus=p)
    e = encode_scalar(1.5, fp)          # 1536
    x = decode_scalar(e, fp, 10)        # 1.5
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

log = logging.getLogger(__name__)

# vector encodes go through float64; keep products exact
_MAX_MODULUS_BITS = 52


class EncodingOverflow(OverflowError):
    pass


class ScaleError(ValueError):
    pass


@dataclass(frozen=True)
class FpParams:
    scale_bits: int
    plaintext_modulus: int
    clip_bound: float = 16.0
    max_accumulation: int = 256
    guard_bits: int = 0

    def __post_init__(self):
        if self.scale_bits < 1:
            raise ValueError(f"scale_bits must be >= 1, got {self.scale_bits}")
        if self.guard_bits < 0:
            raise ValueError(f"guard_bits must be >= 0, got {self.guard_bits}")
        p = self.plaintext_modulus
        if p < 3 or p % 2 == 0:
            raise ValueError(f"plaintext modulus must be an odd prime, got {p}")
        if p.bit_length() > _MAX_MODULUS_BITS:
            raise ValueError(f"plaintext modulus wider than {_MAX_MODULUS_BITS} bits")
        if not self.clip_bound > 0:
            raise ValueError("clip_bound must be positive")
        if (2 ** (self.scale_bits + self.guard_bits)) * self.clip_bound * self.max_accumulation >= p / 2:
            raise ValueError(
                f"2^{self.scale_bits + self.guard_bits} * {self.clip_bound} * {self.max_accumulation} "
                f"does not fit below p/2 for p={p}")

    @property
    def half(self) -> int:
        return self.plaintext_modulus // 2

    @property
    def scales(self) -> tuple:
        """Scales a decode accepts: f and 2f, plus f+g and 2f+g when guard bits are set."""
        f, g = self.scale_bits, self.guard_bits
        return (f, 2 * f, f + g, 2 * f + g) if g else (f, 2 * f)

    def with_scale(self, scale_bits: int) -> "FpParams":
        """Same ring, different grid (used for the nonlinear subprotocols)."""
        return FpParams(scale_bits, self.plaintext_modulus, self.clip_bound, max_accumulation=1)


@dataclass
class Saturation:
    """Running count of clamped values, reported per run."""
    count: int = 0

    def add(self, k: int):
        if k:
            self.count += int(k)
            log.warning("clamped %d value(s) to the clip bound", k)


def _scale(params: FpParams, scale_bits: Optional[int]) -> int:
    return params.scale_bits if scale_bits is None else scale_bits


def encode_scalar(x: float, params: FpParams, *, scale_bits: Optional[int] = None,
                  saturate: bool = True, saturation: Optional[Saturation] = None) -> int:
    s = _scale(params, scale_bits)
    if not math.isfinite(x):
        raise ValueError(f"cannot encode non-finite value {x!r}")
    if saturate and abs(x) > params.clip_bound:
        x = math.copysign(params.clip_bound, x)
        if saturation is not None:
            saturation.add(1)
    v = math.floor(x * (1 << s) + 0.5)
    if abs(v) > params.half:
        raise EncodingOverflow(f"{x} at scale {s} wraps modulo p")
    return v % params.plaintext_modulus


def centered(e, p: int):
    """Centered representative in (-p/2, p/2]; scalar or int64 array."""
    e = e % p
    return e - p * (e > p // 2)


def decode_scalar(e: int, params: FpParams, scale_bits_actual: int) -> float:
    _check_scale(params, scale_bits_actual)
    return int(centered(int(e), params.plaintext_modulus)) / float(1 << scale_bits_actual)


def _check_scale(params: FpParams, scale_bits_actual: int):
    if scale_bits_actual not in params.scales:
        raise ScaleError(
            f"scale {scale_bits_actual} is not one of {params.scales} (f={params.scale_bits})")


def encode_vector(values, params: FpParams, *, scale_bits: Optional[int] = None,
                  saturate: bool = True, saturation: Optional[Saturation] = None) -> np.ndarray:
    s = _scale(params, scale_bits)
    x = np.asarray(values, dtype=np.float64).ravel()
    if x.size == 0:
        return np.zeros(0, dtype=np.int64)
    if not np.all(np.isfinite(x)):
        raise ValueError("cannot encode non-finite values")
    if saturate:
        over = np.abs(x) > params.clip_bound
        if over.any():
            x = np.clip(x, -params.clip_bound, params.clip_bound)
            if saturation is not None:
                saturation.add(int(over.sum()))
    v = np.floor(x * float(1 << s) + 0.5)
    if np.abs(v).max() > params.half:
        raise EncodingOverflow(f"value {x[np.argmax(np.abs(v))]} at scale {s} wraps modulo p")
    return v.astype(np.int64) % params.plaintext_modulus


def decode_vector(slots, params: FpParams, scale_bits_actual: int) -> np.ndarray:
    _check_scale(params, scale_bits_actual)
    e = np.asarray(slots, dtype=np.int64)
    return centered(e, params.plaintext_modulus).astype(np.float64) / float(1 << scale_bits_actual)


def requantize(y, params: FpParams):
    """Round a scale-2f value back onto the f-bit grid."""
    g = float(1 << params.scale_bits)
    if np.isscalar(y):
        return math.floor(y * g + 0.5) / g
    return np.floor(np.asarray(y, dtype=np.float64) * g + 0.5) / g


def on_grid(values, scale_bits: int) -> np.ndarray:
    """Integer grid units of values already on the 2^-scale grid."""
    return np.rint(np.asarray(values, dtype=np.float64) * float(1 << scale_bits)).astype(np.int64)
