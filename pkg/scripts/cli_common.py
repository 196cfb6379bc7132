"""
Shared plumbing for the operator scripts: argument parser with the exit-code
convention, environment defaults, the --params file, logging setup, and the
CHKY key file format.

Exit codes: 0 ok, 1 usage, 2 protocol/transport/crypto failure, 3 verification failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import struct
import sys
import zlib
from pathlib import Path

import numpy as np

from phe import Owner, PheError, PheParams, SecretKey
from protocol import SessionConfig

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_PROTOCOL = 2
EXIT_VERIFY = 3

DEFAULT_ADDR = "127.0.0.1:7462"
PARAM_DEFAULTS = {"n": 4096, "plaintext_bits": 40, "sigma": 3.2, "scale_bits": 10,
                  "clip_bound": 16.0, "exp_scale_bits": 16}

KEY_MAGIC = b"CHKY"
KEY_VERSION = 1
KEY_HEADER = struct.Struct("<4sBB8sI")


class UsageError(Exception):
    pass


class ArgParser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def env_addr() -> str:
    return os.environ.get("CHEETAH_ADDR", DEFAULT_ADDR)


def env_backend() -> str:
    return os.environ.get("CHEETAH_BACKEND", "rlwe")


def add_common(ap: argparse.ArgumentParser, params: bool = True, backend: bool = True):
    if params:
        ap.add_argument("--params", default="", help="JSON file with n, plaintext_bits, sigma, scale_bits, "
                                                     "clip_bound, exp_scale_bits")
    if backend:
        ap.add_argument("--backend", choices=("clear", "rlwe"), default=None,
                        help="HE backend (default: $CHEETAH_BACKEND or rlwe)")
    ap.add_argument("-v", "--verbose", action="store_true", help="debug logging")


def setup_logging(verbose: bool = False):
    logging.basicConfig(format="[%(levelname)s] %(message)s", level=logging.DEBUG if verbose else logging.INFO)


def load_params(path: str) -> dict:
    """--params file merged over the defaults; unknown keys are a usage error."""
    values = dict(PARAM_DEFAULTS)
    if not path:
        return values
    p = Path(path)
    if not p.exists():
        raise UsageError(f"params file not found: {p}")
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise UsageError(f"params file {p} is not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise UsageError(f"params file {p} must hold a JSON object")
    unknown = sorted(set(doc) - set(PARAM_DEFAULTS))
    if unknown:
        raise UsageError(f"unknown params key(s): {', '.join(unknown)}")
    for k, v in doc.items():
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise UsageError(f"params key {k} must be a number, got {v!r}")
        values[k] = type(PARAM_DEFAULTS[k])(v)
    return values


def session_config(args) -> SessionConfig:
    values = load_params(getattr(args, "params", ""))
    backend = getattr(args, "backend", None) or env_backend()
    if backend not in ("clear", "rlwe"):
        raise UsageError(f"CHEETAH_BACKEND must be clear or rlwe, got {backend!r}")
    try:
        return SessionConfig.build(backend=backend, **values)
    except (PheError, ValueError) as e:
        raise UsageError(f"invalid parameters: {e}") from e


def phe_params(args) -> PheParams:
    values = load_params(getattr(args, "params", ""))
    try:
        return PheParams.generate(n=values["n"], plaintext_bits=values["plaintext_bits"], sigma=values["sigma"])
    except (PheError, ValueError) as e:
        raise UsageError(f"invalid parameters: {e}") from e


# --------------------------------------------------------------------------
# Key files
# --------------------------------------------------------------------------

def write_key(path, key: SecretKey, n: int):
    body = KEY_HEADER.pack(KEY_MAGIC, KEY_VERSION, int(key.owner), key.params_digest, n)
    body += np.asarray(key.coeffs, dtype=np.int8).tobytes()
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def read_key(path, params: PheParams = None) -> SecretKey:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"key file not found: {p}")
    raw = p.read_bytes()
    if len(raw) < KEY_HEADER.size + 4:
        raise UsageError(f"{p}: truncated key file")
    magic, version, role, digest, n = KEY_HEADER.unpack_from(raw, 0)
    if magic != KEY_MAGIC or version != KEY_VERSION:
        raise UsageError(f"{p}: not a key file")
    if len(raw) != KEY_HEADER.size + n + 4:
        raise UsageError(f"{p}: truncated key file")
    (crc,) = struct.unpack_from("<I", raw, len(raw) - 4)
    if zlib.crc32(raw[:-4]) != crc:
        raise UsageError(f"{p}: checksum failure")
    if params is not None and (digest != params.digest or n != params.n):
        raise UsageError(f"{p}: key was generated under different parameters")
    coeffs = np.frombuffer(raw, dtype=np.int8, count=n, offset=KEY_HEADER.size).copy()
    return SecretKey(Owner(role), coeffs, digest)


def load_input(path: str) -> np.ndarray:
    """Input tensor from .npy, .chtw, or a whitespace/comma separated text file."""
    from nn_model import ManifestError, read_tensor

    p = Path(path)
    if not p.exists():
        raise UsageError(f"input file not found: {p}")
    try:
        if p.suffix == ".npy":
            return np.load(p).astype(np.float64)
        if p.suffix == ".chtw":
            return read_tensor(p)
        return np.array(p.read_text(encoding="utf-8").replace(",", " ").split(), dtype=np.float64)
    except (ValueError, ManifestError, OSError) as e:
        raise UsageError(f"cannot read input {p}: {e}") from e
