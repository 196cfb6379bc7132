#!/usr/bin/env python3
"""
Generates a party's secret key for the packed HE scheme.

How it works
------------
- Builds the ring parameters from --params (defaults: n=4096, 40-bit p).
- Draws a ternary secret polynomial, deterministic in (--role, --seed).
- Writes a CHKY key file: magic, version, role byte, params digest, n,
  int8 coefficients, CRC-32. serve.py and infer.py refuse a key whose digest
  does not match their own --params.

Usage
-----
python scripts/cheetah_keygen.py --role server --seed 1 --out keys/server.key
python scripts/cheetah_keygen.py --role client --params params.json --out keys/client.key
"""
from __future__ import annotations

import logging
import secrets
from pathlib import Path

from cli_common import EXIT_USAGE, ArgParser, UsageError, add_common, phe_params, setup_logging, write_key
from phe import Owner, keygen

log = logging.getLogger("cheetah_keygen")


def main(argv=None):
    ap = ArgParser(description="Generate a client or server secret key.")
    ap.add_argument("--role", choices=("client", "server"), required=True)
    ap.add_argument("--seed", type=int, default=None, help="deterministic key when given")
    ap.add_argument("--out", required=True, help="key file to write")
    add_common(ap, backend=False)
    args = ap.parse_args(argv)
    setup_logging(args.verbose)

    try:
        params = phe_params(args)
    except UsageError as e:
        print(f"{ap.prog}: error: {e}")
        return EXIT_USAGE

    seed = args.seed if args.seed is not None else secrets.randbits(63)
    if args.seed is None:
        log.debug("no --seed given, drew a random one")
    owner = Owner.CLIENT if args.role == "client" else Owner.SERVER
    key = keygen(params, owner, seed)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_key(out, key, params.n)
    log.info("%s key for n=%d, p=%d (params %s)", args.role, params.n, params.p, params.digest.hex())
    print("Wrote:")
    print(" -", out)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
