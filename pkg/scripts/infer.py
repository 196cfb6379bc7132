#!/usr/bin/env python3
"""
Data owner's side: runs one secure inference and prints the class scores.

How it works
------------
- Loads the public network manifest (architecture only) and the client key.
- Connects to serve.py at --addr (default $CHEETAH_ADDR or 127.0.0.1:7462),
  or with --loopback NET_DIR runs the server in-process on the full network.
- Prints one "index<TAB>score" line per class and the label.
- --report writes a run report (JSON); the oracle comparison fields are
  filled when the weights are at hand (--loopback or --oracle NET_DIR).
- --tolerance turns the oracle comparison into a check (exit 3 on failure).

Exit codes: 0 ok, 1 usage, 2 protocol/transport failure, 3 oracle mismatch.

Usage
-----
python scripts/infer.py --net nets/netA/public --key keys/client.key --input x.npy
python scripts/infer.py --loopback nets/netA --input x.npy --backend clear --report out/netA.json
"""
from __future__ import annotations

import logging
import secrets

import numpy as np

from cli_common import (EXIT_PROTOCOL, EXIT_USAGE, EXIT_VERIFY, ArgParser, UsageError, add_common, env_addr,
                        load_input, read_key, session_config, setup_logging)
from fixedpoint import EncodingOverflow
from nn_model import ManifestError, ShapeError, infer_ref, load_network
from oracle import format_scores
from phe import Owner, PheError, keygen
from protocol import ProtocolError
from report import build_report, write_reports
from session import ClientSession, InferenceResult, run_secure_inference
from transport import PeerError, TransportError, connect

log = logging.getLogger("infer")


def main(argv=None):
    ap = ArgParser(description="Run one secure inference as the client.")
    ap.add_argument("--net", "--net-manifest-public", dest="net", default="",
                    help="public manifest (architecture only)")
    ap.add_argument("--loopback", default="", help="network dir with weights; run the server in-process")
    ap.add_argument("--input", required=True)
    ap.add_argument("--key", default="", help="client key file (ephemeral key when omitted)")
    ap.add_argument("--addr", default=None, help="host:port (default: $CHEETAH_ADDR or 127.0.0.1:7462)")
    ap.add_argument("--seed", type=int, default=None, help="client randomness seed")
    ap.add_argument("--oracle", default="", help="network dir with weights for the error fields")
    ap.add_argument("--tolerance", type=float, default=None, help="max abs error vs oracle; exit 3 above it")
    ap.add_argument("--report", default="", help="write the run report here")
    ap.add_argument("--timeout", type=float, default=600.0)
    add_common(ap)
    args = ap.parse_args(argv)
    setup_logging(args.verbose)

    if not args.net and not args.loopback:
        ap.error("one of --net or --loopback is required")
    try:
        config = session_config(args)
        x = load_input(args.input)
        full = load_network(args.loopback) if args.loopback else None
        net = load_network(args.net, require_weights=False) if args.net else full.public()
        if full is not None and net.digest != full.digest:
            raise UsageError("--net and --loopback describe different architectures")
        oracle_net = full if full is not None else (load_network(args.oracle) if args.oracle else None)
        if args.key:
            key = read_key(args.key, config.phe)
            if key.owner != Owner.CLIENT:
                raise UsageError(f"{args.key} is a {key.owner.name.lower()} key")
        else:
            key = keygen(config.phe, Owner.CLIENT, secrets.randbits(63))
    except (UsageError, ManifestError) as e:
        print(f"{ap.prog}: error: {e}")
        return EXIT_USAGE
    if args.tolerance is not None and oracle_net is None:
        ap.error("--tolerance needs --loopback or --oracle")

    try:
        if full is not None:
            result = run_secure_inference(full, x, config, client_key=key, client_seed=args.seed,
                                          timeout=args.timeout)
        else:
            session = ClientSession(net, config, key=key, seed=args.seed)
            scores, client_report = session.run(connect(args.addr or env_addr(), args.timeout), x)
            result = InferenceResult(np.asarray(scores, dtype=np.float64), client_report)
    except ShapeError as e:
        print(f"{ap.prog}: error: {e}")
        return EXIT_USAGE
    except PeerError as e:
        print(f"{ap.prog}: server aborted the session: {e.text} (code {e.code})")
        return EXIT_PROTOCOL
    except (ProtocolError, TransportError, PheError, EncodingOverflow, ValueError) as e:
        print(f"{ap.prog}: session failed: {e}")
        return EXIT_PROTOCOL

    print(format_scores(result.scores))
    print(f"label\t{result.label}")

    ref = infer_ref(oracle_net, x) if oracle_net is not None else None
    rep = build_report(net, result, config, ref)
    if rep.saturation:
        print(f"[warn] {rep.saturation} value(s) saturated at +-{config.fp.clip_bound}")
    if rep.max_abs_error is not None:
        print(f"oracle label {rep.oracle_label}, max abs error {rep.max_abs_error:.3g}")
    if args.report:
        path = write_reports(args.report, [rep])
        print("Wrote:")
        print(" -", path)
    if args.tolerance is not None and (rep.max_abs_error > args.tolerance or not rep.argmax_agree):
        print(f"[fail] oracle mismatch: max abs error {rep.max_abs_error:.3g} (tolerance {args.tolerance}), "
              f"label {rep.label} vs {rep.oracle_label}")
        return EXIT_VERIFY
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
