#!/usr/bin/env python3
"""
Model owner's side: serves secure inference sessions over TCP.

How it works
------------
- Loads the network with its weights from --net-dir and the server key.
- Listens on --addr (default $CHEETAH_ADDR or 127.0.0.1:7462); every
  connection gets its own session thread and fresh blinding randomness.
- A session that fails sends an ERROR frame to the client and is logged;
  the server keeps accepting.
- One INFO line per closed session with the byte counts.

Usage
-----
python scripts/serve.py --net-dir nets/netA --key keys/server.key
python scripts/serve.py --net-dir nets/netA --addr 0.0.0.0:7462 --max-sessions 10
"""
from __future__ import annotations

import logging
import secrets

from cli_common import (EXIT_PROTOCOL, EXIT_USAGE, ArgParser, UsageError, add_common, env_addr, read_key,
                        session_config, setup_logging)
from fixedpoint import EncodingOverflow
from nn_model import ManifestError, load_network
from phe import Owner, PheError, keygen
from protocol import ProtocolError
from session import ServerSession
from transport import PeerError, TransportError, serve

log = logging.getLogger("serve")


def session_handler(net, config, key):
    def handle(ch):
        session = ServerSession(net, config, key=key)
        try:
            _, report = session.run(ch)
        except PeerError as e:
            log.warning("client aborted session: %s (code %d)", e.text, e.code)
            return
        except (ProtocolError, TransportError, PheError, EncodingOverflow, ValueError) as e:
            log.warning("session failed: %s", e)
            return
        log.info("session done: %d mult, %d add, %d perm, %d bytes sent, %d received (%d offline), %.2fs",
                 report.total.mult, report.total.add, report.total.perm, report.bytes.sent, report.bytes.received,
                 report.bytes.offline, report.seconds)
    return handle


def main(argv=None):
    ap = ArgParser(description="Serve secure inference for one network.")
    ap.add_argument("--net-dir", required=True, help="network directory (manifest.json + weights)")
    ap.add_argument("--key", default="", help="server key file (ephemeral key when omitted)")
    ap.add_argument("--addr", default=None, help="host:port (default: $CHEETAH_ADDR or 127.0.0.1:7462)")
    ap.add_argument("--max-sessions", type=int, default=None, help="exit after this many sessions")
    ap.add_argument("--timeout", type=float, default=600.0, help="per-message receive timeout, seconds")
    add_common(ap)
    args = ap.parse_args(argv)
    setup_logging(args.verbose)

    try:
        config = session_config(args)
        net = load_network(args.net_dir)
        if args.key:
            key = read_key(args.key, config.phe)
            if key.owner != Owner.SERVER:
                raise UsageError(f"{args.key} is a {key.owner.name.lower()} key")
        else:
            print("[warn] no --key given; using an ephemeral server key")
            key = keygen(config.phe, Owner.SERVER, secrets.randbits(63))
    except (UsageError, ManifestError) as e:
        print(f"{ap.prog}: error: {e}")
        return EXIT_USAGE

    addr = args.addr or env_addr()
    log.info("serving %s (%s backend, n=%d, params %s)", net.name, config.backend, config.n, config.digest.hex())
    try:
        serve(addr, session_handler(net, config, key), args.max_sessions, args.timeout)
    except OSError as e:
        print(f"{ap.prog}: cannot listen on {addr}: {e}")
        return EXIT_PROTOCOL
    except KeyboardInterrupt:
        log.info("interrupted")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
