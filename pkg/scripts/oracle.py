#!/usr/bin/env python3
"""
Plaintext reference inference: prints the class scores of a network on one input.

Input files: .npy, .chtw, or whitespace/comma separated text in (c, h, w) order.

Usage
-----
python scripts/oracle.py --net nets/netA --input x.npy
"""
from __future__ import annotations

import numpy as np

from cli_common import EXIT_USAGE, ArgParser, UsageError, load_input, setup_logging
from nn_model import ManifestError, ShapeError, infer_ref, load_network


def format_scores(scores) -> str:
    return "\n".join(f"{i}\t{s:.6f}" for i, s in enumerate(np.asarray(scores).ravel()))


def main(argv=None):
    ap = ArgParser(description="Run the plaintext reference network.")
    ap.add_argument("--net", required=True, help="network directory or manifest with weights")
    ap.add_argument("--input", required=True)
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args(argv)
    setup_logging(args.verbose)

    try:
        net = load_network(args.net)
        x = load_input(args.input)
        scores = infer_ref(net, x)
    except (UsageError, ManifestError, ShapeError) as e:
        print(f"{ap.prog}: error: {e}")
        return EXIT_USAGE

    print(format_scores(scores))
    print(f"label\t{int(np.argmax(scores))}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
