#!/usr/bin/env python3
"""
Writes a random-weight test network from one of the built-in templates.

Templates
---------
- tiny    : Conv 3x3@1 + ReLU on 8x8@1 (smoke tests)
- netA    : Conv 5x5@5 stride 2, ReLU, FC 980->100, ReLU, FC 100->10 on 28x28@1
- netB    : Conv 5x5@4, ReLU, MeanPool 2x2, Conv 5x5@4 valid, ReLU, MeanPool 2x2,
            FC 100->100, ReLU, FC 100->10 on 28x28@1
- vggHead : first two VGG blocks, reduced, on 16x16@3
- smooth  : Conv+sigmoid, FC+tanh, FC+softmax on 8x8@1

Outputs (written to --out-dir):
- manifest.json              architecture + tensor file names
- layer<i>_weight.chtw       weights on the 2^-f grid
- layer<i>_bias.chtw
- public/manifest.json       architecture only, for the client side

Usage
-----
python scripts/make_net.py --template netA --seed 7 --out-dir nets/netA
"""
from __future__ import annotations

from pathlib import Path

from cli_common import EXIT_USAGE, ArgParser, UsageError, add_common, load_params, setup_logging
from nn_model import TEMPLATES, gen_random_network, save_network


def main(argv=None):
    ap = ArgParser(description="Write a random-weight network from a template.")
    ap.add_argument("--template", choices=sorted(TEMPLATES), required=True)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out-dir", required=True)
    add_common(ap, backend=False)
    args = ap.parse_args(argv)
    setup_logging(args.verbose)

    try:
        scale_bits = int(load_params(args.params)["scale_bits"])
    except UsageError as e:
        print(f"{ap.prog}: error: {e}")
        return EXIT_USAGE

    net = gen_random_network(args.template, args.seed, scale_bits)
    out_dir = Path(args.out_dir)
    manifest = save_network(net, out_dir)
    public = save_network(net.public(), out_dir / "public")

    print(f"{net.name}: input {list(net.input_dims)}, {len(net.layers)} layers, digest {net.digest.hex()}")
    print("Wrote:")
    print(" -", manifest)
    print(" -", public)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
