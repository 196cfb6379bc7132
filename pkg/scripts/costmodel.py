#!/usr/bin/env python3
"""
Closed-form operation and communication counts for one linear layer under the
permutation-free scheme and the rotation-based baselines it is compared with.
Nothing here runs any cryptography; the numbers come from layer dims only.

Schemes:
  cheetah       conv or fc; slot-exact counts from the packing arithmetic
  gazelle-siso  conv with one input channel and one kernel
  gazelle-ir    conv, input rotation
  gazelle-or    conv, output rotation
  gazelle-fc    fc, hybrid diagonal method
  naive-fc      fc, one rotate-and-sum per output
  hs-fc         fc, diagonal method

Counts are Perm / Mult / Add for the homomorphic linear step of one layer.
Communication is in bits; "-" where the baseline does not specify it. The
garbled-circuit term for the rotation baselines is
(100 log q + 15 log p log q + 25) bits per activated output times log p.

Outputs:
  - console table
  - <out-dir>/costmodel.csv and <out-dir>/costmodel.tex when --out-dir is given

Usage:
  python scripts/costmodel.py --kind fc --n-i 2048 --n-o 1 --n 2048 --scheme gazelle-fc
  python scripts/costmodel.py --kind conv --c-i 4 --c-o 2 --r 3 --image 8 --n 4096
  python scripts/costmodel.py --net networks/alexnet.json --out-dir out/costmodel
"""
from __future__ import annotations

import argparse
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import pandas as pd

log = logging.getLogger(__name__)

CONV_SCHEMES = ("cheetah", "gazelle-siso", "gazelle-ir", "gazelle-or")
FC_SCHEMES = ("cheetah", "gazelle-fc", "naive-fc", "hs-fc")
SCHEMES = ("cheetah", "gazelle-siso", "gazelle-ir", "gazelle-or", "gazelle-fc", "naive-fc", "hs-fc")
COLUMNS = ["layer", "kind", "scheme", "perm", "mult", "add", "comm_bits", "comm_kb"]


def ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def log2_ceil(x: float) -> int:
    return max(0, math.ceil(math.log2(x))) if x > 0 else 0


@dataclass
class CostModelInput:
    """Dims of one linear layer.

    image is the (height, width) of each input channel and out_image that of
    each output channel (defaults to image, i.e. same padding at stride 1).
    c_n, the number of input channels one ciphertext holds, is derived as
    n // (height * width) unless given.
    """
    kind: str
    n: int = 10000
    log_q: int = 60
    log_p: int = 4
    n_i: int = 0
    n_o: int = 0
    r: int = 1
    c_i: int = 1
    c_o: int = 1
    c_n: float = 0
    image: tuple = (1, 1)
    out_image: Optional[tuple] = None

    def validate(self):
        if self.kind not in ("conv", "fc"):
            raise ValueError(f"layer kind must be conv or fc, got {self.kind!r}")
        if min(self.n, self.log_q, self.log_p) < 1:
            raise ValueError("n, log q and log p must be positive")
        if self.kind == "fc" and min(self.n_i, self.n_o) < 1:
            raise ValueError("fc needs positive n_i and n_o")
        if self.kind == "conv" and min(self.r, self.c_i, self.c_o, *self.image, *self.out_hw) < 1:
            raise ValueError("conv needs positive r, c_i, c_o and image dims")
        if self.c_n < 0:
            raise ValueError("c_n must be positive when given")

    @property
    def out_hw(self) -> tuple:
        return tuple(self.out_image) if self.out_image else tuple(self.image)

    @property
    def channels_per_ct(self) -> float:
        if self.c_n:
            return self.c_n
        area = self.image[0] * self.image[1]
        # a channel larger than one ciphertext spans a fraction of it
        return self.n // area if area <= self.n else self.n / area

    @property
    def ct_bits(self) -> int:
        return self.n * self.log_q

    @property
    def gc_bits(self) -> int:
        return 100 * self.log_q + 15 * self.log_p * self.log_q + 25


def cheetah_conv_counts(inp: CostModelInput):
    """(input cts, output cts, mult, add) for the channel-packed layout."""
    r2 = inp.r * inp.r
    h_o, w_o = inp.out_hw
    hw = h_o * w_o
    if r2 > inp.n:
        raise ValueError(f"{inp.r}x{inp.r} kernel does not fit {inp.n} slots")
    if hw * r2 <= inp.n:
        per_ct, segments = min(inp.c_i, inp.n // (hw * r2)), 1
    else:
        per_ct, segments = 1, ceil_div(hw, inp.n // r2)
    groups = ceil_div(inp.c_i, per_ct)
    ops = inp.c_o * segments * groups
    return groups * segments, inp.c_o * segments, ops, ops


def cheetah_fc_counts(inp: CostModelInput):
    """(input cts, output cts, mult, add); inputs wider than n split into n-slot chunks."""
    if inp.n_i > inp.n:
        chunks = ceil_div(inp.n_i, inp.n)
        return chunks, chunks * inp.n_o, chunks * inp.n_o, chunks * inp.n_o
    cts = ceil_div(inp.n_o, inp.n // inp.n_i)
    return 1, cts, cts, cts


def costmodel(scheme: str, inp: CostModelInput) -> dict:
    inp.validate()
    allowed = CONV_SCHEMES if inp.kind == "conv" else FC_SCHEMES
    if scheme not in allowed:
        raise ValueError(f"scheme {scheme} does not apply to {inp.kind} layers (choose from {', '.join(allowed)})")
    n, r2, c_i, c_o = inp.n, inp.r * inp.r, inp.c_i, inp.c_o
    area = inp.image[0] * inp.image[1]
    comm = None

    if scheme == "cheetah":
        if inp.kind == "conv":
            in_cts, _, mult, add = cheetah_conv_counts(inp)
            # output cts stream back as they finish; only the last one is on the critical path
            comm = (in_cts + 1) * inp.ct_bits
        else:
            in_cts, _, mult, add = cheetah_fc_counts(inp)
            comm = (in_cts + 1) * inp.ct_bits
        perm = 0
    elif scheme == "gazelle-siso":
        if c_i != 1 or c_o != 1:
            raise ValueError("gazelle-siso needs c_i = c_o = 1")
        perm, mult, add = r2 - 1, r2, r2 - 1
        comm = 2 * inp.ct_bits + inp.gc_bits * area * inp.log_p
    elif scheme in ("gazelle-ir", "gazelle-or"):
        cn = inp.channels_per_ct
        mult = add = math.ceil(c_i * c_o * r2 / cn)
        if scheme == "gazelle-ir":
            perm = c_i * r2
        else:
            perm = mult
            comm = math.ceil((c_i + c_o) / cn) * inp.ct_bits + inp.gc_bits * c_o * area * inp.log_p
    elif scheme == "gazelle-fc":
        mult = ceil_div(inp.n_i * inp.n_o, n)
        perm = log2_ceil(n / inp.n_o) + mult - 1
        add = perm
        comm = 2 * inp.ct_bits + inp.gc_bits * inp.n_o * inp.log_p
    elif scheme == "naive-fc":
        perm = inp.n_o * log2_ceil(inp.n_i)
        mult, add = inp.n_o, perm
    else:
        perm = mult = add = inp.n_i

    return {"kind": inp.kind, "scheme": scheme, "perm": int(perm), "mult": int(mult), "add": int(add),
            "comm_bits": comm, "comm_kb": None if comm is None else round(comm / 8 / 1024, 1)}


def applicable_schemes(inp: CostModelInput) -> list:
    if inp.kind == "fc":
        return list(FC_SCHEMES)
    return [s for s in CONV_SCHEMES if s != "gazelle-siso" or (inp.c_i == 1 and inp.c_o == 1)]


def cheetah_stage_counts(stage, next_layout, n: int) -> dict:
    """Both parties' Perm/Mult/Add for one executed stage of a secure inference.

    The add_plain that folds a stage's output shares into the next layer's
    input belongs to the producing stage; for the last stage it is the
    compact result ciphertexts.
    """
    layout = stage.layout
    mult = add = sum(len(layout.linear_terms(o)) for o in range(layout.out_cts))
    c = ceil_div(stage.num_outputs, n)
    if next_layout is not None:
        absorb = next_layout.in_cts
    elif stage.activation != "none":
        absorb = ceil_div(math.prod(stage.out_dims), n)
    else:
        absorb = 0
    act = stage.activation
    if act in ("relu", "sigmoid", "tanh"):
        mult += 2 * c
        add += 2 * c + absorb
    elif act == "softmax":
        mult += 2 * c
        add += c
    else:
        add += absorb
    return {"perm": 0, "mult": mult, "add": add}


def layer_inputs(net, n: int, log_q: int, log_p: int) -> list:
    """(label, CostModelInput) per linear layer of a network, from dims alone."""
    from nn_model import Conv, Fc, layer_output_dims

    net.validate()
    dims = tuple(net.input_dims)
    out = []
    for idx, layer in enumerate(net.layers):
        nxt = layer_output_dims(layer, dims)
        if isinstance(layer, Conv):
            if layer.k_p != layer.k_q:
                log.warning("layer %d: %dx%d kernel costed as %dx%d", idx, layer.k_p, layer.k_q, layer.k_p, layer.k_p)
            out.append((f"{idx}:conv", CostModelInput("conv", n, log_q, log_p, r=layer.k_p, c_i=layer.c_i,
                                                      c_o=layer.c_o, image=dims[1:], out_image=nxt[1:])))
        elif isinstance(layer, Fc):
            out.append((f"{idx}:fc", CostModelInput("fc", n, log_q, log_p, n_i=layer.n_i, n_o=layer.n_o)))
        dims = nxt
    return out


def network_costs(net, n: int = 10000, log_q: int = 60, log_p: int = 4,
                  schemes: Optional[Sequence[str]] = None) -> pd.DataFrame:
    rows = []
    for label, inp in layer_inputs(net, n, log_q, log_p):
        for scheme in applicable_schemes(inp):
            if schemes and scheme not in schemes:
                continue
            try:
                row = costmodel(scheme, inp)
            except ValueError as e:
                print(f"[skip] {label} {scheme}: {e}")
                continue
            rows.append({"layer": label, **row})
    return pd.DataFrame(rows, columns=COLUMNS)


def latex_table(df_in: pd.DataFrame, caption: str, label: str, colspec: str) -> str:
    cols = df_in.columns.tolist()
    lines = ["\\begin{table}[htbp]", "\\centering", f"\\caption{{{caption}}}", f"\\label{{{label}}}",
             "\\small", f"\\begin{{tabular}}{{{colspec}}}", "\\toprule",
             " & ".join(c.replace("_", "\\_") for c in cols) + " \\\\", "\\midrule"]
    for _, r in df_in.iterrows():
        lines.append(" & ".join("-" if pd.isna(r[c]) else str(r[c]) for c in cols) + " \\\\")
    lines += ["\\bottomrule", "\\end{tabular}", "\\end{table}"]
    return "\n".join(lines) + "\n"


def render(df: pd.DataFrame) -> str:
    return df.to_string(index=False, na_rep="-")


def main(argv=None):
    from cli_common import EXIT_USAGE, ArgParser, setup_logging

    ap = ArgParser(description="Perm/Mult/Add and communication for one layer or a whole network.")
    ap.add_argument("--scheme", choices=SCHEMES + ("all",), default="all")
    ap.add_argument("--kind", choices=("conv", "fc"), default="fc")
    ap.add_argument("--net", default="", help="network manifest; costs every linear layer")
    ap.add_argument("--n", type=int, default=10000, help="slots per ciphertext")
    ap.add_argument("--log-q", type=int, default=60)
    ap.add_argument("--log-p", type=int, default=4)
    ap.add_argument("--n-i", type=int, default=0)
    ap.add_argument("--n-o", type=int, default=0)
    ap.add_argument("--r", type=int, default=1, help="kernel size")
    ap.add_argument("--c-i", type=int, default=1)
    ap.add_argument("--c-o", type=int, default=1)
    ap.add_argument("--c-n", type=float, default=0, help="input channels per ciphertext (derived when 0)")
    ap.add_argument("--image", type=int, default=1, help="input channel width I (square)")
    ap.add_argument("--out-dir", default="", help="write costmodel.csv and costmodel.tex here")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args(argv)
    setup_logging(args.verbose)

    schemes = None if args.scheme == "all" else [args.scheme]
    try:
        if args.net:
            from nn_model import ManifestError, load_network
            try:
                net = load_network(args.net, require_weights=False)
            except ManifestError as e:
                ap.error(str(e))
            df = network_costs(net, args.n, args.log_q, args.log_p, schemes)
            title = f"{net.name}: per-layer linear cost (n={args.n}, log q={args.log_q})"
        else:
            inp = CostModelInput(args.kind, args.n, args.log_q, args.log_p, args.n_i, args.n_o, args.r,
                                 args.c_i, args.c_o, args.c_n, (args.image, args.image))
            rows = [costmodel(s, inp) for s in (schemes or applicable_schemes(inp))]
            df = pd.DataFrame([{"layer": args.kind, **r} for r in rows], columns=COLUMNS)
            title = f"{args.kind} layer cost (n={args.n}, log q={args.log_q})"
    except ValueError as e:
        print(f"{ap.prog}: error: {e}")
        return EXIT_USAGE

    print(title)
    print(render(df))

    if args.out_dir:
        out_dir = Path(args.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / "costmodel.csv"
        tex_path = out_dir / "costmodel.tex"
        df.to_csv(csv_path, index=False)
        tex_path.write_text(latex_table(df, title, "tab:costmodel", "lll" + "r" * (len(COLUMNS) - 3)),
                            encoding="utf-8")
        print("\nWrote:")
        print(" -", csv_path)
        print(" -", tex_path)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
