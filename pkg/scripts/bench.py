#!/usr/bin/env python3
"""
Benchmarks secure inference on a network and checks the counters against the
cost model.

How it works
------------
- --net is a network directory with weights, or a template name (tiny, netA,
  netB, vggHead, smooth) filled with random weights from --seed.
- Each trial draws an input uniform in [-1, 1], runs client and server
  in-process over the loopback transport and compares the scores with the
  plaintext oracle.
- Per stage, the measured Mult/Add of both parties must equal the cost model's
  prediction, Perm must be 0 on both sides, and the linear step of a
  single-ciphertext layer must move exactly two framed ciphertexts.
- Wall-clock figures are printed for information only.

Exit codes: 0 all checks pass, 1 usage, 2 protocol failure, 3 a check failed.

Usage
-----
python scripts/bench.py --net netA --trials 5 --backend clear
python scripts/bench.py --net nets/netB --trials 3 --report out/bench_netB.json
"""
from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
import pandas as pd

from cli_common import (EXIT_PROTOCOL, EXIT_USAGE, EXIT_VERIFY, ArgParser, UsageError, add_common,
                        session_config, setup_logging)
from costmodel import cheetah_stage_counts
from fixedpoint import EncodingOverflow
from nn_model import TEMPLATES, ManifestError, gen_random_network, infer_ref, load_network
from phe import PheError
from protocol import ProtocolError, plan_stages
from report import build_report, render, write_reports
from session import run_secure_inference
from transport import CT_FRAME_OVERHEAD, PeerError, TransportError

log = logging.getLogger("bench")


def load_bench_net(name: str, seed: int, scale_bits: int):
    if name in TEMPLATES and not Path(name).exists():
        return gen_random_network(name, seed, scale_bits)
    return load_network(name)


def check_counts(result, plan, n: int, ct_bytes: int) -> list:
    """Violations of the predicted per-stage counters, one string each."""
    problems = []
    server = {st.index: st for st in result.server.stages}
    for st in result.client.stages:
        stage = plan.stages[st.index]
        want = cheetah_stage_counts(stage, plan.next_layout(stage.index), n)
        ops = st.ops + server[st.index].ops
        got = {"perm": ops.perm, "mult": ops.mult, "add": ops.add}
        if got != want:
            problems.append(f"stage {st.index} ({stage.kind}+{stage.activation}): measured {got}, predicted {want}")
        if st.ops.perm or server[st.index].ops.perm:
            problems.append(f"stage {st.index}: perm = {st.ops.perm} client / {server[st.index].ops.perm} server")
        if stage.layout.in_cts == 1 and stage.layout.out_cts == 1:
            linear = result.client.bytes.layer_bytes(st.index, "CT_UPLOAD", "BLINDED_LINEAR")
            if linear != 2 * (ct_bytes + CT_FRAME_OVERHEAD):
                problems.append(f"stage {st.index}: linear step moved {linear} bytes, "
                                f"expected 2 x ({ct_bytes} + {CT_FRAME_OVERHEAD})")
    return problems


def main(argv=None):
    ap = ArgParser(description="Benchmark secure inference and verify op counts.")
    ap.add_argument("--net", required=True, help="network dir or template name")
    ap.add_argument("--trials", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--tolerance", type=float, default=1e-2, help="max abs logit error vs oracle")
    ap.add_argument("--report", default="", help="write all run reports here (JSON)")
    add_common(ap)
    args = ap.parse_args(argv)
    setup_logging(args.verbose)
    if args.trials < 1:
        ap.error("--trials must be >= 1")

    try:
        config = session_config(args)
        net = load_bench_net(args.net, args.seed, config.fp.scale_bits)
        plan = plan_stages(net, config.n)
    except (UsageError, ManifestError, ValueError) as e:
        print(f"{ap.prog}: error: {e}")
        return EXIT_USAGE

    rng = np.random.default_rng(args.seed)
    reports, problems = [], []
    for trial in range(args.trials):
        x = rng.uniform(-1.0, 1.0, size=tuple(net.input_dims))
        x = np.round(x * (1 << config.fp.scale_bits)) / (1 << config.fp.scale_bits)
        try:
            result = run_secure_inference(net, x, config, client_seed=args.seed * 1000 + 2 * trial,
                                          server_seed=args.seed * 1000 + 2 * trial + 1)
        except PeerError as e:
            print(f"{ap.prog}: trial {trial}: session aborted: {e.text} (code {e.code})")
            return EXIT_PROTOCOL
        except (ProtocolError, TransportError, PheError, EncodingOverflow, ValueError) as e:
            print(f"{ap.prog}: trial {trial}: session failed: {e}")
            return EXIT_PROTOCOL
        rep = build_report(net, result, config, infer_ref(net, x))
        reports.append(rep)
        found = check_counts(result, plan, config.n, config.phe.ct_bytes)
        if rep.max_abs_error > args.tolerance or not rep.argmax_agree:
            found.append(f"max abs error {rep.max_abs_error:.3g} (tolerance {args.tolerance}), "
                         f"label {rep.label} vs oracle {rep.oracle_label}")
        problems += [f"trial {trial}: {p}" for p in found]
        log.info("trial %d: label %d, error %.3g, %.2fs", trial, rep.label, rep.max_abs_error, rep.seconds)

    print(render(reports))
    totals = pd.DataFrame([{"trials": len(reports),
                            "argmax_agreement": float(np.mean([r.argmax_agree for r in reports])),
                            "max_abs_error": max(r.max_abs_error for r in reports),
                            "mean_seconds": round(float(np.mean([r.seconds for r in reports])), 3),
                            "perm": sum(r.perm_total for r in reports)}])
    print("\nSummary")
    print(totals.to_string(index=False))

    if args.report:
        path = write_reports(args.report, reports, network=net.name, trials=len(reports), violations=problems)
        print("\nWrote:")
        print(" -", path)
    if problems:
        for p in problems:
            print(f"[fail] {p}")
        return EXIT_VERIFY
    print("all checks passed")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
