#!/usr/bin/env python3
"""
Run reports: one JSON document per secure inference, plus rendering.

A report holds the network name, backend, scores, per-stage and total
operation counters for both parties (server fields are null when the server
ran remotely), online/offline byte counts, wall-clock per stage, saturation
count, and the oracle comparison when one was requested.

Inputs:
  - report JSON written by infer.py --report or bench.py --report
    (a single run, or {"runs": [...]})

Outputs:
  - console tables (per-stage and per-run summary), or CSV with --format csv
  - <stem>_stages.csv / <stem>_runs.csv (+ .parquet if pyarrow installed) with --out-dir

Usage:
  python scripts/report.py --in out/netA_report.json
  python scripts/report.py --in out/bench.json --format csv --out-dir out/tables
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np
import pandas as pd

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
STAGE_COLUMNS = ["run", "stage", "kind", "activation", "client_mult", "client_add", "client_perm",
                 "server_mult", "server_add", "server_perm", "online_bytes", "linear_bytes", "client_ms",
                 "server_ms"]
RUN_COLUMNS = ["run", "network", "backend", "label", "oracle_label", "max_abs_error", "argmax_agree",
               "perm", "mult", "add", "online_kb", "offline_kb", "seconds", "saturation"]


@dataclass
class RunReport:
    network: str
    backend: str
    n: int
    scale_bits: int
    scores: List[float]
    label: int
    stages: List[dict]
    client_total: dict
    server_total: Optional[dict]
    bytes: dict
    seconds: float
    saturation: int
    max_abs_error: Optional[float] = None
    argmax_agree: Optional[bool] = None
    oracle_label: Optional[int] = None
    schema: int = SCHEMA_VERSION
    extra: dict = field(default_factory=dict)

    @property
    def perm_total(self) -> int:
        total = self.client_total.get("perm", 0)
        if self.server_total:
            total += self.server_total.get("perm", 0)
        return total

    def op_total(self, name: str) -> int:
        return sum((t or {}).get(name, 0) for t in (self.client_total, self.server_total))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**known)


def _stage_row(client_st, server_st, session_bytes) -> dict:
    row = {"stage": client_st.index, "kind": client_st.kind, "activation": client_st.activation,
           "client": client_st.ops.as_dict(), "client_ms": round(client_st.seconds * 1000, 3),
           "online_bytes": client_st.bytes.online,
           "linear_bytes": session_bytes.layer_bytes(client_st.index, "CT_UPLOAD", "BLINDED_LINEAR"),
           "server": None, "server_ms": None}
    if server_st is not None:
        row["server"] = server_st.ops.as_dict()
        row["server_ms"] = round(server_st.seconds * 1000, 3)
    return row


def build_report(net, result, config, oracle_scores=None) -> RunReport:
    """RunReport from an InferenceResult; oracle_scores adds the error fields."""
    client, server = result.client, result.server
    server_stages = {st.index: st for st in server.stages} if server else {}
    stages = [_stage_row(st, server_stages.get(st.index), client.bytes) for st in client.stages]
    b = client.bytes
    scores = np.asarray(result.scores, dtype=np.float64).ravel()
    rep = RunReport(network=net.name, backend=config.backend, n=config.n, scale_bits=config.fp.scale_bits,
                    scores=[float(s) for s in scores], label=int(result.label), stages=stages,
                    client_total=client.total.as_dict(), server_total=server.total.as_dict() if server else None,
                    bytes={"online": b.online, "offline": b.offline, "sent": b.sent, "received": b.received,
                           "by_type": dict(b.by_type)},
                    seconds=round(client.seconds, 4),
                    saturation=client.saturation + (server.saturation if server else 0))
    if oracle_scores is not None:
        ref = np.asarray(oracle_scores, dtype=np.float64).ravel()
        if ref.shape != scores.shape:
            raise ValueError(f"oracle has {ref.size} scores, secure run has {scores.size}")
        rep.max_abs_error = float(np.max(np.abs(ref - scores))) if ref.size else 0.0
        rep.oracle_label = int(np.argmax(ref))
        rep.argmax_agree = rep.oracle_label == rep.label
    return rep


def write_reports(path, reports: List[RunReport], **extra):
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    if len(reports) == 1 and not extra:
        doc = reports[0].to_dict()
    else:
        doc = {"schema": SCHEMA_VERSION, **extra, "runs": [r.to_dict() for r in reports]}
    p.write_text(json.dumps(doc, indent=2), encoding="utf-8")
    return p


def load_reports(path) -> List[RunReport]:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"report not found: {p}")
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ValueError(f"{p} is not valid JSON: {e}") from e
    runs = doc["runs"] if isinstance(doc, dict) and "runs" in doc else [doc]
    out = []
    for i, d in enumerate(runs):
        if not isinstance(d, dict) or "network" not in d or "stages" not in d:
            raise ValueError(f"{p}: run {i} is not a run report")
        if d.get("schema", SCHEMA_VERSION) != SCHEMA_VERSION:
            print(f"[warn] {p}: run {i} has schema {d.get('schema')}, expected {SCHEMA_VERSION}")
        out.append(RunReport.from_dict(d))
    return out


def stage_frame(reports: List[RunReport]) -> pd.DataFrame:
    rows = []
    for run, rep in enumerate(reports):
        for st in rep.stages:
            c, s = st.get("client") or {}, st.get("server") or {}
            rows.append({"run": run, "stage": st["stage"], "kind": st["kind"], "activation": st["activation"],
                         "client_mult": c.get("mult_plain"), "client_add": _adds(c), "client_perm": c.get("perm"),
                         "server_mult": s.get("mult_plain"), "server_add": _adds(s), "server_perm": s.get("perm"),
                         "online_bytes": st.get("online_bytes"), "linear_bytes": st.get("linear_bytes"),
                         "client_ms": st.get("client_ms"),
                         "server_ms": st.get("server_ms")})
    return pd.DataFrame(rows, columns=STAGE_COLUMNS)


def _adds(ops: dict):
    if not ops:
        return None
    return ops.get("add_ct", 0) + ops.get("add_plain", 0)


def run_frame(reports: List[RunReport]) -> pd.DataFrame:
    rows = []
    for run, rep in enumerate(reports):
        rows.append({"run": run, "network": rep.network, "backend": rep.backend, "label": rep.label,
                     "oracle_label": rep.oracle_label, "max_abs_error": rep.max_abs_error,
                     "argmax_agree": rep.argmax_agree, "perm": rep.perm_total,
                     "mult": rep.op_total("mult_plain"), "add": rep.op_total("add_ct") + rep.op_total("add_plain"),
                     "online_kb": round(rep.bytes.get("online", 0) / 1024, 1),
                     "offline_kb": round(rep.bytes.get("offline", 0) / 1024, 1),
                     "seconds": rep.seconds, "saturation": rep.saturation})
    return pd.DataFrame(rows, columns=RUN_COLUMNS)


def write_tables(reports: List[RunReport], out_dir, stem: str = "report") -> List[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, df in (("stages", stage_frame(reports)), ("runs", run_frame(reports))):
        csv_path = out_dir / f"{stem}_{name}.csv"
        df.to_csv(csv_path, index=False)
        written.append(csv_path)
        try:
            import pyarrow as pa, pyarrow.parquet as pq
            pq.write_table(pa.Table.from_pandas(df), out_dir / f"{stem}_{name}.parquet")
            written.append(out_dir / f"{stem}_{name}.parquet")
        except Exception:
            pass
    return written


def render(reports: List[RunReport], fmt: str = "table") -> str:
    stages, runs = stage_frame(reports), run_frame(reports)
    if fmt == "csv":
        return stages.to_csv(index=False) + "\n" + runs.to_csv(index=False)
    return ("Per-stage counters\n" + stages.to_string(index=False, na_rep="-") +
            "\n\nRuns\n" + runs.to_string(index=False, na_rep="-"))


def main(argv=None):
    from cli_common import EXIT_USAGE, ArgParser, setup_logging

    ap = ArgParser(description="Render run reports as tables or CSV.")
    ap.add_argument("--in", dest="inp", required=True, help="report JSON")
    ap.add_argument("--format", choices=("table", "csv"), default="table")
    ap.add_argument("--out-dir", default="", help="also write CSV (+ parquet) tables here")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args(argv)
    setup_logging(args.verbose)

    try:
        reports = load_reports(args.inp)
    except (FileNotFoundError, ValueError, KeyError, TypeError) as e:
        print(f"{ap.prog}: error: {e}")
        return EXIT_USAGE

    print(render(reports, args.format))
    if args.out_dir:
        written = write_tables(reports, args.out_dir, Path(args.inp).stem)
        print("\nWrote:")
        for p in written:
            print(" -", p)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
