"""Command line interface: verify, bench, and gen.

Exit codes: 0 on success, 1 when a verification or sweep check fails,
2 on usage or configuration errors.  Output files are only written once
the configuration has validated.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .engine import EngineConfig
from .heads import load_gates
from .report import (render_sweep_figure, render_verify_figure, write_csv,
                     write_jsonl)
from .sweeps import AXES, run_sweep
from .verify import run_verify
from .workloads import WorkloadSpec, gen_workload


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", metavar="F",
                        help="engine config JSON file")
    parser.add_argument("--budget-tokens", type=int, metavar="N",
                        help="token budget per dense head (default 4096)")
    parser.add_argument("--reuse-interval", type=int, metavar="C",
                        help="decode steps sharing one page selection (default 4)")
    parser.add_argument("--physical-page", type=int, metavar="N",
                        help="tokens per physical page (default 64)")
    parser.add_argument("--logical-page", type=int, metavar="N",
                        help="tokens per logical page (default 16)")
    parser.add_argument("--target-sparsity", type=float, metavar="S",
                        help="fraction of heads converted to streaming (default 0.5)")
    parser.add_argument("--quant-bits", type=int, metavar="B",
                        help="KV quantization bits, 0 disables (default 4)")
    parser.add_argument("--seed", type=int, metavar="N",
                        help="base seed (default 0)")


def _build_config(args: argparse.Namespace) -> EngineConfig:
    data = {}
    if args.config:
        with open(args.config) as fp:
            data = json.load(fp)
    overrides = {
        "budget_tokens": args.budget_tokens,
        "reuse_interval": args.reuse_interval,
        "physical_page": args.physical_page,
        "logical_page": args.logical_page,
        "target_sparsity": args.target_sparsity,
        "quant_bits": args.quant_bits,
        "seed": args.seed,
    }
    data.update({k: v for k, v in overrides.items() if v is not None})
    return EngineConfig.from_dict(data)


def _cmd_verify(args: argparse.Namespace) -> int:
    cfg = _build_config(args)
    rows, ok = run_verify(cfg)
    for criterion in sorted({r.experiment for r in rows}):
        passed = all(r.passed for r in rows if r.experiment == criterion)
        print(f"[{'PASS' if passed else 'FAIL'}] {criterion}")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_csv(rows, out_dir / "verify.csv")
    write_jsonl(rows, out_dir / "verify.jsonl")
    if not args.no_plot:
        render_verify_figure(rows, out_dir / "verify.png")
    print(f"{sum(r.passed for r in rows)}/{len(rows)} rows passed; "
          f"results in {out_dir}")
    return 0 if ok else 1


def _cmd_bench(args: argparse.Namespace) -> int:
    cfg = _build_config(args)
    try:
        values = [float(v) for v in args.values.split(",") if v.strip()]
    except ValueError:
        raise ValueError(f"--values must be comma-separated numbers, got "
                         f"{args.values!r}")
    gates = None
    if args.gates:
        gates = load_gates(args.gates, args.layer)
    kwargs = {}
    if gates is not None:
        kwargs["num_heads"] = len(gates)
    rows = run_sweep(args.sweep, values, cfg, trials=args.trials, **kwargs)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(rows, out)
    write_jsonl(rows, out.with_suffix(".jsonl"))
    if not args.no_plot:
        render_sweep_figure(rows, args.sweep, out.with_suffix(".png"))
    failures = [r for r in rows if not r.passed]
    for row in failures:
        print(f"[FAIL] {row.experiment} {row.metric}: "
              f"{row.value} vs oracle {row.oracle}", file=sys.stderr)
    print(f"wrote {len(rows)} rows to {out}")
    return 1 if failures else 0


def _cmd_gen(args: argparse.Namespace) -> int:
    spec = WorkloadSpec.from_json(args.spec)
    w, truth = gen_workload(spec)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    np.savez(
        out, q=w.q, k=w.k, v=w.v,
        truth=json.dumps({
            "kind": truth.kind,
            "needle_positions": list(truth.needle_positions),
            "needle_pages": list(truth.needle_pages),
            "spec": spec.to_dict(),
        }),
    )
    print(f"wrote workload ({w.num_history} history tokens, "
          f"{w.num_heads} heads) to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sparsekv",
        description="Block-sparse attention over a paged, quantized KV cache: "
                    "verification and ablation harness.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_verify = sub.add_parser(
        "verify", help="run the full verification suite against its oracles")
    _add_config_flags(p_verify)
    p_verify.add_argument("--out", default="results", metavar="DIR",
                          help="output directory (default ./results)")
    p_verify.add_argument("--no-plot", action="store_true",
                          help="skip the PNG summary figure")
    p_verify.set_defaults(func=_cmd_verify)

    p_bench = sub.add_parser(
        "bench", help="sweep one knob and emit oracle-checked result rows")
    _add_config_flags(p_bench)
    p_bench.add_argument("--sweep", required=True, choices=AXES,
                         help="axis to sweep")
    p_bench.add_argument("--values", required=True, metavar="V1,V2,...",
                         help="comma-separated axis values")
    p_bench.add_argument("--out", required=True, metavar="PATH",
                         help="output CSV path (JSONL and PNG land beside it)")
    p_bench.add_argument("--trials", type=int, default=100,
                         help="workload trials per recall point (default 100)")
    p_bench.add_argument("--gates", metavar="F",
                         help="gate file (JSON array of per-layer arrays)")
    p_bench.add_argument("--layer", type=int, default=0,
                         help="layer to read from the gate file (default 0)")
    p_bench.add_argument("--no-plot", action="store_true",
                         help="skip the PNG figure")
    p_bench.set_defaults(func=_cmd_bench)

    p_gen = sub.add_parser(
        "gen", help="generate a seeded workload (.npz) from a spec JSON")
    p_gen.add_argument("--spec", required=True, metavar="F",
                       help="workload spec JSON")
    p_gen.add_argument("--out", required=True, metavar="PATH",
                       help="output .npz path")
    p_gen.set_defaults(func=_cmd_gen)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
