"""Trace-driven runner.

``tileserve run`` ingests a JSONL request trace and executes the
serving loop, either numerically on the toy model (optionally
cross-checked row by row against a dense recompute) or cost-only on
the accelerator model. ``tileserve gen-trace`` writes synthetic
traces. Exit codes: 0 success, 2 parse/config error, 3 failed oracle
check.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .engine import Engine, EngineRequest, OracleCheckFailure
from .oracle import ToyModel
from .trace import PROFILES, ParseError, gen_trace, parse_trace, write_trace


def run_trace(
    trace_path: str,
    config_path: str | None,
    mode: str,
    *,
    check: bool = False,
    seed: int = 0,
    profile_linear: bool = False,
) -> dict:
    cfg = load_config(config_path)
    requests = parse_trace(trace_path)
    model = ToyModel.seeded(cfg.model, seed=seed)
    engine = Engine(
        model,
        cfg,
        numeric=(mode == "numeric"),
        check=check,
        seed=seed,
        profile_linear=profile_linear,
    )
    for req in requests:
        if max(req.prompt, default=0) >= cfg.model.vocab_size:
            raise ParseError(0, f"request {req.req_id}: token id beyond model.vocab_size")
        engine.submit(
            EngineRequest(
                req_id=req.req_id,
                prompt=req.prompt,
                output_len=req.output_len,
                arrival=req.arrival,
                spec=req.spec,
            )
        )
    return engine.run()


def _plot_rows(report: dict) -> list[tuple[float, str, float]]:
    rows: list[tuple[float, str, float]] = []
    ts = 0.0
    for rid, stats in report["requests"].items():
        rows.append((stats["ttft"], f"ttft.{rid}", stats["ttft"]))
        rows.append((stats["ttft"], f"tbt.{rid}", stats["tbt"]))
    rows.append((report["makespan_ticks"], "qps", report["qps"]))
    rows.append((ts, "skip_ratio", report["skip"]["skip_ratio"]))
    return rows


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="tileserve")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="replay a request trace")
    run_p.add_argument("--trace", required=True)
    run_p.add_argument("--config", default=None)
    run_p.add_argument("--mode", choices=("numeric", "simulate"), default="simulate")
    run_p.add_argument("--check", action="store_true", help="verify rows against dense recompute")
    run_p.add_argument("--report", default=None, help="write the JSON report here")
    run_p.add_argument("--plot-csv", default=None, help="write ts,metric,value rows here")
    run_p.add_argument("--seed", type=int, default=0)
    run_p.add_argument("--profile-linear", action="store_true", help="profile GEMM orderings first")

    gen_p = sub.add_parser("gen-trace", help="generate a synthetic trace")
    gen_p.add_argument("--profile", choices=PROFILES, required=True)
    gen_p.add_argument("--seed", type=int, default=0)
    gen_p.add_argument("--count", type=int, required=True)
    gen_p.add_argument("--vocab", type=int, default=128)
    gen_p.add_argument("--spec-width", type=int, default=0)
    gen_p.add_argument("--spec-depth", type=int, default=0)
    gen_p.add_argument("--out", required=True)

    args = parser.parse_args(argv)

    if args.command == "gen-trace":
        spec = (args.spec_width, args.spec_depth) if args.spec_width and args.spec_depth else None
        try:
            rows = gen_trace(args.profile, args.seed, args.count, vocab_size=args.vocab, spec=spec)
        except ValueError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        write_trace(rows, args.out)
        print(f"wrote {len(rows)} requests to {args.out}")
        return 0

    try:
        report = run_trace(
            args.trace,
            args.config,
            args.mode,
            check=args.check,
            seed=args.seed,
            profile_linear=args.profile_linear,
        )
    except (ParseError, ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OracleCheckFailure as exc:
        print(f"oracle check failed: {exc}", file=sys.stderr)
        return 3

    text = json.dumps(report, indent=2, sort_keys=True)
    if args.report:
        Path(args.report).write_text(text + "\n")
    else:
        print(text)
    if args.plot_csv:
        lines = ["ts,metric,value"]
        for ts, metric, value in _plot_rows(report):
            lines.append(f"{ts!r},{metric},{value!r}")
        Path(args.plot_csv).write_text("\n".join(lines) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
