"""Command-line client: reads source files, calls the service layer, and
writes artifacts. Exit codes: 0 success/PASS, 1 diagnostics, 2 verification
FAIL, 3 simulator error."""

from __future__ import annotations

import argparse
import json
import pathlib
import sys

from . import harness as H
from . import service as SVC


def _read_sources(args) -> SVC.CompileRequest:
    texts = {}
    for key, path in (("rec", args.rec), ("sched", args.sched), ("grid", args.grid)):
        p = pathlib.Path(path)
        if not p.exists():
            print(f"error: missing {key} file {path}", file=sys.stderr)
            raise SystemExit(H.EXIT_DIAGNOSTICS)
        texts[key] = p.read_text()
    return SVC.CompileRequest(**texts)


def _out_dir(args) -> pathlib.Path | None:
    if not args.out_dir:
        return None
    d = pathlib.Path(args.out_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _do_compile(args, dump_only: str | None = None) -> int:
    resp = SVC.handle_compile(_read_sources(args))
    if not resp.ok:
        for d in resp.diagnostics:
            print(f"error: {d}", file=sys.stderr)
        return H.EXIT_DIAGNOSTICS
    if dump_only == "ir":
        print(resp.ir, end="")
        return H.EXIT_OK
    if dump_only == "programs":
        print(resp.programs, end="")
        return H.EXIT_OK
    d = _out_dir(args)
    if d is not None:
        (d / "ir.txt").write_text(resp.ir)
        (d / "programs.txt").write_text(resp.programs)
        (d / "skews.json").write_text(resp.skews)
        print(f"wrote ir.txt, programs.txt, skews.json to {d}")
    else:
        print(resp.ir, end="")
    return H.EXIT_OK


def _do_run(args) -> int:
    req = SVC.RunRequest(**_read_sources(args).model_dump(), seed=args.seed,
                         verify=args.verify, trace=True)
    resp = SVC.handle_run(req)
    print(f"{resp.verdict} steps={resp.steps} seed={resp.seed} {resp.detail}")
    d = _out_dir(args)
    if d is not None and resp.metrics is not None:
        (d / "metrics.json").write_text(json.dumps(resp.metrics, indent=2))
        (d / "trace.csv").write_text(resp.trace_csv)
        (d / "verdict.txt").write_text(
            f"{resp.verdict}\nseed={resp.seed}\n{resp.detail}\n")
    return resp.exit_code


def _do_sweep(args) -> int:
    req = SVC.SweepRequest(**_read_sources(args).model_dump(), seed=args.seed,
                           latencies=args.latency, bandwidths=args.bandwidth,
                           capacities=args.capacity)
    resp = SVC.handle_sweep(req)
    d = _out_dir(args)
    if d is not None:
        (d / "sweep.csv").write_text(resp.csv)
        print(f"wrote sweep.csv to {d}")
    else:
        print(resp.csv, end="")
    return H.EXIT_OK


def _do_serve(args) -> int:
    import uvicorn
    uvicorn.run("gridflow.service:app", host=args.host, port=args.port)
    return H.EXIT_OK


def _add_source_flags(p):
    p.add_argument("--rec", required=True, help="recurrence file (.rec)")
    p.add_argument("--sched", required=True, help="schedule file (.sched)")
    p.add_argument("--grid", required=True, help="grid config file (.grid)")
    p.add_argument("--out-dir", default=None)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="gridflow",
        description="compile tensor recurrences to per-PE grid programs and "
                    "simulate them")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("compile", help="compile and write IR/program dumps")
    _add_source_flags(p)

    p = sub.add_parser("dump-ir", help="print the dataflow IR")
    _add_source_flags(p)

    p = sub.add_parser("dump-programs", help="print per-cell programs")
    _add_source_flags(p)

    p = sub.add_parser("run", help="compile, simulate, verify")
    _add_source_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--verify", choices=("off", "oracle", "tags"), default="oracle")

    p = sub.add_parser("sweep", help="sweep link parameters")
    _add_source_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--latency", type=int, nargs="*", default=[1])
    p.add_argument("--bandwidth", type=int, nargs="*", default=[1])
    p.add_argument("--capacity", type=int, nargs="*", default=[2])

    p = sub.add_parser("serve", help="start the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)

    args = parser.parse_args(argv)
    try:
        return _dispatch(args)
    except SystemExit as e:
        return int(e.code or 0)


def _dispatch(args) -> int:
    if args.command == "compile":
        return _do_compile(args)
    if args.command == "dump-ir":
        return _do_compile(args, dump_only="ir")
    if args.command == "dump-programs":
        return _do_compile(args, dump_only="programs")
    if args.command == "run":
        return _do_run(args)
    if args.command == "sweep":
        return _do_sweep(args)
    if args.command == "serve":
        return _do_serve(args)
    return H.EXIT_DIAGNOSTICS


if __name__ == "__main__":
    sys.exit(main())
