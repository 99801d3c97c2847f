"""HTTP service wrapping the compiler and simulator.

The service is stateless: requests carry the recurrence/schedule/grid sources
as text and responses carry the artifacts (IR dump, program dump, skew table,
metrics, traces) in the body. File handling stays with clients. The CLI calls
the same handler functions in process.
"""

from __future__ import annotations

import json

from fastapi import FastAPI
from pydantic import BaseModel, Field

from . import examples as EX
from . import harness as H
from .__init__ import __version__


class CompileRequest(BaseModel):
    rec: str = Field(description="recurrence source (.rec)")
    sched: str = Field(description="schedule source (.sched)")
    grid: str = Field(description="grid configuration (.grid)")


class CompileResponse(BaseModel):
    ok: bool
    diagnostics: list[str] = []
    ir: str = ""
    programs: str = ""
    skews: str = ""


class RunRequest(CompileRequest):
    seed: int = 0
    verify: str = "oracle"          # off | oracle | tags
    trace: bool = False


class RunResponse(BaseModel):
    verdict: str
    detail: str = ""
    steps: int = 0
    rel_error: float | None = None
    metrics: dict | None = None
    trace_csv: str = ""
    seed: int = 0
    exit_code: int = 0


class SweepRequest(CompileRequest):
    seed: int = 0
    latencies: list[int] = [1]
    bandwidths: list[int] = [1]
    capacities: list[int] = [2]


class SweepResponse(BaseModel):
    rows: list[dict]
    csv: str


class ExampleSources(BaseModel):
    name: str
    rec: str
    sched: str
    grid: str


def handle_compile(req: CompileRequest) -> CompileResponse:
    out = H.compile_texts(req.rec, req.sched, req.grid)
    return CompileResponse(ok=out.ok, diagnostics=out.diagnostics,
                           ir=out.ir_dump, programs=out.program_dump,
                           skews=out.skew_json)


def handle_run(req: RunRequest) -> RunResponse:
    out = H.run_texts(req.rec, req.sched, req.grid, seed=req.seed,
                      verify=req.verify, want_trace=req.trace or
                      req.verify == "tags")
    metrics = json.loads(out.metrics_json) if out.metrics_json else None
    return RunResponse(verdict=out.verdict, detail=out.detail, steps=out.steps,
                       rel_error=out.rel_error, metrics=metrics,
                       trace_csv=out.trace_csv if req.trace else "",
                       seed=out.seed, exit_code=H.exit_code(out))


def handle_sweep(req: SweepRequest) -> SweepResponse:
    rows = H.sweep_texts(req.rec, req.sched, req.grid, seed=req.seed,
                         latencies=req.latencies, bandwidths=req.bandwidths,
                         capacities=req.capacities)
    return SweepResponse(rows=rows, csv=H.sweep_csv(rows))


def handle_examples() -> list[ExampleSources]:
    out = []
    for name, ex in sorted(EX.EXAMPLES.items()):
        rec, sched, grid = ex.sources()
        out.append(ExampleSources(name=name, rec=rec, sched=sched, grid=grid))
    return out


app = FastAPI(title="gridflow", version=__version__,
              description="compile tensor recurrences to per-PE grid programs "
                          "and simulate them")


@app.get("/health")
def health():
    return {"status": "ok", "version": __version__}


@app.post("/compile", response_model=CompileResponse)
def compile_endpoint(req: CompileRequest):
    return handle_compile(req)


@app.post("/run", response_model=RunResponse)
def run_endpoint(req: RunRequest):
    return handle_run(req)


@app.post("/sweep", response_model=SweepResponse)
def sweep_endpoint(req: SweepRequest):
    return handle_sweep(req)


@app.get("/examples", response_model=list[ExampleSources])
def examples_endpoint():
    return handle_examples()
