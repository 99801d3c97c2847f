"""End-to-end driver: compile a recurrence + schedule + grid config, simulate,
verify against a reference oracle, and emit artifacts.

Verification picks its independent dense oracle from the program's structure
(matmul, triangular solve, Cholesky, attention, running sum); programs outside
those shapes fall back to the big-step IR evaluation as the reference. Random
inputs come from a recorded 64-bit seed through numpy's default generator,
conditioned so solves stay well-posed.
"""

from __future__ import annotations

import json
import pathlib
from dataclasses import dataclass, field

import numpy as np

from . import frontend as F
from . import kernels as K
from . import lowering as LOW
from . import schedule as SCH
from . import simulator as SIM
from . import spacetime as ST
from .store import TensorStore, dense_shape

ORACLE_TOLERANCE = 1e-10


class HarnessError(Exception):
    pass


@dataclass
class RunManifest:
    """Inputs of one compile/run: source paths, randomness, verification mode,
    and output locations."""
    rec_path: str
    sched_path: str
    grid_path: str
    seed: int = 0
    verify: str = "oracle"         # 'off' | 'oracle' | 'tags'
    out_dir: str | None = None

    def sources(self) -> tuple[str, str, str]:
        texts = []
        for p in (self.rec_path, self.sched_path, self.grid_path):
            path = pathlib.Path(p)
            if not path.exists():
                raise HarnessError(f"missing input file {p}")
            texts.append(path.read_text())
        return tuple(texts)


@dataclass
class CompileOutcome:
    ok: bool
    diagnostics: list[str] = field(default_factory=list)
    dfp: LOW.DataflowProgram | None = None
    compiled: ST.CompiledGrid | None = None
    cfg: SIM.GridConfig | None = None
    ir_dump: str = ""
    program_dump: str = ""
    skew_json: str = ""


@dataclass
class RunOutcome:
    verdict: str                   # 'PASS' | 'FAIL' | 'ERROR' | 'UNVERIFIED'
    detail: str = ""
    rel_error: float | None = None
    steps: int = 0
    metrics_json: str = ""
    trace_csv: str = ""
    seed: int = 0
    compile_outcome: CompileOutcome | None = None
    outputs: dict[str, np.ndarray] = field(default_factory=dict)
    alignment_ok: bool | None = None


def compile_texts(rec: str, sched: str, grid: str) -> CompileOutcome:
    try:
        checked = F.validate(F.parse_program(rec))
        schedule = SCH.parse_schedule(sched, checked)
        diags = SCH.check_schedule(schedule, checked)
        if diags:
            return CompileOutcome(False, [str(d) for d in diags])
        cfg = SIM.GridConfig.parse(grid)
        dfp = LOW.lower(checked, schedule)
        compiled = ST.compile_grid(dfp, cfg)
    except (F.FrontendError, SCH.ScheduleError, LOW.LoweringError,
            ST.CodegenError, SIM.SimulatorError) as e:
        return CompileOutcome(False, [str(e)])
    return CompileOutcome(True, [], dfp, compiled, cfg,
                          LOW.dump_ir(dfp), compiled.dump_programs(),
                          compiled.skews.to_json())


# ---------------------------------------------------------------------------
# structural input generation and oracle detection
# ---------------------------------------------------------------------------

def _tensor_roles(checked: F.CheckedProgram):
    """Input tensors that must be lower-triangular nonsingular (solve
    operands) or symmetric positive definite (factorization minuends)."""
    tri, spd = set(), set()
    for region in checked.regions:
        outer = region.outer
        if outer.is_identity:
            continue
        args = [a for a in outer.args if a is not None]
        if outer.kernel == "TRSM" and args:
            tri.add(args[0].tensor)
        if outer.kernel == "CHOL" and outer.minuend is not None:
            spd.add(outer.minuend.tensor)
    return tri, spd


def generate_inputs(checked: F.CheckedProgram, seed: int) -> dict[str, np.ndarray]:
    g = np.random.default_rng(np.uint64(seed))
    tri, spd = _tensor_roles(checked)
    inputs = {}
    for name, decl in checked.tensors.items():
        if name in checked.outputs:
            continue
        shape = dense_shape(decl)
        arr = g.random(shape)
        if name in tri:
            arr = np.tril(arr) + max(shape) * np.eye(shape[0], shape[1])
        elif name in spd:
            arr = arr @ arr.T + max(shape) * np.eye(shape[0])
        inputs[name] = arr
    return inputs


def _region_shape(checked: F.CheckedProgram) -> str:
    regions = checked.regions
    kernels = sorted({r.body_kernel for r in regions}
                     | {r.outer.kernel for r in regions if not r.outer.is_identity})
    if len(regions) == 1:
        r = regions[0]
        if r.body_kernel == "mul" and r.outer.is_identity and not r.dependencies:
            return "matmul"
        if r.outer.kernel == "TRSM":
            return "trsm"
        if r.body_kernel == "SOFTMAXSTEP":
            return "attention"
        if r.direct_expr is not None and r.dependencies:
            return "prefix"
    if len(regions) == 2 and "CHOL" in kernels:
        return "cholesky"
    return "generic"


def reference_outputs(checked: F.CheckedProgram,
                      inputs: dict[str, np.ndarray],
                      dfp: LOW.DataflowProgram | None = None) -> tuple[dict, str]:
    shape = _region_shape(checked)
    if shape == "matmul":
        return {"C": K.oracle_matmul(inputs["A"], inputs["B"])}, shape
    if shape == "trsm":
        region = checked.regions[0]
        l = [a for a in region.outer.args if a is not None][0].tensor
        b = region.outer.minuend.tensor
        return {region.out_tensor: K.oracle_trsm(inputs[l], inputs[b])}, shape
    if shape == "cholesky":
        out = checked.regions[0].out_tensor
        src = checked.regions[0].outer.minuend.tensor
        return {out: K.oracle_cholesky(inputs[src])}, shape
    if shape == "attention":
        region = checked.regions[0]
        q, kk, v = [a.tensor for a in region.body_operands]
        return {region.out_tensor:
                K.oracle_attention(inputs[q], inputs[kk], inputs[v])}, shape
    if shape == "prefix":
        region = checked.regions[0]
        a = [x.tensor for x in region.body_operands
             if x.tensor not in checked.outputs][0]
        decl = checked.tensors[a]
        n, (tr, tc) = decl.extents[0], decl.tile
        ref = K.oracle_prefix_sum(inputs[a].reshape(n, tr, tc)).reshape(n * tr, tc)
        return {region.out_tensor: ref}, shape
    # generic fallback: the big-step IR evaluation is the reference
    out = LOW.evaluate(dfp, inputs)
    return {name: out.arrays[name] for name in checked.outputs}, shape


def _compare(checked, got: TensorStore, want: dict) -> tuple[bool, float]:
    worst = 0.0
    for name, ref in want.items():
        val = got.arrays[name]
        if _is_triangular_output(checked, name):
            val = np.tril(val)
            ref = np.tril(ref)
        worst = max(worst, K.rel_error(val, ref))
    return worst <= ORACLE_TOLERANCE, worst


def _is_triangular_output(checked, name) -> bool:
    regions = [r for r in checked.regions if r.out_tensor == name]
    covered = set()
    for r in regions:
        for pt in F.enumerate_points(r.iter_vars, r.var_extents, r.constraints):
            covered.add(tuple(pt[i.var] if i.var else i.offset
                              for i in r.out_indices))
    decl = checked.tensors[name]
    full = {tuple(x) for x in np.ndindex(*decl.extents)}
    return covered != full


def run_texts(rec: str, sched: str, grid: str, seed: int = 0,
              verify: str = "oracle", want_trace: bool = True) -> RunOutcome:
    comp = compile_texts(rec, sched, grid)
    if not comp.ok:
        return RunOutcome("ERROR", "; ".join(comp.diagnostics),
                          compile_outcome=comp, seed=seed)
    checked = comp.dfp.checked
    inputs = generate_inputs(checked, seed)
    sim = SIM.build_grid(comp.cfg, comp.compiled, trace=want_trace)
    try:
        result = SIM.run(sim, inputs)
    except SIM.SimulatorError as e:
        return RunOutcome("ERROR", str(e), compile_outcome=comp, seed=seed)
    outcome = RunOutcome("UNVERIFIED", steps=result.steps, seed=seed,
                         metrics_json=result.metrics.to_json(),
                         trace_csv=result.trace.to_csv() if want_trace else "",
                         compile_outcome=comp,
                         outputs=dict(result.outputs.arrays))
    if verify == "off":
        return outcome
    want, shape = reference_outputs(checked, inputs, comp.dfp)
    ok, err = _compare(checked, result.outputs, want)
    outcome.rel_error = err
    outcome.detail = f"oracle={shape} rel_error={err:.3e}"
    if verify == "tags":
        report = SIM.check_alignment(result.trace)
        outcome.alignment_ok = report.empty
        if not report.empty:
            outcome.verdict = "FAIL"
            outcome.detail += f"; alignment: {report.first()}"
            return outcome
    outcome.verdict = "PASS" if ok else "FAIL"
    return outcome


def sweep_texts(rec: str, sched: str, grid: str, seed: int = 0,
                latencies=(1,), bandwidths=(1,), capacities=(2,)) -> list[dict]:
    """One row per configuration; failures are recorded per row and the sweep
    continues. Rows are independent and reproducible."""
    rows = []
    for lat in latencies:
        for bw in bandwidths:
            for cap in capacities:
                row = {"latency": lat, "bandwidth": bw, "chan_cap": cap,
                       "total_steps": "", "mean_utilization": "", "error": ""}
                base = SIM.GridConfig.parse(grid)
                cfg_text = (f"rank={base.rank} "
                            f"extents={'x'.join(map(str, base.extents))} "
                            f"topology={base.topology} latency={lat} "
                            f"bandwidth={bw} chan_cap={cap} "
                            f"regfile={base.regfile} "
                            f"broadcast={'true' if base.broadcast else 'false'}")
                try:
                    out = run_texts(rec, sched, cfg_text, seed=seed,
                                    verify="off", want_trace=False)
                    if out.verdict == "ERROR":
                        row["error"] = out.detail
                    else:
                        metrics = json.loads(out.metrics_json)
                        utils = [p["utilization"] for p in metrics["pes"]]
                        row["total_steps"] = out.steps
                        row["mean_utilization"] = round(float(np.mean(utils)), 6)
                except Exception as e:  # per-row isolation
                    row["error"] = str(e)
                rows.append(row)
    return rows


def sweep_csv(rows: list[dict]) -> str:
    header = ["latency", "bandwidth", "chan_cap", "total_steps",
              "mean_utilization", "error"]
    lines = [",".join(header)]
    for r in rows:
        lines.append(",".join(str(r[h]) for h in header))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# manifest-level commands (file IO around the text pipeline)
# ---------------------------------------------------------------------------

def _out_dir(manifest: RunManifest) -> pathlib.Path:
    d = pathlib.Path(manifest.out_dir or ".")
    d.mkdir(parents=True, exist_ok=True)
    return d


def cmd_compile(manifest: RunManifest) -> CompileOutcome:
    rec, sched, grid = manifest.sources()
    comp = compile_texts(rec, sched, grid)
    if comp.ok and manifest.out_dir:
        d = _out_dir(manifest)
        (d / "ir.txt").write_text(comp.ir_dump)
        (d / "programs.txt").write_text(comp.program_dump)
        (d / "skews.json").write_text(comp.skew_json)
    return comp


def cmd_run(manifest: RunManifest) -> RunOutcome:
    rec, sched, grid = manifest.sources()
    outcome = run_texts(rec, sched, grid, seed=manifest.seed,
                        verify=manifest.verify)
    if manifest.out_dir and outcome.verdict != "ERROR":
        d = _out_dir(manifest)
        (d / "metrics.json").write_text(outcome.metrics_json)
        (d / "trace.csv").write_text(outcome.trace_csv)
        (d / "verdict.txt").write_text(
            f"{outcome.verdict}\nseed={outcome.seed}\n{outcome.detail}\n")
        np.savez(d / "outputs.npz", **outcome.outputs)
    return outcome


def cmd_sweep(manifest: RunManifest, latencies=(1,), bandwidths=(1,),
              capacities=(2,)) -> str:
    rec, sched, grid = manifest.sources()
    rows = sweep_texts(rec, sched, grid, seed=manifest.seed,
                       latencies=latencies, bandwidths=bandwidths,
                       capacities=capacities)
    csv = sweep_csv(rows)
    if manifest.out_dir:
        (_out_dir(manifest) / "sweep.csv").write_text(csv)
    return csv


EXIT_OK = 0
EXIT_DIAGNOSTICS = 1
EXIT_VERIFY_FAIL = 2
EXIT_SIMULATOR_ERROR = 3


def exit_code(outcome) -> int:
    if isinstance(outcome, CompileOutcome):
        return EXIT_OK if outcome.ok else EXIT_DIAGNOSTICS
    if outcome.verdict in ("PASS", "UNVERIFIED"):
        return EXIT_OK
    if outcome.verdict == "FAIL":
        return EXIT_VERIFY_FAIL
    if outcome.compile_outcome is not None and not outcome.compile_outcome.ok:
        return EXIT_DIAGNOSTICS
    return EXIT_SIMULATOR_ERROR
