"""Deterministic grid simulator with bounded, latency-modeled channels.

Every context (feeder, PE, drain) advances once per global step in a fixed
order. Communication micro-ops are free; kernel computes cost steps. A value
pushed at step t becomes visible at t + latency (latency >= 1), so results
never depend on the within-step context order. A context blocked on a full or
empty channel retries next step and the step is charged to the matching stall
counter. Values carry their logical tags for alignment checking.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .lowering import (ComputeSpec, DataflowProgram, SubRef, _apply_kernel,
                       _combine)
from .spacetime import (Chan, CompiledGrid, DrainProgram, FeederProgram,
                        PEProgram, SkewTable)
from .store import TensorStore


class SimulatorError(Exception):
    pass


class DeadlockError(SimulatorError):
    def __init__(self, cycle):
        self.cycle = cycle
        super().__init__("deadlock: wait-for cycle " + " -> ".join(map(str, cycle)))


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GridConfig:
    rank: int
    extents: tuple[int, ...]
    topology: str = "mesh"          # 'mesh' | 'torus'
    latency: int = 1
    bandwidth: int = 1
    chan_cap: int = 2
    regfile: int = 16
    broadcast: bool = False
    compute_cost: int = 1

    def __post_init__(self):
        if self.rank not in (1, 2):
            raise SimulatorError("rank must be 1 or 2")
        if self.latency < 1 or self.bandwidth < 1 or self.chan_cap < 1:
            raise SimulatorError("latency, bandwidth, chan_cap must be >= 1")
        if any(e < 1 for e in self.extents):
            raise SimulatorError("extents must be >= 1")

    @staticmethod
    def parse(text: str) -> "GridConfig":
        kv = {}
        for tok in text.split():
            if tok.startswith("#"):
                break
            if "=" not in tok:
                raise SimulatorError(f"bad grid config token {tok!r}")
            k, v = tok.split("=", 1)
            kv[k] = v
        rank = int(kv.get("rank", 2))
        ext = tuple(int(x) for x in re.split("[x,]", kv.get("extents", "1")))
        return GridConfig(
            rank=rank, extents=ext,
            topology=kv.get("topology", "mesh"),
            latency=int(kv.get("latency", 1)),
            bandwidth=int(kv.get("bandwidth", 1)),
            chan_cap=int(kv.get("chan_cap", 2)),
            regfile=int(kv.get("regfile", 16)),
            broadcast=kv.get("broadcast", "false").lower() == "true",
            compute_cost=int(kv.get("compute_cost", 1)),
        )

    @staticmethod
    def for_dfp(dfp: DataflowProgram, **overrides) -> "GridConfig":
        need = {}
        for s in dfp.spaces:
            for p in s.decl.domain_points():
                env = dict(zip(s.vars, p))
                for a, pl in enumerate(s.placement):
                    from .lowering import _eval_idx
                    need[a] = max(need.get(a, 1), _eval_idx(pl, env) + 1)
        rank = max(need) + 1 if need else 1
        extents = tuple(need.get(a, 1) for a in range(rank))
        base = dict(rank=rank, extents=extents,
                    broadcast=any(f.kind == "broadcast"
                                  for s in dfp.spaces for f in s.operands))
        base.update(overrides)
        return GridConfig(**base)


# ---------------------------------------------------------------------------
# runtime pieces
# ---------------------------------------------------------------------------

@dataclass
class TaggedValue:
    payload: np.ndarray
    tag: tuple[str, tuple[int, ...]]
    arrival: int | None = None      # None: register-resident (exempt from timing)
    sent: int | None = None


class Channel:
    def __init__(self, key, capacity, latency, bandwidth):
        self.key = key
        self.capacity = capacity
        self.latency = latency
        self.bandwidth = bandwidth
        self.queue: list[TaggedValue] = []
        self.pushed_this_step = 0
        self.max_occupancy = 0
        self.total_sends = 0

    def can_push(self):
        if self.pushed_this_step >= self.bandwidth:
            return False
        return self.capacity is None or len(self.queue) < self.capacity

    def push(self, value: TaggedValue, now: int):
        value = TaggedValue(value.payload, value.tag, now + self.latency, now)
        self.queue.append(value)
        self.pushed_this_step += 1
        self.total_sends += 1
        self.max_occupancy = max(self.max_occupancy, len(self.queue))
        if self.capacity is not None and len(self.queue) > self.capacity:
            raise SimulatorError(f"channel {self.key} exceeded capacity")

    def can_pop(self, now: int):
        return bool(self.queue) and self.queue[0].arrival <= now

    def pop(self) -> TaggedValue:
        return self.queue.pop(0)


@dataclass
class Violation:
    step: int
    ctx: str
    kind: str           # 'recv-tag' | 'compute-tag' | 'store-tag'
    expected: tuple
    actual: tuple

    def __str__(self):
        return (f"step {self.step} {self.ctx}: {self.kind} expected "
                f"{self.expected}, got {self.actual}")


@dataclass
class TimingViolation:
    ctx: str
    step: int
    arrivals: list[tuple[tuple, int]]

    def __str__(self):
        ops = ", ".join(f"{t}@{a}" for t, a in self.arrivals)
        return f"{self.ctx} step {self.step}: unequal operand arrivals {ops}"


class Trace:
    def __init__(self, enabled=True):
        self.enabled = enabled
        self.rows: list[tuple] = []
        self.violations: list[Violation] = []

    def emit(self, step, ctx, event, channel, tag):
        if self.enabled:
            self.rows.append((step, ctx, event, channel, tag))

    def to_csv(self) -> str:
        lines = ["step,pe,event,channel,tag"]
        for step, ctx, event, channel, tag in self.rows:
            tg = f"{tag[0]}({'|'.join(map(str, tag[1]))})" if tag else ""
            lines.append(f"{step},{ctx},{event},{channel or ''},{tg}")
        return "\n".join(lines) + "\n"


@dataclass
class PEMetrics:
    busy: int = 0
    stall_recv: int = 0
    stall_send: int = 0
    idle: int = 0
    retired: int = 0

    def utilization(self, total):
        return self.busy / total if total else 0.0


@dataclass
class Metrics:
    total_steps: int
    pes: dict[tuple, PEMetrics]
    link_occupancy: dict[str, float]

    def to_json(self) -> str:
        import json
        payload = {
            "global": {"total_steps": self.total_steps,
                       "pe_count": len(self.pes),
                       "per_link_occupancy": self.link_occupancy},
            "pes": [{
                "pe": ",".join(map(str, cell)),
                "busy": m.busy, "stall_recv": m.stall_recv,
                "stall_send": m.stall_send, "idle": m.idle,
                "retired": m.retired,
                "utilization": m.utilization(self.total_steps),
            } for cell, m in sorted(self.pes.items())],
        }
        return json.dumps(payload, indent=2)


# ---------------------------------------------------------------------------
# contexts
# ---------------------------------------------------------------------------

class _Ctx:
    name = "?"

    def done(self) -> bool:
        raise NotImplementedError

    def step(self, sim, now: int) -> bool:
        """Advance; True if any progress was made."""
        raise NotImplementedError

    def blocked_on(self):
        return None


class FeederCtx(_Ctx):
    """Reads tensor slices and sends them in skewed order; memory reads are
    free, emission rate is one tile per step per link."""

    def __init__(self, fid, prog: FeederProgram, schedule: list[int] | None):
        self.fid = fid
        self.name = "feeder:" + "/".join(map(str, fid))
        self.prog = prog
        self.schedule = schedule
        self.pos = 0
        self._blocked = None

    def done(self):
        return self.pos >= len(self.prog.emissions)

    def step(self, sim, now):
        progress = False
        self._blocked = None
        while not self.done():
            e = self.prog.emissions[self.pos]
            if self.schedule is not None and now < self.schedule[self.pos]:
                return True  # waiting on the clock still counts as progress
            chan = sim.channels[(("feeder", self.fid), ("pe", e.dst))]
            if not chan.can_push():
                self._blocked = ("send", chan)
                return progress
            payload = sim.inputs.get_tile(e.tensor, e.index)
            chan.push(TaggedValue(payload, e.tag), now)
            sim.trace.emit(now, self.name, "load", None, e.tag)
            sim.trace.emit(now, self.name, "send", str(chan.key[1]), e.tag)
            self.pos += 1
            progress = True
        return progress

    def blocked_on(self):
        return self._blocked


class DrainCtx(_Ctx):
    def __init__(self, did, prog: DrainProgram):
        self.did = did
        self.name = "drain:" + "/".join(map(str, did))
        self.prog = prog
        self.pos = 0
        self._blocked = None

    def done(self):
        return self.pos >= len(self.prog.stores)

    def step(self, sim, now):
        progress = False
        while not self.done():
            tensor, index, expect = self.prog.stores[self.pos]
            chan = sim.channels[(("pe", self.prog.src), ("drain", self.did))]
            if not chan.can_pop(now):
                self._blocked = ("recv", chan)
                return progress
            val = chan.pop()
            if val.tag != expect:
                sim.trace.violations.append(Violation(
                    now, self.name, "store-tag", expect, val.tag))
            sim.outputs.set_tile(tensor, index, val.payload)
            sim.trace.emit(now, self.name, "store", None, val.tag)
            self.pos += 1
            progress = True
        self._blocked = None
        return progress


class PECtx(_Ctx):
    def __init__(self, cell, prog: PEProgram, cfg: GridConfig):
        self.cell = cell
        self.name = "pe:" + ",".join(map(str, cell))
        self.prog = prog
        self.cfg = cfg
        self.seg = 0
        self.iter = 0
        self.pc = 0
        self.regs: dict[str, TaggedValue] = {}
        self.metrics = PEMetrics()
        self.busy_until = -1
        self._blocked = None

    def done(self):
        return self.seg >= len(self.prog.segments)

    def _env(self):
        env = {"c0": self.cell[0]}
        if len(self.cell) > 1:
            env["c1"] = self.cell[1]
        seg = self.prog.segments[self.seg]
        if seg.var is not None:
            env[seg.var] = self.iter
        return env

    def _advance(self):
        seg = self.prog.segments[self.seg]
        self.pc += 1
        if self.pc >= len(seg.body):
            self.pc = 0
            self.iter += 1
            if self.iter >= seg.trip:
                self.iter = 0
                self.seg += 1

    def step(self, sim, now):
        computed = False
        progress = False
        self._blocked = None
        while not self.done():
            seg = self.prog.segments[self.seg]
            if seg.trip == 0:
                self.seg += 1
                progress = True
                continue
            instr = seg.body[self.pc]
            env = self._env()
            if instr.op == "compute" and (computed or now < self.busy_until):
                # one kernel per step; a multi-step kernel keeps the unit busy
                if not computed:
                    self._blocked = ("busy", None)
                break
            if instr.op == "recv":
                chan = sim.resolve(self.cell, instr.chan, "in")
                if not chan.can_pop(now):
                    self._blocked = ("recv", chan)
                    break
                val = chan.pop()
                if instr.expect is not None:
                    want = instr.expect.eval(env)
                    if val.tag != want:
                        sim.trace.violations.append(Violation(
                            now, self.name, "recv-tag", want, val.tag))
                if instr.resident:
                    val = TaggedValue(val.payload, val.tag, None)
                self.regs[instr.reg] = val
                sim.trace.emit(now, self.name, "recv", str(instr.chan), val.tag)
                self.metrics.retired += 1
                progress = True
                self._advance()
            elif instr.op == "send":
                chan = sim.resolve(self.cell, instr.chan, "out")
                if not chan.can_push():
                    self._blocked = ("send", chan)
                    break
                val = self.regs[instr.reg]
                tag = instr.retag.eval(env) if instr.retag else val.tag
                chan.push(TaggedValue(val.payload, tag), now)
                sim.trace.emit(now, self.name, "send", str(instr.chan), tag)
                self.metrics.retired += 1
                progress = True
                self._advance()
            elif instr.op == "const":
                tag = instr.out_tag.eval(env) if instr.out_tag else ("const", ())
                self.regs[instr.reg] = TaggedValue(instr.const.value(), tag)
                self.metrics.retired += 1
                progress = True
                self._advance()
            elif instr.op == "compute":
                vals = []
                arrivals = []
                for k, rname in enumerate(instr.ins):
                    v = self.regs[rname]
                    vals.append(v)
                    want = instr.expects[k]
                    if want is not None:
                        w = want.eval(env)
                        if v.tag != w:
                            sim.trace.violations.append(Violation(
                                now, self.name, "compute-tag", w, v.tag))
                    if v.arrival is not None:
                        arrivals.append((v.tag, v.arrival))
                if sim.timing is not None and len({a for _, a in arrivals}) > 1:
                    sim.timing.append(TimingViolation(self.name, now, arrivals))
                out = _exec_compute(instr.spec, [v.payload for v in vals])
                tag = instr.out_tag.eval(env)
                self.regs[instr.reg] = TaggedValue(out, tag)
                sim.trace.emit(now, self.name, "compute", None, tag)
                self.metrics.retired += 1
                self.busy_until = now + self.cfg.compute_cost
                computed = True
                progress = True
                self._advance()
            else:
                raise SimulatorError(f"bad instruction {instr}")
        # charge the step
        if computed or (self._blocked and self._blocked[0] == "busy"):
            self.metrics.busy += 1
        elif self._blocked and self._blocked[0] == "recv":
            self.metrics.stall_recv += 1
        elif self._blocked and self._blocked[0] == "send":
            self.metrics.stall_send += 1
        else:
            self.metrics.idle += 1
        busy_wait = bool(self._blocked and self._blocked[0] == "busy")
        return progress or computed or busy_wait

    def blocked_on(self):
        return self._blocked


def _exec_compute(spec: ComputeSpec, vals: list[np.ndarray]) -> np.ndarray:
    if spec.kind == "acc":
        return _combine(spec, vals[0], vals[1:])
    if spec.kind == "apply":
        args = []
        k = 0
        for a in spec.args:
            if isinstance(a, SubRef):
                args.append(vals[k] - vals[k + 1])
                k += 2
            else:
                args.append(vals[k])
                k += 1
        return _apply_kernel(spec.kernel, args)
    if spec.kind == "direct":
        return _exec_direct(spec, vals)
    raise SimulatorError(f"bad compute spec {spec}")


def _exec_direct(spec: ComputeSpec, vals: list[np.ndarray]) -> np.ndarray:
    from . import frontend as F
    bound = {acc: vals[k] for k, (acc, _) in enumerate(spec.tagmap)}

    def ev(e):
        if isinstance(e, F.Const):
            return np.array([[e.value]])
        if isinstance(e, F.Access):
            return bound[e]
        if isinstance(e, F.Bin):
            l, r = ev(e.left), ev(e.right)
            if e.op == "+":
                return l + r
            if e.op == "-":
                return l - r
            if e.op == "*":
                return l @ r if l.size > 1 or r.size > 1 else l * r
            return l / r
        if isinstance(e, F.Unary):
            return {"sqrt": np.sqrt, "exp": np.exp,
                    "recip": lambda x: 1.0 / x}[e.op](ev(e.body))
        raise SimulatorError(f"cannot evaluate {e}")

    return ev(spec.expr)


# ---------------------------------------------------------------------------
# the instance
# ---------------------------------------------------------------------------

class SimulatorInstance:
    def __init__(self, compiled: CompiledGrid, cfg: GridConfig | None = None,
                 capacity_override=False, capacity=None, skews=None,
                 trace=True, timing=False):
        self.compiled = compiled
        self.cfg = cfg or compiled.grid
        self.trace = Trace(trace)
        self.timing: list[TimingViolation] | None = [] if timing else None
        cap = capacity if capacity_override else self.cfg.chan_cap
        self._ideal = capacity_override
        self.channels: dict[tuple, Channel] = {}
        self._build_channels(cap)
        self.ctxs: list[_Ctx] = []
        schedule = skews.entries if skews is not None else None
        for fid in sorted(compiled.feeders, key=str):
            sched = schedule.get(fid) if schedule else None
            self.ctxs.append(FeederCtx(fid, compiled.feeders[fid], sched))
        for cell in sorted(compiled.pe_programs):
            self.ctxs.append(PECtx(cell, compiled.pe_programs[cell], self.cfg))
        for did in sorted(compiled.drains, key=str):
            self.ctxs.append(DrainCtx(did, compiled.drains[did]))
        self.inputs: TensorStore | None = None
        self.outputs: TensorStore | None = None
        self.now = 0

    # -- channel fabric ----------------------------------------------------

    def _mesh_links(self):
        cfg = self.cfg
        cells = sorted(self.compiled.pe_programs)
        links = []
        for cell in cells:
            for axis in range(cfg.rank):
                for sign in ((1,) if cfg.rank == 1 else (1, -1)):
                    other = list(cell)
                    other[axis] += sign
                    if cfg.topology == "torus":
                        other[axis] %= cfg.extents[axis]
                    other = tuple(other)
                    if other in self.compiled.pe_programs and other != cell:
                        links.append((("pe", cell), ("pe", other)))
        return sorted(set(links))

    def _build_channels(self, cap):
        cfg = self.cfg
        bw = 10 ** 9 if self._ideal else cfg.bandwidth
        mk = lambda key: Channel(key, cap, cfg.latency, bw)
        for link in self._mesh_links():
            self.channels[link] = mk(link)
        for fid, f in self.compiled.feeders.items():
            for dst in sorted({e.dst for e in f.emissions}):
                key = (("feeder", fid), ("pe", dst))
                self.channels.setdefault(key, mk(key))
        for did, d in self.compiled.drains.items():
            key = (("pe", d.src), ("drain", did))
            self.channels.setdefault(key, mk(key))

    @property
    def internal_channel_count(self):
        return len(self._mesh_links())

    @property
    def feeder_count(self):
        return len(self.compiled.feeders)

    @property
    def drain_count(self):
        return len(self.compiled.drains)

    @property
    def pe_count(self):
        return len(self.compiled.pe_programs)

    def resolve(self, cell, chan: Chan, direction: str) -> Channel:
        if chan.kind == "dir":
            other = list(cell)
            other[chan.axis] += chan.sign
            other = tuple(other)
            key = ((("pe", cell), ("pe", other)) if direction == "out"
                   else (("pe", other), ("pe", cell)))
        elif chan.kind in ("feeder", "bcast"):
            fid = self._feeder_for(cell, chan.name)
            key = (("feeder", fid), ("pe", cell))
        else:  # drain
            did = self._drain_for(cell, chan.name)
            key = (("pe", cell), ("drain", did))
        try:
            return self.channels[key]
        except KeyError:
            raise SimulatorError(f"unresolved channel {chan} at cell {cell}")

    def _feeder_for(self, cell, tensor):
        for fid in self.compiled.feeders:
            kind, name = fid[0], fid[1]
            if name != tensor:
                continue
            if kind == "bcast" or fid[2] == cell:
                return fid
        raise SimulatorError(f"no feeder for {tensor} at {cell}")

    def _drain_for(self, cell, tensor):
        for did, d in self.compiled.drains.items():
            if did[1] == tensor and d.src == cell:
                return did
        raise SimulatorError(f"no drain for {tensor} at {cell}")


def build_grid(cfg: GridConfig, compiled: CompiledGrid, **kw) -> SimulatorInstance:
    """Instantiate the simulator: all channels empty, program counters at 0."""
    if tuple(cfg.extents) != tuple(compiled.grid.extents):
        raise SimulatorError("grid config does not match the compiled programs")
    return SimulatorInstance(compiled, cfg, **kw)


@dataclass
class RunResult:
    outputs: TensorStore
    metrics: Metrics
    trace: Trace
    steps: int

    @property
    def violations(self):
        return self.trace.violations


def run(sim: SimulatorInstance, inputs: dict[str, np.ndarray] | TensorStore,
        max_steps: int | None = None) -> RunResult:
    """Execute all programs to completion. Deterministic for a fixed
    configuration and input."""
    decls = dict(sim.compiled.dfp.checked.tensors)
    sim.inputs = inputs if isinstance(inputs, TensorStore) else TensorStore(decls, inputs)
    sim.outputs = TensorStore(decls)
    for name in sim.compiled.dfp.checked.outputs:
        sim.outputs.ensure(name)
    if max_steps is None:
        volume = sum(len(list(s.decl.domain_points()))
                     for s in sim.compiled.dfp.spaces)
        max_steps = 200 + 20 * (volume + sum(sim.cfg.extents)) * \
            max(sim.cfg.latency, sim.cfg.compute_cost)
    now = 0
    while True:
        if all(c.done() for c in sim.ctxs):
            break
        if now > max_steps:
            raise SimulatorError(f"no convergence after {max_steps} steps")
        for ch in sim.channels.values():
            ch.pushed_this_step = 0
        progress = False
        for ctx in sim.ctxs:
            if ctx.done():
                if isinstance(ctx, PECtx):
                    ctx.metrics.idle += 1
                continue
            if ctx.step(sim, now):
                progress = True
        if not progress:
            in_flight = any(ch.queue and ch.queue[0].arrival > now
                            for ch in sim.channels.values())
            if not in_flight:
                raise DeadlockError(_wait_cycle(sim))
        now += 1
    sim.now = now
    metrics = collect_metrics(sim)
    return RunResult(sim.outputs, metrics, sim.trace, now)


def _wait_cycle(sim: SimulatorInstance):
    """Wait-for edges: a context blocked on an empty channel waits for the
    sender; blocked on a full channel waits for the receiver."""
    owner: dict[tuple, str] = {}
    for ctx in sim.ctxs:
        if isinstance(ctx, PECtx):
            owner[("pe", ctx.cell)] = ctx.name
        elif isinstance(ctx, FeederCtx):
            owner[("feeder", ctx.fid)] = ctx.name
        else:
            owner[("drain", ctx.did)] = ctx.name
    waits: dict[str, str] = {}
    for ctx in sim.ctxs:
        b = ctx.blocked_on()
        if not b:
            continue
        reason, chan = b
        peer = chan.key[0] if reason == "recv" else chan.key[1]
        waits[ctx.name] = owner.get(peer, str(peer))
    seen: list[str] = []
    node = next(iter(waits), None)
    while node is not None and node not in seen:
        seen.append(node)
        node = waits.get(node)
    if node in seen:
        return seen[seen.index(node):] + [node]
    return list(waits.items())


def collect_metrics(sim: SimulatorInstance) -> Metrics:
    pes = {c.cell: c.metrics for c in sim.ctxs if isinstance(c, PECtx)}
    total = sim.now
    occupancy = {}
    for key, ch in sim.channels.items():
        if ch.total_sends:
            name = f"{key[0][0]}{key[0][1]}->{key[1][0]}{key[1][1]}"
            occupancy[name] = ch.total_sends / total if total else 0.0
    return Metrics(total, pes, occupancy)


@dataclass
class AlignmentReport:
    violations: list[Violation]

    @property
    def empty(self):
        return not self.violations

    def first(self):
        return self.violations[0] if self.violations else None


def check_alignment(trace: Trace) -> AlignmentReport:
    """Empty iff at every compute (and recv/store) the consumed values carried
    exactly the logical coordinates the schedule expects."""
    return AlignmentReport(list(trace.violations))


@dataclass
class TimingReport:
    violations: list[TimingViolation]

    @property
    def empty(self):
        return not self.violations

    def first(self):
        return self.violations[0] if self.violations else None


def ideal_timing_report(compiled: CompiledGrid, skews: SkewTable) -> TimingReport:
    """Run with unbounded channels and feeders pinned to their skew schedule;
    report computes whose channel-delivered operands arrive at unequal steps."""
    sim = SimulatorInstance(compiled, capacity_override=True, capacity=None,
                            skews=skews, trace=False, timing=True)
    decls = dict(compiled.dfp.checked.tensors)
    inputs = {}
    for name, decl in decls.items():
        if name not in compiled.dfp.checked.outputs:
            inputs[name] = _neutral_input(name, decl)
    run(sim, inputs)
    return TimingReport(sim.timing or [])


def _neutral_input(name, decl):
    from .store import dense_shape
    shape = dense_shape(decl)
    base = np.zeros(shape)
    np.fill_diagonal(base, 1.0)
    return base + 0.5
