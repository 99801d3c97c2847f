"""Space-time code generation: from the dataflow IR to per-cell programs.

Each grid cell gets a program template written over symbolic cell coordinates
(c0, c1) and per-segment loop variables, so cells that play the same role
share one program; trip counts stay per-cell (triangular domains are ragged).
Programs follow receive -> compute -> send phase order inside each step.
Feeder programs own every LoadMem and drain programs every StoreMem: memory
never appears in a grid cell's instruction stream.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

from .frontend import Idx
from .lowering import ConstRef, DataflowProgram, LoweredSpace, Rule, _eval_idx


class CodegenError(Exception):
    pass


# ---------------------------------------------------------------------------
# small linear expressions over cell coords and loop variables
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Lin:
    """const + sum(coef * var); vars are 'c0','c1' or a segment loop var."""
    const: int = 0
    terms: tuple[tuple[str, int], ...] = ()

    def shift(self, d: int) -> "Lin":
        return Lin(self.const + d, self.terms)

    def eval(self, env: dict[str, int]) -> int:
        return self.const + sum(coef * env[v] for v, coef in self.terms)

    def __str__(self):
        parts = []
        for v, coef in self.terms:
            parts.append(v if coef == 1 else f"-{v}" if coef == -1 else f"{coef}{v}")
        if self.const or not parts:
            parts.append(str(self.const))
        out = "+".join(parts).replace("+-", "-")
        return out


def lin_of_idx(i: Idx, env: dict[str, Lin]) -> Lin:
    if i.var is None:
        return Lin(i.offset)
    base = env[i.var]
    return base.shift(i.offset)


# ---------------------------------------------------------------------------
# instruction set
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Chan:
    """Symbolic channel: a mesh direction, or a boundary link."""
    kind: str          # 'dir' | 'feeder' | 'bcast' | 'drain'
    axis: int = 0      # for 'dir'
    sign: int = 0      # for 'dir': -1 receives-from-lower side, +1 to-upper
    name: str = ""     # tensor/tag for boundary links

    def __str__(self):
        if self.kind == "dir":
            return {(0, -1): "N", (0, 1): "S", (1, -1): "W", (1, 1): "E"}[
                (self.axis, self.sign)]
        return {"feeder": "F", "bcast": "B", "drain": "D"}[self.kind] + f":{self.name}"


@dataclass(frozen=True)
class TagPat:
    name: str
    coords: tuple[Lin, ...]

    def eval(self, env: dict[str, int]) -> tuple[str, tuple[int, ...]]:
        return (self.name, tuple(c.eval(env) for c in self.coords))

    def __str__(self):
        return f"{self.name}({','.join(str(c) for c in self.coords)})"


@dataclass(frozen=True)
class Instr:
    op: str                      # recv|send|compute|const
    chan: Chan | None = None
    reg: str = ""                # destination (recv/const/compute) or source (send)
    kernel: str = ""             # compute only
    ins: tuple[str, ...] = ()    # compute input registers
    expect: TagPat | None = None             # recv: expected arriving tag
    expects: tuple[TagPat | None, ...] = ()  # compute: per-input expectations
    out_tag: TagPat | None = None            # compute/const: produced tag
    retag: TagPat | None = None              # send: publish retagging
    const: ConstRef | None = None
    spec: object = None          # compute: the lowered ComputeSpec
    resident: bool = False       # recv: preloaded value, exempt from timing

    def render(self) -> str:
        if self.op == "recv":
            return f"RECV {self.chan} -> {self.reg}"
        if self.op == "send":
            r = f" as {self.retag}" if self.retag else ""
            return f"SEND {self.reg} -> {self.chan}{r}"
        if self.op == "const":
            return f"CONST {self.reg} <- {self.const}"
        ins = ",".join(self.ins)
        return f"COMPUTE {self.kernel}({ins}) -> {self.reg}"


@dataclass(frozen=True)
class Segment:
    trip: int                    # 1 for straight-line blocks
    var: str | None              # loop variable name, None for blocks
    body: tuple[Instr, ...]

    def render(self) -> list[str]:
        if self.var is None:
            return [i.render() for i in self.body]
        head = [f"LOOP {self.var} x{self.trip} {{"]
        return head + ["  " + i.render() for i in self.body] + ["}"]


@dataclass
class PEProgram:
    cell: tuple[int, ...]
    segments: list[Segment]
    registers: tuple[str, ...] = ()

    def template(self):
        """Identity of the instruction structure. Trip counts stay per-cell
        (ragged domains), so they do not participate."""
        return tuple((s.var, s.body) for s in self.segments)

    def render(self) -> str:
        lines = [f"cell {','.join(map(str, self.cell))}:"]
        for s in self.segments:
            lines += ["  " + x for x in s.render()]
        return "\n".join(lines)


@dataclass(frozen=True)
class Emission:
    tensor: str
    index: tuple[int, ...]
    dst: tuple[int, ...]       # destination cell
    due: int | None            # ideal arrival step (None: as soon as possible)
    tag: tuple[str, tuple[int, ...]]


@dataclass
class FeederProgram:
    fid: tuple                 # ('feed'|'bcast', tensor, position)
    emissions: list[Emission]


@dataclass
class DrainProgram:
    did: tuple                 # ('drain', tensor, position)
    src: tuple[int, ...]       # cell it listens to
    stores: list[tuple[str, tuple[int, ...], tuple[str, tuple[int, ...]]]]
    # (tensor, index, expected tag)


@dataclass(frozen=True)
class CellClass:
    space_names: tuple[str, ...]
    signature: tuple[str, ...]    # per grid axis: 'lo'|'mid'|'hi'|'solo'
    cells: tuple[tuple[int, ...], ...]
    rule_ids: tuple[int, ...]     # indices into dfp.rules active on these cells


@dataclass
class SkewTable:
    """Ideal emission delays, per feeder; realizes operand co-arrival."""
    entries: dict[tuple, list[int]]
    tensors: dict[tuple, str]

    def to_json(self) -> str:
        payload = {
            "/".join(map(str, fid)): {"tensor": self.tensors[fid], "steps": steps}
            for fid, steps in sorted(self.entries.items(), key=lambda kv: str(kv[0]))
        }
        return json.dumps(payload, indent=2, sort_keys=True)


@dataclass
class CompiledGrid:
    dfp: DataflowProgram
    grid: "GridConfig"
    pe_programs: dict[tuple[int, ...], PEProgram]
    classes: list[CellClass]
    feeders: dict[tuple, FeederProgram]
    drains: dict[tuple, DrainProgram]
    skews: SkewTable

    def dump_programs(self) -> str:
        out = []
        for cls in self.classes:
            sig = "/".join(cls.signature) if cls.signature else "scalar"
            out.append(f"# class {sig}: cells {list(map(list, cls.cells))}")
            rep = self.pe_programs[cls.cells[0]]
            out.append(rep.render())
        for fid in sorted(self.feeders, key=str):
            f = self.feeders[fid]
            out.append(f"feeder {'/'.join(map(str, fid))}: "
                       f"{len(f.emissions)} emissions")
            for e in f.emissions:
                out.append(f"  LOADMEM {e.tensor}{list(e.index)}; "
                           f"SEND -> {','.join(map(str, e.dst))}")
        for did in sorted(self.drains, key=str):
            d = self.drains[did]
            out.append(f"drain {'/'.join(map(str, did))}: {len(d.stores)} stores")
            for tensor, index, _tag in d.stores:
                out.append(f"  RECV; STOREMEM {tensor}{list(index)}")
        return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# structural source resolution over rule instances
# ---------------------------------------------------------------------------

_SOURCE_KINDS = ("Inject", "InterfaceRecv", "Init", "Propagate")


def producing_rule(dfp: DataflowProgram, space: LoweredSpace,
                   point: tuple[int, ...], tag: str):
    """The unique non-compute rule instance producing (space, point, tag), or
    None when the value is computed locally."""
    hits = []
    env_pt = dict(zip(space.vars, point))
    for rule in dfp.rules_of(space.name):
        if rule.tag != tag or rule.kind not in _SOURCE_KINDS:
            continue
        env = _match_pattern(rule, point, space)
        if env is None:
            continue
        src = rule.source
        if hasattr(src, "coords"):  # ValueRef: active iff source point exists
            pt = tuple(_eval_idx(c, env) for c in src.coords)
            if not dfp.space(src.space).in_domain(pt):
                continue
            hits.append((rule, pt))
        else:
            hits.append((rule, None))
    if len(hits) > 1:
        raise CodegenError(f"ambiguous producers for {tag} at {space.name}{point}: "
                           f"{[h[0].kind for h in hits]}")
    return hits[0] if hits else None


def _match_pattern(rule: Rule, point: tuple[int, ...], space: LoweredSpace):
    env = dict(zip(space.vars, point))
    for pat, val in zip(rule.target, point):
        if _eval_idx(pat, env) != val:
            return None
    for g in rule.guards:
        if not g.holds(env):
            return None
    return env


# ---------------------------------------------------------------------------
# the code generator
# ---------------------------------------------------------------------------

class _Codegen:
    def __init__(self, dfp: DataflowProgram, grid):
        self.dfp = dfp
        self.grid = grid
        self.rank = grid.rank
        self.extents = grid.extents
        self._check_grid()
        # (space, point, tag) -> list of (consumer space, point, tag) deliveries
        self.out_edges: dict[tuple, list[tuple]] = {}
        self.in_source: dict[tuple, tuple] = {}
        self._build_edges()
        self.relay_tensors = self._choose_publish_routes()
        self.feeders: dict[tuple, FeederProgram] = {}
        self.drains: dict[tuple, DrainProgram] = {}

    # -- setup ---------------------------------------------------------------

    def _check_grid(self):
        need = [0] * self.rank
        for s in self.dfp.spaces:
            for p in s.decl.domain_points():
                cell = self.place(s, p)
                for a, c in enumerate(cell):
                    need[a] = max(need[a], c + 1)
        if tuple(need) != tuple(self.extents):
            raise CodegenError(f"grid extents {self.extents} do not match the "
                               f"spatial domain (needs {tuple(need)})")
        if any(f.kind == "broadcast" for s in self.dfp.spaces for f in s.operands) \
                and not self.grid.broadcast:
            raise CodegenError("schedule uses broadcast but the grid has no "
                               "broadcast links (set broadcast=true)")

    def place(self, space: LoweredSpace, point: tuple[int, ...]) -> tuple[int, ...]:
        env = dict(zip(space.vars, point))
        return tuple(_eval_idx(p, env) for p in space.placement)

    def _build_edges(self):
        """Instantiate every Propagate/InterfaceRecv rule: each active instance
        is one value delivery (possibly within a cell)."""
        for space in self.dfp.spaces:
            for rule in self.dfp.rules_of(space.name):
                if rule.kind not in ("Propagate", "InterfaceRecv"):
                    continue
                for point in space.decl.domain_points():
                    env = _match_pattern(rule, point, space)
                    if env is None:
                        continue
                    src_pt = tuple(_eval_idx(c, env) for c in rule.source.coords)
                    if not self.dfp.space(rule.source.space).in_domain(src_pt):
                        continue
                    src = (rule.source.space, src_pt, rule.source.tag)
                    dst = (space.name, point, rule.tag)
                    self.out_edges.setdefault(src, []).append(dst)
                    if dst in self.in_source:
                        raise CodegenError(f"two deliveries for {dst}")
                    self.in_source[dst] = src

    def _choose_publish_routes(self) -> dict[str, str]:
        """tensor -> 'relay' | 'edge' | 'local' drain routing."""
        all_cells = set(self._all_cells())
        routes: dict[str, str] = {}
        for space in self.dfp.spaces:
            for pub in space.publishes:
                cells = {self.place(space, p) for p in space.decl.domain_points()}
                per_cell = {}
                for p in space.decl.domain_points():
                    per_cell.setdefault(self.place(space, p), []).append(p)
                if cells == all_cells and all(
                        self._publishes_at(space, pub, pts) <= 1
                        for pts in per_cell.values()):
                    routes[pub.tensor] = "relay"
                elif self.rank == 2 and all(c[1] == self.extents[1] - 1
                                            for c in self._publish_cells(space, pub)):
                    routes[pub.tensor] = "edge"
                else:
                    routes[pub.tensor] = "local"
        return routes

    def _publishes_at(self, space, pub, pts) -> int:
        env = lambda p: dict(zip(space.vars, p))
        return sum(1 for p in pts
                   if all(_eval_idx(c, env(p)) == v
                          for c, v in zip(pub.pattern, p)))

    def _publish_cells(self, space, pub):
        out = set()
        for p in space.decl.domain_points():
            e = dict(zip(space.vars, p))
            if all(_eval_idx(c, e) == v for c, v in zip(pub.pattern, p)):
                out.add(self.place(space, p))
        return out

    def _all_cells(self):
        if self.rank == 1:
            return [(i,) for i in range(self.extents[0])]
        return [(i, j) for i in range(self.extents[0])
                for j in range(self.extents[1])]

    # -- events per cell -------------------------------------------------------

    def cell_events(self, cell):
        """Hosted compute points grouped per space, ordered by wavefront depth."""
        groups = []
        for space in self.dfp.spaces:
            pts = [p for p in space.decl.domain_points()
                   if self.place(space, p) == cell]
            if not pts:
                continue
            pts.sort(key=space.lam)
            lams = [space.lam(p) for p in pts]
            groups.append((space, pts, lams))
        groups.sort(key=lambda g: g[2][0])
        for a, b in zip(groups, groups[1:]):
            if a[2][-1] >= b[2][0]:
                raise CodegenError(f"interleaved spaces at cell {cell}: "
                                   f"{a[0].name} and {b[0].name}")
        return groups

    # -- program emission -------------------------------------------------------

    def emit_cell(self, cell) -> PEProgram:
        segments: list[Segment] = []
        segments += self._preload_segments(cell)
        groups = self.cell_events(cell)
        seg_idx = 0
        for space, pts, _ in groups:
            seg_idx += 1
            segments += self._space_segments(cell, space, pts, f"t{seg_idx}")
        segments += self._relay_segments(cell)
        segments = [s for s in segments if s.body]
        regs = sorted({i.reg for s in segments for i in s.body if i.reg}
                      | {r for s in segments for i in s.body for r in i.ins})
        prog = PEProgram(cell, segments, tuple(regs))
        if len(regs) > self.grid.regfile:
            raise CodegenError(f"cell {cell} needs {len(regs)} registers, "
                               f"register file holds {self.grid.regfile}")
        return prog

    # ..... preload phase .....

    def _preload_flows(self):
        flows = []
        for space in self.dfp.spaces:
            for f in space.operands:
                if f.kind == "preload":
                    flows.append((space, f))
        return flows

    def _preload_segments(self, cell) -> list[Segment]:
        segs: list[Segment] = []
        n0 = self.extents[0]
        for space, flow in self._preload_flows():
            resident = self._resident_slice(space, flow, cell)
            if resident is None:
                continue
            reg = f"{flow.tag}@{space.name}"
            chan_in = (Chan("feeder", name=flow.tensor) if cell[0] == 0
                       else Chan("dir", 0, -1))
            relay = n0 - 1 - cell[0]
            hold = TagPat(flow.tensor, self._slice_lin_cell(space, flow))
            if relay > 0:
                row = Lin(n0 - 1, (("p0", -1),))
                pat = TagPat(flow.tensor, (row,) + hold.coords[1:])
                segs.append(Segment(relay, "p0", (
                    Instr("recv", chan_in, "$pre", expect=pat, resident=True),
                    Instr("send", Chan("dir", 0, 1), "$pre"),
                )))
            segs.append(Segment(1, None, (
                Instr("recv", chan_in, reg, expect=hold, resident=True),)))
            self._feed_preload(space, flow)
        return segs

    def _resident_slice(self, space, flow, cell):
        """Concrete tensor index resident at this cell, or None."""
        for p in space.decl.domain_points():
            if self.place(space, p) == cell:
                env = dict(zip(space.vars, p))
                return tuple(_eval_idx(i, env) for i in flow.slice_map)
        return None

    def _slice_lin_cell(self, space, flow):
        """Tensor indices as Lin exprs over the cell coordinates (the resident
        slice of a preload flow depends only on spatially mapped variables)."""
        axis_of = {}
        for a, pl in enumerate(space.placement):
            if pl.var is not None:
                axis_of.setdefault(pl.var, (a, pl.offset))
        coords = []
        for i in flow.slice_map:
            if i.var is None:
                coords.append(Lin(i.offset))
            else:
                a, off = axis_of[i.var]
                coords.append(Lin(i.offset - off, ((f"c{a}", 1),)))
        return tuple(coords)

    def _feed_preload(self, space, flow):
        n0 = self.extents[0]
        cols = sorted({self.place(space, p)[1:] for p in space.decl.domain_points()})
        for col in cols:
            fid = ("feed", flow.tensor, (0,) + tuple(col))
            if fid in self.feeders:
                continue
            emits = []
            for row in range(n0 - 1, -1, -1):
                cellr = (row,) + tuple(col)
                idx = self._resident_slice(space, flow, cellr)
                if idx is None:
                    continue
                emits.append(Emission(flow.tensor, idx, (0,) + tuple(col), None,
                                      (flow.tensor, idx)))
            self.feeders[fid] = FeederProgram(fid, emits)

    # ..... main space segments .....

    def _space_segments(self, cell, space: LoweredSpace, pts, var) -> list[Segment]:
        """A prelude block (accumulator initialization) plus one loop segment
        over the space's run at this cell."""
        trip = len(pts)
        penv = self._point_env(space, pts, var)
        prelude: list[Instr] = []
        if space.acc is not None and not space.acc.axis_spatial:
            acc = space.acc
            reg = f"{acc.tag}@{space.name}"
            init_tag = TagPat(acc.tag, tuple(
                lin_of_idx(Idx(v), penv).shift(-1 if v == acc.axis else 0)
                for v in space.vars))
            prelude.append(self._bind(
                Instr("const", reg=reg, const=acc.init, out_tag=init_tag),
                {var: 0}))
        if space.handoff is not None:
            inner_name, acc_tag = space.handoff
            src = self._source_kind(space, pts[0], acc_tag)
            if src[0] == "const":
                reg = f"{acc_tag}@{inner_name}"
                prelude.append(Instr("const", reg=reg, const=src[1]))
        body = self._point_instrs(cell, space, pts, penv, var)
        segs = []
        if prelude:
            segs.append(Segment(1, None, tuple(prelude)))
        if trip == 1:
            segs.append(Segment(1, None,
                                tuple(self._bind(i, {var: 0}) for i in body)))
        else:
            segs.append(Segment(trip, var, tuple(body)))
        return segs

    def _point_env(self, space, pts, var) -> dict[str, Lin]:
        """Space variables as Lin exprs over the symbolic cell coordinates and
        the loop variable, so same-role cells share one template."""
        env: dict[str, Lin] = {}
        for a, pl in enumerate(space.placement):
            if pl.var is not None and pl.var not in env:
                env[pl.var] = Lin(-pl.offset, ((f"c{a}", 1),))
        if space.decl.pinned and space.decl.pinned[0] not in env:
            pv, pexpr = space.decl.pinned
            env[pv] = lin_of_idx(pexpr, env)
        p0, p_last = pts[0], pts[-1]
        for k, v in enumerate(space.vars):
            if v in env:
                continue
            if len(pts) == 1:
                env[v] = Lin(p0[k])
                continue
            step = (p_last[k] - p0[k]) // (len(pts) - 1)
            env[v] = Lin(p0[k], ((var, step),) if step else ())
        # the symbolic forms must reproduce every concrete point
        cell = self.place(space, p0)
        for r, p in enumerate(pts):
            bind = {f"c{a}": c for a, c in enumerate(cell)}
            bind[var] = r
            got = tuple(env[v].eval(bind) for v in space.vars)
            if got != p:
                raise CodegenError(f"non-affine run at {space.name} cell {cell}: "
                                   f"{got} != {p}")
        return env

    def _bind(self, instr: Instr, binding: dict[str, int]) -> Instr:
        def bl(l: Lin) -> Lin:
            const = l.const + sum(c * binding[v] for v, c in l.terms if v in binding)
            terms = tuple((v, c) for v, c in l.terms if v not in binding)
            return Lin(const, terms)

        def bt(t: TagPat | None):
            return TagPat(t.name, tuple(bl(c) for c in t.coords)) if t else None

        return replace(instr, expect=bt(instr.expect),
                       expects=tuple(bt(t) for t in instr.expects),
                       out_tag=bt(instr.out_tag), retag=bt(instr.retag))

    def _point_instrs(self, cell, space: LoweredSpace, pts, penv, var) -> list[Instr]:
        dfp = self.dfp
        recvs: list[Instr] = []
        consts: list[Instr] = []
        sends: list[Instr] = []
        expects: dict[str, TagPat | None] = {}
        p0 = pts[0]

        def uniform_source(tag):
            srcs = {self._source_kind(space, p, tag) for p in pts}
            if len(srcs) != 1:
                raise CodegenError(f"mixed sources for {tag} at cell {cell}: {srcs}")
            return srcs.pop()

        # operand receives, in operand order
        for flow in space.operands:
            reg = f"{flow.tag}@{space.name}"
            tagpat = self._flow_expect(space, flow, penv)
            if flow.kind == "preload":
                expects[reg] = tagpat
                continue
            src = uniform_source(flow.tag)
            if src[0] == "const":
                consts.append(Instr("const", reg=reg, const=src[1],
                                    out_tag=tagpat))
                expects[reg] = None
                continue
            chan = self._source_chan(cell, src, flow)
            recvs.append(Instr("recv", chan, reg, expect=tagpat))
            expects[reg] = tagpat

        # accumulator: a register along a temporal reduction, a neighbor
        # exchange along a spatial one
        acc_in: list[Instr] = []
        acc_out: list[Instr] = []
        if space.acc is not None:
            acc = space.acc
            reg = f"{acc.tag}@{space.name}"
            prev_pat = TagPat(acc.tag, tuple(
                lin_of_idx(Idx(v), penv).shift(-1 if v == acc.axis else 0)
                for v in space.vars))
            if acc.axis_spatial:
                apos = acc.grid_axis
                if cell[apos] == 0:
                    acc_in.append(Instr("const", reg=reg, const=acc.init,
                                        out_tag=prev_pat))
                    expects[reg] = None
                else:
                    acc_in.append(Instr("recv", Chan("dir", apos, -1), reg,
                                        expect=prev_pat))
                    expects[reg] = prev_pat
                if cell[apos] < self.extents[apos] - 1:
                    acc_out.append(Instr("send", Chan("dir", apos, 1), reg))
            else:
                expects[reg] = prev_pat

        compute = self._compute_instr(cell, space, penv, expects)

        # sends mirror the delivery edges: operand forwards and re-exports
        # first (operand order), then the accumulator, then computed outputs
        sends += acc_out
        held = [(f.tag, f"{f.tag}@{space.name}") for f in space.operands
                if f.kind not in ("preload", "broadcast", "memfeed")]
        if space.acc is not None:
            held.append((space.acc.tag, f"{space.acc.tag}@{space.name}"))
        if space.decl.role in ("apply", "direct"):
            held.append((space.out_tag, f"{space.out_tag}@{space.name}"))
        for tag, reg in held:
            for axis, sign in self._edge_dirs(space, pts, tag, cell):
                sends.append(Instr("send", Chan("dir", axis, sign), reg))
        sends += self._publish_sends(cell, space, pts, penv)
        return recvs + acc_in + consts + [compute] + sends

    def _flow_expect(self, space, flow, penv) -> TagPat:
        if flow.kind in ("stream", "preload", "broadcast", "memfeed", "dep", "self"):
            return TagPat(flow.tensor,
                          tuple(lin_of_idx(i, penv) for i in flow.slice_map))
        raise CodegenError(f"no expectation for flow {flow.kind}")

    def _source_kind(self, space, point, tag):
        hit = producing_rule(self.dfp, space, point, tag)
        if hit is None:
            raise CodegenError(f"no producer for {tag} at {space.name}{point}")
        rule, src_pt = hit
        if rule.kind == "Inject":
            return ("inject",)
        if rule.kind == "Init":
            return ("const", rule.source)
        src_space = self.dfp.space(rule.source.space)
        src_cell = self.place(src_space, src_pt)
        dst_cell = self.place(space, point)
        if src_cell == dst_cell:
            return ("register", rule.source.space, rule.source.tag)
        delta = tuple(b - a for a, b in zip(src_cell, dst_cell))
        axes = [a for a, d in enumerate(delta) if d]
        if len(axes) != 1 or abs(delta[axes[0]]) != 1:
            raise CodegenError(f"non-neighbor delivery {src_cell}->{dst_cell}")
        return ("dir", axes[0], delta[axes[0]])

    def _source_chan(self, cell, src, flow) -> Chan:
        if src[0] == "inject":
            if flow.kind == "broadcast":
                return Chan("bcast", name=flow.tensor)
            return Chan("feeder", name=flow.tensor)
        if src[0] == "dir":
            return Chan("dir", src[1], -src[2])
        if src[0] == "register":
            raise CodegenError(f"register source for {flow.tag} needs no channel")
        raise CodegenError(f"bad source {src}")

    def _edge_dirs(self, space, pts, tag, cell):
        """Directions this cell must forward `tag` to, uniform over the run."""
        per_point = []
        for p in pts:
            dirs = set()
            for d in self.out_edges.get((space.name, p, tag), ()):
                dst_cell = self.place(self.dfp.space(d[0]), d[1])
                if dst_cell == cell:
                    continue
                delta = tuple(b - a for a, b in zip(cell, dst_cell))
                axes = [a for a, x in enumerate(delta) if x]
                if len(axes) != 1 or abs(delta[axes[0]]) != 1:
                    raise CodegenError(f"non-neighbor delivery {cell}->{dst_cell} "
                                       f"for {tag}")
                dirs.add((axes[0], delta[axes[0]]))
            per_point.append(frozenset(dirs))
        if len(set(per_point)) != 1:
            raise CodegenError(f"ragged forwarding for {tag} at cell {cell}: "
                               f"{sorted(set(per_point), key=str)}")
        return sorted(per_point[0])

    def _compute_instr(self, cell, space: LoweredSpace, penv, expects) -> Instr:
        spec = space.compute
        out_reg = f"{space.out_tag}@{space.name}"
        pointpat = tuple(lin_of_idx(Idx(v), penv) for v in space.vars)
        if space.acc is not None:
            out_reg = f"{space.acc.tag}@{space.name}"
            out_tag = TagPat(space.acc.tag, pointpat)
        elif space.decl.role in ("apply", "direct"):
            region = space.region
            env2 = {v: penv[v] for v in penv}
            out_tag = TagPat(region.out_tensor,
                             tuple(lin_of_idx(i, env2) for i in region.out_indices))
        ins, pats = [], []
        for ref in _spec_inputs(spec, space):
            reg = f"{ref}@{space.name}" if "@" not in ref else ref
            ins.append(reg)
            pats.append(expects.get(reg))
        return Instr("compute", reg=out_reg, kernel=_spec_kernel(spec),
                     ins=tuple(ins), expects=tuple(pats), out_tag=out_tag,
                     spec=spec)

    def _publish_sends(self, cell, space: LoweredSpace, pts, penv) -> list[Instr]:
        """Publish traffic toward drains (relay-routed tensors are handled by
        the relay phase instead)."""
        out: list[Instr] = []
        for pub in space.publishes:
            route = self.relay_tensors[pub.tensor]
            hits = [p for p in pts if self._pub_match(space, pub, p)]
            if not hits:
                continue
            retag = TagPat(pub.tensor,
                           tuple(lin_of_idx(i, penv) for i in pub.indices))
            if route == "relay":
                continue  # handled by the relay phase
            if route == "edge":
                out.append(Instr("send", Chan("drain", name=pub.tensor),
                                 f"{pub.tag}@{space.name}", retag=retag))
                self._note_edge_drain(cell, space, pub, hits)
            else:
                out.append(Instr("send", Chan("drain", name=pub.tensor),
                                 f"{pub.tag}@{space.name}", retag=retag))
                self._note_local_drain(cell, space, pub, hits)
        return out

    def _pub_match(self, space, pub, p) -> bool:
        env = dict(zip(space.vars, p))
        return all(_eval_idx(c, env) == v for c, v in zip(pub.pattern, p))

    def _note_edge_drain(self, cell, space, pub, pts):
        did = ("drain", pub.tensor, cell[:1])
        d = self.drains.setdefault(did, DrainProgram(did, cell, []))
        for p in pts:
            env = dict(zip(space.vars, p))
            idx = tuple(_eval_idx(i, env) for i in pub.indices)
            d.stores.append((pub.tensor, idx, (pub.tensor, idx)))

    def _note_local_drain(self, cell, space, pub, pts):
        did = ("drain", pub.tensor, cell)
        d = self.drains.setdefault(did, DrainProgram(did, cell, []))
        for p in pts:
            env = dict(zip(space.vars, p))
            idx = tuple(_eval_idx(i, env) for i in pub.indices)
            d.stores.append((pub.tensor, idx, (pub.tensor, idx)))

    # ..... relay phase (publishes that walk to an edge drain) .....

    def _relay_specs(self, cell):
        """[(tensor, own tag/reg, relay count)] for relay-routed publishes."""
        specs = []
        for space in self.dfp.spaces:
            for pub in space.publishes:
                if self.relay_tensors.get(pub.tensor) != "relay":
                    continue
                mine = [p for p in space.decl.domain_points()
                        if self.place(space, p) == cell
                        and self._pub_match(space, pub, p)]
                if not mine:
                    continue
                (p,) = mine
                env = dict(zip(space.vars, p))
                idx = tuple(_eval_idx(i, env) for i in pub.indices)
                specs.append((pub.tensor, f"{pub.tag}@{space.name}", idx))
        return specs

    def _relay_segments(self, cell) -> list[Segment]:
        segs: list[Segment] = []
        n0 = self.extents[0]
        last = cell[0] == n0 - 1
        for tensor, reg, idx in self._relay_specs(cell):
            # published slices of relay-routed tensors coincide with the cell
            # coordinates, so the templates stay symbolic
            if tuple(idx[:len(cell)]) != cell:
                raise CodegenError(f"relay publish slice {idx} is not the "
                                   f"cell coordinate {cell}")
            sym = tuple(Lin(0, ((f"c{a}", 1),)) for a in range(len(cell)))
            sym += tuple(Lin(x) for x in idx[len(cell):])
            chan = Chan("drain", name=tensor) if last else Chan("dir", 0, 1)
            segs.append(Segment(1, None, (
                Instr("send", chan, reg, retag=TagPat(tensor, sym)),)))
            relays = cell[0]
            if relays:
                row = Lin(-1, (("c0", 1), ("p9", -1)))
                pat = TagPat(tensor, (row,) + sym[1:])
                segs.append(Segment(relays, "p9", (
                    Instr("recv", Chan("dir", 0, -1), "$relay", expect=pat),
                    Instr("send", chan, "$relay"),
                )))
            if last:
                self._note_relay_drain(cell, tensor, idx, n0)
        return segs

    def _note_relay_drain(self, cell, tensor, idx, n0):
        did = ("drain", tensor, cell[1:])
        d = self.drains.setdefault(did, DrainProgram(did, cell, []))
        d.stores.append((tensor, idx, (tensor, idx)))
        for row in range(cell[0] - 1, -1, -1):
            ridx = (row,) + idx[1:]
            d.stores.append((tensor, ridx, (tensor, ridx)))

    # ..... feeders for stream / memfeed / broadcast flows .....

    def build_feeders(self):
        dfp = self.dfp
        for space in dfp.spaces:
            for flow in space.operands:
                if flow.kind == "preload":
                    continue  # built alongside the preload segments
                if flow.kind not in ("stream", "memfeed", "broadcast"):
                    continue
                for p in sorted(space.decl.domain_points(), key=space.lam):
                    hit = producing_rule(dfp, space, p, flow.tag)
                    if hit is None or hit[0].kind != "Inject":
                        continue
                    env = dict(zip(space.vars, p))
                    idx = tuple(_eval_idx(i, env) for i in flow.slice_map)
                    cell = self.place(space, p)
                    due = space.lam(p)
                    if flow.kind == "broadcast":
                        fid = ("bcast", flow.tensor)
                    else:
                        fid = ("feed", flow.tensor, cell)
                    f = self.feeders.setdefault(fid, FeederProgram(fid, []))
                    f.emissions.append(Emission(flow.tensor, idx, cell, due,
                                                (flow.tensor, idx)))

    # ..... classes and assembly .....

    def signature(self, cell) -> tuple[str, ...]:
        sig = []
        for a in range(self.rank):
            e = self.extents[a]
            c = cell[a]
            if e == 1:
                sig.append("solo")
            elif c == 0:
                sig.append("lo")
            elif c == e - 1:
                sig.append("hi")
            else:
                sig.append("mid")
        return tuple(sig)

    def classify(self) -> list[CellClass]:
        by_sig: dict[tuple, list] = {}
        for cell in self._all_cells():
            by_sig.setdefault(self.signature(cell), []).append(cell)
        classes = []
        rules = self.dfp.rules
        for sig in sorted(by_sig):
            cells = tuple(sorted(by_sig[sig]))
            active = set()
            names = set()
            for space in self.dfp.spaces:
                for p in space.decl.domain_points():
                    if self.place(space, p) not in cells:
                        continue
                    names.add(space.name)
                    for k, rule in enumerate(rules):
                        if rule.space != space.name or rule.kind == "Send":
                            continue
                        if _match_pattern(rule, p, space) is not None:
                            active.add(k)
            classes.append(CellClass(tuple(sorted(names)), sig, cells,
                                     tuple(sorted(active))))
        return classes

    def compile(self) -> CompiledGrid:
        self.build_feeders()
        programs = {}
        for cell in self._all_cells():
            programs[cell] = self.emit_cell(cell)
        skews = compute_skew_table(self.feeders, self.grid)
        compiled = CompiledGrid(self.dfp, self.grid, programs, self.classify(),
                                self.feeders, self.drains, skews)
        _check_pairing(compiled)
        return compiled


def _spec_inputs(spec, space: LoweredSpace) -> list[str]:
    from .lowering import SubRef, ValueRef
    if spec.kind == "direct":
        return [ref.tag for _, ref in spec.tagmap]
    regs = []
    if spec.kind == "acc":
        regs.append(spec.prev.tag)
        regs += [a.tag for a in spec.args]
        return regs
    for a in spec.args:
        if isinstance(a, SubRef):
            regs += [a.left.tag, f"{a.right.tag}@{_handoff_space(space)}"]
        else:
            tag = a.tag
            if space.handoff is not None and tag == space.handoff[1]:
                regs.append(f"{tag}@{space.handoff[0]}")
            else:
                regs.append(tag)
    return regs


def _handoff_space(space: LoweredSpace) -> str:
    return space.handoff[0] if space.handoff else space.name


def _spec_kernel(spec) -> str:
    if spec.kind == "direct":
        return "expr"
    if spec.kind == "acc":
        return {"mul": "gemm_acc", "GEMM": "gemm_acc", "GEMMT": "gemmt_acc",
                "SYRK": "syrk_step", "add": "add_acc", "max": "max_acc",
                "SOFTMAXSTEP": "softmax_step"}[spec.kernel]
    return spec.kernel.lower()


def _check_pairing(compiled: CompiledGrid):
    """Static send/recv pairing: on every directed mesh link the number of
    sends equals the number of receives."""
    sends: dict[tuple, int] = {}
    recvs: dict[tuple, int] = {}
    for cell, prog in compiled.pe_programs.items():
        for seg in prog.segments:
            for i in seg.body:
                if i.op not in ("send", "recv") or i.chan.kind != "dir":
                    continue
                other = list(cell)
                other[i.chan.axis] += i.chan.sign
                other = tuple(other)
                key = (cell, other) if i.op == "send" else (other, cell)
                book = sends if i.op == "send" else recvs
                book[key] = book.get(key, 0) + seg.trip
    if sends != recvs:
        diff = {k: (sends.get(k, 0), recvs.get(k, 0))
                for k in set(sends) | set(recvs)
                if sends.get(k, 0) != recvs.get(k, 0)}
        raise CodegenError(f"send/recv pairing mismatch: {diff}")


# ---------------------------------------------------------------------------
# public module surface
# ---------------------------------------------------------------------------

def classify_cells(dfp: DataflowProgram, mapping, grid) -> list[CellClass]:
    """Group grid cells by boundary signature; each class lists the rule
    instances satisfiable on its cells."""
    return _Codegen(dfp, grid).classify()


def emit_pe_program(dfp: DataflowProgram, grid, cell) -> PEProgram:
    """The program template for one cell; passing a CellClass emits its
    representative (cells of one class share the template)."""
    if isinstance(cell, CellClass):
        cell = cell.cells[0]
    cg = _Codegen(dfp, grid)
    cg.build_feeders()
    return cg.emit_cell(cell)


def emit_feeders(dfp: DataflowProgram, mapping, grid):
    """Feeder programs (LoadMem + skewed sends) and drain programs."""
    compiled = compile_grid(dfp, grid)
    return compiled.feeders, compiled.drains


def compute_skews(dfp: DataflowProgram, mapping, grid=None) -> SkewTable:
    from .simulator import GridConfig
    grid = grid or GridConfig.for_dfp(dfp)
    return compile_grid(dfp, grid).skews


def compute_skew_table(feeders: dict[tuple, FeederProgram], grid) -> SkewTable:
    """Emission step per feeder emission: the wavefront depth of the consuming
    point (arrival is then depth + link latency, uniform across operands).
    Preload emissions ship as early as possible; when a preload epoch exists,
    streamed emissions shift past it by a constant, which co-arrival ignores."""
    has_preload = any(e.due is None for f in feeders.values() for e in f.emissions)
    shift = (2 * max(grid.extents) + 2) * grid.latency if has_preload else 0
    entries: dict[tuple, list[int]] = {}
    tensors: dict[tuple, str] = {}
    for fid, f in feeders.items():
        steps = []
        asap = 0
        for e in f.emissions:
            if e.due is None:
                steps.append(asap)
                asap += 1
            else:
                steps.append(e.due * grid.latency + shift)
        entries[fid] = steps
        tensors[fid] = f.emissions[0].tensor if f.emissions else ""
    return SkewTable(entries, tensors)


def compile_grid(dfp: DataflowProgram, grid) -> CompiledGrid:
    return _Codegen(dfp, grid).compile()


def verify_timing(compiled: CompiledGrid, skews: SkewTable | None = None):
    """Run the ideal-timing model (unbounded channels, feeders emitting on
    their skew schedule) and report computes whose channel-delivered operands
    arrive at different steps."""
    from .simulator import ideal_timing_report
    return ideal_timing_report(compiled, skews or compiled.skews)
