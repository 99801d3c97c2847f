"""Lowering checked recurrences plus a schedule into the dataflow IR.

The IR is a set of iteration spaces with point-indexed rules: values are owned
by points; Inject rules read tensors into a space, Propagate rules receive
values from the -1 neighbor along a stream axis, Send rules forward them,
Compute rules combine locally resident values, and interface maps couple
boundaries of different spaces (accumulator handoffs and output-reuse seeds).
Every value movement also carries a flow annotation that the space-time code
generator consumes.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels as KK
from .frontend import (Access, CheckedProgram, Constraint, Idx, RegionInfo,
                       SpaceDecl, _reduction_end, extract_operation_spaces)
from .schedule import Schedule, check_schedule
from .store import TensorStore


class LoweringError(Exception):
    pass


# ---------------------------------------------------------------------------
# IR data model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ValueRef:
    space: str
    coords: tuple[Idx, ...]
    tag: str

    def __str__(self):
        return f"({','.join(str(c) for c in self.coords)})_{self.tag}^{self.space}"


@dataclass(frozen=True)
class MemRef:
    tensor: str
    indices: tuple[Idx, ...]

    def __str__(self):
        return f"{self.tensor}[{','.join(str(i) for i in self.indices)}]"


@dataclass(frozen=True)
class ConstRef:
    kind: str                      # 'zero' or 'flash'
    shape: tuple[int, int]

    def __str__(self):
        return "0" if self.kind == "zero" else "state0"

    def value(self) -> np.ndarray:
        if self.kind == "zero":
            return np.zeros(self.shape)
        return KK.flash_init(self.shape[0], self.shape[1] - 2)


@dataclass(frozen=True)
class SubRef:
    """minuend - accumulator, used as a single kernel argument."""
    left: "ValueRef"
    right: "ValueRef"

    def __str__(self):
        return f"{self.left} - {self.right}"


ArgRef = "ValueRef | SubRef"


@dataclass(frozen=True)
class ComputeSpec:
    """Right-hand side of a Compute rule.

    kind 'acc':    prev (+ | max | fold-kernel) body_kernel(args)
    kind 'apply':  kernel(args), args may contain SubRef
    kind 'direct': expression tree over local tags
    """
    kind: str
    kernel: str
    prev: ValueRef | None = None
    args: tuple = ()
    expr: object = None
    tagmap: tuple = ()
    fold: str = "sum"              # 'sum' | 'max' | 'kernel'

    def __str__(self):
        if self.kind == "direct":
            s = str(self.expr)
            for acc, ref in self.tagmap:
                s = s.replace(str(acc), str(ref))
            return s
        if self.kernel == "mul":
            call = " * ".join(str(a) for a in self.args)
        else:
            call = f"{self.kernel.lower()}({', '.join(str(a) for a in self.args)})"
        if self.kind == "apply":
            return call
        if self.fold == "kernel":
            inner = ", ".join(str(a) for a in self.args)
            return f"{self.kernel.lower()}({self.prev}, {inner})"
        if self.fold == "max":
            return f"max({self.prev}, {call})"
        return f"{self.prev} + {call}"


@dataclass(frozen=True)
class Pred:
    lhs: Idx
    rel: str      # '=', '<', '<=', '>', '>='
    rhs: Idx

    def holds(self, env: dict[str, int]) -> bool:
        a = env[self.lhs.var] + self.lhs.offset if self.lhs.var else self.lhs.offset
        b = env[self.rhs.var] + self.rhs.offset if self.rhs.var else self.rhs.offset
        return {"=": a == b, "<": a < b, "<=": a <= b, ">": a > b, ">=": a >= b}[self.rel]

    def __str__(self):
        return f"{self.lhs} {self.rel} {self.rhs}"


@dataclass(frozen=True)
class Rule:
    kind: str    # Inject|Init|Propagate|Send|Compute|InterfaceRecv|InterfaceSend|Publish
    space: str
    tag: str
    target: tuple[Idx, ...]                 # point pattern (destination for sends)
    source: object                          # ValueRef | MemRef | ConstRef | ComputeSpec
    guards: tuple[Pred, ...] = ()
    interface: str | None = None
    publish_to: MemRef | None = None


@dataclass(frozen=True)
class InterfaceMap:
    """Injective boundary coupling between two spaces; patterns are written in
    the consumer space's variables."""
    name: str
    from_space: str
    from_pattern: tuple[Idx, ...]
    to_space: str
    to_pattern: tuple[Idx, ...]
    tag: str

    def __str__(self):
        src = ",".join(str(c) for c in self.from_pattern)
        dst = ",".join(str(c) for c in self.to_pattern)
        return (f"{self.name}: {self.from_space}({src}) -> {self.to_space}({dst})"
                f" carries {self.tag}")


@dataclass(frozen=True)
class SeedSpec:
    """One source feeding the base of a dependency stream. Guards restrict the
    consumer points this seed serves when the source is only conditionally
    adjacent (sources compete, exactly one is active per point)."""
    to_pattern: tuple[Idx, ...]
    from_space: str
    from_pattern: tuple[Idx, ...]     # in consumer-space variables
    from_tag: str
    interface: str
    guards: tuple[Pred, ...] = ()


@dataclass
class OperandFlow:
    tag: str
    kind: str                          # stream|preload|broadcast|memfeed|dep|self
    tensor: str | None = None
    slice_map: tuple[Idx, ...] | None = None   # tensor indices over space vars
    axis: str | None = None                    # propagation axis (space var)
    axis_spatial: bool = False
    grid_axis: int | None = None
    inject_pattern: tuple[Idx, ...] | None = None
    seeds: tuple[SeedSpec, ...] = ()
    self_offset: int = 0


@dataclass
class AccSpec:
    tag: str
    init: ConstRef
    axis: str
    axis_spatial: bool
    grid_axis: int | None
    r_end: Idx                     # exclusive upper bound of the reduction
    shape: tuple[int, int]


@dataclass
class PublishSpec:
    tensor: str
    indices: tuple[Idx, ...]
    tag: str
    pattern: tuple[Idx, ...]


@dataclass
class LoweredSpace:
    decl: SpaceDecl
    region: RegionInfo
    placement: tuple[Idx, ...]     # grid coordinate exprs over space vars
    temporal_vars: tuple[str, ...]
    operands: list[OperandFlow] = field(default_factory=list)
    acc: AccSpec | None = None
    compute: ComputeSpec | None = None
    out_tag: str = ""
    publishes: list[PublishSpec] = field(default_factory=list)
    handoff: tuple[str, str] | None = None   # (inner space, acc tag) on apply spaces

    @property
    def name(self):
        return self.decl.name

    @property
    def vars(self):
        return self.decl.vars

    def lam(self, point: tuple[int, ...]) -> int:
        """Wavefront depth: grid placement coordinates plus temporal coords."""
        env = dict(zip(self.vars, point))
        return (sum(_eval_idx(p, env) for p in self.placement)
                + sum(env[v] for v in self.temporal_vars))

    def in_domain(self, point: tuple[int, ...]) -> bool:
        env = dict(zip(self.decl.vars, point))
        for v, e in zip(self.decl.vars, self.decl.extents):
            if not 0 <= env[v] < e:
                return False
        cons = list(self.decl.constraints)
        if self.decl.pinned:
            cons.append(Constraint(self.decl.pinned[0], "=", self.decl.pinned[1]))
        for c in cons:
            b = env[c.bound.var] + c.bound.offset if c.bound.var else c.bound.offset
            v = env[c.var]
            if c.rel == "<" and not v < b:
                return False
            if c.rel == "<=" and not v <= b:
                return False
            if c.rel == "=" and not v == b:
                return False
        return True


@dataclass
class DataflowProgram:
    checked: CheckedProgram
    schedule: Schedule
    spaces: list[LoweredSpace]
    rules: list[Rule]
    interfaces: list[InterfaceMap]

    def space(self, name: str) -> LoweredSpace:
        for s in self.spaces:
            if s.name == name:
                return s
        raise KeyError(name)

    def rules_of(self, name: str) -> list[Rule]:
        return [r for r in self.rules if r.space == name]


# ---------------------------------------------------------------------------
# affine helpers
# ---------------------------------------------------------------------------

def _eval_idx(i: Idx, env: dict[str, int]) -> int:
    return (env[i.var] + i.offset) if i.var is not None else i.offset


def _subst(i: Idx, binding: dict[str, Idx]) -> Idx:
    if i.var is None or i.var not in binding:
        return i
    b = binding[i.var]
    return Idx(b.var, b.offset + i.offset)


def _identity(vars_: tuple[str, ...]) -> tuple[Idx, ...]:
    return tuple(Idx(v) for v in vars_)


def _shift(pattern: tuple[Idx, ...], pos: int, delta: int) -> tuple[Idx, ...]:
    out = list(pattern)
    out[pos] = out[pos].shift(delta)
    return tuple(out)


def _lower_bound(decl: SpaceDecl, var: str) -> Idx:
    """Smallest admissible value of var under the space constraints."""
    for c in decl.constraints:
        if c.rel in ("<", "<=") and c.bound.var == var:
            return Idx(c.var, -c.bound.offset + (1 if c.rel == "<" else 0))
    return Idx(None, 0)


def provably_lt(a: Idx, b: Idx, constraints) -> bool:
    """a < b under the constraint chain (transitive, offsets composed)."""
    if a.var == b.var:
        return a.offset < b.offset
    if a.var is None or b.var is None:
        return False
    # reach[w] = largest o such that a.var <= w + o is provable
    reach: dict[str, int] = {a.var: 0}
    frontier = [a.var]
    while frontier:
        v = frontier.pop()
        for c in constraints:
            if c.var != v or c.bound.var is None:
                continue
            slack = c.bound.offset - (1 if c.rel == "<" else 0)
            o = reach[v] + slack
            if c.bound.var not in reach or reach[c.bound.var] < o:
                reach[c.bound.var] = o
                frontier.append(c.bound.var)
    if b.var not in reach:
        return False
    # a = a.var + a.offset <= b.var + reach + a.offset; strict if < b.var + b.offset
    return reach[b.var] + a.offset < b.offset


# ---------------------------------------------------------------------------
# Rule constructors (the rewrite rules)
# ---------------------------------------------------------------------------

def lower_sum(region: RegionInfo, space: LoweredSpace,
              acc_shape: tuple[int, int]) -> tuple[list[Rule], AccSpec]:
    """Replace the reduction with an explicit accumulator: an Init rule at the
    reduction origin and a stepwise Compute along the reduction axis."""
    decl = space.decl
    r = region.reduction_var
    pos = decl.vars.index(r)
    acc_tag = space.out_tag
    if region.fold_head == "maxfold":
        fold = "max"
    elif region.body_kernel == "SOFTMAXSTEP":
        fold = "kernel"
    else:
        fold = "sum"
    init = ConstRef("flash" if fold == "kernel" else "zero", acc_shape)
    ident = _identity(decl.vars)
    init_pat = list(ident)
    init_pat[pos] = Idx(None, 0)
    rules = [Rule("Init", decl.name, acc_tag, tuple(init_pat), init)]
    prev = ValueRef(decl.name, _shift(ident, pos, -1), acc_tag)
    rules.append(Rule("Compute", decl.name, acc_tag, ident,
                      ComputeSpec("acc", region.body_kernel, prev=prev, fold=fold)))
    acc = AccSpec(acc_tag, init, r, False, None, _reduction_end(region), acc_shape)
    return rules, acc


def apply_stream(space: LoweredSpace, operand: Access, axis: str, tag: str,
                 kind: str = "stream") -> tuple[list[Rule], OperandFlow]:
    """Inject at the axis origin, receive from the -1 neighbor, forward to the
    +1 neighbor."""
    decl = space.decl
    if axis in operand.vars():
        raise LoweringError(f"stream axis {axis} appears in indices({operand})")
    pos = decl.vars.index(axis)
    ident = _identity(decl.vars)
    inject_pat = list(ident)
    inject_pat[pos] = _lower_bound(decl, axis)
    inject_pat = tuple(inject_pat)
    rules = [
        Rule("Inject", decl.name, tag, inject_pat,
             MemRef(operand.tensor, operand.indices)),
        Rule("Propagate", decl.name, tag, ident,
             ValueRef(decl.name, _shift(ident, pos, -1), tag),
             guards=(Pred(Idx(axis), ">", inject_pat[pos]),)),
        Rule("Send", decl.name, tag, _shift(ident, pos, 1),
             ValueRef(decl.name, ident, tag)),
    ]
    flow = OperandFlow(tag, kind, operand.tensor, operand.indices, axis,
                       inject_pattern=inject_pat)
    return rules, flow


def apply_broadcast(space: LoweredSpace, operand: Access, tag: str,
                    pattern: tuple[Idx, ...]) -> tuple[list[Rule], OperandFlow]:
    """Feeder-to-PE delivery at every consuming point; the propagate rule
    becomes irrelevant and nothing is forwarded."""
    rules = [Rule("Inject", space.name, tag, pattern,
                  MemRef(operand.tensor, operand.indices))]
    return rules, OperandFlow(tag, "broadcast", operand.tensor, operand.indices)


def apply_outer_send(inner: LoweredSpace, outer: LoweredSpace, acc: AccSpec,
                     iface_name: str) -> tuple[list[Rule], InterfaceMap]:
    """Hand the final accumulator of the reduction space to the apply space at
    the reduction end; empty reductions start from the initial value."""
    r = acc.axis
    pos = inner.vars.index(r)
    outer_pat = list(_identity(outer.vars))
    outer_pat[pos] = outer.decl.pinned[1]
    outer_pat = tuple(outer_pat)
    inner_final = _shift(outer_pat, pos, -1)
    lo = _lower_bound(inner.decl, r)
    nonempty = (Pred(outer_pat[pos], ">", lo),)
    empty = (Pred(outer_pat[pos], "=", lo),)
    rules = [
        Rule("InterfaceSend", inner.name, acc.tag, outer_pat,
             ValueRef(inner.name, inner_final, acc.tag),
             guards=nonempty, interface=iface_name),
        Rule("InterfaceRecv", outer.name, acc.tag, outer_pat,
             ValueRef(inner.name, inner_final, acc.tag),
             guards=nonempty, interface=iface_name),
        Rule("Init", outer.name, acc.tag, outer_pat,
             ConstRef(acc.init.kind, acc.shape), guards=empty),
    ]
    iface = InterfaceMap(iface_name, inner.name, inner_final, outer.name,
                         outer_pat, acc.tag)
    return rules, iface


def apply_inner_send(space: LoweredSpace, operand: Access, tag: str, axis: str,
                     base: Idx) -> list[Rule]:
    """Propagate/forward half of a dependency stream; its seeds (interface
    receives from the producing space) are attached in a second pass once all
    producers and holder streams exist."""
    decl = space.decl
    pos = decl.vars.index(axis)
    ident = _identity(decl.vars)
    return [
        Rule("Propagate", decl.name, tag, ident,
             ValueRef(decl.name, _shift(ident, pos, -1), tag),
             guards=(Pred(Idx(axis), ">", base),)),
        Rule("Send", decl.name, tag, _shift(ident, pos, 1),
             ValueRef(decl.name, ident, tag)),
    ]


# ---------------------------------------------------------------------------
# lower(): composition
# ---------------------------------------------------------------------------

def _acc_shape(checked: CheckedProgram, region: RegionInfo) -> tuple[int, int]:
    tile = lambda a: checked.tensors[a.tensor].tile
    ops = region.body_operands
    k = region.body_kernel
    if k in ("mul", "GEMM"):
        return (tile(ops[0])[0], tile(ops[1])[1])
    if k == "GEMMT":
        return (tile(ops[0])[0], tile(ops[1])[0])
    if k == "SYRK":
        return (tile(ops[0])[0], tile(ops[0])[0])
    if k in ("add", "max"):
        return tile(ops[0])
    if k == "SOFTMAXSTEP":
        return (tile(ops[0])[0], tile(ops[2])[1] + 2)
    raise LoweringError(f"cannot size accumulator for kernel {k}")


@dataclass
class _PendingSeed:
    space: LoweredSpace
    operand: Access
    flow: OperandFlow
    seed_pattern: tuple[Idx, ...]


class _Lowerer:
    def __init__(self, checked: CheckedProgram, sched: Schedule):
        self.checked = checked
        self.sched = sched
        self.rules: list[Rule] = []
        self.interfaces: list[InterfaceMap] = []
        self.spaces: list[LoweredSpace] = []
        self.pending: list[_PendingSeed] = []
        self._iface_n = 0
        # output tensor -> [(region, producing space, tag)]
        self.producers: dict[str, list[tuple[RegionInfo, LoweredSpace, str]]] = {}
        # tensor -> [(space, flow)] carrying reusable copies
        self.holders: dict[str, list[tuple[LoweredSpace, OperandFlow]]] = {}

    def next_iface(self) -> str:
        self._iface_n += 1
        return f"Phi{self._iface_n}"

    # -- operand classification --------------------------------------------

    def classify(self, space: LoweredSpace, region: RegionInfo,
                 operand: Access) -> OperandFlow:
        checked, sched = self.checked, self.sched
        tag = self._operand_tag(space, operand)
        if operand.tensor in checked.outputs:
            return self._lower_dependency(space, region, operand, tag)
        point_pat = self._point_pattern(space)
        directive = sched.directive_for(operand.tensor)
        pinned_var = space.decl.pinned[0] if space.decl.pinned else None
        valid = [v for v in space.vars
                 if v not in operand.vars() and v != pinned_var]
        spatial = sched.mapping.spatial_vars()

        # a stream directive whose axis is pinned in this space (the apply
        # slot) degenerates to a single use; fall back to the defaults there
        if (directive and directive.kind == "stream" and directive.axes
                and directive.axes[0] not in valid):
            directive = None
        if directive and directive.kind == "broadcast":
            rules, flow = apply_broadcast(space, operand, tag, point_pat)
        elif directive and directive.kind == "prefetch":
            rules = [Rule("Inject", space.name, tag, point_pat,
                          MemRef(operand.tensor, operand.indices))]
            flow = OperandFlow(tag, "preload", operand.tensor, operand.indices)
        elif directive and directive.kind == "stream" and directive.axes:
            axis = directive.axes[0]
            if axis in spatial:
                rules, flow = apply_stream(space, operand, axis, tag)
                flow.axis_spatial = True
                flow.grid_axis = sched.mapping.axis_of(axis)
                self.holders.setdefault(operand.tensor, []).append((space, flow))
            else:
                rules, flow = apply_stream(space, operand, axis, tag, kind="preload")
        else:
            # defaults: lowest-numbered free spatial reuse axis, else temporal
            # reuse (a preload), else memory-fed at each point
            spatial_valid = [v for v in spatial if v in valid]
            if spatial_valid:
                axis = spatial_valid[0]
                rules, flow = apply_stream(space, operand, axis, tag)
                flow.axis_spatial = True
                flow.grid_axis = sched.mapping.axis_of(axis)
                self.holders.setdefault(operand.tensor, []).append((space, flow))
            elif valid:
                rules, flow = apply_stream(space, operand, valid[0], tag, kind="preload")
            else:
                rules = [Rule("Inject", space.name, tag, point_pat,
                              MemRef(operand.tensor, operand.indices))]
                flow = OperandFlow(tag, "memfeed", operand.tensor, operand.indices)
        space.operands.append(flow)
        self.rules.extend(rules)
        return flow

    def _operand_tag(self, space: LoweredSpace, operand: Access) -> str:
        if operand.tensor not in self.checked.outputs:
            return operand.tensor
        dups = sum(1 for f in space.operands
                   if f.kind in ("dep", "self") and f.tensor == operand.tensor)
        return f"{operand.tensor}b" + (str(dups) if dups else "")

    def _point_pattern(self, space: LoweredSpace) -> tuple[Idx, ...]:
        ident = list(_identity(space.vars))
        if space.decl.pinned:
            pos = space.vars.index(space.decl.pinned[0])
            ident[pos] = space.decl.pinned[1]
        return tuple(ident)

    # -- dependency routing ---------------------------------------------------

    def _lower_dependency(self, space: LoweredSpace, region: RegionInfo,
                          operand: Access, tag: str) -> OperandFlow:
        pinned_var = space.decl.pinned[0] if space.decl.pinned else None
        spatial = self.sched.mapping.spatial_vars()
        valid = [v for v in spatial
                 if v in space.vars and v not in operand.vars() and v != pinned_var]

        # same-space offset self reference (prefix sum): one-hop interface
        offset_axes = [ (k, i) for k, i in enumerate(operand.indices)
                        if i.var is not None and i.offset < 0 ]
        if not valid and operand.tensor == region.out_tensor and offset_axes:
            pos, idx = offset_axes[0]
            axis = idx.var
            apos = space.vars.index(axis)
            ident = _identity(space.vars)
            from_pat = _shift(ident, apos, idx.offset)
            iface = self.next_iface()
            seed = SeedSpec(ident, space.name, from_pat, space.out_tag, iface)
            zero_pat = list(ident)
            zero_pat[apos] = Idx(None, 0)
            self.rules += [
                Rule("InterfaceRecv", space.name, tag, ident,
                     ValueRef(space.name, from_pat, space.out_tag),
                     guards=(Pred(Idx(axis), ">=", Idx(None, -idx.offset)),),
                     interface=iface),
                Rule("Init", space.name, tag, tuple(zero_pat),
                     ConstRef("zero", self.checked.tensors[operand.tensor].tile),
                     guards=(Pred(Idx(axis), "<", Idx(None, -idx.offset)),)),
            ]
            self.interfaces.append(InterfaceMap(iface, space.name, from_pat,
                                                space.name, ident, space.out_tag))
            flow = OperandFlow(tag, "self", operand.tensor, operand.indices, axis,
                               axis_spatial=axis in spatial,
                               grid_axis=self.sched.mapping.axis_of(axis),
                               seeds=(seed,), self_offset=idx.offset)
            space.operands.append(flow)
            return flow

        if valid:
            axis = valid[0]
            pos = space.vars.index(axis)
            base = _lower_bound(space.decl, axis)
            seed_pat = list(_identity(space.vars))
            seed_pat[pos] = base
            seed_pat = tuple(seed_pat)
            self.rules += apply_inner_send(space, operand, tag, axis, base)
            flow = OperandFlow(tag, "dep", operand.tensor, operand.indices, axis,
                               axis_spatial=True,
                               grid_axis=self.sched.mapping.axis_of(axis))
        else:
            # single-point consumption, fed by an adjacent holder
            seed_pat = self._point_pattern(space)
            flow = OperandFlow(tag, "dep", operand.tensor, operand.indices, None)
        space.operands.append(flow)
        self.pending.append(_PendingSeed(space, operand, flow, seed_pat))
        self.holders.setdefault(operand.tensor, []).append((space, flow))
        return flow

    def _find_producer(self, operand: Access,
                       constraints) -> tuple[RegionInfo, LoweredSpace, str]:
        """The unique recurrence whose lhs region covers this operand slice."""
        candidates = []
        for region, space, tag in self.producers.get(operand.tensor, []):
            binding: dict[str, Idx] = {}
            ok = True
            for lhs_idx, op_idx in zip(region.out_indices, operand.indices):
                if lhs_idx.var is None:
                    ok = ok and lhs_idx == op_idx
                elif lhs_idx.var in binding:
                    ok = ok and binding[lhs_idx.var] == op_idx
                else:
                    binding[lhs_idx.var] = op_idx
            if not ok:
                continue
            for c in region.constraints:
                if c.var in binding and c.bound.var in binding:
                    a, b = binding[c.var], binding[c.bound.var].shift(c.bound.offset)
                    if c.rel == "<" and not provably_lt(a, b, constraints):
                        ok = False
                    if c.rel == "=" and a != b:
                        ok = False
            if ok:
                candidates.append((region, space, tag, binding))
        if len(candidates) != 1:
            raise LoweringError(f"cannot identify the producing recurrence for "
                                f"{operand} ({len(candidates)} candidates)")
        region, space, tag, binding = candidates[0]
        pattern = tuple(_subst(c, binding) for c in self._producer_pattern(space))
        return space, pattern, tag

    def _producer_pattern(self, space: LoweredSpace) -> tuple[Idx, ...]:
        return self._point_pattern(space)

    def _resolve_seeds(self):
        """Second pass: attach interface seeds to dependency streams, sourcing
        each from the producing point or from an adjacent holder stream."""
        for p in self.pending:
            seeds = self._nearest_holder(p)
            p.flow.seeds = tuple(seeds)
            for s in seeds:
                self.rules.append(Rule(
                    "InterfaceRecv", p.space.name, p.flow.tag, s.to_pattern,
                    ValueRef(s.from_space, s.from_pattern, s.from_tag),
                    guards=s.guards, interface=s.interface))
                self.interfaces.append(InterfaceMap(
                    s.interface, s.from_space, s.from_pattern,
                    p.space.name, s.to_pattern, s.from_tag))

    def _satisfiable(self, space: LoweredSpace, pattern: tuple[Idx, ...],
                     guards: tuple[Pred, ...] = ()) -> bool:
        """Best-effort symbolic check that some point of the space's domain
        matches `pattern` under `guards`; undecidable comparisons pass."""
        env = {v: c for v, c in zip(space.vars, pattern)}
        for g in guards:
            if g.rel == "=" and g.lhs.var in env and env[g.lhs.var].var == g.lhs.var:
                env[g.lhs.var] = g.rhs.shift(-g.lhs.offset)
        sub = lambda i: _subst(i, env)

        def decide(a: Idx, b: Idx, rel: str):
            if a.var != b.var:
                return None
            d = a.offset - b.offset
            return {"<": d < 0, "<=": d <= 0, "=": d == 0,
                    ">": d > 0, ">=": d >= 0}[rel]

        cons = list(space.decl.constraints)
        if space.decl.pinned:
            cons.append(Constraint(space.decl.pinned[0], "=", space.decl.pinned[1]))
        for c in cons:
            verdict = decide(sub(Idx(c.var)), sub(c.bound), c.rel)
            if verdict is False:
                return False
        for g in guards:
            verdict = decide(sub(g.lhs), sub(g.rhs), g.rel)
            if verdict is False:
                return False
        return True

    def _nearest_holder(self, p: _PendingSeed) -> list[SeedSpec]:
        space, operand, seed_pat = p.space, p.operand, p.seed_pattern
        env = dict(zip(space.vars, seed_pat))
        to_place = tuple(_subst(pl, env) for pl in space.placement)

        def adjacent(from_place) -> bool:
            diffs = []
            for a, b in zip(from_place, to_place):
                if a.var != b.var:
                    return False
                diffs.append(b.offset - a.offset)
            nz = [d for d in diffs if d]
            return len(nz) <= 1 and all(abs(d) == 1 for d in nz)

        def conditional_adjacency(from_place) -> list[tuple[Pred, ...]]:
            """Guard sets under which the source placement is one hop (or
            co-located) with the seed placement; same-var axes must already
            agree, one differing-var axis may be pinned by a guard."""
            fixed_hops = 0
            unknown = None
            for a, b in zip(from_place, to_place):
                if a.var == b.var:
                    d = abs(b.offset - a.offset)
                    if d > 1:
                        return []
                    fixed_hops += d
                elif unknown is None:
                    unknown = (a, b)
                else:
                    return []
            if unknown is None:
                return [()] if fixed_hops <= 1 else []
            if fixed_hops > 0:
                deltas = (0,)
            else:
                deltas = (1, -1, 0)
            a, b = unknown
            return [(Pred(b, "=", a.shift(d)),) for d in deltas]

        seeds: list[SeedSpec] = []
        prod_space, prod_pattern, prod_tag = self._find_producer(
            operand, space.decl.constraints)
        prod_place = tuple(_subst(pl, dict(zip(prod_space.vars, prod_pattern)))
                           for pl in prod_space.placement)
        if adjacent(prod_place):
            seeds.append(SeedSpec(seed_pat, prod_space.name, prod_pattern,
                                  prod_tag, self.next_iface()))
        else:
            for guards in conditional_adjacency(prod_place):
                if not guards:
                    continue
                # eliminate the guarded variable when checking the source side
                subst = {g.rhs.var: Idx(g.lhs.var, g.lhs.offset - g.rhs.offset)
                         for g in guards if g.rhs.var is not None}
                probe = tuple(_subst(c, subst) for c in prod_pattern)
                if not self._satisfiable(space, seed_pat, guards):
                    continue
                if not self._satisfiable(prod_space, probe):
                    continue
                seeds.append(SeedSpec(seed_pat, prod_space.name, prod_pattern,
                                      prod_tag, self.next_iface(), guards))
        for h_space, h_flow in self.holders.get(operand.tensor, []):
            if h_flow is p.flow or (h_flow.axis is not None and not h_flow.axis_spatial):
                continue
            hb: dict[str, Idx] = {}
            ok = True
            for h_idx, o_idx in zip(h_flow.slice_map, operand.indices):
                if h_idx.var is None:
                    ok = ok and h_idx == o_idx
                elif h_idx.var in hb:
                    ok = ok and hb[h_idx.var] == Idx(o_idx.var, o_idx.offset - h_idx.offset)
                else:
                    hb[h_idx.var] = Idx(o_idx.var, o_idx.offset - h_idx.offset)
            if not ok:
                continue
            pinned = h_space.decl.pinned[0] if h_space.decl.pinned else None
            free = [v for v in h_space.vars if v not in hb and v != pinned]
            if free not in ([], [h_flow.axis]):
                continue
            if free:
                # slide along the holder's stream axis until placements touch
                solved = None
                for pl, tp in zip(h_space.placement, to_place):
                    if pl.var == h_flow.axis:
                        solved = Idx(tp.var, tp.offset - pl.offset - 1)
                if solved is None:
                    continue
                hb[h_flow.axis] = solved
            if pinned is not None and pinned not in hb:
                hb[pinned] = _subst(h_space.decl.pinned[1], hb)
            from_pat = tuple(_subst(Idx(v), hb) for v in h_space.vars)
            h_place = tuple(_subst(pl, dict(zip(h_space.vars, from_pat)))
                            for pl in h_space.placement)
            if not adjacent(h_place):
                continue
            if not self._satisfiable(h_space, from_pat):
                continue
            seeds.append(SeedSpec(seed_pat, h_space.name, from_pat,
                                  h_flow.tag, self.next_iface()))
        if not seeds:
            raise LoweringError(f"cannot route dependency operand {operand} into "
                                f"space {space.name}: no adjacent source")
        return seeds

    # -- per-region lowering --------------------------------------------------

    def lower_region(self, region: RegionInfo, decls: list[SpaceDecl]):
        checked, sched = self.checked, self.sched
        mk = lambda decl: LoweredSpace(
            decl, region, _placement(checked, sched, decl, region),
            tuple(v for v in decl.vars if sched.mapping.as_dict.get(v) == "time"))
        inner = mk(decls[0])
        outer = mk(decls[1]) if len(decls) > 1 else None

        out_tensor = region.out_tensor
        (outer or inner).out_tag = out_tensor
        if outer is not None:
            inner.out_tag = f"{out_tensor}a"
        self.producers.setdefault(out_tensor, []).append(
            (region, outer or inner, out_tensor))

        if region.reduction_var is None:
            self._lower_direct(region, inner)
            self.spaces.append(inner)
            return

        acc_rules, acc = lower_sum(region, inner, _acc_shape(checked, region))
        acc.axis_spatial = region.reduction_var in sched.mapping.spatial_vars()
        acc.grid_axis = sched.mapping.axis_of(region.reduction_var)
        inner.acc = acc
        ident = _identity(inner.vars)
        args = tuple(ValueRef(inner.name, ident, self.classify(inner, region, o).tag)
                     for o in region.body_operands)
        spec = replace(acc_rules[-1].source, args=args)
        acc_rules[-1] = replace(acc_rules[-1], source=spec)
        inner.compute = spec
        self.rules.extend(acc_rules)

        if outer is None:
            self._publish(inner, region)
            self.spaces.append(inner)
            return

        handshake, iface = apply_outer_send(inner, outer, acc, self.next_iface())
        self.rules.extend(handshake)
        self.interfaces.append(iface)
        outer.handoff = (inner.name, acc.tag)
        o_ident = self._point_pattern(outer)
        acc_ref = ValueRef(outer.name, o_ident, acc.tag)
        outer_args = []
        for a in region.outer.args:
            if a is None:
                if region.outer.minuend is not None:
                    m_flow = self.classify(outer, region, region.outer.minuend)
                    outer_args.append(SubRef(
                        ValueRef(outer.name, o_ident, m_flow.tag), acc_ref))
                else:
                    outer_args.append(acc_ref)
            else:
                a_flow = self.classify(outer, region, a)
                outer_args.append(ValueRef(outer.name, o_ident, a_flow.tag))
        outer.compute = ComputeSpec("apply", region.outer.kernel,
                                    args=tuple(outer_args))
        self.rules.append(Rule("Compute", outer.name, out_tensor, o_ident,
                               outer.compute))
        self._publish(outer, region)
        self.spaces.extend([inner, outer])

    def _lower_direct(self, region: RegionInfo, space: LoweredSpace):
        ident = _identity(space.vars)
        tagmap = tuple((o, ValueRef(space.name, ident, self.classify(space, region, o).tag))
                       for o in region.body_operands)
        space.compute = ComputeSpec("direct", "", expr=region.direct_expr,
                                    tagmap=tagmap)
        self.rules.append(Rule("Compute", space.name, space.out_tag, ident,
                               space.compute))
        self._publish(space, region)

    def _publish(self, space: LoweredSpace, region: RegionInfo):
        pattern = self._point_pattern(space)
        if space.decl.role == "reduce" and region.reduction_var is not None:
            pos = space.vars.index(region.reduction_var)
            pattern = list(pattern)
            pattern[pos] = _reduction_end(region).shift(-1)
            pattern = tuple(pattern)
        mem = MemRef(region.out_tensor, region.out_indices)
        self.rules.append(Rule("Publish", space.name, space.out_tag, pattern,
                               ValueRef(space.name, pattern, space.out_tag),
                               publish_to=mem))
        space.publishes.append(PublishSpec(region.out_tensor, region.out_indices,
                                           space.out_tag, pattern))

    def run(self) -> DataflowProgram:
        decls = extract_operation_spaces(self.checked)
        by_region: dict[int, list[SpaceDecl]] = {}
        for d in decls:
            by_region.setdefault(d.rec_index, []).append(d)
        for region in self.checked.regions:
            self.lower_region(region, by_region[region.rec_index])
        self._resolve_seeds()
        return DataflowProgram(self.checked, self.sched, self.spaces,
                               self._ordered_rules(), self.interfaces)

    def _ordered_rules(self) -> list[Rule]:
        order = {"Inject": 0, "Init": 1, "InterfaceRecv": 2, "Propagate": 3,
                 "Compute": 4, "Send": 5, "InterfaceSend": 6, "Publish": 7}
        space_order = {s.name: i for i, s in enumerate(self.spaces)}
        indexed = list(enumerate(self.rules))
        indexed.sort(key=lambda kv: (space_order[kv[1].space], order[kv[1].kind], kv[0]))
        return [r for _, r in indexed]


def _placement(checked: CheckedProgram, sched: Schedule,
               decl: SpaceDecl, region: RegionInfo) -> tuple[Idx, ...]:
    """Grid coordinate expressions for points of one space. Spatially mapped
    variables place directly; variables foreign to this recurrence are
    recovered through the output tensor's distribution, anchored by any
    recurrence whose lhs uses distinct spatially mapped variables."""
    mapping = sched.mapping
    anchors: dict[int, int] = {}
    for reg in checked.regions:
        if reg.out_tensor != region.out_tensor:
            continue
        if len(set(reg.out_indices)) != len(reg.out_indices):
            continue
        for t_axis, i in enumerate(reg.out_indices):
            a = mapping.axis_of(i.var) if i.var else None
            if a is not None:
                anchors[a] = t_axis
    out: list[Idx] = []
    for a, v in enumerate(mapping.spatial_vars()):
        if v in decl.vars:
            out.append(Idx(v))
        elif a in anchors:
            out.append(region.out_indices[anchors[a]])
        else:
            raise LoweringError(
                f"cannot place space {decl.name}: no variable for grid axis {a}")
    return tuple(out)


def lower(checked: CheckedProgram, sched: Schedule) -> DataflowProgram:
    """Lower a checked program and schedule to the dataflow IR. The schedule
    must be clean under check_schedule."""
    diags = check_schedule(sched, checked)
    if diags:
        raise LoweringError("; ".join(str(d) for d in diags))
    return _Lowerer(checked, sched).run()


# ---------------------------------------------------------------------------
# Textual dump (stable ordering, golden-file friendly)
# ---------------------------------------------------------------------------

def _pattern_str(space: LoweredSpace, rule: Rule, coords: tuple[Idx, ...]) -> str:
    parts = []
    region = space.region
    r = region.reduction_var
    final = _reduction_end(region).shift(-1) if r is not None else None
    for v, c in zip(space.vars, coords):
        if r is not None and v == r and c == final and c.var is None and rule.kind == "Publish":
            parts.append(f"{r}_final")
        else:
            parts.append(str(c))
    return ",".join(parts)


def _ref_str(dfp: DataflowProgram, rule: Rule, ref) -> str:
    if isinstance(ref, ValueRef):
        return f"({_pattern_str(dfp.space(ref.space), rule, ref.coords)})_{ref.tag}^{ref.space}"
    return str(ref)


def render_rule(dfp: DataflowProgram, rule: Rule) -> str:
    space = dfp.space(rule.space)
    tgt = f"({_pattern_str(space, rule, rule.target)})_{rule.tag}^{rule.space}"
    # interior propagate guards are implied by the -1 source pattern; boundary
    # guards (empty reductions, seed windows) are shown after a colon
    guards = ""
    if rule.kind != "Propagate" and rule.guards:
        guards = " : " + ", ".join(str(g) for g in rule.guards)
    if rule.kind == "Publish":
        return f"{rule.publish_to} <- {_ref_str(dfp, rule, rule.source)}{guards}"
    if rule.kind in ("Send", "InterfaceSend"):
        return f"{_ref_str(dfp, rule, rule.source)} -> {tgt}{guards}"
    return f"{tgt} <- {_ref_str(dfp, rule, rule.source)}{guards}"


def dump_ir(dfp: DataflowProgram) -> str:
    lines = []
    for space in dfp.spaces:
        decl = space.decl
        lines.append(f"# space {space.name}: ({','.join(decl.vars)}) "
                     f"with {decl.domain_str()}")
        for rule in dfp.rules_of(space.name):
            if rule.kind == "InterfaceSend":
                continue  # shown from the receiving side
            lines.append(render_rule(dfp, rule))
    if dfp.interfaces:
        lines.append("# interfaces")
        for im in dfp.interfaces:
            lines.append(str(im))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Big-step evaluation of the IR over the full iteration domain (the
# schedule-neutral semantics; used by tests and the run verifier)
# ---------------------------------------------------------------------------

class EvalError(Exception):
    pass


_KIND_RANK = {"Inject": 0, "InterfaceRecv": 1, "Init": 2, "Compute": 3,
              "Propagate": 4}


class Evaluator:
    def __init__(self, dfp: DataflowProgram, store: TensorStore, strict: bool = False):
        self.dfp = dfp
        self.store = store
        self.strict = strict
        self.memo: dict[tuple, np.ndarray] = {}
        self.pending: set[tuple] = set()
        self._by_space: dict[str, list[Rule]] = {}
        for r in dfp.rules:
            self._by_space.setdefault(r.space, []).append(r)

    def _match(self, rule: Rule, point: tuple[int, ...], space: LoweredSpace):
        # a point is a full assignment of the space variables; the pattern and
        # guards act as constraints on it
        env = dict(zip(space.vars, point))
        for pat, val in zip(rule.target, point):
            if _eval_idx(pat, env) != val:
                return None
        for g in rule.guards:
            if not g.holds(env):
                return None
        return env

    def resolve(self, space_name: str, point: tuple[int, ...], tag: str) -> np.ndarray:
        key = (space_name, point, tag)
        if key in self.memo:
            return self.memo[key]
        if key in self.pending:
            raise EvalError(f"cyclic value dependency at {key}")
        self.pending.add(key)
        space = self.dfp.space(space_name)
        candidates = sorted(
            (r for r in self._by_space.get(space_name, [])
             if r.tag == tag and r.kind in _KIND_RANK),
            key=lambda r: _KIND_RANK[r.kind])
        has_acc = any(r.kind == "Compute" and isinstance(r.source, ComputeSpec)
                      and r.source.kind == "acc" for r in candidates)
        if has_acc:
            candidates = [r for r in candidates if r.kind != "Init"]
        value, fired = None, []
        for rule in candidates:
            env = self._match(rule, point, space)
            if env is None:
                continue
            got = self._fire(rule, env, space)
            if got is None:
                continue
            fired.append(rule.kind)
            if value is None:
                value = got
            if not self.strict:
                break
        if value is None:
            raise EvalError(f"no producer for {tag} at {space_name}{point}")
        if self.strict and len(fired) > 1:
            raise EvalError(f"multiple producers for {tag} at "
                            f"{space_name}{point}: {fired}")
        self.pending.discard(key)
        self.memo[key] = value
        return value

    def _fire(self, rule: Rule, env: dict[str, int], space: LoweredSpace):
        src = rule.source
        if isinstance(src, MemRef):
            idx = tuple(_eval_idx(i, env) for i in src.indices)
            return self.store.get_tile(src.tensor, idx)
        if isinstance(src, ConstRef):
            return src.value()
        if isinstance(src, ValueRef):
            pt = tuple(_eval_idx(c, env) for c in src.coords)
            if not self.dfp.space(src.space).in_domain(pt):
                return None
            return self.resolve(src.space, pt, src.tag)
        if isinstance(src, ComputeSpec):
            return self._compute(src, env, space)
        raise EvalError(f"cannot fire rule {rule}")

    def _arg(self, a, env):
        if isinstance(a, SubRef):
            left = self._arg(a.left, env)
            right = self._arg(a.right, env)
            return None if left is None or right is None else left - right
        pt = tuple(_eval_idx(c, env) for c in a.coords)
        if not self.dfp.space(a.space).in_domain(pt):
            return None
        return self.resolve(a.space, pt, a.tag)

    def _compute(self, spec: ComputeSpec, env: dict[str, int], space: LoweredSpace):
        if spec.kind == "direct":
            return self._direct(spec.expr, dict(spec.tagmap), env)
        if spec.kind == "acc":
            prev_pt = tuple(_eval_idx(c, env) for c in spec.prev.coords)
            if space.in_domain(prev_pt):
                prev = self.resolve(spec.prev.space, prev_pt, spec.prev.tag)
            else:
                prev = space.acc.init.value()
            args = [self._arg(a, env) for a in spec.args]
            if any(a is None for a in args):
                return None
            return _combine(spec, prev, args)
        if spec.kind == "apply":
            args = [self._arg(a, env) for a in spec.args]
            if any(a is None for a in args):
                return None
            return _apply_kernel(spec.kernel, args)
        raise EvalError(f"bad compute spec {spec}")

    def _direct(self, expr, tagmap, env):
        from . import frontend as F
        if isinstance(expr, F.Const):
            return np.array([[expr.value]])
        if isinstance(expr, F.Access):
            ref = tagmap[expr]
            pt = tuple(_eval_idx(c, env) for c in ref.coords)
            return self.resolve(ref.space, pt, ref.tag)
        if isinstance(expr, F.Bin):
            l = self._direct(expr.left, tagmap, env)
            r = self._direct(expr.right, tagmap, env)
            if expr.op == "+":
                return l + r
            if expr.op == "-":
                return l - r
            if expr.op == "*":
                return l @ r if l.size > 1 or r.size > 1 else l * r
            return l / r
        if isinstance(expr, F.Unary):
            b = self._direct(expr.body, tagmap, env)
            return {"sqrt": np.sqrt, "exp": np.exp,
                    "recip": lambda x: 1.0 / x}[expr.op](b)
        raise EvalError(f"cannot evaluate {expr}")

    def run(self) -> TensorStore:
        for space in self.dfp.spaces:
            for rule in self._by_space.get(space.name, []):
                if rule.kind != "Publish":
                    continue
                for point in space.decl.domain_points():
                    env = self._match(rule, point, space)
                    if env is None:
                        continue
                    val = self.resolve(rule.source.space, point, rule.source.tag)
                    idx = tuple(_eval_idx(i, env) for i in rule.publish_to.indices)
                    self.store.set_tile(rule.publish_to.tensor, idx, val)
        return self.store


def _combine(spec: ComputeSpec, prev: np.ndarray, args: list[np.ndarray]) -> np.ndarray:
    k = spec.kernel
    if spec.fold == "kernel" and k == "SOFTMAXSTEP":
        return KK.softmax_step(prev, *args)
    if spec.fold == "max":
        return np.maximum(prev, args[0])
    if k in ("mul", "GEMM"):
        return KK.gemm_acc(prev, args[0], args[1])
    if k == "GEMMT":
        return KK.gemm_acc(prev, args[0], args[1].T)
    if k == "SYRK":
        return KK.syrk_step(prev, args[0])
    if k == "add":
        return prev + args[0]
    raise EvalError(f"unknown combine kernel {k}")


def _apply_kernel(kernel: str, args: list[np.ndarray]) -> np.ndarray:
    if kernel == "TRSM":
        return KK.trsm_tile(args[0], args[1])
    if kernel == "TRSMT":
        return KK.trsmt_tile(args[0], args[1])
    if kernel == "CHOL":
        return KK.chol_tile(args[0])
    if kernel == "SOFTMAXFIN":
        return KK.softmax_fin(args[0])
    if kernel == "GEMM":
        return KK.gemm_acc(np.zeros((args[0].shape[0], args[1].shape[1])),
                           args[0], args[1])
    raise EvalError(f"unknown apply kernel {kernel}")


def evaluate(dfp: DataflowProgram, inputs: dict[str, np.ndarray],
             strict: bool = False) -> TensorStore:
    """Big-step fixpoint over the full iteration domain; returns a store with
    the output tensors filled in."""
    store = TensorStore(dict(dfp.checked.tensors), inputs)
    return Evaluator(dfp, store, strict=strict).run()
