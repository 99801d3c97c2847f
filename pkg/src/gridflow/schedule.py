"""Scheduling directives and space-time mappings.

A schedule names, per iteration variable, a grid axis (``space0`` ...) or
``time``, and optionally how tensors move: ``stream`` forwards values PE to
PE along a reuse axis, ``prefetch`` preloads them before step 0, ``broadcast``
delivers them on dedicated feeder links. Operands that use every iteration
variable carry an empty-axis stream directive and are fed from memory at each
step.

Schedule DSL (`.sched`), one statement per line or ';'-separated:

    map i->space0 j->space1 k->time
    stream(A,[j])
    broadcast(B,[i])
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .frontend import CheckedProgram, RegionInfo


class ScheduleError(Exception):
    pass


@dataclass(frozen=True)
class Directive:
    kind: str                  # 'stream', 'prefetch', 'broadcast'
    tensor: str
    axes: tuple[str, ...]      # empty for memory-fed stream markers

    def __str__(self):
        return f"{self.kind}({self.tensor},[{','.join(self.axes)}])"


@dataclass(frozen=True)
class SpaceTimeMapping:
    assignment: tuple[tuple[str, str], ...]  # (var, 'space0'|'space1'|'time')

    @property
    def as_dict(self) -> dict[str, str]:
        return dict(self.assignment)

    @property
    def rank(self) -> int:
        return sum(1 for _, a in self.assignment if a.startswith("space"))

    def spatial_vars(self) -> tuple[str, ...]:
        spaces = sorted((a, v) for v, a in self.assignment if a.startswith("space"))
        return tuple(v for _, v in spaces)

    def temporal_vars(self) -> tuple[str, ...]:
        return tuple(v for v, a in self.assignment if a == "time")

    def axis_of(self, var: str) -> int | None:
        a = self.as_dict.get(var)
        if a is None or a == "time":
            return None
        return int(a[len("space"):])

    def __str__(self):
        return "map " + " ".join(f"{v}->{a}" for v, a in self.assignment)


@dataclass(frozen=True)
class Schedule:
    mapping: SpaceTimeMapping
    directives: tuple[Directive, ...] = ()

    def directive_for(self, tensor: str) -> Directive | None:
        for d in self.directives:
            if d.tensor == tensor:
                return d
        return None

    def __str__(self):
        lines = [str(self.mapping)] + [str(d) for d in self.directives]
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class ScheduleDiagnostic:
    kind: str
    message: str

    def __str__(self):
        return f"{self.kind}: {self.message}"


_MAP_RE = re.compile(r"^map\s+(.*)$")
_ASSIGN_RE = re.compile(r"^([A-Za-z_]\w*)->(space\d+|time)$")
_DIR_RE = re.compile(r"^(stream|prefetch|broadcast)\(\s*([A-Za-z_]\w*)\s*,"
                     r"\s*\[([^\]]*)\]\s*\)$")


def parse_schedule(source: str, checked: CheckedProgram | None = None) -> Schedule:
    """Parse schedule text. When a checked program is supplied, tensor and
    axis names are validated immediately."""
    assignment: list[tuple[str, str]] = []
    directives: list[Directive] = []
    statements = []
    for line_no, raw in enumerate(source.splitlines(), start=1):
        text = raw.split("#", 1)[0]
        statements += [(line_no, s.strip()) for s in text.split(";") if s.strip()]
    for line_no, stmt in statements:
        m = _MAP_RE.match(stmt)
        if m:
            for part in m.group(1).split():
                am = _ASSIGN_RE.match(part)
                if not am:
                    raise ScheduleError(f"line {line_no}: bad mapping {part!r}")
                var, axis = am.groups()
                if var in dict(assignment):
                    raise ScheduleError(f"line {line_no}: duplicate mapping for {var}")
                assignment.append((var, axis))
            continue
        m = _DIR_RE.match(stmt)
        if m:
            kind, tensor, axes = m.groups()
            axes_t = tuple(a.strip() for a in axes.split(",") if a.strip())
            directives.append(Directive(kind, tensor, axes_t))
            continue
        raise ScheduleError(f"line {line_no}: cannot parse {stmt!r}")
    if not assignment:
        raise ScheduleError("schedule needs a map line")
    spaces = [a for _, a in assignment if a != "time"]
    if len(set(spaces)) != len(spaces):
        raise ScheduleError("two variables mapped to the same space axis")
    sched = Schedule(SpaceTimeMapping(tuple(assignment)), tuple(directives))
    if checked is not None:
        diags = check_schedule(sched, checked)
        hard = [d for d in diags if d.kind in ("unknown-tensor", "unknown-axis")]
        if hard:
            raise ScheduleError("; ".join(str(d) for d in hard))
    return sched


# ---------------------------------------------------------------------------
# Reuse-axis resolution (the stream premise: the axis must not appear in the
# operand's indices, so one injected value serves the whole run of points)
# ---------------------------------------------------------------------------

def reuse_axes(region: RegionInfo, operand_vars: tuple[str, ...]) -> tuple[str, ...]:
    space_vars = region.iter_vars + ((region.reduction_var,) if region.reduction_var else ())
    return tuple(v for v in space_vars if v not in operand_vars)


def _operand_axes_by_tensor(checked: CheckedProgram) -> dict[str, list]:
    """tensor -> [(region, access, tuple of valid stream axes)], rhs operands only.
    For output tensors a negative-offset self-reference also admits its own
    axis (the value propagates from the lower neighbor)."""
    out: dict[str, list] = {}
    for region in checked.regions:
        for acc in region.body_operands + tuple(
                a for a in (region.outer.minuend, *region.outer.args) if a is not None):
            axes = reuse_axes(region, acc.vars())
            if acc.tensor in checked.outputs:
                offs = tuple(i.var for i in acc.indices
                             if i.var is not None and i.offset < 0 and i.var not in axes)
                axes = axes + offs
            out.setdefault(acc.tensor, []).append((region, acc, axes))
    return out


def default_schedule(checked: CheckedProgram) -> Schedule:
    """Output indices to space in declaration order, reduction index to time;
    one stream directive per operand on the lowest-numbered free reuse axis."""
    anchor = max(checked.regions, key=lambda r: len(r.iter_vars))
    if len(anchor.iter_vars) > 2:
        raise ScheduleError("default mapping needs at most two output indices")
    assignment = [(v, f"space{axis}") for axis, v in enumerate(anchor.iter_vars)]
    if anchor.reduction_var:
        assignment.append((anchor.reduction_var, "time"))
    mapping = SpaceTimeMapping(tuple(assignment))

    spatial = mapping.spatial_vars()
    taken: set[str] = set()
    directives: list[Directive] = []
    for tensor, uses in sorted(_operand_axes_by_tensor(checked).items()):
        axes_sets = [set(axes) for _, _, axes in uses]
        common = set.intersection(*axes_sets) if axes_sets else set()
        if not common:
            directives.append(Directive("stream", tensor, ()))  # memory-fed
            continue
        ordered = [v for v in spatial if v in common]
        ordered += [v for v in mapping.temporal_vars() if v in common]
        pick = next((v for v in ordered if v not in taken), ordered[0] if ordered else None)
        if pick is None:
            directives.append(Directive("stream", tensor, ()))
            continue
        taken.add(pick)
        directives.append(Directive("stream", tensor, (pick,)))
    return Schedule(mapping, tuple(directives))


def check_schedule(sched: Schedule, checked: CheckedProgram) -> list[ScheduleDiagnostic]:
    """Empty list iff the mapping is total and every directive is admissible."""
    diags: list[ScheduleDiagnostic] = []
    mapping = sched.mapping
    assigned = mapping.as_dict

    all_vars: list[str] = []
    for region in checked.regions:
        for v in region.iter_vars + ((region.reduction_var,) if region.reduction_var else ()):
            if v not in all_vars:
                all_vars.append(v)
    unmapped = [v for v in all_vars if v not in assigned]
    if unmapped:
        diags.append(ScheduleDiagnostic(
            "unmapped", f"unmapped variables {{{', '.join(unmapped)}}}"))
    axes = sorted(mapping.axis_of(v) for v in assigned if mapping.axis_of(v) is not None)
    if axes != list(range(len(axes))):
        diags.append(ScheduleDiagnostic("axes", f"space axes must be dense, got {axes}"))
    # dependencies may serialize through space (prefix sum maps its only
    # variable spatially), so only reductions force a time axis
    needs_time = any(r.reduction_var for r in checked.regions)
    if needs_time and not mapping.temporal_vars():
        diags.append(ScheduleDiagnostic(
            "no-time", "a reduction or dependency exists but no variable maps to time"))

    uses = _operand_axes_by_tensor(checked)
    seen: set[str] = set()
    for d in sched.directives:
        if d.tensor in seen:
            diags.append(ScheduleDiagnostic(
                "duplicate", f"more than one directive for {d.tensor}"))
        seen.add(d.tensor)
        if d.tensor not in checked.tensors:
            diags.append(ScheduleDiagnostic("unknown-tensor", f"unknown tensor {d.tensor}"))
            continue
        for a in d.axes:
            if a not in assigned:
                diags.append(ScheduleDiagnostic(
                    "unknown-axis", f"{a} is not an iteration variable of the mapping"))
        if d.kind in ("prefetch", "broadcast"):
            bad = [a for a in d.axes if assigned.get(a, "time") == "time"]
            if bad:
                diags.append(ScheduleDiagnostic(
                    d.kind, f"{d.kind} axes must be spatial, got {bad}"))
        if d.kind == "stream" and d.axes:
            for region, acc, valid in uses.get(d.tensor, []):
                for a in d.axes:
                    if a in acc.vars() and d.tensor not in checked.outputs:
                        diags.append(ScheduleDiagnostic(
                            "stream-premise", f"{a} in indices({acc})"))
                    elif a not in valid and d.tensor in checked.outputs:
                        # outputs may also propagate along the decreasing axis
                        # of their self-reference
                        ok = any(w.access == acc for w in region.dependencies)
                        if not ok:
                            diags.append(ScheduleDiagnostic(
                                "stream-premise", f"{a} in indices({acc})"))
    return diags
