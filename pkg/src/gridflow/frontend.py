"""Recurrence input language: parser, checked AST, operation-space extraction.

The surface syntax is a bracketed textual form, one declaration or recurrence
per line (see docs/grammar.ebnf):

    tensor A[4,4] tile 4x4
    C[i,j] = sum(k, A[i,k] * B[k,j])
    X[i] = TRSM(L[i,i], B[i] - sum(j, GEMM(L[i,j], X[j]))) : j < i

Tensor elements are tiles (dense matrices of the declared tile shape); scalar
recurrences are the 1x1-tile case. Index expressions are a variable plus a
constant offset, or a constant; anything fancier is out of scope.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

KERNELS = ("GEMM", "GEMMT", "TRSM", "TRSMT", "SYRK", "CHOL",
           "SOFTMAXSTEP", "SOFTMAXFIN")
UNARY_OPS = ("sqrt", "exp", "recip")
FOLD_HEADS = ("sum", "maxfold")

# kernel-call arities, fixed per kernel
KERNEL_ARITY = {
    "GEMM": 2,
    "GEMMT": 2,
    "TRSM": 2,
    "TRSMT": 2,
    "SYRK": 1,
    "CHOL": 1,
    "SOFTMAXSTEP": 3,
    "SOFTMAXFIN": 1,
}


class FrontendError(Exception):
    """Parse or validation failure, with a source location when available."""

    def __init__(self, msg, line=None, col=None):
        self.line, self.col = line, col
        where = f" (line {line}" + (f", col {col}" if col is not None else "") + ")" if line else ""
        super().__init__(msg + where)


# ---------------------------------------------------------------------------
# AST
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Idx:
    """One index expression: var + offset, or a bare constant (var=None)."""
    var: str | None
    offset: int = 0

    def is_const(self):
        return self.var is None

    def shift(self, delta: int) -> "Idx":
        return Idx(self.var, self.offset + delta)

    def __str__(self):
        if self.var is None:
            return str(self.offset)
        if self.offset > 0:
            return f"{self.var}+{self.offset}"
        if self.offset < 0:
            return f"{self.var}{self.offset}"
        return self.var


@dataclass(frozen=True)
class Access:
    tensor: str
    indices: tuple[Idx, ...]

    def vars(self):
        return tuple(i.var for i in self.indices if i.var is not None)

    def __str__(self):
        return f"{self.tensor}[{','.join(str(i) for i in self.indices)}]"


@dataclass(frozen=True)
class Const:
    value: float

    def __str__(self):
        v = self.value
        return str(int(v)) if float(v).is_integer() else repr(v)


@dataclass(frozen=True)
class Unary:
    op: str
    body: "Expr"

    def __str__(self):
        return f"{self.op}({self.body})"


@dataclass(frozen=True)
class Bin:
    op: str
    left: "Expr"
    right: "Expr"

    def __str__(self):
        lhs, rhs = str(self.left), str(self.right)
        if isinstance(self.left, Bin) and _PREC[self.left.op] < _PREC[self.op]:
            lhs = f"({lhs})"
        if isinstance(self.right, Bin) and _PREC[self.right.op] <= _PREC[self.op]:
            rhs = f"({rhs})"
        return f"{lhs} {self.op} {rhs}"


@dataclass(frozen=True)
class Fold:
    """sum(v, body) or maxfold(v, body); binds a fresh reduction variable."""
    head: str
    var: str
    body: "Expr"

    def __str__(self):
        return f"{self.head}({self.var}, {self.body})"


@dataclass(frozen=True)
class Call:
    kernel: str
    args: tuple["Expr", ...]

    def __str__(self):
        return f"{self.kernel}({', '.join(str(a) for a in self.args)})"


Expr = Access | Const | Unary | Bin | Fold | Call

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2}


@dataclass(frozen=True)
class Constraint:
    var: str
    rel: str  # '<', '<=', '='
    bound: Idx

    def __str__(self):
        return f"{self.var} {self.rel} {self.bound}"


@dataclass(frozen=True)
class Recurrence:
    lhs: Access
    rhs: Expr
    constraints: tuple[Constraint, ...] = ()
    line: int = field(default=0, compare=False)

    def __str__(self):
        s = f"{self.lhs} = {self.rhs}"
        if self.constraints:
            s += " : " + ", ".join(str(c) for c in self.constraints)
        return s


@dataclass(frozen=True)
class TensorDecl:
    name: str
    extents: tuple[int, ...]  # in tiles
    tile: tuple[int, int]
    line: int = field(default=0, compare=False)

    def __str__(self):
        return (f"tensor {self.name}[{','.join(map(str, self.extents))}] "
                f"tile {self.tile[0]}x{self.tile[1]}")


@dataclass(frozen=True)
class Program:
    tensors: dict[str, TensorDecl]
    recurrences: tuple[Recurrence, ...]

    def __str__(self):
        lines = [str(t) for t in self.tensors.values()]
        lines += [str(r) for r in self.recurrences]
        return "\n".join(lines) + "\n"


def pretty(prog: Program) -> str:
    return str(prog)


# ---------------------------------------------------------------------------
# Parser (hand-rolled recursive descent; one statement per line)
# ---------------------------------------------------------------------------

_TOKEN = re.compile(r"\s*(?:(?P<tile>\d+x\d+)|(?P<name>[A-Za-z_][A-Za-z0-9_]*)"
                    r"|(?P<num>\d+(?:\.\d+)?)"
                    r"|(?P<op><=|[-+*/=<>\[\](),:])|(?P<bad>\S))")


class _Lexer:
    def __init__(self, text, line_no):
        self.line_no = line_no
        self.toks = []
        for m in _TOKEN.finditer(text):
            if m.group("bad"):
                raise FrontendError(f"unexpected character {m.group('bad')!r}",
                                    line_no, m.start("bad") + 1)
            for kind in ("tile", "name", "num", "op"):
                if m.group(kind):
                    self.toks.append((kind, m.group(kind), m.start(kind) + 1))
                    break
        self.pos = 0

    def peek(self):
        return self.toks[self.pos] if self.pos < len(self.toks) else (None, None, None)

    def next(self):
        tok = self.peek()
        if tok[0] is None:
            raise FrontendError("unexpected end of line", self.line_no)
        self.pos += 1
        return tok

    def expect(self, value):
        kind, val, col = self.next()
        if val != value:
            raise FrontendError(f"expected {value!r}, found {val!r}", self.line_no, col)
        return val

    def at(self, value):
        return self.peek()[1] == value

    def done(self):
        return self.pos >= len(self.toks)


def _parse_index(lx: _Lexer) -> Idx:
    kind, val, col = lx.next()
    if kind == "num":
        if "." in val:
            raise FrontendError("index constants must be integers", lx.line_no, col)
        return Idx(None, int(val))
    if kind != "name":
        raise FrontendError(f"expected index, found {val!r}", lx.line_no, col)
    if lx.at("+") or lx.at("-"):
        _, sign, _ = lx.next()
        _, num, ncol = lx.next()
        if not num.isdigit():
            raise FrontendError("index offset must be a constant", lx.line_no, ncol)
        return Idx(val, int(num) if sign == "+" else -int(num))
    return Idx(val, 0)


def _parse_access(lx: _Lexer, name: str) -> Access:
    lx.expect("[")
    indices = [_parse_index(lx)]
    while lx.at(","):
        lx.next()
        indices.append(_parse_index(lx))
    lx.expect("]")
    return Access(name, tuple(indices))


def _parse_factor(lx: _Lexer) -> Expr:
    kind, val, col = lx.next()
    if kind == "num":
        return Const(float(val))
    if val == "(":
        e = _parse_expr(lx)
        lx.expect(")")
        return e
    if kind == "name":
        if val in FOLD_HEADS:
            lx.expect("(")
            _, var, vcol = lx.next()
            lx.expect(",")
            body = _parse_expr(lx)
            lx.expect(")")
            return Fold(val, var, body)
        if val in KERNELS:
            lx.expect("(")
            args = [_parse_expr(lx)]
            while lx.at(","):
                lx.next()
                args.append(_parse_expr(lx))
            lx.expect(")")
            if len(args) != KERNEL_ARITY[val]:
                raise FrontendError(f"{val} takes {KERNEL_ARITY[val]} argument(s), "
                                    f"got {len(args)}", lx.line_no, col)
            return Call(val, tuple(args))
        if val in UNARY_OPS:
            lx.expect("(")
            body = _parse_expr(lx)
            lx.expect(")")
            return Unary(val, body)
        if lx.at("["):
            return _parse_access(lx, val)
        raise FrontendError(f"bare name {val!r} (tensor accesses need [indices])",
                            lx.line_no, col)
    raise FrontendError(f"unexpected token {val!r}", lx.line_no, col)


def _parse_term(lx: _Lexer) -> Expr:
    e = _parse_factor(lx)
    while lx.at("*") or lx.at("/"):
        _, op, _ = lx.next()
        e = Bin(op, e, _parse_factor(lx))
    return e


def _parse_expr(lx: _Lexer) -> Expr:
    e = _parse_term(lx)
    while lx.at("+") or lx.at("-"):
        _, op, _ = lx.next()
        e = Bin(op, e, _parse_term(lx))
    return e


def _parse_constraints(lx: _Lexer) -> tuple[Constraint, ...]:
    out = []
    while True:
        kind, var, col = lx.next()
        if kind != "name":
            raise FrontendError(f"expected constraint variable, found {var!r}",
                                lx.line_no, col)
        _, rel, rcol = lx.next()
        if rel not in ("<", "<=", "="):
            raise FrontendError(f"expected relation, found {rel!r}", lx.line_no, rcol)
        out.append(Constraint(var, rel, _parse_index(lx)))
        if not lx.at(","):
            break
        lx.next()
    return tuple(out)


def _parse_tensor_decl(lx: _Lexer, line_no: int) -> TensorDecl:
    kind, name, col = lx.next()
    if kind != "name":
        raise FrontendError("expected tensor name", line_no, col)
    lx.expect("[")
    extents = []
    while True:
        _, num, ncol = lx.next()
        if not num.isdigit():
            raise FrontendError("tensor extents must be integer tile counts", line_no, ncol)
        extents.append(int(num))
        if lx.at("]"):
            break
        lx.expect(",")
    lx.expect("]")
    _, kw, kcol = lx.next()
    if kw != "tile":
        raise FrontendError(f"expected 'tile', found {kw!r}", line_no, kcol)
    kind, shape, scol = lx.next()
    if kind != "tile":
        raise FrontendError("tile shape must be ROWSxCOLS integers", line_no, scol)
    rows, cols = shape.split("x")
    return TensorDecl(name, tuple(extents), (int(rows), int(cols)), line_no)


def parse_program(source: str) -> Program:
    """Parse DSL text into a Program AST. Raises FrontendError with a source
    location on malformed input."""
    tensors: dict[str, TensorDecl] = {}
    recs: list[Recurrence] = []
    for line_no, raw in enumerate(source.splitlines(), start=1):
        text = raw.split("#", 1)[0].strip()
        if not text:
            continue
        lx = _Lexer(text, line_no)
        kind, first, col = lx.peek()
        if first == "tensor":
            lx.next()
            decl = _parse_tensor_decl(lx, line_no)
            if decl.name in tensors:
                raise FrontendError(f"tensor {decl.name} declared twice", line_no)
            tensors[decl.name] = decl
        else:
            _, name, _ = lx.next()
            if kind != "name":
                raise FrontendError(f"expected statement, found {first!r}", line_no, col)
            lhs = _parse_access(lx, name)
            lx.expect("=")
            rhs = _parse_expr(lx)
            constraints: tuple[Constraint, ...] = ()
            if lx.at(":"):
                lx.next()
                constraints = _parse_constraints(lx)
            if not lx.done():
                raise FrontendError(f"trailing input {lx.peek()[1]!r}", line_no, lx.peek()[2])
            recs.append(Recurrence(lhs, rhs, constraints, line_no))
    return Program(tensors, tuple(recs))


# ---------------------------------------------------------------------------
# Expression helpers
# ---------------------------------------------------------------------------

def walk(e: Expr):
    yield e
    if isinstance(e, (Unary,)):
        yield from walk(e.body)
    elif isinstance(e, Bin):
        yield from walk(e.left)
        yield from walk(e.right)
    elif isinstance(e, Fold):
        yield from walk(e.body)
    elif isinstance(e, Call):
        for a in e.args:
            yield from walk(a)


def accesses_of(e: Expr) -> list[Access]:
    return [n for n in walk(e) if isinstance(n, Access)]


def folds_of(e: Expr) -> list[Fold]:
    return [n for n in walk(e) if isinstance(n, Fold)]


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OuterCtx:
    """Normalized expression context around the reduction:

        identity                  kernel=None
        KERNEL(..., M - hole)     minuend M subtracted by the accumulator
        KERNEL(..., hole)         accumulator passed through

    `args` holds the kernel arguments with None at the hole position;
    `minuend` is the access subtracted by the hole (or None).
    """
    kernel: str | None = None
    args: tuple[Access | None, ...] = ()
    hole_pos: int = 0
    minuend: Access | None = None

    @property
    def is_identity(self):
        return self.kernel is None


@dataclass(frozen=True)
class DepWitness:
    """Why a self/output reference is well-founded."""
    access: Access
    kind: str       # 'constraint' or 'offset'
    detail: str     # e.g. 'j < i' or 'i-1'


@dataclass
class RegionInfo:
    """Analysis of one recurrence: output map, iteration/reduction variables,
    reduction body, and the outer expression context."""
    rec_index: int
    rec: Recurrence
    out_tensor: str = ""
    out_indices: tuple[Idx, ...] = ()
    iter_vars: tuple[str, ...] = ()          # lhs variables, first appearance order
    reduction_var: str | None = None
    fold_head: str = "sum"                    # 'sum' or 'maxfold'
    body_kernel: str = "mul"                  # 'mul', 'add', or a KERNELS name
    body_operands: tuple[Access, ...] = ()    # operands of the reduction body
    outer: OuterCtx = field(default_factory=OuterCtx)
    direct_expr: Expr | None = None           # set when there is no reduction
    dependencies: tuple[DepWitness, ...] = ()
    var_extents: dict[str, int] = field(default_factory=dict)
    constraints: tuple[Constraint, ...] = ()


@dataclass
class CheckedProgram:
    program: Program
    regions: list[RegionInfo]
    outputs: tuple[str, ...]   # tensors defined by some recurrence

    @property
    def tensors(self):
        return self.program.tensors

    @property
    def dependency_carrying(self):
        return any(r.dependencies for r in self.regions)


def _bound_leq(a: Idx, b: Idx, constraints) -> bool:
    """Provable a <= b under var+offset forms and the constraint list."""
    if a.var == b.var:
        return a.offset <= b.offset
    if a.var is None:
        return False  # constants vs vars: not provable without lower bounds
    # follow one constraint hop: a.var rel bound
    for c in constraints:
        if c.var == a.var and c.bound.var == b.var:
            if c.rel == "<" and a.offset + c.bound.offset - 1 <= b.offset:
                return True
            if c.rel in ("<=", "=") and a.offset + c.bound.offset <= b.offset:
                return True
    return False


def _bound_lt(a: Idx, b: Idx, constraints) -> bool:
    if a.var == b.var:
        return a.offset < b.offset
    if a.var is None:
        return False
    for c in constraints:
        if c.var == a.var and c.bound.var == b.var:
            if c.rel == "<" and a.offset + c.bound.offset - 1 < b.offset + 0:
                return True
            if c.rel in ("<=", "=") and a.offset + c.bound.offset < b.offset:
                return True
    return False


def _normalize_outer(rhs: Expr, region: RegionInfo, line: int) -> tuple[OuterCtx, Fold]:
    """Split rhs into an outer context and the single reduction it encloses."""
    folds = folds_of(rhs)
    if len(folds) != 1:
        raise FrontendError("expected exactly one reduction in this recurrence", line)
    fold = folds[0]
    if isinstance(rhs, Fold):
        return OuterCtx(), fold
    # scalar solve written pointwise: (1/D) * (M - sum(...)) is the 1x1-tile
    # triangular solve, canonicalized to the TRSM context
    if (isinstance(rhs, Bin) and rhs.op == "*"
            and isinstance(rhs.left, Bin) and rhs.left.op == "/"
            and isinstance(rhs.left.left, Const) and rhs.left.left.value == 1.0
            and isinstance(rhs.left.right, Access)):
        rhs = Call("TRSM", (rhs.left.right, rhs.right))
    if isinstance(rhs, Call):
        args = list(rhs.args)
        hole_pos = None
        minuend = None
        norm_args: list[Access | None] = []
        for pos, a in enumerate(args):
            if isinstance(a, Fold):
                hole_pos, minuend = pos, None
                norm_args.append(None)
            elif isinstance(a, Bin) and a.op == "-" and isinstance(a.right, Fold):
                if not isinstance(a.left, Access):
                    raise FrontendError("minuend of the reduction must be a tensor access", line)
                hole_pos, minuend = pos, a.left
                norm_args.append(None)
            elif isinstance(a, Access):
                norm_args.append(a)
            else:
                raise FrontendError(f"unsupported outer kernel argument {a}", line)
        if hole_pos is None:
            raise FrontendError("reduction nested too deep in outer expression", line)
        return OuterCtx(rhs.kernel, tuple(norm_args), hole_pos, minuend), fold
    raise FrontendError("outer expression form not supported "
                        "(use a kernel call around the reduction)", line)


def _analyze_recurrence(idx: int, rec: Recurrence, prog: Program,
                        outputs: set[str]) -> RegionInfo:
    region = RegionInfo(idx, rec)
    lhs = rec.lhs
    if lhs.tensor not in prog.tensors:
        raise FrontendError(f"undeclared output tensor {lhs.tensor}", rec.line)
    for i in lhs.indices:
        if i.var is not None and i.offset != 0:
            raise FrontendError("lhs indices must be plain variables or constants", rec.line)
        if i.var is None and i.offset < 0:
            raise FrontendError("constant indices must be >= 0", rec.line)
    region.out_tensor = lhs.tensor
    region.out_indices = lhs.indices
    seen: list[str] = []
    for i in lhs.indices:
        if i.var is not None and i.var not in seen:
            seen.append(i.var)
    region.iter_vars = tuple(seen)
    region.constraints = rec.constraints

    # constraint sanity: acyclic graph over variables
    graph = {c.var: c.bound.var for c in rec.constraints if c.bound.var}
    for start in graph:
        node, hops = start, 0
        while node in graph and hops <= len(graph):
            node, hops = graph[node], hops + 1
        if hops > len(graph):
            raise FrontendError(f"cyclic constraint through {start}", rec.line)

    # reduction structure
    folds = folds_of(rec.rhs)
    if len(folds) > 1:
        raise FrontendError("at most one reduction per recurrence is supported", rec.line)
    if folds:
        region.outer, fold = _normalize_outer(rec.rhs, region, rec.line)
        bound_vars = set(region.iter_vars)
        if fold.var in bound_vars:
            raise FrontendError(f"reduction variable {fold.var} shadows an lhs variable",
                                rec.line)
        region.reduction_var = fold.var
        region.fold_head = fold.head
        body = fold.body
        if isinstance(body, Bin) and body.op == "*":
            if not (isinstance(body.left, Access) and isinstance(body.right, Access)):
                raise FrontendError("reduction body product must multiply two accesses",
                                    rec.line)
            region.body_kernel = "mul"
            region.body_operands = (body.left, body.right)
        elif isinstance(body, Call):
            if not all(isinstance(a, Access) for a in body.args):
                raise FrontendError("kernel arguments inside a reduction must be accesses",
                                    rec.line)
            region.body_kernel = body.kernel
            region.body_operands = tuple(body.args)
        elif isinstance(body, Access):
            region.body_kernel = "add" if fold.head == "sum" else "max"
            region.body_operands = (body,)
        else:
            raise FrontendError(f"unsupported reduction body {body}", rec.line)
    else:
        region.direct_expr = rec.rhs
        region.body_operands = tuple(accesses_of(rec.rhs))

    # binder discipline: every variable is bound by the lhs or the reduction
    binders = set(region.iter_vars)
    if region.reduction_var:
        binders.add(region.reduction_var)
    for acc in accesses_of(rec.rhs):
        if acc.tensor not in prog.tensors:
            raise FrontendError(f"undeclared tensor {acc.tensor}", rec.line)
        if len(acc.indices) != len(prog.tensors[acc.tensor].extents):
            raise FrontendError(f"rank mismatch on {acc}: {acc.tensor} has rank "
                                f"{len(prog.tensors[acc.tensor].extents)}", rec.line)
        for i in acc.indices:
            if i.var is not None and i.var not in binders:
                raise FrontendError(f"unbound index variable {i.var} in {acc}", rec.line)
    for c in rec.constraints:
        if c.var not in binders or (c.bound.var is not None and c.bound.var not in binders):
            raise FrontendError(f"constraint {c} uses an unbound variable", rec.line)

    # variable extents, from the tensor axes each variable indexes
    extents: dict[str, int] = {}
    for acc in [lhs] + accesses_of(rec.rhs):
        decl = prog.tensors[acc.tensor]
        for axis, i in enumerate(acc.indices):
            if i.var is None:
                continue
            ext = decl.extents[axis]
            if i.var in extents and extents[i.var] != ext:
                raise FrontendError(f"variable {i.var} spans axes of different extents "
                                    f"({extents[i.var]} vs {ext})", rec.line)
            extents.setdefault(i.var, ext)
            if abs(i.offset) > ext:
                raise FrontendError(f"offset on {i} exceeds the iteration bound", rec.line)
    region.var_extents = extents

    # free-standing division and sqrt are the 1x1-tile degenerate case;
    # blocked solves go through TRSM/CHOL kernels
    pointwise = any(isinstance(n, Unary) and n.op in ("sqrt", "recip")
                    or isinstance(n, Bin) and n.op == "/"
                    for n in walk(rec.rhs))
    if pointwise:
        for acc in [lhs] + accesses_of(rec.rhs):
            if prog.tensors[acc.tensor].tile != (1, 1):
                raise FrontendError("free-standing / and sqrt need 1x1 tiles; "
                                    "use TRSM/CHOL kernels for blocked solves",
                                    rec.line)

    # self/output references must be provably decreasing
    deps = []
    for acc in accesses_of(rec.rhs):
        if acc.tensor not in outputs:
            continue
        strict = None
        ok = True
        for pos, e in enumerate(acc.indices):
            l = lhs.indices[pos] if pos < len(lhs.indices) else None
            if l is None:
                ok = False
                break
            if _bound_lt(e, l, rec.constraints):
                if strict is None:
                    witness = None
                    for c in rec.constraints:
                        if c.var == e.var and c.bound.var == l.var:
                            witness = DepWitness(acc, "constraint", str(c))
                    if witness is None:
                        witness = DepWitness(acc, "offset", str(e))
                    strict = witness
            elif not _bound_leq(e, l, rec.constraints):
                ok = False
                break
        if not ok or strict is None:
            raise FrontendError(f"self-reference {acc} is not well-founded "
                                "(no strictly decreasing constraint)", rec.line)
        deps.append(strict)
    region.dependencies = tuple(deps)
    return region


def _check_region_disjointness(prog: Program, regions: list[RegionInfo]):
    """At most one recurrence defines each output coordinate (checked by
    concrete enumeration; extents are known and small)."""
    by_tensor: dict[str, list[RegionInfo]] = {}
    for r in regions:
        by_tensor.setdefault(r.out_tensor, []).append(r)
    for tensor, rs in by_tensor.items():
        if len(rs) < 2:
            continue
        seen: dict[tuple, int] = {}
        for r in rs:
            for pt in enumerate_points(r.iter_vars, r.var_extents, r.constraints):
                coord = tuple(pt[i.var] if i.var else i.offset for i in r.out_indices)
                if coord in seen and seen[coord] != r.rec_index:
                    raise FrontendError(f"{tensor}{list(coord)} defined by two recurrences",
                                        r.rec.line)
                seen[coord] = r.rec_index


def enumerate_points(vars_, extents, constraints):
    """All concrete assignments of vars_ within extents satisfying constraints."""
    def sat(pt):
        for c in constraints:
            if c.var not in pt:
                continue
            bound = pt.get(c.bound.var, c.bound.offset if c.bound.var is None else None)
            if bound is None:
                continue
            if c.bound.var is not None:
                bound += c.bound.offset
            v = pt[c.var]
            if c.rel == "<" and not v < bound:
                return False
            if c.rel == "<=" and not v <= bound:
                return False
            if c.rel == "=" and not v == bound:
                return False
        return True

    def rec(i, pt):
        if i == len(vars_):
            yield dict(pt)
            return
        v = vars_[i]
        for x in range(extents[v]):
            pt[v] = x
            if sat(pt):
                yield from rec(i + 1, pt)
        del pt[v]

    yield from rec(0, {})


def validate(prog: Program) -> CheckedProgram:
    """Check all structural invariants and flag dependency-carrying
    recurrences with the constraint that makes them well-founded."""
    outputs = {r.lhs.tensor for r in prog.recurrences}
    regions = [_analyze_recurrence(i, r, prog, outputs)
               for i, r in enumerate(prog.recurrences)]
    _check_region_disjointness(prog, regions)
    return CheckedProgram(prog, regions, tuple(sorted(outputs)))


# ---------------------------------------------------------------------------
# Operation spaces
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SpaceDecl:
    """One iteration space: a reduction region, an outer apply region, or a
    direct compute region."""
    name: str
    rec_index: int
    role: str                      # 'reduce', 'apply', 'direct'
    vars: tuple[str, ...]          # coordinates, reduction coordinate last
    extents: tuple[int, ...]
    constraints: tuple[Constraint, ...]
    reduction_var: str | None = None
    pinned: tuple[str, Idx] | None = None   # (var, value) for apply spaces

    def domain_points(self):
        ext = dict(zip(self.vars, self.extents))
        cons = list(self.constraints)
        if self.pinned:
            cons.append(Constraint(self.pinned[0], "=", self.pinned[1]))
        for pt in enumerate_points(self.vars, ext, tuple(cons)):
            yield tuple(pt[v] for v in self.vars)

    def domain_str(self):
        parts = [f"0 <= {v} < {e}" for v, e in zip(self.vars, self.extents)]
        for c in self.constraints:
            parts.append(str(c))
        if self.pinned:
            parts.append(f"{self.pinned[0]} = {self.pinned[1]}")
        return ", ".join(parts)


_KERNEL_SPACE_NAMES = {"TRSMT": "trsm", "SOFTMAXSTEP": "attn", "SOFTMAXFIN": "fin",
                       "GEMM": "gemm", "GEMMT": "gemm", "TRSM": "trsm",
                       "SYRK": "syrk", "CHOL": "chol"}


def _space_name(region: RegionInfo, role: str, single_rec: bool) -> str:
    if role == "direct":
        return region.out_tensor.lower()
    if role == "apply":
        if single_rec:
            r_end = _reduction_end(region)
            return "diag" if r_end.var is not None else "fin"
        return _KERNEL_SPACE_NAMES.get(region.outer.kernel, region.outer.kernel.lower())
    # reduce role
    if single_rec:
        if region.body_kernel == "mul" and _reduction_end(region).var is None:
            return "mul"
        if _reduction_end(region).var is not None:
            return "tri"
        return _KERNEL_SPACE_NAMES.get(region.body_kernel, region.body_kernel.lower())
    return _KERNEL_SPACE_NAMES.get(region.body_kernel, region.body_kernel.lower())


def _reduction_end(region: RegionInfo) -> Idx:
    """Exclusive upper bound of the reduction variable, as var+offset or const."""
    r = region.reduction_var
    for c in region.constraints:
        if c.var == r:
            if c.rel == "<":
                return c.bound
            if c.rel == "<=":
                return c.bound.shift(1)
    return Idx(None, region.var_extents[r])


def extract_operation_spaces(checked: CheckedProgram) -> list[SpaceDecl]:
    """One space per reduction region plus one per non-identity outer region,
    in recurrence order. Deterministic; spaces partition the kernel nodes."""
    single = len(checked.regions) == 1
    spaces: list[SpaceDecl] = []
    used: set[str] = set()

    def uniq(name, idx):
        if name not in used:
            used.add(name)
            return name
        name = f"{name}{idx}"
        used.add(name)
        return name

    for region in checked.regions:
        if region.reduction_var is None:
            vars_ = region.iter_vars
            spaces.append(SpaceDecl(
                uniq(_space_name(region, "direct", single), region.rec_index),
                region.rec_index, "direct", vars_,
                tuple(region.var_extents[v] for v in vars_),
                region.constraints))
            continue
        r = region.reduction_var
        vars_ = region.iter_vars + (r,)
        extents = tuple(region.var_extents[v] for v in vars_)
        spaces.append(SpaceDecl(
            uniq(_space_name(region, "reduce", single), region.rec_index),
            region.rec_index, "reduce", vars_, extents, region.constraints,
            reduction_var=r))
        if not region.outer.is_identity:
            r_end = _reduction_end(region)
            # the apply space sits one slot past the last reduction step
            ext = dict(region.var_extents)
            ext[r] = ext[r] + 1
            apply_cons = tuple(c for c in region.constraints if c.var != r)
            spaces.append(SpaceDecl(
                uniq(_space_name(region, "apply", single), region.rec_index),
                region.rec_index, "apply", vars_,
                tuple(ext[v] for v in vars_), apply_cons,
                reduction_var=r, pinned=(r, r_end)))
    return spaces
