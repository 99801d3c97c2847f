import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridflow import frontend as F

MATMUL = """
tensor A[4,4] tile 4x4
tensor B[4,4] tile 4x4
tensor C[4,4] tile 4x4
C[i,j] = sum(k, A[i,k] * B[k,j])
"""

TRISOLVE_SCALAR = """
tensor L[4,4] tile 1x1
tensor B[4,4] tile 1x1
tensor X[4,4] tile 1x1
X[r,i] = (1 / L[i,i]) * (B[r,i] - sum(j, L[i,j] * X[r,j])) : j < i
"""

TRISOLVE = """
tensor L[4,4] tile 4x4
tensor B[4] tile 4x4
tensor X[4] tile 4x4
X[i] = TRSM(L[i,i], B[i] - sum(j, GEMM(L[i,j], X[j]))) : j < i
"""

PREFIX = """
tensor A[4] tile 4x4
tensor P[4] tile 4x4
P[i] = P[i-1] + A[i]
"""

CHOLESKY = """
tensor A[4,4] tile 4x4
tensor L[4,4] tile 4x4
L[j,j] = CHOL(A[j,j] - sum(k, SYRK(L[j,k]))) : k < j
L[i,j] = TRSMT(A[i,j] - sum(k, GEMMT(L[i,k], L[j,k])), L[j,j]) : j < i, k < j
"""


class TestParse:
    def test_matmul_shape(self):
        prog = F.parse_program(MATMUL)
        assert set(prog.tensors) == {"A", "B", "C"}
        (rec,) = prog.recurrences
        assert rec.lhs == F.Access("C", (F.Idx("i"), F.Idx("j")))
        assert isinstance(rec.rhs, F.Fold) and rec.rhs.var == "k"
        body = rec.rhs.body
        assert isinstance(body, F.Bin) and body.op == "*"

    def test_trisolve_scalar_constraint(self):
        prog = F.parse_program(TRISOLVE_SCALAR)
        (rec,) = prog.recurrences
        assert rec.constraints == (F.Constraint("j", "<", F.Idx("i")),)
        assert isinstance(rec.rhs, F.Bin) and rec.rhs.op == "*"

    def test_prefix_self_reference(self):
        prog = F.parse_program(PREFIX)
        (rec,) = prog.recurrences
        assert F.Access("P", (F.Idx("i", -1),)) in F.accesses_of(rec.rhs)

    def test_syntax_error_has_location(self):
        with pytest.raises(F.FrontendError, match="line 2"):
            F.parse_program("tensor A[2] tile 1x1\nA[i] = (")

    def test_kernel_arity_enforced(self):
        with pytest.raises(F.FrontendError, match="GEMM takes 2"):
            F.parse_program("tensor A[2,2] tile 1x1\ntensor C[2,2] tile 1x1\n"
                            "C[i,j] = sum(k, GEMM(A[i,k]))")

    def test_roundtrip_fixed_programs(self):
        for src in (MATMUL, TRISOLVE, TRISOLVE_SCALAR, PREFIX, CHOLESKY):
            prog = F.parse_program(src)
            assert F.parse_program(F.pretty(prog)) == prog


names = st.sampled_from(["i", "j", "k"])
idx = st.one_of(
    st.builds(F.Idx, names, st.integers(-2, 2)),
    st.builds(F.Idx, st.none(), st.integers(0, 3)),
)
access = st.builds(F.Access, st.sampled_from(["A", "B"]),
                   st.lists(idx, min_size=2, max_size=2).map(tuple))
leaf = st.one_of(access, st.builds(F.Const, st.integers(0, 9).map(float)))
expr = st.recursive(
    leaf,
    lambda sub: st.one_of(
        st.builds(F.Bin, st.sampled_from(["+", "-", "*", "/"]), sub, sub),
        st.builds(F.Unary, st.sampled_from(["sqrt", "exp"]), sub),
        st.builds(F.Call, st.just("GEMM"), st.tuples(sub, sub)),
    ),
    max_leaves=8,
)


@given(expr)
@settings(max_examples=80, deadline=None)
def test_parse_pretty_roundtrip_property(e):
    rec = F.Recurrence(F.Access("C", (F.Idx("i"), F.Idx("j"))), e)
    decls = {t: F.TensorDecl(t, (4, 4), (1, 1)) for t in ("A", "B", "C")}
    prog = F.Program(decls, (rec,))
    assert F.parse_program(F.pretty(prog)) == prog


class TestValidate:
    def test_matmul_dependency_free(self):
        checked = F.validate(F.parse_program(MATMUL))
        (region,) = checked.regions
        assert not region.dependencies
        assert region.reduction_var == "k"
        assert region.outer.is_identity
        assert not checked.dependency_carrying

    def test_trisolve_dependency_witness(self):
        checked = F.validate(F.parse_program(TRISOLVE))
        (region,) = checked.regions
        (dep,) = region.dependencies
        assert dep.access.tensor == "X"
        assert dep.detail == "j < i"
        assert region.outer.kernel == "TRSM"
        assert region.outer.minuend == F.Access("B", (F.Idx("i"),))

    def test_prefix_dependency_offset(self):
        checked = F.validate(F.parse_program(PREFIX))
        (dep,) = checked.regions[0].dependencies
        assert dep.kind == "offset"

    def test_increasing_self_reference_rejected(self):
        src = "tensor Y[4] tile 1x1\nY[i] = Y[i+1]"
        with pytest.raises(F.FrontendError, match="well-founded"):
            F.validate(F.parse_program(src))

    def test_unbounded_self_reference_rejected(self):
        src = "tensor Y[4,4] tile 1x1\nY[i,j] = sum(k, Y[i,k] * Y[k,j])"
        with pytest.raises(F.FrontendError, match="well-founded"):
            F.validate(F.parse_program(src))

    def test_undeclared_tensor(self):
        with pytest.raises(F.FrontendError, match="undeclared tensor Q"):
            F.validate(F.parse_program("tensor C[2,2] tile 1x1\nC[i,j] = Q[i,j] + C[i-1,j]"))

    def test_rank_mismatch(self):
        src = "tensor A[2] tile 1x1\ntensor C[2,2] tile 1x1\nC[i,j] = A[i,j] + A[i,j]"
        with pytest.raises(F.FrontendError, match="rank mismatch"):
            F.validate(F.parse_program(src))

    def test_unbound_variable(self):
        src = "tensor A[2,2] tile 1x1\ntensor C[2] tile 1x1\nC[i] = A[i,q] + A[i,q]"
        with pytest.raises(F.FrontendError, match="unbound index variable q"):
            F.validate(F.parse_program(src))

    def test_cyclic_constraint(self):
        src = ("tensor A[2,2] tile 1x1\ntensor C[2,2] tile 1x1\n"
                "C[i,j] = A[i,j] + A[i,j] : i < j, j < i")
        with pytest.raises(F.FrontendError, match="cyclic constraint"):
            F.validate(F.parse_program(src))

    def test_cholesky_regions_disjoint(self):
        checked = F.validate(F.parse_program(CHOLESKY))
        assert len(checked.regions) == 2
        assert checked.dependency_carrying

    def test_overlapping_definitions_rejected(self):
        src = ("tensor A[2,2] tile 1x1\ntensor C[2,2] tile 1x1\n"
                "C[i,j] = A[i,j] + A[i,j]\nC[i,i] = A[i,i] + A[i,i]")
        with pytest.raises(F.FrontendError, match="defined by two recurrences"):
            F.validate(F.parse_program(src))


class TestOperationSpaces:
    def test_matmul_single_space(self):
        spaces = F.extract_operation_spaces(F.validate(F.parse_program(MATMUL)))
        (mul,) = spaces
        assert mul.name == "mul"
        assert mul.vars == ("i", "j", "k")
        assert len(list(mul.domain_points())) == 64

    def test_trisolve_two_spaces(self):
        spaces = F.extract_operation_spaces(F.validate(F.parse_program(TRISOLVE)))
        tri, diag = spaces
        assert (tri.name, diag.name) == ("tri", "diag")
        # strict lower triangle for the reduction space
        assert set(tri.domain_points()) == {(i, j) for i in range(4) for j in range(i)}
        # diagonal slice for the apply space
        assert set(diag.domain_points()) == {(i, i) for i in range(4)}

    def test_cholesky_space_families(self):
        spaces = F.extract_operation_spaces(F.validate(F.parse_program(CHOLESKY)))
        names = [s.name for s in spaces]
        assert names == ["syrk", "chol", "gemm", "trsm"]
        syrk, chol, gemm, trsm = spaces
        # diagonal family: SYRK steps strictly below each panel, CHOL at the panel
        assert set(syrk.domain_points()) == {(j, k) for j in range(4) for k in range(j)}
        assert set(chol.domain_points()) == {(j, j) for j in range(4)}
        # off-diagonal family
        assert set(gemm.domain_points()) == {(i, j, k) for i in range(4)
                                             for j in range(i) for k in range(j)}
        assert set(trsm.domain_points()) == {(i, j, j) for i in range(4) for j in range(i)}

    def test_spaces_deterministic(self):
        a = F.extract_operation_spaces(F.validate(F.parse_program(CHOLESKY)))
        b = F.extract_operation_spaces(F.validate(F.parse_program(CHOLESKY)))
        assert a == b

    def test_prefix_direct_space(self):
        (space,) = F.extract_operation_spaces(F.validate(F.parse_program(PREFIX)))
        assert space.role == "direct"
        assert space.vars == ("i",)
