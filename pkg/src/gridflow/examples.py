"""The shipped example suite: matmul variants, triangular-solve schedules,
blocked Cholesky, streaming attention, and prefix sum.

Each example renders its recurrence/schedule/grid sources for a requested
tile-grid size and tile shape, generates seeded well-conditioned inputs, and
names the dense reference oracle the verifier compares against.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import kernels as K

DEFAULT_N = 4
DEFAULT_TILE = 4


def _grid(rank, n, broadcast=False, extra=""):
    ext = f"{n}x{n}" if rank == 2 else f"{n}"
    b = "true" if broadcast else "false"
    return (f"rank={rank} extents={ext} topology=mesh latency=1 bandwidth=1 "
            f"chan_cap=2 regfile=16 broadcast={b}{extra}\n")


def _matmul_rec(n, t):
    return (f"# blocked matrix multiply\n"
            f"tensor A[{n},{n}] tile {t}x{t}\n"
            f"tensor B[{n},{n}] tile {t}x{t}\n"
            f"tensor C[{n},{n}] tile {t}x{t}\n"
            f"C[i,j] = sum(k, A[i,k] * B[k,j])\n")


def _trsm_rec(n, t):
    return (f"# blocked lower-triangular solve L X = B\n"
            f"tensor L[{n},{n}] tile {t}x{t}\n"
            f"tensor B[{n}] tile {t}x{t}\n"
            f"tensor X[{n}] tile {t}x{t}\n"
            f"X[i] = TRSM(L[i,i], B[i] - sum(j, GEMM(L[i,j], X[j]))) : j < i\n")


def _cholesky_rec(n, t):
    return (f"# blocked Cholesky factorization A = L L^T\n"
            f"tensor A[{n},{n}] tile {t}x{t}\n"
            f"tensor L[{n},{n}] tile {t}x{t}\n"
            f"L[j,j] = CHOL(A[j,j] - sum(k, SYRK(L[j,k]))) : k < j\n"
            f"L[i,j] = TRSMT(A[i,j] - sum(k, GEMMT(L[i,k], L[j,k])), L[j,j])"
            f" : j < i, k < j\n")


def _fa2_rec(n, t):
    return (f"# streaming attention with per-query online-softmax state\n"
            f"tensor Q[{n}] tile {t}x{t}\n"
            f"tensor K[{n}] tile {t}x{t}\n"
            f"tensor V[{n}] tile {t}x{t}\n"
            f"tensor O[{n}] tile {t}x{t}\n"
            f"O[i] = SOFTMAXFIN(sum(t, SOFTMAXSTEP(Q[i], K[t], V[t])))\n")


def _prefix_rec(n, t):
    return (f"# running sum over block rows\n"
            f"tensor A[{n}] tile {t}x{t}\n"
            f"tensor P[{n}] tile {t}x{t}\n"
            f"P[i] = P[i-1] + A[i]\n")


def _matmul_inputs(n, t, seed):
    g = np.random.default_rng(seed)
    d = n * t
    return {"A": g.random((d, d)), "B": g.random((d, d))}


def _trsm_inputs(n, t, seed):
    g = np.random.default_rng(seed)
    d = n * t
    l = np.tril(g.random((d, d))) + d * np.eye(d)
    return {"L": l, "B": g.random((d, t))}


def _cholesky_inputs(n, t, seed):
    g = np.random.default_rng(seed)
    d = n * t
    m = g.random((d, d))
    return {"A": m @ m.T + d * np.eye(d)}


def _fa2_inputs(n, t, seed):
    g = np.random.default_rng(seed)
    d = n * t
    return {"Q": g.standard_normal((d, t)), "K": g.standard_normal((d, t)),
            "V": g.standard_normal((d, t))}


def _prefix_inputs(n, t, seed):
    g = np.random.default_rng(seed)
    return {"A": g.random((n * t, t))}


def _matmul_oracle(inp, n, t):
    return {"C": K.oracle_matmul(inp["A"], inp["B"])}


def _matmul_bitwise_oracle(inp, n, t):
    return {"C": K.oracle_matmul_blocked(inp["A"], inp["B"], t)}


def _trsm_oracle(inp, n, t):
    return {"X": K.oracle_trsm(inp["L"], inp["B"])}


def _cholesky_oracle(inp, n, t):
    return {"L": K.oracle_cholesky(inp["A"])}


def _fa2_oracle(inp, n, t):
    return {"O": K.oracle_attention(inp["Q"], inp["K"], inp["V"])}


def _prefix_oracle(inp, n, t):
    return {"P": K.oracle_prefix_sum(inp["A"].reshape(n, t, t)).reshape(n * t, t)}


@dataclass(frozen=True)
class Example:
    name: str
    rec: Callable[[int, int], str]
    sched: str
    rank: int
    broadcast: bool
    inputs: Callable[[int, int, int], dict]
    oracle: Callable[[dict, int, int], dict]
    bitwise_oracle: Callable[[dict, int, int], dict] | None = None
    mask: str | None = None      # 'tril': compare the lower triangle only

    def sources(self, n=DEFAULT_N, tile=DEFAULT_TILE):
        return (self.rec(n, tile), self.sched + "\n",
                _grid(self.rank, n, self.broadcast))


EXAMPLES: dict[str, Example] = {e.name: e for e in [
    Example("cannon-output-stationary", _matmul_rec,
            "map i->space0 j->space1 k->time\nstream(A,[j])\nstream(B,[i])",
            2, False, _matmul_inputs, _matmul_oracle, _matmul_bitwise_oracle),
    Example("cannon-weight-stationary", _matmul_rec,
            "map i->space0 k->space1 j->time\nprefetch(A,[i,k])\nstream(B,[i])",
            2, False, _matmul_inputs, _matmul_oracle, _matmul_bitwise_oracle),
    Example("pumma", _matmul_rec,
            "map i->space0 j->space1 k->time\nstream(A,[j])\nbroadcast(B,[i])",
            2, True, _matmul_inputs, _matmul_oracle, _matmul_bitwise_oracle),
    Example("summa", _matmul_rec,
            "map i->space0 j->space1 k->time\nbroadcast(A,[j])\nbroadcast(B,[i])",
            2, True, _matmul_inputs, _matmul_oracle, _matmul_bitwise_oracle),
    Example("trsm-stream", _trsm_rec,
            "map i->space0 j->time\nstream(X,[i])",
            1, False, _trsm_inputs, _trsm_oracle),
    Example("trsm-prefetch", _trsm_rec,
            "map i->space0 j->time\nstream(X,[i])\nprefetch(B,[i])",
            1, False, _trsm_inputs, _trsm_oracle),
    Example("trsm-broadcast", _trsm_rec,
            "map i->space0 j->time\nstream(X,[i])\nbroadcast(B,[i])",
            1, True, _trsm_inputs, _trsm_oracle),
    Example("cholesky", _cholesky_rec,
            "map i->space0 j->space1 k->time",
            2, False, _cholesky_inputs, _cholesky_oracle, mask="tril"),
    Example("flash-attention-2", _fa2_rec,
            "map i->space0 t->time\nprefetch(Q,[i])\nstream(K,[i])\nstream(V,[i])",
            1, False, _fa2_inputs, _fa2_oracle),
    Example("prefix-sum", _prefix_rec,
            "map i->space0\nstream(P,[i])",
            1, False, _prefix_inputs, _prefix_oracle),
]}


def get(name: str) -> Example:
    if name not in EXAMPLES:
        raise KeyError(f"unknown example {name!r}; known: {sorted(EXAMPLES)}")
    return EXAMPLES[name]


def write_example_files(directory) -> list[str]:
    """Write the suite's .rec/.sched/.grid files at the default size."""
    import pathlib
    directory = pathlib.Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for name, ex in EXAMPLES.items():
        rec, sched, grid = ex.sources()
        for suffix, text in ((".rec", rec), (".sched", sched), (".grid", grid)):
            path = directory / f"{name}{suffix}"
            path.write_text(text)
            written.append(str(path))
    return written
