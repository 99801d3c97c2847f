"""Dense tensor storage with tile-granular access.

Rank-2 tensors of e0 x e1 tiles with tile shape (tr, tc) are dense
(e0*tr, e1*tc) arrays; rank-1 tensors are dense (e0*tr, tc) arrays, one tile
stacked per block row.
"""

from __future__ import annotations

import numpy as np

from .frontend import TensorDecl


def dense_shape(decl: TensorDecl) -> tuple[int, int]:
    tr, tc = decl.tile
    if len(decl.extents) == 1:
        return (decl.extents[0] * tr, tc)
    if len(decl.extents) == 2:
        return (decl.extents[0] * tr, decl.extents[1] * tc)
    raise ValueError(f"rank {len(decl.extents)} tensors are not supported")


class TensorStore:
    """name -> dense float64 array, with get/set of individual tiles."""

    def __init__(self, decls: dict[str, TensorDecl], arrays: dict[str, np.ndarray] | None = None):
        self.decls = decls
        self.arrays: dict[str, np.ndarray] = {}
        for name, arr in (arrays or {}).items():
            self.set_dense(name, arr)

    def set_dense(self, name: str, arr) -> None:
        decl = self.decls[name]
        arr = np.asarray(arr, dtype=np.float64)
        if arr.shape != dense_shape(decl):
            raise ValueError(f"{name}: expected shape {dense_shape(decl)}, got {arr.shape}")
        self.arrays[name] = arr.copy()

    def ensure(self, name: str) -> np.ndarray:
        if name not in self.arrays:
            self.arrays[name] = np.zeros(dense_shape(self.decls[name]))
        return self.arrays[name]

    def _window(self, name: str, idx: tuple[int, ...]):
        decl = self.decls[name]
        tr, tc = decl.tile
        if len(idx) != len(decl.extents):
            raise ValueError(f"{name}: tile index {idx} has wrong rank")
        for x, e in zip(idx, decl.extents):
            if not 0 <= x < e:
                raise IndexError(f"{name}: tile index {idx} out of range")
        r = idx[0] * tr
        c = idx[1] * tc if len(idx) == 2 else 0
        return slice(r, r + tr), slice(c, c + tc)

    def get_tile(self, name: str, idx: tuple[int, ...]) -> np.ndarray:
        rs, cs = self._window(name, idx)
        if name not in self.arrays:
            raise KeyError(f"tensor {name} has no data")
        return self.arrays[name][rs, cs].copy()

    def set_tile(self, name: str, idx: tuple[int, ...], tile) -> None:
        rs, cs = self._window(name, idx)
        self.ensure(name)[rs, cs] = np.asarray(tile, dtype=np.float64)
