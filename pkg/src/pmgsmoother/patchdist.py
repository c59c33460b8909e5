"""Index movement between global vectors, cell buffers and patch-interior vectors.

Patch-local cells are numbered so that bit k of the cell index c is the side
(0 = low, 1 = high) along axis k. The patch-interior vector is lexicographic
with (2p-1) entries per axis, axis 0 fastest.

Two strategies produce the cell-to-patch index maps used on the hot path:
``dynamic`` recomputes them from integer arithmetic on every call, ``lookup``
reads tables recorded once from the recursive traversal.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np

from . import counters
from .mesh import DofMap, PatchList, _lattice

REG, DUP, SKIP = "reg", "dup", "skip"
STRATEGIES = ("dynamic", "lookup")


@dataclass(frozen=True)
class DistributorFunctors:
    """Callbacks invoked by a traversal.

    ``reg(i_patch, c, i_cell)`` handles a DoF owned by cell c,
    ``dup(i_patch, c, i_cell)`` one shared with an earlier cell and
    ``skip(c, i_cell)`` one outside the patch interior.
    """

    reg: Callable
    dup: Callable
    skip: Callable


def patch_stride(dim: int, p: int) -> int:
    """Offset between consecutive (dim-1)-dimensional slices of the patch vector."""
    return (2 * p - 1) ** (dim - 1)


def initial_patch_index(dim: int, c: int, p: int) -> int:
    return sum(((c >> k) & 1) * (p - 1) * (2 * p - 1) ** k for k in range(dim))


class _Counter:
    __slots__ = ("value",)

    def __init__(self, value=0):
        self.value = value


def _traverse_1d(c, p, reg, dup, skip, S, i_cell, i_patch):
    K = 1
    if (c & 1) == 0:
        skip(c, i_cell.value)
        i_cell.value += 1
        for _ in range(1, p):
            if S:
                skip(c, i_cell.value)
            else:
                reg(i_patch, c, i_cell.value)
                i_patch += K
            i_cell.value += 1
        if S:
            skip(c, i_cell.value)
        else:
            reg(i_patch, c, i_cell.value)
            i_patch += K
        i_cell.value += 1
    else:
        if S:
            skip(c, i_cell.value)
        else:
            dup(i_patch, c, i_cell.value)
            i_patch += K
        i_cell.value += 1
        for _ in range(1, p):
            if S:
                skip(c, i_cell.value)
            else:
                reg(i_patch, c, i_cell.value)
                i_patch += K
            i_cell.value += 1
        skip(c, i_cell.value)
        i_cell.value += 1


def _traverse(d, c, p, reg, dup, skip, S, i_cell, i_patch):
    # the local cell counter is shared by reference, the patch index is passed by value
    if d == 1:
        _traverse_1d(c, p, reg, dup, skip, S, i_cell, i_patch)
        return
    K = patch_stride(d, p)
    if ((c >> (d - 1)) & 1) == 0:
        _traverse(d - 1, c, p, reg, dup, skip, True, i_cell, i_patch)
        for _ in range(1, p):
            _traverse(d - 1, c, p, reg, dup, skip, S, i_cell, i_patch)
            if not S:
                i_patch += K
        _traverse(d - 1, c, p, reg, dup, skip, S, i_cell, i_patch)
        if not S:
            i_patch += K
    else:
        _traverse(d - 1, c, p, dup, dup, skip, S, i_cell, i_patch)
        if not S:
            i_patch += K
        for _ in range(1, p):
            _traverse(d - 1, c, p, reg, dup, skip, S, i_cell, i_patch)
            if not S:
                i_patch += K
        _traverse(d - 1, c, p, reg, dup, skip, True, i_cell, i_patch)


def traverse_dynamic(d: int, c: int, f: DistributorFunctors, p: int) -> int:
    """Recursive traversal of the local DoFs of patch cell ``c``.

    Returns the number of local DoFs visited, which is always (p+1)^d.
    """
    if not 0 <= c < 2**d:
        raise ValueError(f"cell index {c} outside [0, {2**d})")
    i_cell = _Counter()
    _traverse(d, c, p, f.reg, f.dup, f.skip, False, i_cell, initial_patch_index(d, c, p))
    return i_cell.value


def recording_functors():
    calls = []
    f = DistributorFunctors(
        reg=lambda ip, c, ic: calls.append((REG, c, ic, ip)),
        dup=lambda ip, c, ic: calls.append((DUP, c, ic, ip)),
        skip=lambda c, ic: calls.append((SKIP, c, ic, None)),
    )
    return f, calls


@dataclass(frozen=True)
class LookupTables:
    """Per patch cell: ordered (i_cell, i_patch) pairs, cutoffs and skipped indices."""

    dim: int
    degree: int
    pairs: tuple
    n_unique: tuple
    n_total: tuple
    skipped: tuple

    @property
    def n_cells(self) -> int:
        return len(self.pairs)

    def stored_integers(self) -> int:
        return sum(2 * len(L) + len(S) + 2 for L, S in zip(self.pairs, self.skipped))


@lru_cache(maxsize=None)
def build_lookup(d: int, p: int) -> LookupTables:
    pairs, nu, nt, sk = [], [], [], []
    for c in range(2**d):
        f, calls = recording_functors()
        traverse_dynamic(d, c, f, p)
        uniq = [(ic, ip) for kind, _, ic, ip in calls if kind == REG]
        shared = [(ic, ip) for kind, _, ic, ip in calls if kind == DUP]
        L = np.array(uniq + shared, dtype=np.int64).reshape(-1, 2)
        L.setflags(write=False)
        S = np.array([ic for kind, _, ic, _ in calls if kind == SKIP], dtype=np.int64)
        S.setflags(write=False)
        pairs.append(L)
        nu.append(len(uniq))
        nt.append(len(uniq) + len(shared))
        sk.append(S)
    return LookupTables(d, p, tuple(pairs), tuple(nu), tuple(nt), tuple(sk))


def traverse_lookup(tables: LookupTables, f: DistributorFunctors):
    for c in range(tables.n_cells):
        L = tables.pairs[c]
        for k in range(tables.n_unique[c]):
            u, v = L[k]
            f.reg(int(v), c, int(u))
        for k in range(tables.n_unique[c], tables.n_total[c]):
            u, v = L[k]
            f.dup(int(v), c, int(u))
    for c in range(tables.n_cells):
        for u in tables.skipped[c]:
            f.skip(c, int(u))


# ---------------------------------------------------------------------------
# hot-path maps


@dataclass(frozen=True)
class CellMap:
    reg_local: np.ndarray
    reg_patch: np.ndarray
    dup_local: np.ndarray
    dup_patch: np.ndarray


def dynamic_cell_map(d: int, p: int, c: int) -> CellMap:
    """Closed form of the traversal: per axis the patch coordinate is b*p + i - 1."""
    i = _lattice(p + 1, d)
    b = np.array([(c >> k) & 1 for k in range(d)])
    j = b * p + i - 1
    inside = np.all((j >= 0) & (j <= 2 * p - 2), axis=1)
    dup = inside & np.any((b == 1) & (i == 0), axis=1)
    reg = inside & ~dup
    strides = (2 * p - 1) ** np.arange(d)
    pidx = j @ strides
    loc = np.arange(i.shape[0])
    return CellMap(loc[reg], pidx[reg], loc[dup], pidx[dup])


@lru_cache(maxsize=None)
def _lookup_cell_maps(d: int, p: int):
    t = build_lookup(d, p)
    maps = []
    for c in range(t.n_cells):
        L = t.pairs[c]
        u = t.n_unique[c]
        maps.append(CellMap(L[:u, 0], L[:u, 1], L[u:, 0], L[u:, 1]))
    return tuple(maps)


class PatchDistributor:
    """Moves patch-interior vectors of a batch of patches to and from cell buffers."""

    def __init__(self, dim: int, p: int, strategy: str = "lookup"):
        if strategy not in STRATEGIES:
            raise ValueError(f"unknown distributor {strategy!r}")
        self.dim, self.degree, self.strategy = dim, p, strategy
        self.n_cells = 2**dim
        self.n_local = (p + 1) ** dim
        self.n_interior = (2 * p - 1) ** dim
        if strategy == "lookup":
            _lookup_cell_maps(dim, p)

    def cell_maps(self):
        if self.strategy == "lookup":
            return _lookup_cell_maps(self.dim, self.degree)
        return tuple(dynamic_cell_map(self.dim, self.degree, c) for c in range(self.n_cells))

    @property
    def n_dup(self) -> int:
        return sum(m.dup_local.size for m in _lookup_cell_maps(self.dim, self.degree))

    def distribute(self, x: np.ndarray, owned_only: bool = False) -> np.ndarray:
        """Patch vectors (P, N) to cell buffers (P, 2^d, (p+1)^d).

        Shared entries are copied to every incident cell unless ``owned_only``,
        in which case only the owning cell receives them. Exterior entries are 0.
        """
        P = x.shape[0]
        buf = np.zeros((P, self.n_cells, self.n_local))
        for c, m in enumerate(self.cell_maps()):
            buf[:, c, m.reg_local] = x[:, m.reg_patch]
            if not owned_only:
                buf[:, c, m.dup_local] = x[:, m.dup_patch]
        return buf

    def collect(self, buf: np.ndarray, accumulate: bool = True) -> np.ndarray:
        """Cell buffers back to patch vectors: owned entries written, shared ones summed."""
        P = buf.shape[0]
        x = np.empty((P, self.n_interior))
        maps = self.cell_maps()
        for c, m in enumerate(maps):
            x[:, m.reg_patch] = buf[:, c, m.reg_local]
        if accumulate:
            for c, m in enumerate(maps):
                if m.dup_local.size:
                    x[:, m.dup_patch] += buf[:, c, m.dup_local]
            counters.add_flops(P * self.n_dup)
        return x


# ---------------------------------------------------------------------------
# global <-> patch


def patch_cell_dofs(patches: PatchList, dofs: DofMap, ids) -> np.ndarray:
    return dofs.cell_dofs[patches.cells[np.asarray(ids)]]


def patch_gather(u: np.ndarray, patches: PatchList, dofs: DofMap, ids) -> np.ndarray:
    """Closure values of patches ``ids`` as cell buffers (P, 2^d, (p+1)^d)."""
    return u[patch_cell_dofs(patches, dofs, ids)]


def patch_scatter_add(d_j: np.ndarray, patches: PatchList, dofs: DofMap, ids, u: np.ndarray,
                      dist: PatchDistributor):
    """Add patch-interior corrections into ``u``, each DoF exactly once."""
    d_j = np.atleast_2d(d_j)
    buf = dist.distribute(d_j, owned_only=True)
    cd = patch_cell_dofs(patches, dofs, ids)
    for c, m in enumerate(dist.cell_maps()):
        np.add.at(u, cd[:, c, m.reg_local], buf[:, c, m.reg_local])
    counters.add_flops(d_j.size)
    return u


def patch_interior_values(buf: np.ndarray, dist: PatchDistributor) -> np.ndarray:
    return dist.collect(buf, accumulate=False)


def local_residual(Au_cells: np.ndarray, b_cells: np.ndarray, dist: PatchDistributor) -> np.ndarray:
    """Interior residual from cell-wise ``A u`` and gathered right-hand side buffers."""
    r = patch_interior_values(b_cells, dist)
    r -= dist.collect(Au_cells)
    counters.add_flops(r.size)
    return r
