"""Geometric multigrid with a multiplicative vertex-patch smoother, and GMRES.

The smoother visits patches color by color. Patches of one color share no
DoF, so a color is processed as independent batches, optionally on a thread
pool; the result equals the sequential sweep in the same order.
"""

from __future__ import annotations

import heapq
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from . import counters
from .globalop import (HTransfer, LevelOperator, assemble_oracle, global_vmult, make_htransfer,
                       make_operator)
from .mesh import MeshHierarchy, PatchList, enumerate_patches
from .patchdist import local_residual, patch_cell_dofs
from .plocal import PLevelHierarchy, build_psequence, local_solve, precompute_level_data
from .tensorfem import cell_apply_laplace


class NoConvergence(RuntimeError):
    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


# ---------------------------------------------------------------------------
# coloring


@dataclass(frozen=True)
class Coloring:
    color: np.ndarray
    colors: tuple

    @property
    def n_colors(self) -> int:
        return len(self.colors)


def conflict_graph(patches: PatchList) -> sp.csr_matrix:
    """Patches conflict when their closures share a DoF."""
    P, m = patches.closure_dofs.shape
    rows = np.repeat(np.arange(P), m)
    B = sp.csr_matrix((np.ones(rows.size), (rows, patches.closure_dofs.ravel())))
    C = (B @ B.T).tocsr()
    C.setdiag(0)
    C.eliminate_zeros()
    return C


def dsatur_color(patches: PatchList, dofs=None) -> Coloring:
    """Greedy coloring by saturation degree; ties by degree, then lower index."""
    G = conflict_graph(patches)
    n = G.shape[0]
    nbrs = [G.indices[G.indptr[i]:G.indptr[i + 1]] for i in range(n)]
    deg = np.diff(G.indptr)
    color = np.full(n, -1, dtype=np.int64)
    sat = [set() for _ in range(n)]
    heap = [(0, -int(deg[i]), i) for i in range(n)]
    heapq.heapify(heap)
    while heap:
        s, _, v = heapq.heappop(heap)
        if color[v] >= 0 or -s != len(sat[v]):
            continue
        used = {int(color[u]) for u in nbrs[v] if color[u] >= 0}
        k = 0
        while k in used:
            k += 1
        color[v] = k
        for u in nbrs[v]:
            if color[u] < 0 and k not in sat[u]:
                sat[u].add(k)
                heapq.heappush(heap, (-len(sat[u]), -int(deg[u]), int(u)))
    groups = tuple(np.nonzero(color == k)[0] for k in range(int(color.max()) + 1))
    return Coloring(color, groups)


def coloring_is_valid(patches: PatchList, coloring: Coloring) -> bool:
    G = conflict_graph(patches).tocoo()
    return not np.any(coloring.color[G.row] == coloring.color[G.col])


# ---------------------------------------------------------------------------
# patch smoother


@dataclass
class SmootherConfig:
    mode: str = "half"
    smoother: str = "jacobi"
    local_iters: int = 1
    omega: float | None = None
    distributor: str = "lookup"
    variant: str = "even_odd"
    patch_batch: int = 32
    workers: int = 1
    post_smoothing: bool | None = None


class PatchSmoother:
    """Multiplicative vertex-patch smoother on one mesh level."""

    def __init__(self, op: LevelOperator, config: SmootherConfig, patches: PatchList | None = None,
                 coloring: Coloring | None = None):
        self.op = op
        self.config = config
        self.patches = patches if patches is not None else enumerate_patches(op.mesh, op.dofs)
        self.coloring = coloring if coloring is not None else dsatur_color(self.patches)
        self.local = precompute_level_data(
            op.mesh, self.patches, build_psequence(op.degree), distributor=config.distributor,
            variant=config.variant, smoother=config.smoother, omega=config.omega)
        self._boundary_zero = ~op.dofs.boundary_mask

    @property
    def hierarchy(self) -> PLevelHierarchy:
        return self.local

    def batches(self):
        B = max(1, int(self.config.patch_batch))
        for group in self.coloring.colors:
            yield [group[s:s + B] for s in range(0, group.size, B)]

    def _update(self, ids, u, b):
        cfg, H = self.config, self.local
        top = H.top
        with counters.phase("fetch_setup"):
            batch = H.fetch(ids)
            cd = patch_cell_dofs(self.patches, self.op.dofs, ids)
        with counters.phase("gather_global"):
            u_cells = u[cd] * self._boundary_zero[cd]
            b_cells = b[cd]
        with counters.phase("evaluate_operator"):
            Au = cell_apply_laplace(u_cells, batch.data[-1]["geom"], top.basis, H.dim, H.variant)
        with counters.phase("local_gather"):
            r = local_residual(Au, b_cells, top.dist)
        with counters.phase("pmg_solve"):
            d = local_solve(batch, r, cfg.local_iters, cfg.mode, post_smoothing=cfg.post_smoothing)
        with counters.phase("distribute_correction"):
            buf = top.dist.distribute(d, owned_only=True)
        with counters.phase("scatter_global"):
            for c, m in enumerate(top.dist.cell_maps()):
                np.add.at(u, cd[:, c, m.reg_local], buf[:, c, m.reg_local])
            counters.add_flops(d.size)

    def sweep(self, u: np.ndarray, b: np.ndarray) -> np.ndarray:
        """One forward sweep over all patches, updating ``u`` in place."""
        workers = max(1, int(self.config.workers))
        if workers == 1:
            for chunks in self.batches():
                for ids in chunks:
                    self._update(ids, u, b)
            return u
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for chunks in self.batches():
                # barrier between colors
                list(pool.map(lambda ids: self._update(ids, u, b), chunks))
        return u


def smoother_sweep(u, b, smoother: PatchSmoother):
    return smoother.sweep(u, b)


# ---------------------------------------------------------------------------
# multigrid


@dataclass
class MgConfig:
    pre_sweeps: int = 1
    post_sweeps: int = 1
    smoother: SmootherConfig = field(default_factory=SmootherConfig)


class Multigrid:
    """V-cycle over a mesh hierarchy at fixed degree; the coarsest level is solved densely."""

    def __init__(self, hierarchy: MeshHierarchy, p: int, config: MgConfig | None = None):
        self.config = config or MgConfig()
        sc = self.config.smoother
        self.ops = [make_operator(m, p, variant=sc.variant) for m in hierarchy.levels]
        self.transfers = [make_htransfer(c, f) for c, f in zip(self.ops[:-1], self.ops[1:])]
        self.smoothers = [None] + [PatchSmoother(op, sc) for op in self.ops[1:]]
        A0 = assemble_oracle(self.ops[0]).toarray()
        self.coarse_factor = scipy.linalg.cho_factor(A0)

    @property
    def fine(self) -> LevelOperator:
        return self.ops[-1]

    def vcycle(self, b: np.ndarray, level: int | None = None) -> np.ndarray:
        """Approximate ``A^-1 b`` from a zero initial guess; ``b`` vanishes on Dirichlet DoFs."""
        if level is None:
            level = len(self.ops) - 1
        if level == 0:
            return scipy.linalg.cho_solve(self.coarse_factor, b)
        op, sm = self.ops[level], self.smoothers[level]
        u = np.zeros_like(b)
        for _ in range(self.config.pre_sweeps):
            sm.sweep(u, b)
        res = b - global_vmult(op, u)
        t = self.transfers[level - 1]
        rc = t.restrict(res)
        rc[self.ops[level - 1].dofs.boundary_mask] = 0.0
        u += t.prolongate(self.vcycle(rc, level - 1))
        for _ in range(self.config.post_sweeps):
            sm.sweep(u, b)
        return u

    def precondition(self, r: np.ndarray) -> np.ndarray:
        bnd = self.fine.dofs.boundary_mask
        r0 = r.copy()
        r0[bnd] = 0.0
        u = self.vcycle(r0)
        u[bnd] = r[bnd]
        return u


def mg_vcycle(mg: Multigrid, b: np.ndarray, level: int | None = None) -> np.ndarray:
    return mg.vcycle(b, level)


# ---------------------------------------------------------------------------
# GMRES


@dataclass
class GMRESResult:
    x: np.ndarray
    iterations: int
    residuals: list
    converged: bool


def gmres_solve(A, b: np.ndarray, M=None, tol: float = 1e-8, max_iter: int = 200,
                raise_on_failure: bool = True) -> GMRESResult:
    """Right-preconditioned GMRES without restart, zero initial guess.

    ``A`` and ``M`` are callables (or objects with ``@``). Stops once the
    relative residual ``|b - A x| / |b|`` drops to ``tol``.
    """
    if tol <= 0:
        raise ValueError("tolerance must be positive")
    Aop = A if callable(A) else (lambda v: A @ v)
    Mop = (lambda v: v) if M is None else (M if callable(M) else (lambda v: M @ v))
    b = np.asarray(b, dtype=float)
    beta = np.linalg.norm(b)
    x = np.zeros_like(b)
    if beta == 0.0:
        return GMRESResult(x, 0, [0.0], True)
    V = [b / beta]
    Z = []
    H = np.zeros((max_iter + 1, max_iter))
    cs, sn = np.zeros(max_iter), np.zeros(max_iter)
    g = np.zeros(max_iter + 1)
    g[0] = beta
    residuals = [1.0]
    k = 0
    converged = False
    while k < max_iter:
        z = Mop(V[k])
        Z.append(z)
        w = Aop(z)
        for i in range(k + 1):
            H[i, k] = w @ V[i]
            w = w - H[i, k] * V[i]
        hnext = np.linalg.norm(w)
        H[k + 1, k] = hnext
        for i in range(k):
            t = cs[i] * H[i, k] + sn[i] * H[i + 1, k]
            H[i + 1, k] = -sn[i] * H[i, k] + cs[i] * H[i + 1, k]
            H[i, k] = t
        den = np.hypot(H[k, k], H[k + 1, k])
        cs[k], sn[k] = H[k, k] / den, H[k + 1, k] / den
        H[k, k] = den
        H[k + 1, k] = 0.0
        g[k + 1] = -sn[k] * g[k]
        g[k] = cs[k] * g[k]
        k += 1
        residuals.append(abs(g[k]) / beta)
        if residuals[-1] <= tol:
            converged = True
            break
        if hnext == 0.0:
            break
        V.append(w / hnext)
    y = scipy.linalg.solve_triangular(H[:k, :k], g[:k])
    for i in range(k):
        x += y[i] * Z[i]
    result = GMRESResult(x, k, residuals, converged)
    if not converged and raise_on_failure:
        raise NoConvergence(f"GMRES did not converge in {max_iter} iterations", result)
    return result


def solve_poisson(mg: Multigrid, b: np.ndarray, tol: float = 1e-8, max_iter: int = 200) -> GMRESResult:
    return gmres_solve(lambda v: global_vmult(mg.fine, v), b, mg.precondition, tol, max_iter)
