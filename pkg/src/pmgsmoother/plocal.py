"""Local patch solver: p-multigrid hierarchy, smoothers, transfers and cycles.

All routines act on a batch of patches at once: patch-interior vectors have
shape (P, (2p-1)^d) and every patch is processed independently. The per-patch
data that the cycles need is fetched once into a :class:`PatchBatch` before
the solve.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import counters
from .mesh import DofMap, MeshLevel, PatchList
from .patchdist import PatchDistributor
from .tensorfem import (CARTESIAN, Basis1D, BatchGeometry, GeometryCache, Tensor1D,
                        cell_apply_laplace, cell_diagonal, classify_geometry,
                        lagrange_matrices, make_basis)

MODES = ("full", "half")
SMOOTHERS = ("jacobi", "cartesian_reinforced", "fdm")
DEFAULT_OMEGA = {"jacobi": 0.7, "cartesian_reinforced": 1.0}


class SingularDiagonalError(ValueError):
    pass


def build_psequence(p: int) -> list[int]:
    """Degrees 1, 3, 7, ... up to ``p``, the last step clamped to ``p``."""
    if p < 1:
        raise ValueError("degree must be >= 1")
    seq = [1]
    while seq[-1] < p:
        seq.append(min(2 * seq[-1] + 1, p))
    return seq


# ---------------------------------------------------------------------------
# 1D line data on the two-cell reference patch [0, 2]


def line_nodes(p: int) -> np.ndarray:
    """Interior nodes of the two-cell line, 2p-1 of them, in patch coordinates."""
    x = make_basis(p).nodes
    return np.concatenate([x[1:], 1.0 + x[1:-1]])


class Transfer1D:
    """Embedding of degree-``pc`` interior functions of the two-cell line into degree ``pf``.

    Block structure (L = left-cell interior, C = shared center, R = right):
    fine L rows only see coarse L and C, fine R rows only coarse R and C, and
    the center row is the unit vector of the coarse center. The structural
    zeros are never touched when ``skip_zeros`` is set.
    """

    def __init__(self, pc: int, pf: int):
        self.pc, self.pf = pc, pf
        xc = make_basis(pc).nodes
        xf = make_basis(pf).nodes
        inner_f = xf[1:-1]
        Nc, _ = lagrange_matrices(xc, inner_f)  # (pf-1, pc+1) within one cell
        nc, nf = 2 * pc - 1, 2 * pf - 1
        T = np.zeros((nf, nc))
        mc, mf = pc - 1, pf - 1
        # left cell: coarse local nodes 1..pc-1 are L, node pc is the center
        T[:mf, :mc] = Nc[:, 1:pc]
        T[:mf, mc] = Nc[:, pc]
        T[mf, mc] = 1.0
        # right cell: coarse local node 0 is the center, 1..pc-1 are R
        T[mf + 1:, mc] = Nc[:, 0]
        T[mf + 1:, mc + 1:] = Nc[:, 1:pc]
        self.matrix = T
        self.structural_zero = np.ones_like(T, dtype=bool)
        self.structural_zero[:mf, : mc + 1] = False
        self.structural_zero[mf, mc] = False
        self.structural_zero[mf + 1:, mc:] = False
        self.T_LL, self.t_Lc = T[:mf, :mc].copy(), T[:mf, mc:mc + 1].copy()
        self.T_RR, self.t_Rc = T[mf + 1:, mc + 1:].copy(), T[mf + 1:, mc:mc + 1].copy()
        self.full = Tensor1D(T)
        self.full_t = Tensor1D(T.T.copy())

    @property
    def zero_fraction(self) -> float:
        return float(np.mean(self.matrix == 0.0))

    @property
    def stored_doubles(self) -> int:
        return int(np.sum(~self.structural_zero))

    def _line_flops(self, transpose: bool, skip_zeros: bool) -> int:
        nc, nf = 2 * self.pc - 1, 2 * self.pf - 1
        if not skip_zeros:
            return 2 * nc * nf
        mc, mf = self.pc - 1, self.pf - 1
        # two (mf x mc) blocks and two center columns, as FMAs
        return 2 * (2 * mf * mc + 2 * mf)

    def apply(self, X: np.ndarray, axis: int, transpose: bool = False, skip_zeros: bool = True):
        ax = X.ndim - 1 - axis
        if not skip_zeros:
            M = self.full_t if transpose else self.full
            with counters.suspended():
                out = M.apply(X, axis, "dense")
            counters.add_flops(X.size // X.shape[ax] * self._line_flops(transpose, False))
            return out
        Xm = np.moveaxis(X, ax, -1)
        lines = Xm.size // Xm.shape[-1]
        counters.add_flops(lines * self._line_flops(transpose, True))
        mc, mf = self.pc - 1, self.pf - 1
        if not transpose:
            L, C, R = Xm[..., :mc], Xm[..., mc:mc + 1], Xm[..., mc + 1:]
            Y = np.empty(Xm.shape[:-1] + (2 * mf + 1,))
            Y[..., :mf] = L @ self.T_LL.T + C @ self.t_Lc.T
            Y[..., mf:mf + 1] = C
            Y[..., mf + 1:] = R @ self.T_RR.T + C @ self.t_Rc.T
        else:
            L, C, R = Xm[..., :mf], Xm[..., mf:mf + 1], Xm[..., mf + 1:]
            Y = np.empty(Xm.shape[:-1] + (2 * mc + 1,))
            Y[..., :mc] = L @ self.T_LL
            Y[..., mc:mc + 1] = C + L @ self.t_Lc + R @ self.t_Rc
            Y[..., mc + 1:] = R @ self.T_RR
        return np.moveaxis(Y, -1, ax)


def _tensor_apply(transfer: Transfer1D, x: np.ndarray, dim: int, n_in: int, transpose: bool,
                  skip_zeros: bool):
    P = x.shape[0]
    X = x.reshape((P,) + (n_in,) * dim)
    for k in range(dim):
        X = transfer.apply(X, k, transpose, skip_zeros)
    return X.reshape(P, -1)


def p_prolongate(e_coarse, transfer: Transfer1D, dim: int, skip_zeros: bool = True):
    return _tensor_apply(transfer, np.atleast_2d(e_coarse), dim, 2 * transfer.pc - 1, False, skip_zeros)


def p_restrict(r_fine, transfer: Transfer1D, dim: int, skip_zeros: bool = True):
    return _tensor_apply(transfer, np.atleast_2d(r_fine), dim, 2 * transfer.pf - 1, True, skip_zeros)


def line_matrices(p: int, h: float = 1.0, q: int | None = None):
    """Interior stiffness and mass on the two-cell line with cells of width ``h``."""
    b = make_basis(p, q)
    W = np.diag(b.quad_weights)
    Ke = b.shape_gradients.T @ W @ b.shape_gradients / h
    Me = b.shape_values.T @ W @ b.shape_values * h
    n = 2 * p + 1
    K, M = np.zeros((n, n)), np.zeros((n, n))
    for s in (0, p):
        K[s:s + p + 1, s:s + p + 1] += Ke
        M[s:s + p + 1, s:s + p + 1] += Me
    return K[1:-1, 1:-1], M[1:-1, 1:-1]


@dataclass(frozen=True)
class FDMData:
    """Generalized eigenpairs of the unit-width line, ``K V = M V diag(lam)``."""

    degree: int
    K: np.ndarray
    M: np.ndarray
    eigenvalues: np.ndarray
    V: Tensor1D
    Vt: Tensor1D

    @property
    def size(self) -> int:
        return len(self.eigenvalues)


def make_fdm(p: int, q: int | None = None) -> FDMData:
    K, M = line_matrices(p, 1.0, q)
    lam, V = scipy.linalg.eigh(K, M)
    return FDMData(p, K, M, lam, Tensor1D(V), Tensor1D(V.T.copy()))


def fdm_inverse_eigenvalues(fdm: FDMData, h: np.ndarray) -> np.ndarray:
    """``1 / (prod(h) * sum_k lam_k / h_k^2)`` on the tensor grid, per patch.

    ``h`` has shape (P, d). This is setup work; divisions happen here only.
    """
    P, d = h.shape
    lam = fdm.eigenvalues
    n = lam.size
    total = np.zeros((P,) + (n,) * d)
    for k in range(d):
        shape = [1] * (d + 1)
        shape[d - k] = n
        total = total + (lam.reshape(shape[1:])[None] / (h[:, k] ** 2).reshape((P,) + (1,) * d))
    total *= np.prod(h, axis=1).reshape((P,) + (1,) * d)
    counters.add_flops(0, divisions=total.size + P * d)
    return (1.0 / total).reshape(P, -1)


def fdm_apply(r: np.ndarray, fdm: FDMData, inv_eig: np.ndarray, dim: int) -> np.ndarray:
    """``(V x ... x V) diag(inv_eig) (V^T x ... x V^T) r``, batched over patches."""
    n = fdm.size
    P = r.shape[0]
    X = r.reshape((P,) + (n,) * dim)
    for k in range(dim):
        X = fdm.Vt.apply(X, k, "dense")
    X = X * inv_eig.reshape(X.shape)
    counters.add_flops(X.size)
    for k in range(dim):
        X = fdm.V.apply(X, k, "dense")
    return X.reshape(P, -1)


def cartesian_patch_diagonal(p: int, h: np.ndarray, q: int | None = None) -> np.ndarray:
    """Diagonal of the separable Cartesian patch operator with cell widths ``h`` (P, d)."""
    K, M = line_matrices(p, 1.0, q)
    dk, dm = np.diag(K), np.diag(M)
    P, d = h.shape
    n = dk.size
    out = np.zeros((P,) + (n,) * d)
    for k in range(d):
        term = np.ones((P,) + (1,) * d)
        for m in range(d):
            shape = [1] * d
            shape[d - 1 - m] = n
            vec = (dk / h[:, m:m + 1]) if m == k else (dm * h[:, m:m + 1])
            term = term * vec.reshape((P,) + tuple(shape))
        out = out + term
    return out.reshape(P, -1)


# ---------------------------------------------------------------------------
# per-level data


@dataclass
class PatchLevel:
    """One p-level of the local hierarchy for all patches of a mesh level."""

    degree: int
    basis: Basis1D
    geometry: GeometryCache
    dist: PatchDistributor
    inv_diag: np.ndarray
    omega_inv_diag: np.ndarray | None = None
    fdm: FDMData | None = None
    fdm_inv_eig: np.ndarray | None = None
    scaling: np.ndarray | None = None
    omega: float = 0.7

    @property
    def n_interior(self) -> int:
        return self.dist.n_interior


def patch_reference_h(mesh: MeshLevel, patches: PatchList) -> np.ndarray:
    """Average cell extent per axis over the cells of each patch, shape (P, d)."""
    corners = mesh.cell_corners()[patches.cells]  # (P, 2^d, 2^d, d)
    d = mesh.dim
    ext = np.empty(patches.cells.shape + (d,))
    for k in range(d):
        hi = [v for v in range(2**d) if (v >> k) & 1]
        lo = [v ^ (1 << k) for v in hi]
        ext[..., k] = np.mean(corners[:, :, hi, k] - corners[:, :, lo, k], axis=-1)
    return ext.mean(axis=1)


def patch_diagonals(mesh: MeshLevel, patches: PatchList, geometry: GeometryCache, basis: Basis1D,
                    dist: PatchDistributor, batch: int = 256) -> np.ndarray:
    d = mesh.dim
    cell_diag = np.empty((mesh.n_cells, (basis.degree + 1) ** d))
    for s in range(0, mesh.n_cells, batch):
        ids = np.arange(s, min(s + batch, mesh.n_cells))
        cell_diag[ids] = cell_diagonal(geometry.fetch(ids), basis, d)
    return dist.collect(cell_diag[patches.cells])


@dataclass
class PLevelHierarchy:
    """Local p-multigrid data for every patch of one mesh level."""

    dim: int
    mesh: MeshLevel
    patches: PatchList
    sequence: list
    levels: list
    transfers: list
    variant: str = "even_odd"
    skip_zeros: bool = True
    smoother: str = "jacobi"
    omega: float | dict = 0.7

    @property
    def top(self) -> PatchLevel:
        return self.levels[-1]

    def fetch(self, ids) -> "PatchBatch":
        """Gather geometry and preconditioner data of patches ``ids``."""
        ids = np.asarray(ids)
        cells = self.patches.cells[ids]
        data = []
        for lev in self.levels:
            geom = lev.geometry.fetch(cells)
            entry = {"geom": geom, "omega_inv_diag": lev.omega_inv_diag[ids] if lev.omega_inv_diag is not None else None,
                     "inv_diag": lev.inv_diag[ids]}
            if lev.fdm_inv_eig is not None:
                entry["fdm_inv_eig"] = lev.fdm_inv_eig[ids]
            if lev.scaling is not None:
                entry["scaling"] = lev.scaling[ids]
            data.append(entry)
        return PatchBatch(self, ids, data)

    def stored_doubles(self) -> dict:
        """Persistent storage of the local solvers, by category."""
        out = {"inv_diag": 0, "transfer": 0, "fdm": 0, "geometry": 0}
        for lev in self.levels:
            out["inv_diag"] += lev.inv_diag.size
            if self.smoother != "jacobi" and lev.fdm_inv_eig is not None:
                out["fdm"] += lev.fdm_inv_eig.size + lev.scaling.size + 2 * lev.fdm.size**2
            out["geometry"] += lev.geometry.stored_doubles()
        out["transfer"] = sum(t.stored_doubles for t in self.transfers)
        return out


def precompute_level_data(mesh: MeshLevel, patches: PatchList, sequence, *, distributor="lookup",
                          variant="even_odd", smoother="jacobi", omega=None, skip_zeros=True,
                          basis_q=None) -> PLevelHierarchy:
    """Per-patch data of every p-level in ``sequence``.

    ``omega`` is one damping factor or a mapping from degree to damping; degrees
    missing from the mapping use the smoother default.
    """
    d = mesh.dim
    omega = DEFAULT_OMEGA.get(smoother, 1.0) if omega is None else omega
    if isinstance(omega, dict):
        default = DEFAULT_OMEGA.get(smoother, 1.0)
        level_omega = {p: float(omega.get(p, default)) for p in sequence}
    else:
        omega = float(omega)
        level_omega = dict.fromkeys(sequence, omega)
    need_fdm = smoother in ("cartesian_reinforced", "fdm")
    href = patch_reference_h(mesh, patches) if need_fdm else None
    levels = []
    for p in sequence:
        basis = make_basis(p, basis_q(p) if basis_q else None)
        geom = classify_geometry(mesh, basis)
        dist = PatchDistributor(d, p, distributor)
        diag = patch_diagonals(mesh, patches, geom, basis, dist)
        if np.any(~(diag > 0)):
            raise SingularDiagonalError("singular diagonal in a patch operator")
        inv = 1.0 / diag
        counters.add_flops(0, divisions=diag.size)
        lev = PatchLevel(p, basis, geom, dist, inv, level_omega[p] * inv, omega=level_omega[p])
        if need_fdm and p > 1:
            lev.fdm = make_fdm(p, basis.n_q)
            lev.fdm_inv_eig = fdm_inverse_eigenvalues(lev.fdm, href)
            dref = cartesian_patch_diagonal(p, href, basis.n_q)
            lev.scaling = np.sqrt(dref * inv)
            counters.add_flops(dref.size, divisions=dref.size)  # square roots counted with divisions
        levels.append(lev)
    transfers = [Transfer1D(a, b) for a, b in zip(sequence[:-1], sequence[1:])]
    return PLevelHierarchy(d, mesh, patches, list(sequence), levels, transfers, variant=variant,
                           skip_zeros=skip_zeros, smoother=smoother, omega=omega)


# ---------------------------------------------------------------------------
# batch operations


@dataclass
class PatchBatch:
    hierarchy: PLevelHierarchy
    ids: np.ndarray
    data: list
    stats: dict = field(default_factory=dict)

    @property
    def size(self) -> int:
        return self.ids.size


def local_vmult(batch: PatchBatch, x: np.ndarray, level: int = -1) -> np.ndarray:
    """Interior patch operator of p-level ``level`` applied to ``x`` (P, N)."""
    h = batch.hierarchy
    lev = h.levels[level]
    counters.count_call(f"local_vmult[p={lev.degree}]", x.shape[0])
    buf = lev.dist.distribute(x)
    y = cell_apply_laplace(buf, batch.data[level]["geom"], lev.basis, h.dim, h.variant)
    return lev.dist.collect(y)


def jacobi_smooth(r: np.ndarray, batch: PatchBatch, level: int, omega: float | None = None):
    """``omega * D^-1 r``; with the configured omega the product is precomputed."""
    entry = batch.data[level]
    if omega is None or omega == batch.hierarchy.levels[level].omega:
        counters.add_flops(r.size)
        return entry["omega_inv_diag"] * r
    counters.add_flops(2 * r.size)
    return omega * (entry["inv_diag"] * r)


def cartesian_reinforced_smooth(r: np.ndarray, batch: PatchBatch, level: int, omega: float | None = None):
    """``omega * S FDM^-1 S r`` with the symmetric scaling ``S = sqrt(d_ref / d_act)``."""
    h = batch.hierarchy
    lev = h.levels[level]
    entry = batch.data[level]
    if lev.fdm is None:
        return jacobi_smooth(r, batch, level, omega)
    S = entry["scaling"]
    om = lev.omega if omega is None else omega
    y = fdm_apply(S * r, lev.fdm, entry["fdm_inv_eig"], h.dim)
    counters.add_flops(3 * r.size)
    return (om * S) * y


def fdm_solve(r: np.ndarray, batch: PatchBatch, level: int = -1) -> np.ndarray:
    """Fast-diagonalization inverse of the reference Cartesian patch operator."""
    h = batch.hierarchy
    lev = h.levels[level]
    kinds = lev.geometry.kind[h.patches.cells[batch.ids]]
    batch.stats["not_cartesian"] = bool(np.any(kinds != CARTESIAN))
    return fdm_apply(r, lev.fdm, batch.data[level]["fdm_inv_eig"], h.dim)


def coarse_solve(r1: np.ndarray, batch: PatchBatch) -> np.ndarray:
    counters.add_flops(r1.size)
    return batch.data[0]["inv_diag"] * r1


def _smooth(r, batch, level):
    if batch.hierarchy.smoother == "jacobi":
        return jacobi_smooth(r, batch, level)
    return cartesian_reinforced_smooth(r, batch, level)


def p_v_cycle(batch: PatchBatch, r: np.ndarray, level: int | None = None, mode: str = "full",
              post_smoothing: bool | None = None) -> np.ndarray:
    """One p-multigrid V-cycle with zero initial guess on p-level ``level``."""
    h = batch.hierarchy
    if level is None:
        level = len(h.levels) - 1
    if level == 0:
        return coarse_solve(r, batch)
    post = (mode == "full") if post_smoothing is None else post_smoothing
    d = _smooth(r, batch, level)
    res = r - local_vmult(batch, d, level)
    counters.add_flops(res.size)
    tr = h.transfers[level - 1]
    rc = p_restrict(res, tr, h.dim, h.skip_zeros)
    ec = p_v_cycle(batch, rc, level - 1, mode, post_smoothing)
    d += p_prolongate(ec, tr, h.dim, h.skip_zeros)
    counters.add_flops(d.size)
    if post:
        res = r - local_vmult(batch, d, level)
        d += _smooth(res, batch, level)
        counters.add_flops(2 * d.size)
    return d


def local_solve(batch: PatchBatch, r: np.ndarray, n_iter: int = 1, mode: str = "full",
                smoother: str | None = None, post_smoothing: bool | None = None) -> np.ndarray:
    """Preconditioned Richardson iteration on the patch problem, zero initial guess."""
    if n_iter < 1:
        raise ValueError("need at least one local iteration")
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    sm = batch.hierarchy.smoother if smoother is None else smoother
    if sm != batch.hierarchy.smoother:
        raise ValueError("smoother differs from the one the hierarchy was built for")
    if sm == "fdm":
        return fdm_solve(r, batch)
    d = p_v_cycle(batch, r, mode=mode, post_smoothing=post_smoothing)
    for _ in range(1, n_iter):
        res = r - local_vmult(batch, d)
        d += p_v_cycle(batch, res, mode=mode, post_smoothing=post_smoothing)
        counters.add_flops(2 * d.size)
    return d
