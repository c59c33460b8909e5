"""Global matrix-free Laplacian, assembled oracle, h-transfers and right-hand side.

Homogeneous Dirichlet DoFs are kept in the vector and treated as identity rows
and columns: the operator ignores their input values inside the domain and
copies them through to the output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import counters
from .mesh import DofMap, MeshLevel, _lattice, dof_coordinates, enumerate_dofs, lattice_index, q1_map
from .tensorfem import (Basis1D, GeometryCache, cell_apply_laplace, classify_geometry,
                        integrate_from_quadrature, interpolate_to_quadrature, lagrange_matrices,
                        make_basis)

ORACLE_MAX_DOFS = 50_000


@dataclass
class LevelOperator:
    mesh: MeshLevel
    dofs: DofMap
    basis: Basis1D
    geometry: GeometryCache
    variant: str = "even_odd"
    batch_width: int = 64

    @property
    def dim(self) -> int:
        return self.mesh.dim

    @property
    def degree(self) -> int:
        return self.basis.degree

    @property
    def n_dofs(self) -> int:
        return self.dofs.n_dofs

    def __matmul__(self, u):
        return global_vmult(self, u)


def make_operator(mesh: MeshLevel, p: int, q: int | None = None, variant: str = "even_odd",
                  batch_width: int = 64) -> LevelOperator:
    basis = make_basis(p, q)
    return LevelOperator(mesh, enumerate_dofs(mesh, p), basis, classify_geometry(mesh, basis),
                         variant=variant, batch_width=batch_width)


def apply_cells(op: LevelOperator, u_cells: np.ndarray, cells: np.ndarray) -> np.ndarray:
    """Cell-local Laplacian for ``u_cells`` of shape (len(cells), (p+1)^d), in batches."""
    out = np.empty_like(u_cells)
    B = max(1, int(op.batch_width))
    for s in range(0, len(cells), B):
        sl = slice(s, s + B)
        geom = op.geometry.fetch(cells[sl])
        out[sl] = cell_apply_laplace(u_cells[sl], geom, op.basis, op.dim, op.variant)
    return out


def global_vmult(op: LevelOperator, u: np.ndarray) -> np.ndarray:
    """``A u`` with identity rows on Dirichlet DoFs."""
    u = np.asarray(u, dtype=float)
    bnd = op.dofs.boundary_mask
    u0 = u.copy()
    u0[bnd] = 0.0
    cd = op.dofs.cell_dofs
    cells = np.arange(op.mesh.n_cells)
    v_cells = apply_cells(op, u0[cd], cells)
    # one accumulation pass in cell order: the result does not depend on the batch width
    out = np.bincount(cd.ravel(), weights=v_cells.ravel(), minlength=op.n_dofs)
    counters.add_flops(v_cells.size)
    out[bnd] = u[bnd]
    return out


# ---------------------------------------------------------------------------
# assembled oracle


def _tensor_tables(basis: Basis1D, dim: int):
    """Values and reference gradients of all (p+1)^d shape functions at all q^d points."""
    N, D = basis.shape_values, basis.shape_gradients
    q, n = N.shape
    qi = _lattice(q, dim)
    ni = _lattice(n, dim)
    vals = np.ones((q**dim, n**dim))
    grads = np.ones((q**dim, n**dim, dim))
    for k in range(dim):
        Nk = N[qi[:, k][:, None], ni[:, k][None, :]]
        Dk = D[qi[:, k][:, None], ni[:, k][None, :]]
        vals *= Nk
        for l in range(dim):
            grads[:, :, l] *= Dk if l == k else Nk
    return vals, grads


def element_matrices(mesh: MeshLevel, basis: Basis1D, cells=None) -> np.ndarray:
    """Element stiffness matrices by explicit quadrature, independent of the kernels."""
    dim = mesh.dim
    _, grads = _tensor_tables(basis, dim)
    _, J = q1_map(mesh, basis.quad_points, cells)
    det = np.linalg.det(J)
    jinv = np.linalg.inv(J)
    w = basis.weights_tensor(dim).ravel()
    # physical gradients: grad_x phi = J^-T grad_xi phi
    phys = np.einsum("cqkl,qik->ciql", jinv, grads, optimize=True)
    nc, ni = phys.shape[:2]
    weighted = phys * (det * w)[:, None, :, None]
    return weighted.reshape(nc, ni, -1) @ phys.reshape(nc, ni, -1).transpose(0, 2, 1)


def assemble_oracle(op: LevelOperator, apply_dirichlet: bool = True) -> sp.csr_matrix:
    n = op.n_dofs
    if n > ORACLE_MAX_DOFS:
        raise ValueError(f"oracle assembly refused for {n} DoFs (limit {ORACLE_MAX_DOFS})")
    Ke = element_matrices(op.mesh, op.basis)
    cd = op.dofs.cell_dofs
    rows = np.repeat(cd[:, :, None], cd.shape[1], axis=2)
    cols = np.repeat(cd[:, None, :], cd.shape[1], axis=1)
    A = sp.coo_matrix((Ke.ravel(), (rows.ravel(), cols.ravel())), shape=(n, n)).tocsr()
    if apply_dirichlet:
        keep = (~op.dofs.boundary_mask).astype(float)
        Dk = sp.diags(keep)
        A = (Dk @ A @ Dk + sp.diags(1.0 - keep)).tocsr()
    A.sum_duplicates()
    return A


# ---------------------------------------------------------------------------
# h-transfers


def two_child_matrix(nodes: np.ndarray) -> np.ndarray:
    """Coarse 1D Lagrange basis evaluated at the nodes of its two children.

    Shape (2p+1, p+1); row i is the fine node i/(2p)-position on the coarse cell.
    """
    p = len(nodes) - 1
    fine = np.concatenate([0.5 * nodes, 0.5 + 0.5 * nodes[1:]])
    E, _ = lagrange_matrices(nodes, fine)
    E[np.abs(E) < 1e-14] = 0.0
    exact = np.isclose(fine[:, None], nodes[None, :], rtol=0, atol=1e-14)
    E[exact.any(axis=1)] = exact[exact.any(axis=1)].astype(float)
    assert E.shape == (2 * p + 1, p + 1)
    return E


@dataclass
class HTransfer:
    """Embedding of a coarse level into the next finer one, per coarse cell."""

    dim: int
    degree: int
    matrix_1d: np.ndarray
    coarse_cell_dofs: np.ndarray
    fine_lattice: np.ndarray
    owner_mask: np.ndarray
    n_coarse: int
    n_fine: int
    coarse_boundary: np.ndarray
    fine_boundary: np.ndarray

    def _sweep(self, X, M):
        for k in range(self.dim):
            X = np.moveaxis(np.tensordot(X, M, axes=([X.ndim - 1 - k], [1])), -1, X.ndim - 1 - k)
        return X

    def prolongate(self, u_coarse: np.ndarray) -> np.ndarray:
        d, p = self.dim, self.degree
        X = u_coarse[self.coarse_cell_dofs].reshape((-1,) + (p + 1,) * d)
        Y = self._sweep(X, self.matrix_1d).reshape(X.shape[0], -1)
        counters.add_flops(Y.size * 2 * (p + 1) * d)
        out = np.zeros(self.n_fine)
        m = self.owner_mask
        out[self.fine_lattice[m]] = Y[m]
        return out

    def restrict(self, r_fine: np.ndarray) -> np.ndarray:
        d, p = self.dim, self.degree
        Y = np.where(self.owner_mask, r_fine[self.fine_lattice], 0.0)
        Y = Y.reshape((-1,) + (2 * p + 1,) * d)
        X = self._sweep(Y, self.matrix_1d.T).reshape(Y.shape[0], -1)
        counters.add_flops(Y.size * 2 * (p + 1) * d)
        return np.bincount(self.coarse_cell_dofs.ravel(), weights=X.ravel(), minlength=self.n_coarse)


def make_htransfer(coarse: LevelOperator, fine: LevelOperator) -> HTransfer:
    d, p = coarse.dim, coarse.degree
    if fine.degree != p or fine.mesh.n != 2 * coarse.mesh.n:
        raise ValueError("levels are not nested with equal degree")
    cmi = coarse.mesh.cell_multi_index()
    local = _lattice(2 * p + 1, d)
    fine_lat = lattice_index(2 * p * cmi[:, None, :] + local[None], fine.dofs.dofs_per_axis)
    # the first coarse cell touching a fine DoF owns it
    _, first = np.unique(fine_lat.ravel(), return_index=True)
    owner = np.zeros(fine_lat.size, dtype=bool)
    owner[first] = True
    owner = owner.reshape(fine_lat.shape)
    return HTransfer(d, p, two_child_matrix(coarse.basis.nodes), coarse.dofs.cell_dofs, fine_lat,
                     owner, coarse.n_dofs, fine.n_dofs, coarse.dofs.boundary_mask,
                     fine.dofs.boundary_mask)


def h_prolongate(t: HTransfer, u_coarse):
    return t.prolongate(np.asarray(u_coarse, dtype=float))


def h_restrict(t: HTransfer, r_fine):
    return t.restrict(np.asarray(r_fine, dtype=float))


# ---------------------------------------------------------------------------
# manufactured problem


def exact_solution(x: np.ndarray) -> np.ndarray:
    return np.prod(np.sin(np.pi * x), axis=-1)


def source_term(x: np.ndarray) -> np.ndarray:
    return x.shape[-1] * np.pi**2 * exact_solution(x)


def make_rhs(op: LevelOperator, f=source_term) -> np.ndarray:
    """Load vector of ``f`` by the operator's quadrature, zero on Dirichlet DoFs."""
    d, b = op.dim, op.basis
    x, J = q1_map(op.mesh, b.quad_points)
    fq = f(x) * np.linalg.det(J) * b.weights_tensor(d).ravel()
    fq = fq.reshape((-1,) + (b.n_q,) * d)
    with counters.suspended():
        loc = integrate_from_quadrature(fq, b, d, "dense").reshape(op.mesh.n_cells, -1)
    rhs = np.bincount(op.dofs.cell_dofs.ravel(), weights=loc.ravel(), minlength=op.n_dofs)
    rhs[op.dofs.boundary_mask] = 0.0
    return rhs


def interpolate(op: LevelOperator, fn) -> np.ndarray:
    return fn(dof_coordinates(op.mesh, op.dofs, op.basis.nodes))


def l2_error(op: LevelOperator, u: np.ndarray, exact=exact_solution, extra_points: int = 3) -> float:
    """L2 norm of ``u_h - exact`` with an over-integrating Gauss rule."""
    d, p = op.dim, op.degree
    b = make_basis(p, p + 1 + extra_points)
    x, J = q1_map(op.mesh, b.quad_points)
    w = np.linalg.det(J) * b.weights_tensor(d).ravel()
    with counters.suspended():
        uq = interpolate_to_quadrature(u[op.dofs.cell_dofs], b, d, "dense").reshape(op.mesh.n_cells, -1)
    return float(np.sqrt(np.sum((uq - exact(x)) ** 2 * w)))
