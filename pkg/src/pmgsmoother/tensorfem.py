"""1D basis data and sum-factorized cell kernels for the Laplacian.

Cell-local arrays are laid out as ``(..., n, ..., n)`` with the last array
axis belonging to reference axis 0, so flattening in C order reproduces the
lexicographic DoF numbering. All kernels accept any number of leading batch
axes; a batch is purely a layout and the per-cell arithmetic does not depend
on its width.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import counters
from .mesh import MeshLevel, TangledMeshError, q1_map

CARTESIAN, AFFINE, GENERAL = 0, 1, 2
KIND_NAMES = {CARTESIAN: "cartesian", AFFINE: "affine", GENERAL: "general"}


def gauss_lobatto_nodes(p: int) -> np.ndarray:
    """The p+1 Gauss-Lobatto points on [0, 1], mirrored exactly about 1/2."""
    if p == 1:
        return np.array([0.0, 1.0])
    dleg = np.polynomial.legendre.Legendre.basis(p).deriv()
    inner = np.sort(dleg.roots().real)
    x = np.concatenate([[-1.0], inner, [1.0]])
    x = 0.5 * (x - x[::-1])
    return 0.5 * (x + 1.0)


def gauss_points(q: int):
    x, w = np.polynomial.legendre.leggauss(q)
    x = 0.5 * (x - x[::-1])
    w = 0.5 * (w + w[::-1])
    return 0.5 * (x + 1.0), 0.5 * w


def lagrange_matrices(nodes: np.ndarray, x: np.ndarray):
    """Values and first derivatives of the Lagrange basis on ``nodes`` at ``x``."""
    n = len(nodes)
    x = np.asarray(x, dtype=float)
    vals = np.ones((len(x), n))
    ders = np.zeros((len(x), n))
    for i in range(n):
        others = [j for j in range(n) if j != i]
        denom = np.prod(nodes[i] - nodes[others])
        for j in others:
            vals[:, i] *= x - nodes[j]
        for m in others:
            term = np.ones_like(x)
            for j in others:
                if j != m:
                    term = term * (x - nodes[j])
            ders[:, i] += term
        vals[:, i] /= denom
        ders[:, i] /= denom
    return vals, ders


def _mirror(M: np.ndarray, parity: int) -> np.ndarray:
    """Enforce ``M[q-1-a, n-1-i] == parity * M[a, i]`` exactly."""
    return 0.5 * (M + parity * M[::-1, ::-1])


class Tensor1D:
    """A 1D matrix applied along one axis of a tensor, with even-odd splitting.

    The matrices of a symmetric nodal basis evaluated on symmetric points are
    centro-symmetric (parity +1) or centro-antisymmetric (parity -1). The
    even-odd form applies two half-size matrices to the sum and difference of
    mirrored entries, which roughly halves the arithmetic.
    """

    def __init__(self, matrix: np.ndarray, parity: int | None = None):
        self.matrix = np.ascontiguousarray(matrix)
        q, n = matrix.shape
        self.rows, self.cols = q, n
        self.parity = parity
        if parity is None:
            return
        m, mq = n // 2, q // 2
        M = self.matrix
        self._m, self._mq = m, mq
        self.even = 0.5 * (M[:mq, :m] + M[:mq, n - 1 : n - 1 - m : -1]) if m else np.zeros((mq, 0))
        self.odd = 0.5 * (M[:mq, :m] - M[:mq, n - 1 : n - 1 - m : -1]) if m else np.zeros((mq, 0))
        self.mid_col = M[:mq, m : m + 1] if n % 2 else None
        if q % 2:
            self.mid_row = M[mq : mq + 1, :m]
            self.mid_entry = M[mq, m] if n % 2 else 0.0
        else:
            self.mid_row = None

    def line_flops(self, variant: str) -> int:
        q, n = self.rows, self.cols
        if variant == "dense" or self.parity is None:
            return 2 * q * n
        m, mq = self._m, self._mq
        f = 2 * m + 4 * mq * m + 2 * mq
        if n % 2:
            f += 2 * mq
        if q % 2:
            f += 2 * m + (2 if (n % 2 and self.parity > 0) else 0)
        return f

    def apply(self, X: np.ndarray, axis: int, variant: str = "even_odd") -> np.ndarray:
        """Contract reference axis ``axis`` (0 = last array axis) of ``X``."""
        ax = X.ndim - 1 - axis
        shape = X.shape
        n = shape[ax]
        assert n == self.cols, (n, self.cols)
        lines = X.size // n
        counters.add_flops(lines * self.line_flops(variant))
        if ax == X.ndim - 1:
            X3 = X.reshape(shape[0] if X.ndim > 1 else 1, -1, n)
            out = self._apply_last(X3, variant)
        else:
            pre = int(np.prod(shape[:ax], dtype=np.int64))
            X3 = X.reshape(pre, n, -1)
            out = self._apply_mid(X3, variant)
        return out.reshape(shape[:ax] + (self.rows,) + shape[ax + 1 :])

    def _apply_mid(self, X3, variant):
        M = self.matrix
        if variant == "dense" or self.parity is None:
            return M @ X3
        q, n, m, mq = self.rows, self.cols, self._m, self._mq
        lo = X3[:, :m]
        hi = X3[:, n - 1 : n - 1 - m : -1] if m else X3[:, :0]
        e = lo + hi
        o = lo - hi
        P = self.even @ e
        if self.mid_col is not None:
            P += self.mid_col @ X3[:, m : m + 1]
        O = self.odd @ o
        Y = np.empty((X3.shape[0], q, X3.shape[2]))
        Y[:, :mq] = P + O
        Y[:, q - 1 : q - 1 - mq : -1] = P - O if self.parity > 0 else O - P
        if self.mid_row is not None:
            c = self.mid_row @ (e if self.parity > 0 else o)
            if self.mid_col is not None and self.parity > 0:
                c += self.mid_entry * X3[:, m : m + 1]
            Y[:, mq : mq + 1] = c
        return Y

    def _apply_last(self, X3, variant):
        M = self.matrix
        if variant == "dense" or self.parity is None:
            return X3 @ M.T
        q, n, m, mq = self.rows, self.cols, self._m, self._mq
        lo = X3[..., :m]
        hi = X3[..., n - 1 : n - 1 - m : -1] if m else X3[..., :0]
        e = lo + hi
        o = lo - hi
        P = e @ self.even.T
        if self.mid_col is not None:
            P += X3[..., m : m + 1] @ self.mid_col.T
        O = o @ self.odd.T
        Y = np.empty(X3.shape[:-1] + (q,))
        Y[..., :mq] = P + O
        Y[..., q - 1 : q - 1 - mq : -1] = P - O if self.parity > 0 else O - P
        if self.mid_row is not None:
            c = (e if self.parity > 0 else o) @ self.mid_row.T
            if self.mid_col is not None and self.parity > 0:
                c += self.mid_entry * X3[..., m : m + 1]
            Y[..., mq : mq + 1] = c
        return Y


@dataclass(frozen=True)
class Basis1D:
    """Gauss-Lobatto-Lagrange basis of degree ``degree`` with q Gauss points."""

    degree: int
    nodes: np.ndarray
    quad_points: np.ndarray
    quad_weights: np.ndarray
    shape_values: np.ndarray
    shape_gradients: np.ndarray
    colloc_gradients: np.ndarray
    values: Tensor1D = field(repr=False)
    values_t: Tensor1D = field(repr=False)
    colloc: Tensor1D = field(repr=False)
    colloc_t: Tensor1D = field(repr=False)

    @property
    def n_q(self) -> int:
        return len(self.quad_points)

    @property
    def n_dofs_1d(self) -> int:
        return self.degree + 1

    def weights_tensor(self, dim: int) -> np.ndarray:
        """Tensor-product quadrature weights, shape (q,)*dim."""
        w = self.quad_weights
        out = w
        for _ in range(dim - 1):
            out = np.multiply.outer(w, out)
        return out


@lru_cache(maxsize=None)
def make_basis(p: int, q: int | None = None) -> Basis1D:
    if p < 1:
        raise ValueError("degree must be >= 1")
    q = p + 1 if q is None else q
    if q < p + 1:
        raise ValueError("need at least p+1 quadrature points")
    nodes = gauss_lobatto_nodes(p)
    xq, wq = gauss_points(q)
    N, D = lagrange_matrices(nodes, xq)
    N, D = _mirror(N, +1), _mirror(D, -1)
    # derivative of the degree q-1 interpolant through the quadrature points
    _, Dq = lagrange_matrices(xq, xq)
    Dq = _mirror(Dq, -1)
    for a in (nodes, xq, wq, N, D, Dq):
        a.setflags(write=False)
    return Basis1D(
        degree=p, nodes=nodes, quad_points=xq, quad_weights=wq,
        shape_values=N, shape_gradients=D, colloc_gradients=Dq,
        values=Tensor1D(N, +1), values_t=Tensor1D(N.T.copy(), +1),
        colloc=Tensor1D(Dq, -1), colloc_t=Tensor1D(Dq.T.copy(), -1),
    )


# ---------------------------------------------------------------------------
# geometry


@dataclass
class GeometryCache:
    """Per-cell Jacobian data at the quadrature points of one basis.

    ``kind[e]`` selects the storage class of cell ``e``; ``slot[e]`` is its row
    in the class-specific arrays. Cartesian cells store their inverse edge
    lengths and determinant, so kernels never divide; affine cells one inverse Jacobian and determinant, general cells an inverse
    Jacobian and ``det J * w`` per quadrature point.
    """

    dim: int
    n_q: int
    kind: np.ndarray
    slot: np.ndarray
    cart_hinv: np.ndarray
    cart_det: np.ndarray
    affine_jinv: np.ndarray
    affine_det: np.ndarray
    general_jinv: np.ndarray
    general_jxw: np.ndarray
    weights: np.ndarray

    @property
    def n_cells(self) -> int:
        return self.kind.size

    def counts(self) -> dict:
        return {KIND_NAMES[k]: int(np.sum(self.kind == k)) for k in KIND_NAMES}

    def stored_doubles(self) -> int:
        return int(self.cart_hinv.size + self.cart_det.size + self.affine_jinv.size + self.affine_det.size
                   + self.general_jinv.size + self.general_jxw.size)

    def fetch(self, cells: np.ndarray) -> "BatchGeometry":
        """Gather the data of ``cells`` (any shape) into a batch-level view."""
        cells = np.asarray(cells)
        kinds = self.kind[cells]
        top = int(kinds.max()) if kinds.size else CARTESIAN
        slots = self.slot[cells]
        d = self.dim
        if top == CARTESIAN:
            return BatchGeometry(CARTESIAN, self.weights, hinv=self.cart_hinv[slots],
                                 det=self.cart_det[slots])
        if top == AFFINE and np.all(kinds == AFFINE):
            return BatchGeometry(AFFINE, self.weights, jinv=self.affine_jinv[slots],
                                 det=self.affine_det[slots])
        # promote mixed batches to the most general class present
        jinv = np.empty(cells.shape + (self.n_q**d, d, d))
        jxw = np.empty(cells.shape + (self.n_q**d,))
        w = self.weights.ravel()
        for k in (CARTESIAN, AFFINE, GENERAL):
            sel = kinds == k
            if not np.any(sel):
                continue
            s = slots[sel]
            if k == CARTESIAN:
                ji = np.zeros((s.size, d, d))
                ji[:, np.arange(d), np.arange(d)] = self.cart_hinv[s]
                jinv[sel] = ji[:, None]
                jxw[sel] = self.cart_det[s][:, None] * w
            elif k == AFFINE:
                jinv[sel] = self.affine_jinv[s][:, None]
                jxw[sel] = self.affine_det[s][:, None] * w
            else:
                jinv[sel] = self.general_jinv[s]
                jxw[sel] = self.general_jxw[s]
        return BatchGeometry(GENERAL, self.weights, jinv=jinv, jxw=jxw)


@dataclass
class BatchGeometry:
    kind: int
    weights: np.ndarray
    hinv: np.ndarray | None = None
    jinv: np.ndarray | None = None
    det: np.ndarray | None = None
    jxw: np.ndarray | None = None

    @property
    def doubles(self) -> int:
        return sum(a.size for a in (self.hinv, self.jinv, self.det, self.jxw) if a is not None)


def _exact_box(corners: np.ndarray, bits: np.ndarray):
    """Exact tests for axis-aligned boxes and parallelepipeds."""
    d = corners.shape[-1]
    origin = corners[:, :1, :]
    edges = corners[:, [1 << k for k in range(d)], :] - origin  # (nc, d, d) rows = edge vectors
    recon = origin + np.einsum("ck,ekd->ecd", bits.astype(float), edges)
    affine = np.all(recon == corners, axis=(1, 2))
    offdiag = ~np.eye(d, dtype=bool)
    cart = affine & np.all(edges[:, offdiag] == 0.0, axis=1)
    return cart, affine, edges


def classify_geometry(mesh: MeshLevel, basis: Basis1D) -> GeometryCache:
    from .mesh import corner_bits

    d = mesh.dim
    corners = mesh.cell_corners()
    cart, affine, edges = _exact_box(corners, corner_bits(d))
    kind = np.full(mesh.n_cells, GENERAL, dtype=np.int8)
    kind[affine] = AFFINE
    kind[cart] = CARTESIAN
    slot = np.zeros(mesh.n_cells, dtype=np.int64)
    for k in (CARTESIAN, AFFINE, GENERAL):
        sel = kind == k
        slot[sel] = np.arange(int(sel.sum()))

    cart_h = edges[cart][:, np.arange(d), np.arange(d)]
    if np.any(cart_h <= 0):
        raise TangledMeshError("tangled mesh: inverted Cartesian cell")
    cart_hinv = np.ascontiguousarray(1.0 / cart_h)
    counters.add_flops(0, divisions=cart_h.size)
    cart_det = np.prod(cart_h, axis=1)
    aff = affine & ~cart
    # edges rows are dx/dxi_k, i.e. J[:, i, k] = edges[:, k, i]
    J_aff = np.transpose(edges[aff], (0, 2, 1))
    det_aff = np.linalg.det(J_aff) if J_aff.size else np.zeros(0)
    if np.any(det_aff <= 0):
        raise TangledMeshError("tangled mesh: inverted affine cell")
    jinv_aff = np.linalg.inv(J_aff) if J_aff.size else np.zeros((0, d, d))
    counters.add_flops(0, divisions=J_aff.shape[0] * d)

    gen = kind == GENERAL
    w = basis.weights_tensor(d)
    if np.any(gen):
        _, J = q1_map(mesh, basis.quad_points, cells=np.nonzero(gen)[0])
        det = np.linalg.det(J)
        if np.any(det <= 0):
            raise TangledMeshError("tangled mesh: det J <= 0 at a quadrature point")
        jinv = np.linalg.inv(J)
        counters.add_flops(0, divisions=det.size * d)
        jxw = det * w.ravel()[None, :]
    else:
        jinv = np.zeros((0, basis.n_q**d, d, d))
        jxw = np.zeros((0, basis.n_q**d))
    return GeometryCache(dim=d, n_q=basis.n_q, kind=kind, slot=slot, cart_hinv=cart_hinv, cart_det=cart_det,
                         affine_jinv=jinv_aff, affine_det=det_aff, general_jinv=jinv,
                         general_jxw=jxw, weights=w)


# ---------------------------------------------------------------------------
# kernels


def _batched(u: np.ndarray, dim: int, n: int) -> np.ndarray:
    return u.reshape(u.shape[: u.ndim - 1] + (n,) * dim) if u.shape[-1] == n**dim else u


def interpolate_to_quadrature(u: np.ndarray, basis: Basis1D, dim: int, variant: str = "even_odd"):
    X = _batched(u, dim, basis.n_dofs_1d)
    for k in range(dim):
        X = basis.values.apply(X, k, variant)
    return X


def integrate_from_quadrature(f: np.ndarray, basis: Basis1D, dim: int, variant: str = "even_odd"):
    X = f
    for k in range(dim):
        X = basis.values_t.apply(X, k, variant)
    return X


def quadrature_gradient(g_ref: list, geom: BatchGeometry, dim: int, coefficient=None):
    """Map reference gradients at quadrature points to flux contributions.

    Returns ``J^-1 (mu detJ w) J^-T grad`` per point, i.e. the integrand of the
    weak Laplacian ready for the transposed sweeps.
    """
    qshape = g_ref[0].shape
    npts = int(np.prod(qshape[-dim:]))
    batch = qshape[:-dim]
    nb = int(np.prod(batch, dtype=np.int64))
    w = geom.weights
    if geom.kind == CARTESIAN:
        hinv = geom.hinv
        scale = geom.det[..., None] * hinv * hinv  # detJ / h_k^2
        counters.add_flops(nb * 2 * dim)
        out = []
        for k in range(dim):
            sk = scale[..., k].reshape(batch + (1,) * dim)
            f = g_ref[k] * sk * w
            out.append(f)
        counters.add_flops(nb * npts * 2 * dim)
    else:
        G = np.stack([g.reshape(batch + (npts,)) for g in g_ref], axis=-1)  # (..., Q, d)
        if geom.kind == AFFINE:
            jinv = geom.jinv[..., None, :, :]
            jxw = geom.det[..., None] * w.ravel()
            counters.add_flops(nb * npts)
        else:
            jinv, jxw = geom.jinv, geom.jxw
        # physical gradient: grad_x = J^-T grad_xi
        phys = np.einsum("...ki,...k->...i", jinv, G)
        phys *= jxw[..., None]
        ref = np.einsum("...ki,...i->...k", jinv, phys)
        counters.add_flops(nb * npts * (4 * dim * dim + dim))
        out = [ref[..., k].reshape(qshape) for k in range(dim)]
    if coefficient is not None:
        out = [f * coefficient for f in out]
        counters.add_flops(nb * npts * dim)
    return out


def cell_apply_laplace(u: np.ndarray, geom: BatchGeometry, basis: Basis1D, dim: int,
                       variant: str = "even_odd", coefficient=None) -> np.ndarray:
    """Weak Laplacian of cell-local coefficients by sum factorization.

    ``u`` has shape ``batch + ((p+1)^d,)``; the result has the same shape.
    d interpolation sweeps and d collocation-derivative sweeps lead to the
    quadrature points, d transposed derivative sweeps and d transposed
    interpolation sweeps lead back.
    """
    flat_in = u.shape[-1] == basis.n_dofs_1d**dim and dim > 1
    uq = interpolate_to_quadrature(u, basis, dim, variant)
    grads = [basis.colloc.apply(uq, k, variant) for k in range(dim)]
    flux = quadrature_gradient(grads, geom, dim, coefficient)
    acc = basis.colloc_t.apply(flux[0], 0, variant)
    for k in range(1, dim):
        acc += basis.colloc_t.apply(flux[k], k, variant)
    counters.add_flops((dim - 1) * acc.size)
    v = integrate_from_quadrature(acc, basis, dim, variant)
    return v.reshape(u.shape) if flat_in else v


def cell_flops_estimate(p: int, dim: int, kind: int = CARTESIAN, q: int | None = None,
                        variant: str = "even_odd") -> int:
    """FLOPs of one :func:`cell_apply_laplace` call on a single cell."""
    b = make_basis(p, q)
    with counters.recording() as rec:
        geom = _unit_geometry(b, dim, kind)
        cell_apply_laplace(np.zeros((1, (p + 1) ** dim)), geom, b, dim, variant)
    return rec.total_flops


def _unit_geometry(basis: Basis1D, dim: int, kind: int) -> BatchGeometry:
    w = basis.weights_tensor(dim)
    if kind == CARTESIAN:
        return BatchGeometry(CARTESIAN, w, hinv=np.ones((1, dim)), det=np.ones(1))
    Q = basis.n_q**dim
    jinv = np.broadcast_to(np.eye(dim), (1, Q, dim, dim)).copy()
    return BatchGeometry(GENERAL, w, jinv=jinv, jxw=np.broadcast_to(w.ravel(), (1, Q)).copy())


def cell_diagonal(geom: BatchGeometry, basis: Basis1D, dim: int) -> np.ndarray:
    """Diagonal of the cell stiffness matrices by sum factorization.

    For each pair of derivative directions (k, l) the metric term is contracted
    against products of 1D shape tables along every axis.
    """
    N, D = basis.shape_values, basis.shape_gradients
    w = geom.weights
    if geom.kind == CARTESIAN:
        batch = geom.hinv.shape[:-1]
        scale = geom.det[..., None] * geom.hinv * geom.hinv
        out = 0.0
        for k in range(dim):
            X = np.broadcast_to(w, batch + w.shape) * scale[..., k].reshape(batch + (1,) * dim)
            for m in range(dim):
                A = (D * D) if m == k else (N * N)
                X = Tensor1D(A.T.copy()).apply(X, m, "dense")
            out = out + X
        return out.reshape(batch + (-1,))
    if geom.kind == AFFINE:
        jinv = geom.jinv[..., None, :, :]
        jxw = geom.det[..., None] * w.ravel()
    else:
        jinv, jxw = geom.jinv, geom.jxw
    G = np.einsum("...ki,...li->...kl", jinv, jinv) * jxw[..., None, None]
    batch = G.shape[:-3]
    qd = (basis.n_q,) * dim
    out = 0.0
    for k in range(dim):
        for l in range(dim):
            X = G[..., k, l].reshape(batch + qd)
            for m in range(dim):
                A = (D if m == k else N) * (D if m == l else N)
                X = Tensor1D(A.T.copy()).apply(X, m, "dense")
            out = out + X
    return out.reshape(batch + (-1,))
