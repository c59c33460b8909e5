"""Structured quad/hex mesh hierarchies on the unit square/cube.

Indexing conventions used throughout the package:

* vertex, cell and DoF lattices are numbered lexicographically with axis 0
  running fastest;
* the 2^d corners of a cell, and the 2^d cells of a vertex patch, are numbered
  by bits: bit k of the local index selects the low (0) or high (1) side along
  axis k.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np


class TangledMeshError(ValueError):
    """Raised when a cell has a non-positive Jacobian determinant."""


def _lattice(shape_per_axis: int, dim: int) -> np.ndarray:
    """Multi-indices (N, dim) of a lexicographic lattice, axis 0 fastest."""
    grids = np.meshgrid(*([np.arange(shape_per_axis)] * dim), indexing="ij")
    # meshgrid with 'ij' makes axis 0 slowest; reverse for axis-0-fastest order
    return np.stack([g.transpose(*reversed(range(dim))).ravel() for g in grids], axis=1)


def lattice_index(multi: np.ndarray, size: int) -> np.ndarray:
    multi = np.asarray(multi)
    weights = size ** np.arange(multi.shape[-1])
    return multi @ weights


def corner_bits(dim: int) -> np.ndarray:
    """(2^d, d) array of corner offsets in bit order."""
    c = np.arange(2**dim)
    return (c[:, None] >> np.arange(dim)) & 1


@dataclass(frozen=True)
class MeshLevel:
    dim: int
    n: int
    vertices: np.ndarray
    cells: np.ndarray
    parent_of: np.ndarray | None = None
    delta: float = 0.0
    seed: int | None = None

    @property
    def n_cells(self) -> int:
        return self.cells.shape[0]

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    def cell_multi_index(self) -> np.ndarray:
        return _lattice(self.n, self.dim)

    def vertex_multi_index(self) -> np.ndarray:
        return _lattice(self.n + 1, self.dim)

    def interior_vertices(self) -> np.ndarray:
        mi = self.vertex_multi_index()
        inside = np.all((mi > 0) & (mi < self.n), axis=1)
        return np.nonzero(inside)[0]

    def boundary_vertex_mask(self) -> np.ndarray:
        mi = self.vertex_multi_index()
        return np.any((mi == 0) | (mi == self.n), axis=1)

    def cell_corners(self) -> np.ndarray:
        """Corner coordinates, shape (n_cells, 2^d, d)."""
        return self.vertices[self.cells]


@dataclass(frozen=True)
class MeshHierarchy:
    levels: tuple
    delta: float = 0.0
    seed: int | None = None

    @property
    def dim(self) -> int:
        return self.levels[0].dim

    @property
    def finest(self) -> MeshLevel:
        return self.levels[-1]

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, i) -> MeshLevel:
        return self.levels[i]


def structured_level(dim: int, n: int) -> MeshLevel:
    vmi = _lattice(n + 1, dim)
    vertices = vmi.astype(float) / n
    cmi = _lattice(n, dim)
    bits = corner_bits(dim)
    cells = lattice_index(cmi[:, None, :] + bits[None, :, :], n + 1)
    return MeshLevel(dim=dim, n=n, vertices=vertices, cells=cells)


def build_hierarchy(dim: int, refinements: int) -> MeshHierarchy:
    """Uniformly refined hierarchy starting from a single vertex patch.

    Level ``r`` has ``2**(r + 1)`` cells per axis.
    """
    if dim not in (2, 3):
        raise ValueError(f"dim must be 2 or 3, got {dim}")
    if refinements < 0:
        raise ValueError("refinements must be non-negative")
    levels = []
    for r in range(refinements + 1):
        lvl = structured_level(dim, 2 ** (r + 1))
        if r > 0:
            cmi = lvl.cell_multi_index()
            lvl = replace(lvl, parent_of=lattice_index(cmi // 2, lvl.n // 2))
        levels.append(lvl)
    return MeshHierarchy(tuple(levels))


def min_incident_edge(mesh: MeshLevel) -> np.ndarray:
    """Length of the shortest mesh edge attached to each vertex."""
    mi = mesh.vertex_multi_index()
    h = np.full(mesh.n_vertices, np.inf)
    for k in range(mesh.dim):
        for step in (-1, 1):
            nb = mi.copy()
            nb[:, k] += step
            ok = (nb[:, k] >= 0) & (nb[:, k] <= mesh.n)
            j = lattice_index(nb[ok], mesh.n + 1)
            lengths = np.linalg.norm(mesh.vertices[j] - mesh.vertices[ok], axis=1)
            h[ok] = np.minimum(h[ok], lengths)
    return h


def random_directions(rng: np.random.Generator, count: int, dim: int) -> np.ndarray:
    if dim == 2:
        phi = rng.uniform(0.0, 2.0 * np.pi, size=count)
        return np.stack([np.cos(phi), np.sin(phi)], axis=1)
    g = rng.standard_normal((count, dim))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def distort(mesh: MeshLevel, delta: float, seed: int = 0) -> MeshLevel:
    """Shift every interior vertex by ``delta * h_v`` in a random direction.

    ``h_v`` is the shortest edge attached to the vertex in the input mesh. The
    generator is numpy's PCG64 (``np.random.default_rng(seed)``); directions
    are drawn for interior vertices in ascending vertex order.
    """
    if not 0.0 <= delta < 0.5:
        raise ValueError("delta must satisfy 0 <= delta < 0.5")
    if delta == 0.0:
        return replace(mesh, delta=0.0, seed=seed)
    rng = np.random.default_rng(seed)
    inner = mesh.interior_vertices()
    h = min_incident_edge(mesh)[inner]
    shift = random_directions(rng, inner.size, mesh.dim) * (delta * h)[:, None]
    vertices = mesh.vertices.copy()
    vertices[inner] += shift
    out = replace(mesh, vertices=vertices, delta=delta, seed=seed)
    check_untangled(out)
    return out


def distort_hierarchy(hierarchy: MeshHierarchy, delta: float, seed: int = 0) -> MeshHierarchy:
    """Distort the finest level and let coarser levels inherit shared vertices."""
    fine = distort(hierarchy.finest, delta, seed)
    levels = [fine]
    fmi = fine.vertex_multi_index()
    for lvl in reversed(hierarchy.levels[:-1]):
        stride = fine.n // lvl.n
        cmi = lvl.vertex_multi_index()
        src = lattice_index(cmi * stride, fine.n + 1)
        assert np.array_equal(fmi[src], cmi * stride)
        coarse = replace(lvl, vertices=fine.vertices[src].copy(), delta=delta, seed=seed)
        check_untangled(coarse)
        levels.append(coarse)
    return MeshHierarchy(tuple(reversed(levels)), delta=delta, seed=seed)


def q1_shape_1d(x: np.ndarray):
    """Values and derivatives of the two linear 1D hats at points ``x``."""
    x = np.asarray(x, dtype=float)
    vals = np.stack([1.0 - x, x], axis=1)
    ders = np.stack([-np.ones_like(x), np.ones_like(x)], axis=1)
    return vals, ders


def q1_map(mesh: MeshLevel, points_1d: np.ndarray, cells=None):
    """Mapped points and Jacobians of the multilinear cell maps.

    Evaluation points form the tensor grid of ``points_1d`` on the reference
    cell in lexicographic order. Returns ``x`` of shape (nc, q^d, d) and
    ``J`` of shape (nc, q^d, d, d) with ``J[..., i, k] = dx_i / dxi_k``.
    """
    corners = mesh.cell_corners() if cells is None else mesh.vertices[mesh.cells[cells]]
    d = mesh.dim
    vals, ders = q1_shape_1d(points_1d)
    q = len(points_1d)
    bits = corner_bits(d)
    # tensor-product weights for each corner at each evaluation point
    mi = _lattice(q, d)
    phi = np.ones((mi.shape[0], 2**d))
    dphi = np.ones((d, mi.shape[0], 2**d))
    for k in range(d):
        vk = vals[mi[:, k]][:, bits[:, k]]
        dk = ders[mi[:, k]][:, bits[:, k]]
        phi *= vk
        for m in range(d):
            dphi[m] *= dk if m == k else vk
    x = np.einsum("qc,ecd->eqd", phi, corners)
    J = np.einsum("kqc,eci->eqik", dphi, corners)
    return x, J


def check_untangled(mesh: MeshLevel, q: int = 4):
    pts, _ = np.polynomial.legendre.leggauss(q)
    pts = 0.5 * (pts + 1.0)
    # include the corners: the multilinear Jacobian attains extremes there
    pts = np.concatenate([[0.0], pts, [1.0]])
    _, J = q1_map(mesh, pts)
    det = np.linalg.det(J)
    if np.any(det <= 0.0):
        raise TangledMeshError(
            f"tangled mesh: {int(np.sum(np.any(det <= 0, axis=1)))} cells with det J <= 0"
        )


@dataclass(frozen=True)
class DofMap:
    """Continuous Q_p numbering of a structured level."""

    dim: int
    degree: int
    n: int
    cell_dofs: np.ndarray
    boundary_mask: np.ndarray
    dofs_per_axis: int = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "dofs_per_axis", self.degree * self.n + 1)

    @property
    def n_dofs(self) -> int:
        return self.boundary_mask.size

    @property
    def interior(self) -> np.ndarray:
        return np.nonzero(~self.boundary_mask)[0]


def enumerate_dofs(mesh: MeshLevel, p: int) -> DofMap:
    if p < 1:
        raise ValueError("degree must be >= 1")
    d, n = mesh.dim, mesh.n
    m = p * n + 1
    local = _lattice(p + 1, d)
    cmi = mesh.cell_multi_index()
    cell_dofs = lattice_index(p * cmi[:, None, :] + local[None, :, :], m)
    gmi = _lattice(m, d)
    boundary = np.any((gmi == 0) | (gmi == m - 1), axis=1)
    return DofMap(dim=d, degree=p, n=n, cell_dofs=cell_dofs, boundary_mask=boundary)


@dataclass(frozen=True)
class PatchList:
    """Vertex patches of a structured level.

    ``cells[j, c]`` is the global cell at patch-local position ``c``;
    ``interior_dofs[j]`` lists the (2p-1)^d patch-interior DoFs in the
    lexicographic patch order, ``closure_dofs[j]`` the (2p+1)^d closure DoFs.
    """

    dim: int
    degree: int
    cells: np.ndarray
    center_vertex: np.ndarray
    interior_dofs: np.ndarray
    closure_dofs: np.ndarray

    @property
    def n_patches(self) -> int:
        return self.cells.shape[0]

    @property
    def interior_size(self) -> int:
        return (2 * self.degree - 1) ** self.dim

    def __len__(self):
        return self.n_patches


def enumerate_patches(mesh: MeshLevel, dofs: DofMap) -> PatchList:
    d, n, p = mesh.dim, mesh.n, dofs.degree
    if n < 2:
        raise ValueError("need at least two cells per axis")
    centers = mesh.interior_vertices()
    vmi = mesh.vertex_multi_index()[centers]
    bits = corner_bits(d)
    cells = lattice_index(vmi[:, None, :] - 1 + bits[None, :, :], n)
    m = dofs.dofs_per_axis
    inner = _lattice(2 * p - 1, d)
    interior = lattice_index(p * (vmi[:, None, :] - 1) + 1 + inner[None], m)
    closure_local = _lattice(2 * p + 1, d)
    closure = lattice_index(p * (vmi[:, None, :] - 1) + closure_local[None], m)
    return PatchList(dim=d, degree=p, cells=cells, center_vertex=centers,
                     interior_dofs=interior, closure_dofs=closure)


def dof_coordinates(mesh: MeshLevel, dofs: DofMap, nodes_1d: np.ndarray) -> np.ndarray:
    """Physical positions of the nodal DoFs (nodes mapped by the cell maps)."""
    x, _ = q1_map(mesh, nodes_1d)
    coords = np.empty((dofs.n_dofs, mesh.dim))
    coords[dofs.cell_dofs.ravel()] = x.reshape(-1, mesh.dim)
    return coords


def write_mesh(mesh: MeshLevel, path) -> None:
    """Debug dump: a one-line header followed by one vertex per line."""
    path = Path(path)
    lines = [f"dim {mesh.dim} n {mesh.n} delta {mesh.delta!r} seed {mesh.seed}"]
    lines += [" ".join(repr(float(c)) for c in v) for v in mesh.vertices]
    path.write_text("\n".join(lines) + "\n")


def read_mesh(path) -> MeshLevel:
    text = Path(path).read_text().splitlines()
    head = text[0].split()
    meta = dict(zip(head[::2], head[1::2]))
    dim, n = int(meta["dim"]), int(meta["n"])
    seed = None if meta["seed"] == "None" else int(meta["seed"])
    base = structured_level(dim, n)
    verts = np.array([[float(t) for t in line.split()] for line in text[1:] if line.strip()])
    if verts.shape != base.vertices.shape:
        raise ValueError(f"{path}: expected {base.vertices.shape} vertex block, got {verts.shape}")
    return replace(base, vertices=verts, delta=float(meta["delta"]), seed=seed)
