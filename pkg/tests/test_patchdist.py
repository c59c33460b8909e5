from collections import Counter

import numpy as np
import pytest
import scipy.sparse.linalg as spla

from pmgsmoother import globalop as G
from pmgsmoother import mesh as M
from pmgsmoother import patchdist as P


def trace(d, c, p):
    f, calls = P.recording_functors()
    n = P.traverse_dynamic(d, c, f, p)
    assert n == (p + 1) ** d
    return calls


def test_left_cell_trace_1d():
    assert trace(1, 0, 3) == [("skip", 0, 0, None), ("reg", 0, 1, 0), ("reg", 0, 2, 1), ("reg", 0, 3, 2)]


def test_right_cell_trace_1d():
    assert trace(1, 1, 3) == [("dup", 1, 0, 2), ("reg", 1, 1, 3), ("reg", 1, 2, 4), ("skip", 1, 3, None)]


def test_strides():
    assert P.patch_stride(1, 4) == 1
    assert P.patch_stride(2, 4) == 7
    assert P.patch_stride(3, 4) == 49


def test_rejects_bad_cell():
    f, _ = P.recording_functors()
    with pytest.raises(ValueError):
        P.traverse_dynamic(2, 4, f, 2)


def reference_mapping(d, p):
    """Brute force from global DoF identities on a 2^d-cell patch."""
    mesh = M.structured_level(d, 2)
    dofs = M.enumerate_dofs(mesh, p)
    patches = M.enumerate_patches(mesh, dofs)
    interior = {g: k for k, g in enumerate(patches.interior_dofs[0])}
    seen = set()
    out = {}
    for c in range(2**d):
        for ic, g in enumerate(dofs.cell_dofs[patches.cells[0, c]]):
            if g not in interior:
                out[(c, ic)] = ("skip", None)
            elif g in seen:
                out[(c, ic)] = ("dup", interior[g])
            else:
                seen.add(g)
                out[(c, ic)] = ("reg", interior[g])
    return out


@pytest.mark.parametrize("d, p", [(2, 1), (2, 2), (2, 3), (3, 1), (3, 2), (3, 3)])
def test_traversal_matches_global_identities(d, p):
    ref = reference_mapping(d, p)
    got = {}
    for c in range(2**d):
        for kind, cc, ic, ip in trace(d, c, p):
            got[(cc, ic)] = (kind, ip)
    assert got == ref


def test_p2_2d_reg_count():
    regs = [call for c in range(4) for call in trace(2, c, 2) if call[0] == "reg"]
    assert sorted(ip for *_, ip in regs) == list(range(9))


@pytest.mark.parametrize("d", [2, 3])
@pytest.mark.parametrize("p", range(1, 9))
def test_dynamic_equals_lookup(d, p):
    dyn = Counter()
    for c in range(2**d):
        dyn.update(trace(d, c, p))
    t = P.build_lookup(d, p)
    f, calls = P.recording_functors()
    P.traverse_lookup(t, f)
    assert Counter(calls) == dyn
    for c in range(2**d):
        a, b = P.dynamic_cell_map(d, p, c), P._lookup_cell_maps(d, p)[c]
        for fld in ("reg_local", "reg_patch", "dup_local", "dup_patch"):
            assert np.array_equal(getattr(a, fld), getattr(b, fld))


@pytest.mark.parametrize("d", [2, 3])
@pytest.mark.parametrize("p", range(1, 9))
def test_lookup_partition(d, p):
    t = P.build_lookup(d, p)
    assert sum(t.n_unique) == (2 * p - 1) ** d
    owned = np.concatenate([t.pairs[c][: t.n_unique[c], 1] for c in range(2**d)])
    assert np.array_equal(np.sort(owned), np.arange((2 * p - 1) ** d))
    for c in range(2**d):
        assert t.n_total[c] + len(t.skipped[c]) == (p + 1) ** d
        local = np.concatenate([t.pairs[c][:, 0], t.skipped[c]])
        assert np.array_equal(np.sort(local), np.arange((p + 1) ** d))
    f, calls = P.recording_functors()
    P.traverse_lookup(t, f)
    assert sum(k == "dup" for k, *_ in calls) == sum(t.n_total) - (2 * p - 1) ** d


def test_lookup_counts_2d_p3_frozen():
    t = P.build_lookup(2, 3)
    assert t.n_unique == (9, 6, 6, 4)
    assert t.n_total == (9, 9, 9, 9)
    assert tuple(len(s) for s in t.skipped) == (7, 7, 7, 7)


def test_p1_single_reg_3d():
    f, calls = P.recording_functors()
    P.traverse_lookup(P.build_lookup(3, 1), f)
    regs = [cl for cl in calls if cl[0] == "reg"]
    assert regs == [("reg", 0, 7, 0)]


@pytest.mark.parametrize("d, p", [(2, 3), (3, 2), (3, 4)])
def test_stride_law(d, p):
    K = 2 * p - 1
    for c in range(2**d):
        m = {ic: ip for kind, _, ic, ip in trace(d, c, p) if kind != "skip"}
        for k in range(d):
            step = (p + 1) ** k
            for ic, ip in m.items():
                nb = ic + step
                if (ic // step) % (p + 1) < p and nb in m:
                    assert m[nb] - ip == K**k


def setup_patches(d, r, p, delta=0.0):
    mesh = M.distort(M.build_hierarchy(d, r).finest, delta, seed=1)
    op = G.make_operator(mesh, p)
    return op, M.enumerate_patches(mesh, op.dofs)


def test_gather_ramp_and_duplicates():
    op, pl = setup_patches(2, 1, 3)
    ramp = np.arange(op.n_dofs, dtype=float)
    buf = P.patch_gather(ramp, pl, op.dofs, [0, 4])
    assert np.array_equal(buf, op.dofs.cell_dofs[pl.cells[[0, 4]]])
    f, calls = P.recording_functors()
    P.traverse_lookup(P.build_lookup(2, 3), f)
    owner = {ip: (c, ic) for kind, c, ic, ip in calls if kind == "reg"}
    for kind, c, ic, ip in calls:
        if kind == "dup":
            assert np.all(buf[:, c, ic] == buf[:, owner[ip][0], owner[ip][1]])


@pytest.mark.parametrize("strategy", P.STRATEGIES)
@pytest.mark.parametrize("d, p", [(2, 2), (3, 2)])
def test_scatter_add_oracle(strategy, d, p):
    op, pl = setup_patches(d, 1, p)
    dist = P.PatchDistributor(d, p, strategy)
    rng = np.random.default_rng(0)
    j = pl.n_patches // 2
    dj = rng.standard_normal(dist.n_interior)
    u0 = rng.standard_normal(op.n_dofs)
    u = P.patch_scatter_add(dj, pl, op.dofs, [j], u0.copy(), dist)
    # dense Pi_j^T oracle
    Pt = np.zeros((op.n_dofs, dist.n_interior))
    Pt[pl.interior_dofs[j], np.arange(dist.n_interior)] = 1.0
    assert np.allclose(u - u0, Pt @ dj, atol=1e-15)
    ones = P.patch_scatter_add(np.ones(dist.n_interior), pl, op.dofs, [j], np.zeros(op.n_dofs), dist)
    assert np.array_equal(ones[pl.interior_dofs[j]], np.ones(dist.n_interior))
    assert ones.sum() == dist.n_interior


def test_gather_scatter_roundtrip():
    op, pl = setup_patches(3, 1, 2)
    dist = P.PatchDistributor(3, 2)
    u = np.random.default_rng(2).standard_normal(op.n_dofs)
    ids = np.arange(pl.n_patches)
    x = P.patch_interior_values(P.patch_gather(u, pl, op.dofs, ids), dist)
    assert np.array_equal(x, u[pl.interior_dofs])
    back = np.zeros(op.n_dofs)
    P.patch_scatter_add(x[:1], pl, op.dofs, [0], back, dist)
    assert np.array_equal(back[pl.interior_dofs[0]], x[0])


def _local_residual(op, pl, dist, u, b, ids):
    u0 = u.copy()
    u0[op.dofs.boundary_mask] = 0.0
    uc = P.patch_gather(u0, pl, op.dofs, ids)
    cells = pl.cells[ids]
    Au = G.apply_cells(op, uc.reshape(-1, uc.shape[-1]), cells.ravel()).reshape(uc.shape)
    return P.local_residual(Au, P.patch_gather(b, pl, op.dofs, ids), dist)


@pytest.mark.parametrize("strategy", P.STRATEGIES)
def test_local_residual_single_patch(strategy):
    op, pl = setup_patches(2, 0, 3, 0.2)
    dist = P.PatchDistributor(2, 3, strategy)
    rng = np.random.default_rng(1)
    u, b = rng.standard_normal((2, op.n_dofs))
    r = _local_residual(op, pl, dist, u, b, [0])
    A = G.assemble_oracle(op)
    u0 = u.copy()
    u0[op.dofs.boundary_mask] = 0.0
    want = (b - A @ u0)[pl.interior_dofs[0]]
    assert np.allclose(r[0], want, rtol=1e-12, atol=1e-12)
    assert np.array_equal(_local_residual(op, pl, dist, np.zeros(op.n_dofs), b, [0])[0],
                          b[pl.interior_dofs[0]])


def test_local_residual_vanishes_at_solution():
    op, pl = setup_patches(2, 1, 2, 0.1)
    dist = P.PatchDistributor(2, 2)
    b = G.make_rhs(op)
    u = spla.spsolve(G.assemble_oracle(op).tocsc(), b)
    r = _local_residual(op, pl, dist, u, b, np.arange(pl.n_patches))
    assert np.abs(r).max() <= 1e-12 * np.abs(b).max()


def test_distributor_rejects_strategy():
    with pytest.raises(ValueError):
        P.PatchDistributor(2, 2, "magic")
