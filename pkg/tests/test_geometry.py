import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from ssdc.geometry import (
    AffineAlignment,
    DepthMap,
    InsufficientPointsError,
    SingularSystemError,
    SparseDepth,
    TriangulationError,
    apply_affine,
    barycentric_complete,
    compute_norm_stats,
    denormalize_depth,
    invert_affine,
    ls_align,
    ls_align_or_shift,
    normalize_depth,
)

from oracles import grid_oracle


def sparse_from(pred_shape, coords, values):
    return SparseDepth(np.asarray(coords), np.asarray(values, float), *pred_shape)


# -- ls_align -----------------------------------------------------------------


def test_ls_align_identity():
    pred = np.arange(12, dtype=float).reshape(3, 4)
    coords = [(0, 1), (1, 2), (2, 3)]
    al = ls_align(pred, sparse_from(pred.shape, coords, [pred[r, c] for r, c in coords]))
    assert al.a == pytest.approx(1.0) and al.b == pytest.approx(0.0, abs=1e-12)
    assert al.residual == pytest.approx(0.0, abs=1e-20)


def test_ls_align_hand_case():
    pred = np.zeros((1, 3))
    pred[0] = [1, 2, 3]
    al = ls_align(pred, sparse_from(pred.shape, [(0, 0), (0, 1), (0, 2)], [3, 5, 7]))
    assert (al.a, al.b) == pytest.approx((2.0, 1.0))
    assert al.residual == pytest.approx(0.0, abs=1e-20)


def test_ls_align_errors():
    pred = np.ones((2, 2))
    with pytest.raises(InsufficientPointsError):
        ls_align(pred, sparse_from(pred.shape, [(0, 0)], [1.0]))
    with pytest.raises(SingularSystemError):
        ls_align(pred, sparse_from(pred.shape, [(0, 0), (1, 1)], [1.0, 2.0]))


def test_shift_only_fallback_is_flagged():
    pred = np.full((2, 2), 3.0)
    al = ls_align_or_shift(pred, sparse_from(pred.shape, [(0, 0), (1, 1)], [1.0, 2.0]))
    assert al.fallback and al.a == 1.0 and al.b == pytest.approx(-1.5)


@pytest.mark.parametrize("seed", range(100))
def test_ls_align_matches_grid_oracle(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 12))
    x = rng.uniform(-2, 2, n)
    y = rng.uniform(-3, 3) * x + rng.uniform(-5, 5) + rng.normal(0, 0.5, n)
    pred = np.zeros((1, n))
    pred[0] = x
    al = ls_align(pred, sparse_from(pred.shape, [(0, i) for i in range(n)], y))
    a, b, res = grid_oracle(x, y)
    assert al.a == pytest.approx(a, abs=1e-4)
    assert al.b == pytest.approx(b, abs=1e-4)
    assert al.residual <= res + 1e-12


# -- apply_affine -------------------------------------------------------------


def test_apply_affine_examples():
    d = DepthMap(np.array([[0.0, 0.5]]), np.array([[True, False]]), "normalized")
    ident = apply_affine(d, AffineAlignment(1.0, 0.0, 0.0))
    np.testing.assert_array_equal(ident.values, d.values)
    out = apply_affine(d, AffineAlignment(2.0, 1.0, 0.0))
    np.testing.assert_allclose(out.values, [[1.0, 2.0]])
    np.testing.assert_array_equal(out.valid, d.valid)
    g = AffineAlignment(3.5, -2.0, 0.0)
    back = apply_affine(apply_affine(d, g), invert_affine(g))
    np.testing.assert_allclose(back.values, d.values, atol=1e-6)


# -- normalization ------------------------------------------------------------


def test_normalize_examples():
    sp = sparse_from((1, 3), [(0, 0), (0, 1), (0, 2)], [2.0, 6.0, 10.0])
    out = normalize_depth(sp, (2.0, 10.0))
    np.testing.assert_allclose(out.values, [-1.0, 0.0, 1.0])
    assert out.space == "normalized"
    with pytest.raises(ValueError):
        normalize_depth(sp, (3.0, 3.0))


def test_normalize_fill_and_clip():
    d = DepthMap(np.array([[1.0, 5.0, 20.0]]), np.array([[True, False, True]]))
    out = normalize_depth(d, (2.0, 10.0), fill=0.25)
    np.testing.assert_allclose(out.values, [[-1.0, 0.25, 1.0]])
    raw = normalize_depth(d, (2.0, 10.0), clip=False)
    assert raw.values[0, 2] == pytest.approx(3.5)


@given(st.lists(st.floats(0.5, 80.0), min_size=1, max_size=30), st.floats(0.1, 10), st.floats(0.1, 70))
def test_normalize_round_trip_and_monotone(vals, lo, width):
    hi = lo + width
    vals = np.clip(np.asarray(vals), lo, hi)
    sp = sparse_from((1, len(vals)), [(0, i) for i in range(len(vals))], vals)
    n = normalize_depth(sp, (lo, hi))
    np.testing.assert_allclose(denormalize_depth(n, (lo, hi)).values, vals, rtol=1e-6, atol=1e-6)
    order = np.argsort(vals, kind="stable")
    assert np.all(np.diff(n.values[order]) >= -1e-12)
    # idempotent on already normalized data with stats (-1, 1)
    np.testing.assert_allclose(normalize_depth(n, (-1.0, 1.0)).values, n.values, atol=1e-12)


def test_norm_stats_examples():
    sp = sparse_from((1, 100), [(0, i) for i in range(100)], np.arange(1, 101, dtype=float))
    assert compute_norm_stats(sp) == pytest.approx((2.98, 98.02))
    two = sparse_from((1, 2), [(0, 0), (0, 1)], [0.0, 10.0])
    assert compute_norm_stats(two, 0, 100) == (0.0, 10.0)
    const = sparse_from((1, 3), [(0, 0), (0, 1), (0, 2)], [4.0, 4.0, 4.0])
    lo, hi = compute_norm_stats(const)
    assert lo < 4.0 < hi and hi - lo == pytest.approx(2e-3)


def test_sparse_depth_validation():
    with pytest.raises(ValueError):
        SparseDepth(np.array([[0, 0], [0, 0]]), np.array([1.0, 2.0]), 2, 2)
    with pytest.raises(ValueError):
        SparseDepth(np.array([[2, 0]]), np.array([1.0]), 2, 2)
    with pytest.raises(InsufficientPointsError):
        SparseDepth(np.zeros((0, 2)), np.zeros(0), 2, 2)
    sp = SparseDepth(np.array([[0, 0], [1, 1]]), np.array([1.0, 2.0]), 4, 5)
    assert sp.density == pytest.approx(2 / 20)


# -- barycentric ---------------------------------------------------------------


def plane(r, c):
    return 2 * r + 3 * c + 1


def test_barycentric_plane_exact():
    coords = np.array([[1, 1], [1, 14], [12, 3], [10, 12], [6, 7]])
    sp = sparse_from((16, 16), coords, plane(coords[:, 0], coords[:, 1]).astype(float))
    out = barycentric_complete(sp)
    rr, cc = np.mgrid[0:16, 0:16]
    # pixels strictly inside the hull reproduce the plane; spot-check the centroid region
    inside = out.values > 0
    np.testing.assert_allclose(out.values[inside], plane(rr, cc)[inside], atol=1e-6)
    assert out.values[0, 0] == 0.0  # outside the hull
    assert out.valid.all()


def test_barycentric_centroid_of_unit_triangle():
    # triangle (0,0), (0,3), (3,0) has its centroid on pixel (1,1)
    sp = sparse_from((4, 4), [(0, 0), (0, 3), (3, 0)], [3.0, 5.0, 7.0])
    assert barycentric_complete(sp).values[1, 1] == pytest.approx(5.0)


def test_barycentric_sample_values_exact():
    rng = np.random.default_rng(3)
    flat = rng.choice(400, 30, replace=False)
    coords = np.stack([flat // 20, flat % 20], 1)
    vals = rng.uniform(1, 10, 30)
    out = barycentric_complete(sparse_from((20, 20), coords, vals))
    np.testing.assert_array_equal(out.values[coords[:, 0], coords[:, 1]], vals)


def test_barycentric_degenerate():
    with pytest.raises(TriangulationError):
        barycentric_complete(sparse_from((8, 8), [(0, 0), (1, 1)], [1.0, 2.0]))
    with pytest.raises(TriangulationError):
        barycentric_complete(sparse_from((8, 8), [(0, 0), (1, 1), (2, 2), (5, 5)], [1.0, 2.0, 3.0, 4.0]))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(3, 40))
def test_barycentric_affine_property_and_order_invariance(seed, n):
    rng = np.random.default_rng(seed)
    h, w = 24, 20
    flat = rng.choice(h * w, n, replace=False)
    coords = np.stack([flat // w, flat % w], 1)
    assume(np.linalg.matrix_rank(np.c_[coords, np.ones(n)]) == 3)
    a, b, c = rng.uniform(-2, 2, 3)
    field = lambda r, q: a * r + b * q + c + 50.0  # noqa: E731 -- keep values positive
    vals = field(coords[:, 0], coords[:, 1])
    out = barycentric_complete(sparse_from((h, w), coords, vals))
    from scipy.spatial import Delaunay

    hull = Delaunay(coords.astype(float))
    rr, cc = np.mgrid[0:h, 0:w]
    q = np.stack([rr.ravel(), cc.ravel()], 1).astype(float)
    inside = (hull.find_simplex(q) >= 0).reshape(h, w)
    np.testing.assert_allclose(out.values[inside], field(rr, cc)[inside], atol=1e-6)
    assert np.all(out.values[~inside] == 0.0)
    perm = rng.permutation(n)
    out2 = barycentric_complete(sparse_from((h, w), coords[perm], vals[perm]))
    np.testing.assert_array_equal(out.values, out2.values)
