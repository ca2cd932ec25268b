"""Non-neural numerics: depth containers, normalization, affine alignment and
Delaunay/barycentric completion of sparse depth."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from scipy.spatial import Delaunay, QhullError

Space = Literal["metric", "normalized"]

NORM_EPS = 1e-3


class InsufficientPointsError(ValueError):
    pass


class SingularSystemError(ValueError):
    pass


class TriangulationError(ValueError):
    pass


@dataclass
class DepthMap:
    values: np.ndarray
    valid: np.ndarray = None  # type: ignore[assignment]
    space: Space = "metric"

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"DepthMap needs a 2-D array, got shape {self.values.shape}")
        if self.valid is None:
            self.valid = np.isfinite(self.values)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.valid.shape != self.values.shape:
            raise ValueError("valid mask shape differs from values")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape  # type: ignore[return-value]


@dataclass
class SparseDepth:
    """Sparse depth samples at pixel coordinates ``coords`` (row, col)."""

    coords: np.ndarray
    values: np.ndarray
    height: int
    width: int
    space: Space = "metric"

    def __post_init__(self) -> None:
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 2)
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if len(self.coords) != len(self.values):
            raise ValueError("coords and values differ in length")
        if len(self.coords) == 0:
            raise InsufficientPointsError("sparse depth needs at least one sample")
        r, c = self.coords[:, 0], self.coords[:, 1]
        if r.min() < 0 or c.min() < 0 or r.max() >= self.height or c.max() >= self.width:
            raise ValueError("sparse coordinates out of bounds")
        flat = r * self.width + c
        if len(np.unique(flat)) != len(flat):
            raise ValueError("duplicate sparse coordinates")

    def __len__(self) -> int:
        return len(self.values)

    @property
    def density(self) -> float:
        return len(self) / float(self.height * self.width)

    def with_values(self, values: np.ndarray, space: Space) -> "SparseDepth":
        return SparseDepth(self.coords.copy(), values, self.height, self.width, space)

    def to_dense(self, fill: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
        """Rasterize to ``(values, mask)`` arrays of shape [H, W]."""
        img = np.full((self.height, self.width), fill, dtype=np.float64)
        mask = np.zeros((self.height, self.width), dtype=bool)
        img[self.coords[:, 0], self.coords[:, 1]] = self.values
        mask[self.coords[:, 0], self.coords[:, 1]] = True
        return img, mask

    @classmethod
    def from_dense(cls, values: np.ndarray, mask: np.ndarray | None = None, space: Space = "metric"):
        values = np.asarray(values, dtype=np.float64)
        if mask is None:
            mask = np.isfinite(values) & (values > 0)
        rows, cols = np.nonzero(mask)
        return cls(np.stack([rows, cols], 1), values[rows, cols], values.shape[0], values.shape[1], space)


@dataclass
class AffineAlignment:
    a: float
    b: float
    residual: float
    fallback: bool = field(default=False)


def ls_align(pred: DepthMap | np.ndarray, target: SparseDepth) -> AffineAlignment:
    """Least-squares scale and shift minimising sum_i (a * pred_i + b - target_i)^2 over the samples."""
    values = pred.values if isinstance(pred, DepthMap) else np.asarray(pred, dtype=np.float64)
    if values.shape != (target.height, target.width):
        raise ValueError(f"prediction shape {values.shape} != sparse grid {(target.height, target.width)}")
    if len(target) < 2:
        raise InsufficientPointsError(f"alignment needs >= 2 samples, got {len(target)}")
    x = values[target.coords[:, 0], target.coords[:, 1]]
    y = target.values
    n = float(len(x))
    mx, my = x.mean(), y.mean()
    dx = x - mx
    sxx = float(dx @ dx)
    if sxx <= 1e-12 * max(1.0, n * mx * mx):
        raise SingularSystemError("prediction is constant over the sample set")
    a = float(dx @ (y - my)) / sxx
    b = float(my - a * mx)
    r = a * x + b - y
    return AffineAlignment(a, b, float(r @ r))


def ls_align_or_shift(pred: DepthMap | np.ndarray, target: SparseDepth) -> AffineAlignment:
    """``ls_align`` with the explicit shift-only fallback (a=1) for constant predictions."""
    try:
        return ls_align(pred, target)
    except SingularSystemError:
        values = pred.values if isinstance(pred, DepthMap) else np.asarray(pred, dtype=np.float64)
        x = values[target.coords[:, 0], target.coords[:, 1]]
        b = float(target.values.mean() - x.mean())
        r = x + b - target.values
        return AffineAlignment(1.0, b, float(r @ r), fallback=True)


def apply_affine(pred: DepthMap, align: AffineAlignment) -> DepthMap:
    return DepthMap(align.a * pred.values + align.b, pred.valid.copy(), "metric")


def invert_affine(align: AffineAlignment) -> AffineAlignment:
    if align.a == 0:
        raise SingularSystemError("zero scale is not invertible")
    return AffineAlignment(1.0 / align.a, -align.b / align.a, 0.0)


def compute_norm_stats(sparse: SparseDepth, q_lo: float = 2.0, q_hi: float = 98.0) -> tuple[float, float]:
    """Percentile range of the sample values (numpy's linear interpolation).

    A degenerate range is widened symmetrically by ``NORM_EPS``.
    """
    if len(sparse) == 0:
        raise InsufficientPointsError("no samples to compute statistics from")
    lo, hi = np.percentile(sparse.values, [q_lo, q_hi])
    lo, hi = float(lo), float(hi)
    if hi <= lo:
        c = 0.5 * (lo + hi)
        lo, hi = c - NORM_EPS, c + NORM_EPS
    return lo, hi


def normalize_values(values: np.ndarray, lo: float, hi: float, clip: bool = True) -> np.ndarray:
    if not hi > lo:
        raise ValueError(f"need hi > lo, got ({lo}, {hi})")
    values = np.asarray(values, dtype=np.float64)
    if clip:
        values = np.clip(values, lo, hi)
    return 2.0 * (values - lo) / (hi - lo) - 1.0


def denormalize_values(values: np.ndarray, lo: float, hi: float) -> np.ndarray:
    if not hi > lo:
        raise ValueError(f"need hi > lo, got ({lo}, {hi})")
    return (np.asarray(values, dtype=np.float64) + 1.0) * 0.5 * (hi - lo) + lo


def normalize_depth(depth, stats: tuple[float, float], fill: float = 0.0, clip: bool = True):
    """Map depth into [-1, 1] given ``stats=(lo, hi)``.

    Works on both :class:`DepthMap` (invalid pixels set to ``fill``) and
    :class:`SparseDepth`. ``clip=False`` keeps the affine map unclamped.
    """
    lo, hi = stats
    if isinstance(depth, SparseDepth):
        return depth.with_values(normalize_values(depth.values, lo, hi, clip), "normalized")
    out = normalize_values(np.where(depth.valid, depth.values, lo), lo, hi, clip)
    out[~depth.valid] = fill
    return DepthMap(out, depth.valid.copy(), "normalized")


def denormalize_depth(depth, stats: tuple[float, float]):
    lo, hi = stats
    if isinstance(depth, SparseDepth):
        return depth.with_values(denormalize_values(depth.values, lo, hi), "metric")
    return DepthMap(denormalize_values(depth.values, lo, hi), depth.valid.copy(), "metric")


def condition_image(sparse_norm: SparseDepth, fill: float = 0.0, channels: int = 3) -> np.ndarray:
    """Rasterize a normalized sparse condition and replicate it to ``channels``."""
    img, _ = sparse_norm.to_dense(fill)
    return np.repeat(img[None], channels, axis=0).astype(np.float32)


class Triangulation:
    """Delaunay triangulation of sample points with barycentric lookup.

    Points are sorted lexicographically first so the result does not depend on
    the order in which samples were supplied.
    """

    def __init__(self, points: np.ndarray, values: np.ndarray):
        points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        if len(points) < 3:
            raise TriangulationError(f"need >= 3 points, got {len(points)}")
        order = np.lexsort((points[:, 1], points[:, 0]))
        self.points = points[order]
        self.values = values[order]
        try:
            self._tri = Delaunay(self.points)
        except QhullError as exc:
            raise TriangulationError("points are collinear or otherwise degenerate") from exc
        if len(self._tri.simplices) == 0:
            raise TriangulationError("degenerate triangulation")

    @property
    def simplices(self) -> np.ndarray:
        return self._tri.simplices

    def barycentric(self, query: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return (simplex index, barycentric weights [N,3]); index -1 outside the hull."""
        query = np.asarray(query, dtype=np.float64).reshape(-1, 2)
        simplex = self._tri.find_simplex(query)
        weights = np.zeros((len(query), 3))
        inside = simplex >= 0
        verts = self.points[self.simplices[simplex[inside]]]  # [n,3,2]
        a, b, c = verts[:, 0], verts[:, 1], verts[:, 2]
        p = query[inside]
        v0, v1, v2 = b - a, c - a, p - a
        det = v0[:, 0] * v1[:, 1] - v0[:, 1] * v1[:, 0]
        w1 = (v2[:, 0] * v1[:, 1] - v2[:, 1] * v1[:, 0]) / det
        w2 = (v0[:, 0] * v2[:, 1] - v0[:, 1] * v2[:, 0]) / det
        weights[inside] = np.stack([1.0 - w1 - w2, w1, w2], 1)
        return simplex, weights

    def interpolate(self, query: np.ndarray, outside: float = 0.0) -> np.ndarray:
        simplex, weights = self.barycentric(query)
        out = np.full(len(weights), outside, dtype=np.float64)
        inside = simplex >= 0
        out[inside] = np.einsum("nk,nk->n", weights[inside], self.values[self.simplices[simplex[inside]]])
        return out


def barycentric_complete(sparse: SparseDepth) -> DepthMap:
    """Dense depth by barycentric interpolation inside the Delaunay triangulation.

    Pixels outside the convex hull are set to zero; the valid mask is true
    everywhere since those zeros are scored as predictions.
    """
    tri = Triangulation(sparse.coords.astype(np.float64), sparse.values)
    rr, cc = np.mgrid[0 : sparse.height, 0 : sparse.width]
    query = np.stack([rr.ravel(), cc.ravel()], 1).astype(np.float64)
    out = tri.interpolate(query, outside=0.0).reshape(sparse.height, sparse.width)
    out[sparse.coords[:, 0], sparse.coords[:, 1]] = sparse.values
    return DepthMap(out, np.ones_like(out, dtype=bool), sparse.space)
