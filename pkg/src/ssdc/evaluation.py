"""Metrics, method wrappers, sparsity sweeps and the timing harness.

A *method* maps ``(rgb, sparse_metric)`` to a metric ``DepthMap``. Every
method in a sweep sees the same sparse samples per image and density, so
comparisons between methods are paired.
"""

from __future__ import annotations

import csv
import json
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

from .geometry import DepthMap, SparseDepth, barycentric_complete
from .pipeline import align_to_metric, complete_single_step, estimate_multi_step
from .synthdata import DensityProtocol, Scene, fixed_density, sample_sparse

# ---------------------------------------------------------------------------
# metrics


def _error(pred: DepthMap | np.ndarray, gt: DepthMap | np.ndarray) -> np.ndarray:
    p = pred.values if isinstance(pred, DepthMap) else np.asarray(pred, float)
    if isinstance(gt, DepthMap):
        g, valid = gt.values, gt.valid
    else:
        g = np.asarray(gt, float)
        valid = np.ones(g.shape, bool)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    if not valid.any():
        raise ValueError("ground truth has no valid pixels")
    return p[valid] - g[valid]


def mae(pred: DepthMap | np.ndarray, gt: DepthMap | np.ndarray) -> float:
    """Mean absolute error over ground-truth-valid pixels."""
    return float(np.mean(np.abs(_error(pred, gt))))


def rmse(pred: DepthMap | np.ndarray, gt: DepthMap | np.ndarray) -> float:
    return float(np.sqrt(np.mean(_error(pred, gt) ** 2)))


# ---------------------------------------------------------------------------
# reports


@dataclass(frozen=True)
class ImageResult:
    id: str
    mae: float
    rmse: float
    time_s: float = 0.0


@dataclass
class MetricsReport:
    method: str
    density: str
    per_image: list[ImageResult] = field(default_factory=list)

    def __post_init__(self) -> None:
        for r in self.per_image:
            # tolerate float rounding when the error field is constant
            if r.mae > r.rmse * (1 + 1e-12) + 1e-15:
                raise ValueError(f"MAE > RMSE for image {r.id}")

    def _col(self, name: str) -> np.ndarray:
        if not self.per_image:
            raise ValueError("empty report")
        return np.array([getattr(r, name) for r in self.per_image])

    @property
    def mean_mae(self) -> float:
        return float(self._col("mae").mean())

    @property
    def mean_rmse(self) -> float:
        return float(self._col("rmse").mean())

    @property
    def median_rmse(self) -> float:
        return float(np.median(self._col("rmse")))

    @property
    def mean_time(self) -> float:
        return float(self._col("time_s").mean())

    @property
    def fps(self) -> float:
        t = self.mean_time
        return 1.0 / t if t > 0 else float("inf")

    def aggregates(self, include_time: bool = True) -> dict[str, float]:
        out = {"mean_mae": self.mean_mae, "mean_rmse": self.mean_rmse, "median_rmse": self.median_rmse}
        if include_time:
            out.update(mean_time_s=self.mean_time, fps=self.fps)
        return out

    def to_dict(self, include_time: bool = True) -> dict:
        rows = [asdict(r) for r in self.per_image]
        if not include_time:
            for r in rows:
                r.pop("time_s")
        return {"method": self.method, "density": self.density, "aggregates": self.aggregates(include_time), "per_image": rows}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        """Inverse of ``to_dict``; aggregates are recomputed, not read."""
        return cls(d["method"], d["density"], [ImageResult(**r) for r in d["per_image"]])

    def write_json(self, path: str | Path, include_time: bool = True) -> None:
        Path(path).write_text(json.dumps(self.to_dict(include_time), indent=2, sort_keys=True))


PER_IMAGE_FIELDS = ["method", "density", "id", "mae", "rmse", "time_s"]
LONG_FIELDS = ["method", "density", "metric", "value"]


def write_reports_csv(reports: Sequence[MetricsReport], path: str | Path, include_time: bool = True) -> None:
    """One row per (method, density, image)."""
    fields = PER_IMAGE_FIELDS if include_time else PER_IMAGE_FIELDS[:-1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(fields)
        for rep in reports:
            for r in rep.per_image:
                row = [rep.method, rep.density, r.id, repr(r.mae), repr(r.rmse)]
                w.writerow(row + [repr(r.time_s)] if include_time else row)


def write_long_csv(reports: Sequence[MetricsReport], path: str | Path, include_time: bool = True) -> None:
    """Plot-ready aggregates: (method, density, metric, value)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LONG_FIELDS)
        for rep in reports:
            for k, v in rep.aggregates(include_time).items():
                w.writerow([rep.method, rep.density, k, repr(v)])


def read_reports_csv(path: str | Path) -> list[MetricsReport]:
    """Rebuild reports from a per-image CSV; aggregates are recomputed."""
    groups: dict[tuple[str, str], list[ImageResult]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            key = (row["method"], row["density"])
            groups.setdefault(key, []).append(
                ImageResult(row["id"], float(row["mae"]), float(row["rmse"]), float(row.get("time_s") or 0.0))
            )
    return [MetricsReport(m, d, rows) for (m, d), rows in groups.items()]


# ---------------------------------------------------------------------------
# methods


class Method(Protocol):
    name: str

    def __call__(self, rgb: np.ndarray, sparse: SparseDepth) -> DepthMap: ...


class ModelMethod:
    """Single-step model followed by least-squares alignment.

    On an unconditional model this is the unconditional single-step + LS
    baseline; the condition is then used for alignment only.
    """

    def __init__(self, model, name: str | None = None, fill: float = 0.0):
        self.model = model.eval()
        self.name = name or model.variant
        self.fill = fill

    def __call__(self, rgb: np.ndarray, sparse: SparseDepth) -> DepthMap:
        return complete_single_step(rgb, sparse, self.model, fill=self.fill).metric_depth


class MultiStepMethod:
    """n-step DDIM depth estimate (no condition) aligned to the samples."""

    def __init__(self, model, n_steps: int = 50, seed: int | None = 0, name: str | None = None):
        self.model = model.eval()
        self.n_steps = n_steps
        self.seed = seed
        self.name = name or f"ddim{n_steps}"

    def __call__(self, rgb: np.ndarray, sparse: SparseDepth) -> DepthMap:
        rel = estimate_multi_step(rgb, self.n_steps, self.seed, self.model)
        return align_to_metric(rel, sparse)[0]


class BarycentricMethod:
    name = "barycentric"

    def __call__(self, rgb: np.ndarray, sparse: SparseDepth) -> DepthMap:
        return barycentric_complete(sparse)


# ---------------------------------------------------------------------------
# evaluation


def density_tag(protocol: DensityProtocol) -> str:
    if protocol.mode == "fixed_count":
        return f"n{protocol.count}"
    if protocol.low == protocol.high:
        return f"{protocol.low:g}%"
    return f"{protocol.low:g}-{protocol.high:g}%"


def sample_seed(seed: int, image_index: int, tag: str) -> list[int]:
    """Sampling seed shared by every method for one (image, density) pair."""
    return [seed, image_index, int.from_bytes(tag.encode(), "little") % (2**32)]


def draw_samples(images: Sequence[Scene], protocol: DensityProtocol, seed: int) -> list[SparseDepth]:
    tag = density_tag(protocol)
    return [sample_sparse(s.depth, protocol, sample_seed(seed, i, tag)) for i, s in enumerate(images)]


def evaluate(
    method: Method,
    images: Sequence[Scene],
    protocol: DensityProtocol,
    seed: int = 0,
    samples: Sequence[SparseDepth] | None = None,
) -> MetricsReport:
    """Score one method at one density; per-image wall time is recorded."""
    samples = samples if samples is not None else draw_samples(images, protocol, seed)
    rows = []
    for i, (scene, sp) in enumerate(zip(images, samples)):
        start = time.perf_counter()
        pred = method(scene.rgb, sp)
        elapsed = time.perf_counter() - start
        rows.append(ImageResult(scene.id or str(i), mae(pred, scene.depth), rmse(pred, scene.depth), elapsed))
    return MetricsReport(method.name, density_tag(protocol), rows)


def sparsity_sweep(
    methods: Sequence[Method],
    densities: Sequence[float | DensityProtocol],
    images: Sequence[Scene],
    seed: int = 0,
) -> list[MetricsReport]:
    """Every method at every density, with per-image samples shared across methods."""
    protocols = [d if isinstance(d, DensityProtocol) else fixed_density(float(d)) for d in densities]
    for proto in protocols:
        for s in images:
            lo, hi = proto.count_bounds(int(s.depth.valid.sum()))
            if lo > hi or lo < 3:
                raise ValueError(f"density {density_tag(proto)} infeasible for image {s.id}")
    reports = []
    for proto in protocols:
        samples = draw_samples(images, proto, seed)
        for m in methods:
            reports.append(evaluate(m, images, proto, seed, samples))
    return reports


def is_non_increasing(values: Sequence[float], rtol: float = 0.0) -> bool:
    return all(b <= a * (1 + rtol) for a, b in zip(values, values[1:]))


# ---------------------------------------------------------------------------
# timing


@dataclass
class TimingResult:
    name: str
    seconds: float  # per image, median over repeats
    repeats: list[float]

    @property
    def fps(self) -> float:
        return 1.0 / self.seconds

    def speedup_over(self, slow: "TimingResult") -> float:
        return slow.seconds / self.seconds


def time_method(
    method: Callable[[np.ndarray, SparseDepth], DepthMap],
    images: Sequence[Scene],
    samples: Sequence[SparseDepth],
    warmups: int = 2,
    repeats: int = 20,
    name: str | None = None,
) -> TimingResult:
    """Per-image wall time: each repeat is one sequential pass over ``images``;
    the reported time is the median over repeats."""
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    for _ in range(warmups):
        method(images[0].rgb, samples[0])
    per_image = []
    for _ in range(repeats):
        start = time.perf_counter()
        for scene, sp in zip(images, samples):
            method(scene.rgb, sp)
        per_image.append((time.perf_counter() - start) / len(images))
    return TimingResult(name or getattr(method, "name", "method"), statistics.median(per_image), per_image)
