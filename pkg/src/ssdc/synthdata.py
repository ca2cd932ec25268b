"""Procedural RGB-D toy scenes and sparse-depth samplers.

Scenes are ray cast analytically through a pinhole camera (focal length equal
to the image width). Depth is the z-distance along the optical axis. RGB is
Lambertian shading under a fixed light plus distance fog, so image intensity
carries coarse geometric cues.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Literal

import numpy as np

from .geometry import DepthMap, SparseDepth

Domain = Literal["indoor", "outdoor"]

DEPTH_RANGE = {"indoor": (0.5, 10.0), "outdoor": (1.0, 80.0)}
PRIMITIVES = {"indoor": (3, 8), "outdoor": (2, 6)}
LIGHT = np.array([-0.4, -0.8, -0.45]) / np.linalg.norm([-0.4, -0.8, -0.45])


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    domain: Domain = "indoor"
    resolution: tuple[int, int] = (64, 64)
    primitive_range: tuple[int, int] | None = None

    def __post_init__(self) -> None:
        h, w = self.resolution
        if h <= 0 or w <= 0 or h % 8 or w % 8:
            raise ValueError(f"resolution {self.resolution} must be positive and divisible by 8")
        if self.domain not in DEPTH_RANGE:
            raise ValueError(f"unknown domain {self.domain!r}")

    @property
    def depth_range(self) -> tuple[float, float]:
        return DEPTH_RANGE[self.domain]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        pr = d.get("primitive_range")
        return cls(int(d["seed"]), d["domain"], tuple(d["resolution"]), tuple(pr) if pr is not None else None)


@dataclass(frozen=True)
class DensityProtocol:
    """``fixed_count`` draws exactly ``count`` samples; ``density_range`` draws a
    density uniformly from [low, high] percent first."""

    mode: Literal["fixed_count", "density_range"] = "density_range"
    count: int = 0
    low: float = 0.16
    high: float = 5.0

    def __post_init__(self) -> None:
        if self.mode == "fixed_count":
            if self.count < 1:
                raise ValueError("fixed_count needs count >= 1")
        elif self.mode == "density_range":
            if not 0 < self.low <= self.high <= 100:
                raise ValueError(f"need 0 < low <= high <= 100, got {self.low}, {self.high}")
        else:
            raise ValueError(f"unknown sampling mode {self.mode!r}")

    def count_bounds(self, n_valid: int) -> tuple[int, int]:
        if self.mode == "fixed_count":
            return self.count, self.count
        if self.low == self.high:
            # a single density: nearest count
            n = max(1, int(math.floor(self.low / 100 * n_valid + 0.5)))
            return n, n
        return max(1, math.ceil(self.low / 100 * n_valid - 1e-9)), math.floor(self.high / 100 * n_valid + 1e-9)


DENSITY_PRESETS = {
    "full": DensityProtocol("density_range", low=0.16, high=5.0),
    "low": DensityProtocol("density_range", low=0.16, high=0.5),
}


def density_preset(name: str) -> DensityProtocol:
    try:
        return DENSITY_PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown density preset {name!r}; choose from {sorted(DENSITY_PRESETS)}") from None


def fixed_density(percent: float) -> DensityProtocol:
    return DensityProtocol("density_range", low=percent, high=percent)


# ---------------------------------------------------------------------------
# ray casting


def _rotation(yaw: float, pitch: float) -> np.ndarray:
    cy, sy, cp, sp = math.cos(yaw), math.sin(yaw), math.cos(pitch), math.sin(pitch)
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rx = np.array([[1, 0, 0], [0, cp, -sp], [0, sp, cp]])
    return ry @ rx


class _Hits:
    def __init__(self, n: int):
        self.t = np.full(n, np.inf)
        self.normal = np.zeros((n, 3))
        self.color = np.zeros((n, 3))

    def update(self, t: np.ndarray, normal: np.ndarray, color) -> None:
        closer = (t > 1e-6) & (t < self.t)
        self.t[closer] = t[closer]
        self.normal[closer] = normal[closer] if normal.ndim == 2 else normal
        color = np.asarray(color, dtype=np.float64)
        self.color[closer] = color[closer] if color.ndim == 2 else color


def _plane(hits: _Hits, o: np.ndarray, d: np.ndarray, normal, offset: float, color) -> None:
    """Plane n.p = offset; ``normal`` faces the camera."""
    normal = np.asarray(normal, dtype=np.float64)
    denom = d @ normal
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (offset - o @ normal) / denom
    t = np.where(denom < -1e-9, t, np.inf)
    if callable(color):
        color = color(o + np.where(np.isfinite(t), t, 0.0)[:, None] * d)
    hits.update(t, normal, color)


def _box(hits: _Hits, o: np.ndarray, d: np.ndarray, lo: np.ndarray, hi: np.ndarray, color) -> None:
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (lo - o) * inv
        t2 = (hi - o) * inv
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    t_near = np.nanmax(tmin, axis=1)
    t_far = np.nanmin(tmax, axis=1)
    hit = (t_near <= t_far) & (t_near > 1e-6)
    axis = np.nanargmax(tmin, axis=1)
    normal = np.zeros((len(d), 3))
    idx = np.arange(len(d))
    normal[idx, axis] = -np.sign(d[idx, axis])
    hits.update(np.where(hit, t_near, np.inf), normal, color)


def _sphere(hits: _Hits, o: np.ndarray, d: np.ndarray, center: np.ndarray, radius: float, color) -> None:
    oc = o - center
    a = np.einsum("ij,ij->i", d, d)
    b = 2.0 * d @ oc
    c = oc @ oc - radius * radius
    disc = b * b - 4 * a * c
    sq = np.sqrt(np.maximum(disc, 0.0))
    t = (-b - sq) / (2 * a)
    t = np.where(disc >= 0, t, np.inf)
    p = o + np.where(np.isfinite(t), t, 0.0)[:, None] * d
    normal = (p - center) / radius
    hits.update(t, normal, color)


def _checker(scale: float, c0, c1):
    c0, c1 = np.asarray(c0, float), np.asarray(c1, float)

    def color(p: np.ndarray) -> np.ndarray:
        k = (np.floor(p[:, 0] / scale) + np.floor(p[:, 2] / scale)).astype(np.int64) % 2
        return np.where(k[:, None] == 0, c0, c1)

    return color


def _rays(h: int, w: int, rot: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    f = float(w)
    rr, cc = np.mgrid[0:h, 0:w]
    cam = np.stack([(cc + 0.5 - w / 2) / f, (rr + 0.5 - h / 2) / f, np.ones((h, w))], -1).reshape(-1, 3)
    # with unit optical-axis component, the ray parameter t equals z-depth
    return cam, cam @ rot.T


def generate_scene(spec: SceneSpec, n_primitives: int | None = None) -> tuple[np.ndarray, DepthMap]:
    """Render ``(rgb uint8 [H,W,3], metric DepthMap)``; deterministic in ``spec``."""
    rng = np.random.default_rng(spec.seed)
    h, w = spec.resolution
    dmin, dmax = spec.depth_range
    lo_n, hi_n = spec.primitive_range or PRIMITIVES[spec.domain]
    if n_primitives is None:
        n_primitives = int(rng.integers(lo_n, hi_n + 1))
    yaw = rng.uniform(-0.35, 0.35)
    pitch = rng.uniform(-0.15, 0.15)
    rot = _rotation(yaw, pitch)
    cam_dirs, d = _rays(h, w, rot)
    o = np.zeros(3)
    hits = _Hits(len(d))

    if spec.domain == "indoor":
        cam_h = rng.uniform(1.2, 1.7)
        ceil_h = rng.uniform(2.4, 3.2) - cam_h
        half_w = rng.uniform(1.5, 4.0)
        x_off = rng.uniform(-0.5, 0.5)
        back = rng.uniform(4.0, 9.5)
        wall = rng.uniform(0.35, 0.9, 3)
        _plane(hits, o, d, [0, -1, 0], -cam_h, _checker(0.5, rng.uniform(0.2, 0.6, 3), rng.uniform(0.4, 0.9, 3)))
        _plane(hits, o, d, [0, 1, 0], -ceil_h, np.full(3, 0.85))
        _plane(hits, o, d, [1, 0, 0], x_off - half_w, wall)
        _plane(hits, o, d, [-1, 0, 0], -(x_off + half_w), wall * 0.9)
        _plane(hits, o, d, [0, 0, -1], -back, rng.uniform(0.3, 0.9, 3))
        for _ in range(n_primitives):
            z = rng.uniform(1.2, back - 0.3)
            x = x_off + rng.uniform(-half_w + 0.3, half_w - 0.3)
            col = rng.uniform(0.15, 1.0, 3)
            if rng.random() < 0.5:
                size = rng.uniform(0.25, 0.9, 3)
                lo = np.array([x - size[0] / 2, cam_h - size[1] * 1.6, z - size[2] / 2])
                hi = np.array([x + size[0] / 2, cam_h, z + size[2] / 2])
                _box(hits, o, d, lo, hi, col)
            else:
                r = rng.uniform(0.2, 0.6)
                _sphere(hits, o, d, np.array([x, cam_h - r, z]), r, col)
        fog_dist = 12.0
        fog_col = np.array([0.75, 0.72, 0.68])
    else:
        cam_h = rng.uniform(1.5, 2.2)
        _plane(hits, o, d, [0, -1, 0], -cam_h, _checker(4.0, [0.3, 0.3, 0.32], [0.38, 0.37, 0.36]))
        for _ in range(n_primitives):
            z = rng.uniform(8.0, 60.0)
            x = rng.uniform(-0.6, 0.6) * z
            size = np.array([rng.uniform(2, 8), rng.uniform(2, 12), rng.uniform(2, 8)])
            lo = np.array([x - size[0] / 2, cam_h - size[1], z - size[2] / 2])
            hi = np.array([x + size[0] / 2, cam_h, z + size[2] / 2])
            _box(hits, o, d, lo, hi, rng.uniform(0.2, 0.9, 3))
        fog_dist = 90.0
        fog_col = np.array([0.7, 0.78, 0.9])

    depth = hits.t * 1.0
    if spec.domain == "outdoor":
        sky = ~np.isfinite(depth) | (depth > dmax)
    else:
        sky = np.zeros(len(depth), bool)
    depth = np.clip(np.where(np.isfinite(depth), depth, dmax), dmin, dmax)

    shade = 0.35 + 0.65 * np.clip(hits.normal @ -LIGHT, 0.0, 1.0)
    rgb = hits.color * shade[:, None]
    fog = 1.0 - np.exp(-depth / fog_dist)
    rgb = rgb * (1 - fog[:, None]) + fog_col * fog[:, None]
    if sky.any():
        up = np.clip(-d[:, 1] / np.linalg.norm(d, axis=1), 0, 1)
        sky_col = np.array([0.55, 0.7, 0.95]) * (1 - up[:, None]) + np.array([0.25, 0.45, 0.85]) * up[:, None]
        rgb[sky] = sky_col[sky]
    rgb = np.clip(rgb, 0, 1).reshape(h, w, 3)
    rgb8 = np.round(rgb * 255).astype(np.uint8)
    return rgb8, DepthMap(depth.reshape(h, w), np.ones((h, w), bool), "metric")


# ---------------------------------------------------------------------------
# sparse sampling


def sample_sparse(depth: DepthMap, protocol: DensityProtocol, seed) -> SparseDepth:
    """Uniformly sample valid pixels without replacement."""
    rng = np.random.default_rng(seed)
    rows, cols = np.nonzero(depth.valid)
    n_valid = len(rows)
    lo, hi = protocol.count_bounds(n_valid)
    if protocol.mode == "fixed_count":
        count = protocol.count
    else:
        density = rng.uniform(protocol.low, protocol.high) / 100.0
        count = int(np.clip(round(density * n_valid), lo, hi))
    if count > n_valid or count < 1:
        raise ValueError(f"cannot draw {count} samples from {n_valid} valid pixels")
    pick = np.sort(rng.choice(n_valid, size=count, replace=False))
    coords = np.stack([rows[pick], cols[pick]], 1)
    h, w = depth.shape
    return SparseDepth(coords, depth.values[rows[pick], cols[pick]], h, w, "metric")


# ---------------------------------------------------------------------------
# dataset manifests


@dataclass
class DatasetManifest:
    scenes: list[SceneSpec]
    seed: int
    indoor_ratio: float = 0.9
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.scenes)

    def counts(self) -> dict[str, int]:
        out = {"indoor": 0, "outdoor": 0}
        for s in self.scenes:
            out[s.domain] += 1
        return out

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "indoor_ratio": self.indoor_ratio,
            "meta": self.meta,
            "scenes": [s.to_dict() for s in self.scenes],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        return cls([SceneSpec.from_dict(s) for s in d["scenes"]], int(d["seed"]), float(d["indoor_ratio"]), d.get("meta", {}))

    def epoch_order(self, epoch: int) -> np.ndarray:
        """Fixed-seed shuffled scene order for one pass over the data."""
        return np.random.default_rng([self.seed, epoch]).permutation(len(self.scenes))


@dataclass
class Scene:
    """A rendered scene: uint8 RGB [H,W,3] and metric depth."""

    rgb: np.ndarray
    depth: DepthMap
    domain: str = "indoor"
    id: str = ""


def render_scenes(manifest: DatasetManifest) -> list[Scene]:
    out = []
    for i, spec in enumerate(manifest.scenes):
        rgb, depth = generate_scene(spec)
        out.append(Scene(rgb, depth, spec.domain, f"{i:05d}"))
    return out


def make_dataset(
    n_scenes: int,
    seed: int = 0,
    indoor_ratio: float = 0.9,
    resolution: tuple[int, int] = (64, 64),
    exact_ratio: bool = True,
) -> DatasetManifest:
    """Scene manifest mixing indoor and outdoor scenes (9:1 by default).

    Scene seeds are derived from ``seed`` so that manifests built from
    different base seeds do not share scenes.
    """
    if n_scenes < 1:
        raise ValueError("n_scenes must be >= 1")
    if exact_ratio and n_scenes < 10:
        raise ValueError("exact-ratio mode needs at least 10 scenes")
    rng = np.random.default_rng(seed)
    if exact_ratio:
        n_in = int(round(indoor_ratio * n_scenes))
        domains = ["indoor"] * n_in + ["outdoor"] * (n_scenes - n_in)
        domains = [domains[i] for i in rng.permutation(n_scenes)]
    else:
        domains = ["indoor" if u < indoor_ratio else "outdoor" for u in rng.random(n_scenes)]
    seeds = rng.integers(0, 2**31 - 1, size=n_scenes)
    scenes = [SceneSpec(int(s), dom, tuple(resolution)) for s, dom in zip(seeds, domains)]
    return DatasetManifest(scenes, seed, indoor_ratio)
