"""Inference paths: single-step completion, multi-step DDIM estimation and
median ensembling."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor

from .geometry import (
    AffineAlignment,
    DepthMap,
    SingularSystemError,
    SparseDepth,
    apply_affine,
    barycentric_complete,
    compute_norm_stats,
    condition_image,
    ls_align,
    normalize_depth,
    normalize_values,
)
from .models.variants import DepthCompletionModel
from .scheduler import ddim_step, trailing_timesteps


@dataclass
class CompletionResult:
    relative_depth: DepthMap
    metric_depth: DepthMap
    a: float
    b: float
    wall_time: float
    stats: tuple[float, float] = (0.0, 1.0)


def rgb_to_tensor(rgb: np.ndarray | Tensor) -> Tensor:
    """uint8 [H,W,3] (or float [3,H,W] already in [-1,1]) -> float [1,3,H,W] in [-1,1]."""
    if torch.is_tensor(rgb):
        return rgb if rgb.dim() == 4 else rgb[None]
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected RGB [H,W,3], got {rgb.shape}")
    x = torch.from_numpy(np.ascontiguousarray(rgb.transpose(2, 0, 1))).float()
    return (x / 127.5 - 1.0)[None]


def prepare_condition(
    sparse_metric: SparseDepth,
    mode: str = "sparse",
    fill: float = 0.0,
    q: tuple[float, float] = (2.0, 98.0),
) -> tuple[np.ndarray, tuple[float, float]]:
    """Normalized, 3-channel condition image [3,H,W] and the stats used.

    ``mode="interpolated"`` pre-completes the samples by barycentric
    interpolation; pixels outside the hull get ``fill``.
    """
    stats = compute_norm_stats(sparse_metric, *q)
    if mode == "sparse":
        return condition_image(normalize_depth(sparse_metric, stats), fill), stats
    if mode == "interpolated":
        dense = barycentric_complete(sparse_metric).values
        inside = dense > 0
        img = np.where(inside, normalize_values(np.where(inside, dense, stats[0]), *stats), fill)
        return np.repeat(img[None], 3, 0).astype(np.float32), stats
    raise ValueError(f"unknown condition mode {mode!r}")


def complete_single_step(
    rgb: np.ndarray | Tensor,
    sparse_metric: SparseDepth,
    model: DepthCompletionModel,
    cond: np.ndarray | None = None,
    fill: float = 0.0,
) -> CompletionResult:
    """One denoiser pass from x_T = 0, conditional decode, then least-squares
    scale/shift to the metric samples."""
    if len(sparse_metric) < 2:
        raise ValueError("need at least two sparse samples")
    start = time.perf_counter()
    if cond is None:
        cond, stats = prepare_condition(sparse_metric, model.condition_mode, fill)
    else:
        stats = compute_norm_stats(sparse_metric)
    x = rgb_to_tensor(rgb)
    c = torch.from_numpy(np.asarray(cond, dtype=np.float32))[None]
    with torch.no_grad():
        m = model.encode_rgb(x)
        x0 = model.predict_latent(m, c if model.uses_condition else None)
        d_hat = model.decode_depth(x0, c)[0].double().numpy()
    rel = DepthMap(d_hat, np.ones_like(d_hat, bool), "normalized")
    align = ls_align(rel, sparse_metric)
    metric = apply_affine(rel, align)
    elapsed = max(time.perf_counter() - start, 1e-9)
    return CompletionResult(rel, metric, align.a, align.b, elapsed, stats)


def estimate_multi_step(
    rgb: np.ndarray | Tensor,
    n_steps: int,
    seed: int | None,
    model: DepthCompletionModel,
    cond: np.ndarray | None = None,
) -> DepthMap:
    """DDIM over trailing timesteps from Gaussian x_T (``seed=None`` starts from zeros).

    Without ``cond`` the plain frozen decoder is used; this is the
    condition-free depth-estimation reference.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    sched = model.schedule
    x = rgb_to_tensor(rgb)
    c = None if cond is None else torch.from_numpy(np.asarray(cond, dtype=np.float32))[None]
    with torch.no_grad():
        m = model.encode_rgb(x)
        if seed is None:
            x_t = torch.zeros_like(m)
        else:
            g = torch.Generator().manual_seed(int(seed))
            x_t = torch.randn(m.shape, generator=g, dtype=m.dtype)
        steps = trailing_timesteps(sched.T, n_steps)
        for i, t in enumerate(steps):
            t_prev = steps[i + 1] if i + 1 < len(steps) else None
            v = model.velocity(x_t, m, t, c)
            x_t = ddim_step(x_t, v, t, t_prev, sched)
        if c is not None and model.variant == "late":
            depth = model.decode_depth(x_t, c)
        else:
            depth = model.autoencoder.decode(x_t).mean(dim=1)
    d = depth[0].double().numpy()
    return DepthMap(d, np.ones_like(d, bool), "normalized")


def align_to_metric(pred: DepthMap, sparse_metric: SparseDepth) -> tuple[DepthMap, AffineAlignment]:
    align = ls_align(pred, sparse_metric)
    return apply_affine(pred, align), align


def ensemble_median(predictions: list[DepthMap], align: bool = True) -> DepthMap:
    """Align every prediction to the first by least squares, then take the
    pixel-wise median. ``align=False`` skips the alignment; a prediction whose
    alignment is singular (a constant map) is kept as is."""
    if not predictions:
        raise ValueError("no predictions to ensemble")
    ref = predictions[0]
    if any(p.shape != ref.shape for p in predictions):
        raise ValueError("predictions differ in shape")
    if len(predictions) == 1:
        return DepthMap(ref.values.copy(), ref.valid.copy(), ref.space)
    target = SparseDepth.from_dense(ref.values, ref.valid, ref.space)
    aligned = [ref.values]
    for p in predictions[1:]:
        if not align:
            aligned.append(p.values)
            continue
        try:
            al = ls_align(p, target)
        except SingularSystemError:
            aligned.append(p.values)
            continue
        aligned.append(al.a * p.values + al.b)
    return DepthMap(np.median(np.stack(aligned), axis=0), ref.valid.copy(), ref.space)
