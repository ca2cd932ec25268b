"""Training loops.

Three stages build a model from scratch:

1. ``pretrain_autoencoder`` - reconstruction L1 on RGB and depth images; the
   result is frozen for everything after.
2. ``train_diffusion`` - v-prediction MSE on noised depth latents, giving a
   multi-step depth estimator.
3. ``fine_tune`` - end-to-end single-step training (t = T, x_T = 0) with an
   L1 loss on decoded depth. Run without a condition it yields the
   unconditional single-step baseline; on a conditioned variant it trains the
   late-fusion model or an early-fusion ablation.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from .geometry import DepthMap, normalize_values
from .models.autoencoder import Autoencoder, AutoencoderConfig
from .models.checkpoint import save_model
from .models.variants import DepthCompletionModel, freeze
from .pipeline import prepare_condition, rgb_to_tensor
from .scheduler import alpha_bar_tensor, sample_timesteps
from .synthdata import DensityProtocol, Scene, density_preset, render_scenes, sample_sparse

log = logging.getLogger(__name__)

TARGET_CLAMP = 3.0


class TrainingDivergedError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# data


def dense_normalized(depth: DepthMap, q: tuple[float, float] = (2.0, 98.0)) -> np.ndarray:
    """Depth normalized by its own percentiles, clipped to [-1, 1]."""
    lo, hi = np.percentile(depth.values[depth.valid], q)
    if hi <= lo:
        hi = lo + 1e-3
    return normalize_values(depth.values, lo, hi, clip=True)


def make_example(
    scene: Scene,
    protocol: DensityProtocol | None,
    seed,
    condition_mode: str = "sparse",
    fill: float = 0.0,
) -> dict[str, Tensor]:
    """One training example.

    Without a protocol the target is the dense depth normalized by its own
    percentiles. With one, a sparse condition is drawn and both the condition
    and the target use the condition's percentile statistics; the target is
    left unclipped up to +-3 so depth outside the sampled range stays
    representable.
    """
    ex = {"rgb": rgb_to_tensor(scene.rgb)[0], "valid": torch.from_numpy(scene.depth.valid)}
    if protocol is None:
        ex["target"] = torch.from_numpy(dense_normalized(scene.depth)).float()
        ex["cond"] = torch.zeros(3, *scene.depth.shape)
        return ex
    sparse = sample_sparse(scene.depth, protocol, seed)
    cond, stats = prepare_condition(sparse, condition_mode, fill)
    target = normalize_values(scene.depth.values, *stats, clip=False)
    ex["target"] = torch.from_numpy(np.clip(target, -TARGET_CLAMP, TARGET_CLAMP)).float()
    ex["cond"] = torch.from_numpy(cond)
    return ex


def collate(examples: Sequence[dict[str, Tensor]]) -> dict[str, Tensor]:
    return {k: torch.stack([e[k] for e in examples]) for k in examples[0]}


# ---------------------------------------------------------------------------
# config, loss and schedule


@dataclass
class TrainConfig:
    iterations: int = 5000
    batch: int = 4
    grad_accum: int = 4
    lr_decoder: float = 3e-4
    lr_unet: float = 3e-5
    warmup_steps: int = 100
    final_lr_fraction: float = 0.1
    weight_decay: float = 0.01
    density_preset: str = "full"
    condition_fill: float = 0.0
    seed: int = 0
    log_every: int = 25

    def __post_init__(self) -> None:
        if self.iterations < 1 or self.batch < 1 or self.grad_accum < 1:
            raise ValueError("iterations, batch and grad_accum must be >= 1")
        if not 0 <= self.warmup_steps < self.iterations:
            raise ValueError("warmup_steps must be < iterations")
        density_preset(self.density_preset)

    @property
    def protocol(self) -> DensityProtocol:
        return density_preset(self.density_preset)

    def to_dict(self) -> dict:
        return asdict(self)


def loss_l1(pred: DepthMap | Tensor, target: DepthMap | Tensor, valid: Tensor | None = None):
    """Mean absolute difference over valid target pixels."""
    if isinstance(pred, DepthMap):
        if pred.shape != target.shape:
            raise ValueError("shape mismatch")
        mask = target.valid
        if not mask.any():
            raise ValueError("target has no valid pixels")
        return float(np.abs(pred.values - target.values)[mask].mean())
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    if valid is None:
        return (pred - target).abs().mean()
    # per-image mean, then batch mean, so accumulation over micro-batches is exact
    valid = valid.to(pred.dtype).reshape(pred.shape)
    n = valid.flatten(1).sum(1)
    if (n == 0).any():
        raise ValueError("target has no valid pixels")
    return (((pred - target).abs() * valid).flatten(1).sum(1) / n).mean()


def lr_at(step: int, cfg: TrainConfig) -> tuple[float, float]:
    """Linear warm-up to the peak rates, then exponential decay reaching
    ``final_lr_fraction`` of the peak at the last iteration."""
    if step < cfg.warmup_steps:
        f = step / cfg.warmup_steps
    else:
        span = cfg.iterations - cfg.warmup_steps
        gamma = cfg.final_lr_fraction ** (1.0 / span)
        f = gamma ** (step - cfg.warmup_steps)
    return cfg.lr_decoder * f, cfg.lr_unet * f


def build_optimizer(model: DepthCompletionModel, cfg: TrainConfig) -> torch.optim.AdamW:
    groups = []
    for tag, params in model.param_groups().items():
        decay = [p for p in params if p.dim() > 1]
        no_decay = [p for p in params if p.dim() <= 1]
        if decay:
            groups.append({"params": decay, "weight_decay": cfg.weight_decay, "tag": tag})
        if no_decay:
            groups.append({"params": no_decay, "weight_decay": 0.0, "tag": tag})
    if not groups:
        raise ValueError("model has no trainable parameters")
    return torch.optim.AdamW(groups, lr=0.0, betas=(0.9, 0.999), eps=1e-8)


def set_lrs(opt: torch.optim.Optimizer, step: int, cfg: TrainConfig) -> tuple[float, float]:
    lr_dec, lr_unet = lr_at(step, cfg)
    for g in opt.param_groups:
        g["lr"] = lr_dec if g["tag"] == "decoder" else lr_unet
    return lr_dec, lr_unet


def optimizer_arrays(opt: torch.optim.Optimizer) -> dict[str, Tensor]:
    out = {}
    for idx, st in opt.state_dict()["state"].items():
        for k, v in st.items():
            out[f"{idx}.{k}"] = torch.as_tensor(v, dtype=torch.float32).reshape(v.shape if torch.is_tensor(v) else ())
    return out


def load_optimizer_arrays(opt: torch.optim.Optimizer, arrays: dict[str, np.ndarray]) -> None:
    if not arrays:
        return
    sd = opt.state_dict()
    state: dict[int, dict] = {}
    for name, arr in arrays.items():
        idx, key = name.split(".", 1)
        state.setdefault(int(idx), {})[key] = torch.from_numpy(np.array(arr))
    sd["state"] = state
    opt.load_state_dict(sd)


# ---------------------------------------------------------------------------
# fine-tuning


def forward_loss(model: DepthCompletionModel, batch: dict[str, Tensor]) -> Tensor:
    cond = batch["cond"] if model.uses_condition else None
    pred = model(batch["rgb"], cond)
    return loss_l1(pred, batch["target"], batch["valid"].float())


def train_step(
    micro_batches: Sequence[dict[str, Tensor]],
    model: DepthCompletionModel,
    opt: torch.optim.Optimizer,
) -> float:
    """Accumulate gradients over ``micro_batches`` (mean-reduced) and apply one update."""
    opt.zero_grad(set_to_none=True)
    total = 0.0
    for mb in micro_batches:
        loss = forward_loss(model, mb) / len(micro_batches)
        if not torch.isfinite(loss):
            raise TrainingDivergedError(f"non-finite loss {loss.item()}")
        loss.backward()
        total += loss.item()
    opt.step()
    return total


class ExampleStream:
    """Deterministic stream of training micro-batches."""

    def __init__(self, scenes: Sequence[Scene], cfg: TrainConfig, conditioned: bool, condition_mode: str = "sparse"):
        self.scenes = scenes
        self.cfg = cfg
        self.protocol = cfg.protocol if conditioned else None
        self.condition_mode = condition_mode
        self._orders: dict[int, np.ndarray] = {}

    def _scene(self, k: int) -> Scene:
        n = len(self.scenes)
        epoch, pos = divmod(k, n)
        if epoch not in self._orders:
            self._orders = {epoch: np.random.default_rng([self.cfg.seed, epoch]).permutation(n)}
        return self.scenes[self._orders[epoch][pos]]

    def step(self, step: int) -> list[dict[str, Tensor]]:
        cfg = self.cfg
        per_step = cfg.batch * cfg.grad_accum
        micro = []
        for a in range(cfg.grad_accum):
            exs = []
            for b in range(cfg.batch):
                k = step * per_step + a * cfg.batch + b
                exs.append(
                    make_example(self._scene(k), self.protocol, [cfg.seed, k], self.condition_mode, cfg.condition_fill)
                )
            micro.append(collate(exs))
        return micro


def fine_tune(
    model: DepthCompletionModel,
    scenes: Sequence[Scene],
    cfg: TrainConfig,
    *,
    start_step: int = 0,
    optimizer: torch.optim.Optimizer | None = None,
    log_csv: str | Path | None = None,
    checkpoint: str | Path | None = None,
    checkpoint_extra: dict | None = None,
    stop_at: int | None = None,
) -> list[dict]:
    """End-to-end single-step training. Returns the per-step log rows.

    ``stop_at`` ends the run early at that step (the schedule still follows
    ``cfg.iterations``); the checkpoint then records the step reached so the
    run can be resumed with ``start_step``.
    """
    torch.manual_seed(cfg.seed)
    model.train()
    opt = optimizer or build_optimizer(model, cfg)
    stream = ExampleStream(scenes, cfg, model.uses_condition, model.condition_mode)
    rows: list[dict] = []
    writer = None
    fh = None
    if log_csv is not None:
        log_csv = Path(log_csv)
        log_csv.parent.mkdir(parents=True, exist_ok=True)
        fh = open(log_csv, "a" if start_step else "w", newline="")
        writer = csv.DictWriter(fh, ["step", "loss", "lr_decoder", "lr_unet", "wall_time"])
        if not start_step:
            writer.writeheader()
    t0 = time.perf_counter()
    try:
        last = cfg.iterations if stop_at is None else min(stop_at, cfg.iterations)
        for step in range(start_step + 1, last + 1):
            lr_dec, lr_unet = set_lrs(opt, step, cfg)
            try:
                loss = train_step(stream.step(step - 1), model, opt)
            except TrainingDivergedError:
                if checkpoint is not None:
                    diag = Path(checkpoint).with_suffix(".diverged.ckpt")
                    save_model(diag, model, seed=cfg.seed, step=step, extra={"diverged": True})
                    log.error("loss diverged at step %d; diagnostic checkpoint %s", step, diag)
                raise
            row = {"step": step, "loss": loss, "lr_decoder": lr_dec, "lr_unet": lr_unet,
                   "wall_time": time.perf_counter() - t0}
            rows.append(row)
            if writer is not None:
                writer.writerow(row)
            if step % cfg.log_every == 0:
                log.info("step %d loss %.4f lr %.2e/%.2e", step, loss, lr_dec, lr_unet)
    finally:
        if fh is not None:
            fh.close()
    model.eval()
    if checkpoint is not None:
        save_model(checkpoint, model, seed=cfg.seed, step=rows[-1]["step"] if rows else start_step,
                   extra={"train": cfg.to_dict(), **(checkpoint_extra or {})}, optimizer_arrays=optimizer_arrays(opt))
    return rows


# ---------------------------------------------------------------------------
# autoencoder pretraining


@dataclass
class AutoencoderTrainConfig:
    iterations: int = 1500
    batch: int = 8
    lr: float = 1e-3
    seed: int = 0
    ae: AutoencoderConfig = field(default_factory=AutoencoderConfig)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ae"] = self.ae.to_dict()
        return d


def ae_images(scenes: Sequence[Scene]) -> Tensor:
    rgb = torch.stack([rgb_to_tensor(s.rgb)[0] for s in scenes])
    depth = torch.stack([torch.from_numpy(dense_normalized(s.depth)).float() for s in scenes])
    return torch.cat([rgb, depth[:, None].expand(-1, 3, -1, -1)], 0)


def reconstruction_l1(ae: Autoencoder, images: Tensor, batch: int = 32) -> float:
    errs = []
    with torch.no_grad():
        for i in range(0, len(images), batch):
            x = images[i : i + batch]
            errs.append((ae(x) - x).abs().mean(dim=(1, 2, 3)))
    return float(torch.cat(errs).mean())


def pretrain_autoencoder(scenes: Sequence[Scene], cfg: AutoencoderTrainConfig) -> tuple[Autoencoder, list[float]]:
    """Train the autoencoder on RGB and replicated normalized depth, set the
    latent scale to unit variance and freeze it."""
    torch.manual_seed(cfg.seed)
    ae = Autoencoder(cfg.ae)
    images = ae_images(scenes)
    opt = torch.optim.AdamW(ae.parameters(), lr=cfg.lr, weight_decay=0.0)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=cfg.lr, total_steps=cfg.iterations, pct_start=0.05)
    g = torch.Generator().manual_seed(cfg.seed)
    losses = []
    ae.train()
    for step in range(cfg.iterations):
        idx = torch.randint(0, len(images), (cfg.batch,), generator=g)
        x = images[idx]
        # random flips for a little more variety
        if torch.rand((), generator=g) < 0.5:
            x = x.flip(-1)
        loss = (ae(x) - x).abs().mean()
        if not torch.isfinite(loss):
            raise TrainingDivergedError(f"autoencoder loss diverged at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        losses.append(loss.item())
        if (step + 1) % 100 == 0:
            log.info("ae step %d loss %.4f", step + 1, np.mean(losses[-100:]))
    ae.eval()
    with torch.no_grad():
        z = torch.cat([ae.encoder(images[i : i + 64]) for i in range(0, len(images), 64)])
        ae.latent_scale.fill_(1.0 / float(z.std()))
    return freeze(ae), losses  # type: ignore[return-value]


# ---------------------------------------------------------------------------
# diffusion (v-objective) pretraining


@dataclass
class DiffusionTrainConfig:
    iterations: int = 600
    batch: int = 16
    lr: float = 2e-4
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def encode_dataset(model: DepthCompletionModel, scenes: Sequence[Scene]) -> tuple[Tensor, Tensor]:
    """Depth latents x0 and RGB latents m for every scene."""
    ae = model.autoencoder
    with torch.no_grad():
        rgb = torch.stack([rgb_to_tensor(s.rgb)[0] for s in scenes])
        depth = torch.stack([torch.from_numpy(dense_normalized(s.depth)).float() for s in scenes])
        depth = depth[:, None].expand(-1, 3, -1, -1)
        x0 = torch.cat([ae.encode(depth[i : i + 64]) for i in range(0, len(scenes), 64)])
        m = torch.cat([ae.encode(rgb[i : i + 64]) for i in range(0, len(scenes), 64)])
    return x0, m


def v_loss(model: DepthCompletionModel, x0: Tensor, m: Tensor, t: Tensor, eps: Tensor) -> Tensor:
    ab = alpha_bar_tensor(model.schedule, t, x0.dtype)
    x_t = ab.sqrt() * x0 + (1 - ab).sqrt() * eps
    v_star = ab.sqrt() * eps - (1 - ab).sqrt() * x0
    v_hat = model.denoiser(torch.cat([x_t, m], 1), t)
    return F.mse_loss(v_hat, v_star)


def train_diffusion(model: DepthCompletionModel, scenes: Sequence[Scene], cfg: DiffusionTrainConfig) -> list[float]:
    """v-prediction MSE on noised depth latents, conditioned on the RGB latent."""
    if model.variant != "unconditional":
        raise ValueError("diffusion pretraining runs on the unconditional variant")
    torch.manual_seed(cfg.seed)
    x0_all, m_all = encode_dataset(model, scenes)
    opt = torch.optim.AdamW(model.denoiser.parameters(), lr=cfg.lr, weight_decay=0.01)
    g = torch.Generator().manual_seed(cfg.seed)
    losses = []
    model.train()
    for step in range(cfg.iterations):
        lr = cfg.lr * min(1.0, (step + 1) / 50)
        for grp in opt.param_groups:
            grp["lr"] = lr
        idx = torch.randint(0, len(scenes), (cfg.batch,), generator=g)
        t = sample_timesteps(cfg.batch, model.schedule.T, g)
        eps = torch.randn(x0_all[idx].shape, generator=g)
        loss = v_loss(model, x0_all[idx], m_all[idx], t, eps)
        if not torch.isfinite(loss):
            raise TrainingDivergedError(f"diffusion loss diverged at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if (step + 1) % 100 == 0:
            log.info("diffusion step %d loss %.4f", step + 1, np.mean(losses[-100:]))
    model.eval()
    return losses


def v_mse(model: DepthCompletionModel, scenes: Sequence[Scene], seed: int = 123) -> float:
    """Held-out v-prediction MSE over random timesteps and noise."""
    x0, m = encode_dataset(model, scenes)
    g = torch.Generator().manual_seed(seed)
    t = sample_timesteps(len(scenes), model.schedule.T, g)
    eps = torch.randn(x0.shape, generator=g)
    with torch.no_grad():
        return float(v_loss(model, x0, m, t, eps))

