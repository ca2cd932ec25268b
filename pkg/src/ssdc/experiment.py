"""The toy study end to end, with every stage cached on disk.

Stages, each reusing the previous one's checkpoint:

1. autoencoder pretraining (then frozen);
2. v-objective diffusion pretraining of the denoiser;
3. unconditional end-to-end single-step fine-tuning (the E2E model, which is
   also the unconditional + LS baseline);
4. per seed, fine-tuning of the late-fusion model and the two early-fusion
   ablations from the E2E weights;
5. evaluation: one paired sweep of every method over the training density
   range and a list of fixed densities, plus single- vs multi-step timing.

Artifacts live under ``root/<config digest>/`` so a changed training config
never reuses stale checkpoints. Evaluation results are cached in
``results.json`` next to them and recomputed when the evaluation config
changes.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch

from .models import (
    BUILDERS,
    Autoencoder,
    Denoiser,
    DenoiserConfig,
    DepthCompletionModel,
    ScheduleConfig,
    build_unconditional,
    load_autoencoder,
    load_model,
    save_autoencoder,
    save_model,
)
from .evaluation import (
    BarycentricMethod,
    MetricsReport,
    ModelMethod,
    MultiStepMethod,
    density_tag,
    draw_samples,
    sparsity_sweep,
    time_method,
    write_long_csv,
    write_reports_csv,
)
from .synthdata import DensityProtocol, Scene, density_preset, fixed_density, make_dataset, render_scenes
from .training import (
    AutoencoderTrainConfig,
    DiffusionTrainConfig,
    TrainConfig,
    ae_images,
    fine_tune,
    pretrain_autoencoder,
    reconstruction_l1,
    train_diffusion,
    v_mse,
)

log = logging.getLogger(__name__)

ABLATIONS = ("late", "early_encoder", "early_frozen")
UNCONDITIONAL_LS = "unconditional_ls"
BARYCENTRIC = "barycentric"


@dataclass
class ExperimentConfig:
    n_train: int = 10000
    n_test: int = 40
    train_seed: int = 1
    test_seed: int = 2
    resolution: tuple[int, int] = (64, 64)
    autoencoder: AutoencoderTrainConfig = field(default_factory=lambda: AutoencoderTrainConfig(iterations=1500, batch=8, lr=2e-3))
    denoiser: DenoiserConfig = field(default_factory=lambda: DenoiserConfig(width=192))
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    diffusion: DiffusionTrainConfig = field(default_factory=lambda: DiffusionTrainConfig(iterations=600))
    # the unconditional model has no decoder group; its UNet trains at the decoder rate
    e2e: TrainConfig = field(
        default_factory=lambda: TrainConfig(iterations=3000, grad_accum=2, warmup_steps=150, lr_decoder=3e-4, lr_unet=3e-4)
    )
    finetune: TrainConfig = field(default_factory=lambda: TrainConfig(iterations=3000, grad_accum=2, warmup_steps=150))
    seeds: tuple[int, ...] = (0, 1, 2)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["autoencoder"] = self.autoencoder.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        from .models import AutoencoderConfig

        d = dict(d)
        ae = dict(d.pop("autoencoder"))
        ae["ae"] = AutoencoderConfig.from_dict(ae["ae"])
        return cls(
            autoencoder=AutoencoderTrainConfig(**ae),
            denoiser=DenoiserConfig(**d.pop("denoiser")),
            schedule=ScheduleConfig(**d.pop("schedule")),
            diffusion=DiffusionTrainConfig(**d.pop("diffusion")),
            e2e=TrainConfig(**d.pop("e2e")),
            finetune=TrainConfig(**d.pop("finetune")),
            resolution=tuple(d.pop("resolution")),
            seeds=tuple(d.pop("seeds")),
            **d,
        )

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


@dataclass
class EvalConfig:
    """Held-out evaluation; independent of the training digest."""

    n_test: int = 400
    test_seed: int = 2
    resolution: tuple[int, int] = (96, 128)
    seed: int = 0
    range_preset: str = "full"
    densities: tuple[float, ...] = (0.16, 0.5, 1.0, 2.0, 5.0)
    timing_images: int = 2
    timing_warmups: int = 2
    timing_repeats: int = 20
    ddim_steps: int = 50

    def to_dict(self) -> dict:
        d = asdict(self)
        d["resolution"], d["densities"] = list(self.resolution), list(self.densities)
        return d

    @property
    def protocols(self) -> list[DensityProtocol]:
        return [density_preset(self.range_preset)] + [fixed_density(p) for p in self.densities]


def method_name(variant: str, seed: int) -> str:
    return f"{variant}_s{seed}"


class Experiment:
    def __init__(self, cfg: ExperimentConfig, root: str | Path):
        self.cfg = cfg
        self.dir = Path(root) / cfg.digest()
        self.dir.mkdir(parents=True, exist_ok=True)
        (self.dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        self._train: list[Scene] | None = None
        self._test: list[Scene] | None = None
        self._models: dict[str, DepthCompletionModel] = {}

    # -- data -----------------------------------------------------------------

    @property
    def train_scenes(self) -> list[Scene]:
        if self._train is None:
            self._train = render_scenes(make_dataset(self.cfg.n_train, self.cfg.train_seed, resolution=self.cfg.resolution))
        return self._train

    @property
    def test_scenes(self) -> list[Scene]:
        if self._test is None:
            self._test = render_scenes(make_dataset(self.cfg.n_test, self.cfg.test_seed, resolution=self.cfg.resolution))
        return self._test

    def _record(self, name: str, info: dict) -> None:
        path = self.dir / "stages.json"
        data = json.loads(path.read_text()) if path.exists() else {}
        data[name] = info
        path.write_text(json.dumps(data, indent=2, sort_keys=True))

    def stages(self) -> dict:
        path = self.dir / "stages.json"
        return json.loads(path.read_text()) if path.exists() else {}

    # -- stages ---------------------------------------------------------------

    def autoencoder(self) -> Autoencoder:
        path = self.dir / "autoencoder.ckpt"
        if not path.exists():
            torch.manual_seed(self.cfg.autoencoder.seed)
            start = time.perf_counter()
            ae, losses = pretrain_autoencoder(self.train_scenes, self.cfg.autoencoder)
            wall = time.perf_counter() - start
            held_out = reconstruction_l1(ae, ae_images(self.test_scenes))
            save_autoencoder(path, ae, seed=self.cfg.autoencoder.seed, step=self.cfg.autoencoder.iterations,
                             extra={"heldout_l1": held_out})
            self._record("autoencoder", {"final_loss": sum(losses[-100:]) / len(losses[-100:]), "heldout_l1": held_out, "wall_time": wall})
        return load_autoencoder(path)[0]

    def diffusion_model(self) -> DepthCompletionModel:
        path = self.dir / "diffusion.ckpt"
        if not path.exists():
            torch.manual_seed(self.cfg.diffusion.seed)
            model = build_unconditional(self.autoencoder(), Denoiser(self.cfg.denoiser), self.cfg.schedule)
            untrained = v_mse(model, self.test_scenes)
            start = time.perf_counter()
            losses = train_diffusion(model, self.train_scenes, self.cfg.diffusion)
            wall = time.perf_counter() - start
            trained = v_mse(model, self.test_scenes)
            save_model(path, model, seed=self.cfg.diffusion.seed, step=self.cfg.diffusion.iterations)
            self._record("diffusion", {"final_loss": sum(losses[-100:]) / len(losses[-100:]),
                                       "heldout_v_mse_untrained": untrained, "heldout_v_mse": trained, "wall_time": wall})
        return load_model(path)[0].eval()

    def e2e_model(self) -> DepthCompletionModel:
        """Unconditional single-step model fine-tuned end to end."""
        if "e2e" not in self._models:
            path = self.dir / "e2e.ckpt"
            if not path.exists():
                model = self.diffusion_model()
                rows = fine_tune(model, self.train_scenes, self.cfg.e2e, log_csv=self.dir / "e2e.csv", checkpoint=path)
                self._record("e2e", {"final_loss": rows[-1]["loss"], "wall_time": rows[-1]["wall_time"]})
            self._models["e2e"] = load_model(path)[0].eval()
        return self._models["e2e"]

    def variant_model(self, variant: str, seed: int) -> DepthCompletionModel:
        if variant not in ABLATIONS:
            raise ValueError(f"unknown variant {variant!r}")
        key = method_name(variant, seed)
        if key not in self._models:
            path = self.dir / f"{key}.ckpt"
            if not path.exists():
                base = self.e2e_model()
                torch.manual_seed(seed)
                model = BUILDERS[variant](base.autoencoder, base.denoiser, self.cfg.schedule)
                cfg = TrainConfig(**{**self.cfg.finetune.to_dict(), "seed": seed})
                rows = fine_tune(model, self.train_scenes, cfg, log_csv=self.dir / f"{key}.csv", checkpoint=path)
                self._record(key, {"final_loss": rows[-1]["loss"], "wall_time": rows[-1]["wall_time"]})
            self._models[key] = load_model(path)[0].eval()
        return self._models[key]

    def training_seconds(self) -> float:
        """Wall time summed over every recorded training stage."""
        return sum(v.get("wall_time", 0.0) for v in self.stages().values())

    def run_all(self) -> None:
        self.e2e_model()
        for seed in self.cfg.seeds:
            for variant in ABLATIONS:
                self.variant_model(variant, seed)

    # -- evaluation -------------------------------------------------------------

    def eval_scenes(self, ecfg: EvalConfig) -> list[Scene]:
        return render_scenes(make_dataset(ecfg.n_test, ecfg.test_seed, resolution=ecfg.resolution))

    def methods(self) -> list:
        out = [ModelMethod(self.variant_model(v, s), method_name(v, s)) for s in self.cfg.seeds for v in ABLATIONS]
        return out + [ModelMethod(self.e2e_model(), UNCONDITIONAL_LS), BarycentricMethod()]

    def timing(self, ecfg: EvalConfig, scenes: list[Scene]) -> dict:
        """Single-step vs ``ddim_steps``-step inference on the E2E backbone."""
        images = scenes[: ecfg.timing_images]
        samples = draw_samples(images, fixed_density(ecfg.densities[-1]), ecfg.seed)
        model = self.e2e_model()
        kw = dict(warmups=ecfg.timing_warmups, repeats=ecfg.timing_repeats)
        single = time_method(ModelMethod(model), images, samples, name="single_step", **kw)
        multi = time_method(MultiStepMethod(model, ecfg.ddim_steps), images, samples, name=f"ddim{ecfg.ddim_steps}", **kw)
        return {
            "single_step": {"seconds": single.seconds, "fps": single.fps, "repeats": single.repeats},
            "multi_step": {"seconds": multi.seconds, "fps": multi.fps, "repeats": multi.repeats, "steps": ecfg.ddim_steps},
            "speedup": single.speedup_over(multi),
        }

    def results(self, ecfg: EvalConfig | None = None, recompute: bool = False) -> dict:
        """Train whatever is missing, evaluate, and cache the outcome."""
        ecfg = ecfg or EvalConfig()
        path = self.dir / "results.json"
        if path.exists() and not recompute:
            data = json.loads(path.read_text())
            if data.get("eval_config") == ecfg.to_dict():
                return data
        self.run_all()
        scenes = self.eval_scenes(ecfg)
        log.info("evaluating %d methods on %d scenes", len(self.methods()), len(scenes))
        reports = sparsity_sweep(self.methods(), ecfg.protocols, scenes, ecfg.seed)
        write_reports_csv(reports, self.dir / "reports.csv")
        write_long_csv(reports, self.dir / "reports_long.csv")
        data = {
            "eval_config": ecfg.to_dict(),
            "train_config": self.cfg.to_dict(),
            "stages": self.stages(),
            "domains": {s.id: s.domain for s in scenes},
            "reports": [r.to_dict() for r in reports],
            "timing": self.timing(ecfg, scenes),
        }
        text = json.dumps(data, indent=2, sort_keys=True)
        path.write_text(text)
        return json.loads(text)  # same types as a cache hit


def report_table(results: dict) -> dict[tuple[str, str], MetricsReport]:
    """``(method, density tag) -> report`` from a results dict."""
    return {(r["method"], r["density"]): MetricsReport.from_dict(r) for r in results["reports"]}


def range_tag(ecfg: EvalConfig) -> str:
    return density_tag(density_preset(ecfg.range_preset))
