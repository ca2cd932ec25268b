"""Command-line entry point.

    ssdc [--deterministic] <command> [--config FILE.yaml] [--flag value ...]

Commands: generate, pretrain-vae, train, infer, eval, sweep, baseline.

Every option can also be given as a key in the YAML config (dashes become
underscores); flags override config keys. Outputs go to ``--out`` or, when
it is not given, to ``$SSDC_OUTPUT_ROOT/<command>`` (default root ``runs``).
Each run writes ``run_manifest.json`` with the resolved config, seed and code
version next to its outputs.

Exit codes: 0 success, 2 usage error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import __version__

log = logging.getLogger("ssdc")

OUTPUT_ROOT_ENV = "SSDC_OUTPUT_ROOT"
EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# option tables: name -> (type, default, help)

Option = tuple[Callable[[str], Any] | None, Any, str]


def _floats(s: str | list) -> list[float]:
    if isinstance(s, list):
        return [float(v) for v in s]
    return [float(v) for v in str(s).replace(",", " ").split()]


def _ints(s: str | list) -> list[int]:
    return [int(v) for v in _floats(s)]


COMMON: dict[str, Option] = {
    "out": (str, None, "output directory"),
    "seed": (int, 0, "global seed"),
}

OPTIONS: dict[str, dict[str, Option]] = {
    "generate": {
        "n": (int, 100, "number of scenes"),
        "indoor_ratio": (float, 0.9, "fraction of indoor scenes"),
        "resolution": (_ints, [64, 64], "H W"),
    },
    "pretrain-vae": {
        "data": (str, None, "dataset directory from `generate`"),
        "iterations": (int, 1500, ""),
        "batch": (int, 8, ""),
        "lr": (float, 2e-3, ""),
        "base_width": (int, 16, "autoencoder base width"),
    },
    "train": {
        "data": (str, None, "dataset directory"),
        "vae": (str, None, "autoencoder checkpoint (fresh denoiser)"),
        "init": (str, None, "model checkpoint whose denoiser initializes the run"),
        "resume": (str, None, "checkpoint of an interrupted run of this config"),
        "variant": (str, "late", "late | early_encoder | early_frozen | unconditional"),
        "objective": (str, "e2e", "e2e (single-step L1) | diffusion (v-prediction)"),
        "denoiser_width": (int, 192, ""),
        "iterations": (int, 5000, ""),
        "batch": (int, 4, ""),
        "grad_accum": (int, 4, ""),
        "lr_decoder": (float, 3e-4, ""),
        "lr_unet": (float, 3e-5, ""),
        "warmup_steps": (int, 100, ""),
        "density_preset": (str, "full", "full | low"),
        "stop_at": (int, None, "stop early at this step (resumable)"),
    },
    "infer": {
        "checkpoint": (str, None, "model checkpoint"),
        "image": (str, None, "RGB PNG"),
        "sparse": (str, None, "sparse depth as 16-bit PNG (0 = missing) or PFM (0/NaN = missing)"),
        "steps": (int, 1, "1 = single-step completion; n > 1 = n-step DDIM estimate + LS"),
    },
    "eval": {
        "checkpoint": (str, None, "model checkpoint"),
        "data": (str, None, "test dataset directory"),
        "density": (float, 0.16, "sampling density in percent"),
    },
    "sweep": {
        "checkpoint": (str, None, "model checkpoint (omit to sweep baselines only)"),
        "e2e": (str, None, "unconditional checkpoint for the unconditional + LS baseline"),
        "data": (str, None, "test dataset directory"),
        "densities": (_floats, [0.16, 0.5, 1.0, 2.0, 5.0], "densities in percent"),
        "barycentric": (int, 1, "include the barycentric baseline (0/1)"),
    },
    "baseline": {
        "data": (str, None, "test dataset directory"),
        "e2e": (str, None, "unconditional checkpoint for the unconditional + LS baseline"),
        "density": (float, 0.16, "sampling density in percent"),
    },
}

REQUIRED = {
    "pretrain-vae": ["data"],
    "train": ["data"],
    "infer": ["checkpoint", "image", "sparse"],
    "eval": ["checkpoint", "data"],
    "sweep": ["data"],
    "baseline": ["data"],
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ssdc", description="Single-step diffusion depth completion toolkit.")
    p.add_argument("--deterministic", action="store_true", help="single-threaded deterministic numerics")
    p.add_argument("--verbose", "-v", action="store_true")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name, opts in OPTIONS.items():
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="YAML config file")
        for key, (_, _, helptext) in {**COMMON, **opts}.items():
            # everything parsed as strings; types are applied after merging with the config
            sp.add_argument("--" + key.replace("_", "-"), dest=key, default=None, help=helptext or None)
    return p


def resolve(command: str, args: argparse.Namespace) -> dict[str, Any]:
    """Defaults <- YAML config <- command-line flags, with type conversion."""
    table = {**COMMON, **OPTIONS[command]}
    cfg: dict[str, Any] = {k: v[1] for k, v in table.items()}
    if args.config:
        import yaml

        try:
            loaded = yaml.safe_load(Path(args.config).read_text()) or {}
        except FileNotFoundError as e:
            raise UsageError(f"config file not found: {args.config}") from e
        if not isinstance(loaded, dict):
            raise UsageError("config file must be a mapping")
        for k, v in loaded.items():
            key = k.replace("-", "_")
            if key not in table:
                raise UsageError(f"unknown config key {k!r} for {command}")
            cfg[key] = v
    for key in table:
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = v
    for key, (conv, _, _) in table.items():
        if cfg[key] is not None and conv is not None:
            try:
                cfg[key] = conv(cfg[key])
            except (TypeError, ValueError) as e:
                raise UsageError(f"bad value for --{key.replace('_', '-')}: {cfg[key]!r}") from e
    missing = [k for k in REQUIRED.get(command, []) if cfg.get(k) is None]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))
    if cfg["out"] is None:
        cfg["out"] = str(Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / command)
    return cfg


def code_version() -> str:
    """Package version plus a digest of the package sources."""
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.rglob("*.py")):
        h.update(path.relative_to(Path(__file__).parent).as_posix().encode())
        h.update(path.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


def write_manifest(out: Path, command: str, cfg: dict, deterministic: bool) -> None:
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": cfg,
        "seed": cfg["seed"],
        "deterministic": deterministic,
        "code_version": code_version(),
    }
    (out / "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def set_deterministic() -> None:
    import torch

    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)


# ---------------------------------------------------------------------------
# data on disk


def scene_dir(root: Path, i: int) -> Path:
    return root / "scenes" / f"{i:05d}"


def load_scenes(root: str | Path):
    from .depth_io import read_pfm, read_rgb
    from .geometry import DepthMap
    from .synthdata import DatasetManifest, Scene

    root = Path(root)
    man_path = root / "manifest.json"
    if not man_path.exists():
        raise UsageError(f"{root} is not a dataset directory (no manifest.json)")
    manifest = DatasetManifest.from_dict(json.loads(man_path.read_text()))
    scenes = []
    for i, spec in enumerate(manifest.scenes):
        d = scene_dir(root, i)
        depth = read_pfm(d / "depth.pfm").astype(np.float64)
        scenes.append(Scene(read_rgb(d / "rgb.png"), DepthMap(depth, np.isfinite(depth) & (depth > 0)), spec.domain, f"{i:05d}"))
    return scenes


def read_sparse(path: str | Path):
    from .depth_io import read_depth
    from .geometry import SparseDepth

    path = Path(path)
    if not path.exists():
        raise UsageError(f"sparse depth file not found: {path}")
    depth, valid = read_depth(path)
    valid = valid & np.isfinite(depth) & (depth > 0)
    return SparseDepth.from_dense(depth.astype(np.float64), valid, "metric")


# ---------------------------------------------------------------------------
# commands


def cmd_generate(cfg: dict, out: Path) -> None:
    from .depth_io import write_pfm, write_png16, write_rgb
    from .synthdata import generate_scene, make_dataset

    if cfg["n"] < 1:
        raise UsageError("--n must be >= 1")
    manifest = make_dataset(cfg["n"], cfg["seed"], cfg["indoor_ratio"], tuple(cfg["resolution"]), exact_ratio=cfg["n"] >= 10)
    for i, spec in enumerate(manifest.scenes):
        rgb, depth = generate_scene(spec)
        d = scene_dir(out, i)
        d.mkdir(parents=True, exist_ok=True)
        write_rgb(d / "rgb.png", rgb)
        write_pfm(d / "depth.pfm", depth.values.astype(np.float32))
        write_png16(d / "depth16.png", depth.values, depth.valid)
    (out / "manifest.json").write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True))
    print(f"wrote {len(manifest)} scenes to {out}")


def cmd_pretrain_vae(cfg: dict, out: Path) -> None:
    from .models import AutoencoderConfig, save_autoencoder
    from .training import AutoencoderTrainConfig, pretrain_autoencoder

    scenes = load_scenes(cfg["data"])
    tcfg = AutoencoderTrainConfig(cfg["iterations"], cfg["batch"], cfg["lr"], cfg["seed"], AutoencoderConfig(base_width=cfg["base_width"]))
    ae, losses = pretrain_autoencoder(scenes, tcfg)
    save_autoencoder(out / "autoencoder.ckpt", ae, seed=cfg["seed"], step=tcfg.iterations, extra={"train": tcfg.to_dict()})
    print(f"final loss {np.mean(losses[-50:]):.4f}; checkpoint {out / 'autoencoder.ckpt'}")


def cmd_train(cfg: dict, out: Path) -> None:
    import torch

    from .models import BUILDERS, VARIANTS, Denoiser, DenoiserConfig, load_autoencoder, load_model, save_model
    from .training import DiffusionTrainConfig, TrainConfig, build_optimizer, fine_tune, load_optimizer_arrays, train_diffusion

    if cfg["variant"] not in VARIANTS:
        raise UsageError(f"unknown variant {cfg['variant']!r}; choose from {', '.join(VARIANTS)}")
    if cfg["objective"] not in ("e2e", "diffusion"):
        raise UsageError("--objective must be e2e or diffusion")
    tcfg = None
    if cfg["objective"] == "e2e":
        try:
            tcfg = TrainConfig(
                iterations=cfg["iterations"], batch=cfg["batch"], grad_accum=cfg["grad_accum"],
                lr_decoder=cfg["lr_decoder"], lr_unet=cfg["lr_unet"], warmup_steps=cfg["warmup_steps"],
                density_preset=cfg["density_preset"], seed=cfg["seed"],
            )
        except ValueError as e:
            raise UsageError(str(e)) from e
    elif cfg["resume"]:
        raise UsageError("--resume applies to the e2e objective")
    scenes = load_scenes(cfg["data"])
    ckpt = out / "model.ckpt"
    torch.manual_seed(cfg["seed"])

    if cfg["resume"]:
        model, manifest, optim = load_model(cfg["resume"])
        opt = build_optimizer(model, tcfg)
        load_optimizer_arrays(opt, optim)
        fine_tune(model, scenes, tcfg, start_step=manifest["step"], optimizer=opt, log_csv=out / "train_log.csv",
                  checkpoint=ckpt, stop_at=cfg["stop_at"])
        print(f"resumed at step {manifest['step']}; checkpoint {ckpt}")
        return

    if cfg["init"]:
        base = load_model(cfg["init"])[0]
        ae, den = base.autoencoder, base.denoiser
        if den.cfg.in_channels != 2 * ae.cfg.latent_channels:
            raise UsageError("--init must be an unconditional checkpoint")
    elif cfg["vae"]:
        ae = load_autoencoder(cfg["vae"])[0]
        den = Denoiser(DenoiserConfig(in_channels=2 * ae.cfg.latent_channels, out_channels=ae.cfg.latent_channels,
                                      width=cfg["denoiser_width"]))
    else:
        raise UsageError("train needs --vae or --init")
    model = BUILDERS[cfg["variant"]](ae, den)

    if cfg["objective"] == "diffusion":
        if cfg["variant"] != "unconditional":
            raise UsageError("diffusion pretraining uses --variant unconditional")
        dcfg = DiffusionTrainConfig(cfg["iterations"], 16, cfg["lr_unet"], cfg["seed"])
        losses = train_diffusion(model, scenes, dcfg)
        save_model(ckpt, model, seed=cfg["seed"], step=dcfg.iterations, extra={"objective": "diffusion"})
        print(f"final loss {np.mean(losses[-50:]):.4f}; checkpoint {ckpt}")
        return
    rows = fine_tune(model, scenes, tcfg, log_csv=out / "train_log.csv", checkpoint=ckpt, stop_at=cfg["stop_at"])
    print(f"final loss {rows[-1]['loss']:.4f}; checkpoint {ckpt}")


def cmd_infer(cfg: dict, out: Path) -> None:
    from .depth_io import read_rgb, write_pfm, write_png16
    from .models import load_model
    from .pipeline import align_to_metric, complete_single_step, estimate_multi_step, prepare_condition

    for key in ("checkpoint", "image"):
        if not Path(cfg[key]).exists():
            raise UsageError(f"--{key} file not found: {cfg[key]}")
    sparse = read_sparse(cfg["sparse"])
    if cfg["steps"] < 1:
        raise UsageError("--steps must be >= 1")
    model = load_model(cfg["checkpoint"])[0].eval()
    rgb = read_rgb(cfg["image"])
    if rgb.shape[:2] != (sparse.height, sparse.width):
        raise UsageError(f"image {rgb.shape[:2]} and sparse depth {(sparse.height, sparse.width)} differ in size")
    if cfg["steps"] == 1:
        res = complete_single_step(rgb, sparse, model)
        metric, a, b = res.metric_depth, res.a, res.b
    else:
        cond = prepare_condition(sparse, model.condition_mode)[0] if model.variant == "late" else None
        rel = estimate_multi_step(rgb, cfg["steps"], cfg["seed"], model, cond)
        metric, al = align_to_metric(rel, sparse)
        a, b = al.a, al.b
    write_pfm(out / "depth.pfm", metric.values.astype(np.float32))
    clipped = np.clip(metric.values, 0.0, 65535 / 256)
    write_png16(out / "depth16.png", clipped, metric.values > 0)
    print(json.dumps({"a": a, "b": b, "steps": cfg["steps"], "pfm": str(out / "depth.pfm")}))


def _report_outputs(reports, out: Path, deterministic: bool, stem: str) -> None:
    from .evaluation import write_long_csv, write_reports_csv

    include_time = not deterministic
    write_reports_csv(reports, out / f"{stem}.csv", include_time)
    write_long_csv(reports, out / f"{stem}_long.csv", include_time)
    (out / f"{stem}.json").write_text(json.dumps([r.to_dict(include_time) for r in reports], indent=2, sort_keys=True))
    for r in reports:
        print(f"{r.method:>16s} {r.density:>8s}  MAE {r.mean_mae:.4f}  RMSE {r.mean_rmse:.4f}")


def cmd_eval(cfg: dict, out: Path, deterministic: bool) -> None:
    from .evaluation import ModelMethod, evaluate
    from .models import load_model
    from .synthdata import fixed_density

    if not Path(cfg["checkpoint"]).exists():
        raise UsageError(f"checkpoint not found: {cfg['checkpoint']}")
    scenes = load_scenes(cfg["data"])
    model = load_model(cfg["checkpoint"])[0]
    report = evaluate(ModelMethod(model), scenes, fixed_density(cfg["density"]), cfg["seed"])
    _report_outputs([report], out, deterministic, "metrics")


def _baseline_methods(cfg: dict, barycentric: bool = True) -> list:
    from .evaluation import BarycentricMethod, ModelMethod
    from .models import load_model

    methods = [BarycentricMethod()] if barycentric else []
    if cfg.get("e2e"):
        if not Path(cfg["e2e"]).exists():
            raise UsageError(f"checkpoint not found: {cfg['e2e']}")
        methods.append(ModelMethod(load_model(cfg["e2e"])[0], "unconditional_ls"))
    return methods


def cmd_sweep(cfg: dict, out: Path, deterministic: bool) -> None:
    from .evaluation import ModelMethod, sparsity_sweep
    from .models import load_model

    methods = []
    if cfg["checkpoint"]:
        if not Path(cfg["checkpoint"]).exists():
            raise UsageError(f"checkpoint not found: {cfg['checkpoint']}")
        methods.append(ModelMethod(load_model(cfg["checkpoint"])[0]))
    methods += _baseline_methods(cfg, bool(cfg["barycentric"]))
    if not methods:
        raise UsageError("nothing to sweep")
    scenes = load_scenes(cfg["data"])
    try:
        reports = sparsity_sweep(methods, cfg["densities"], scenes, cfg["seed"])
    except ValueError as e:
        raise UsageError(str(e)) from e
    _report_outputs(reports, out, deterministic, "sweep")


def cmd_baseline(cfg: dict, out: Path, deterministic: bool) -> None:
    from .evaluation import evaluate
    from .synthdata import fixed_density

    scenes = load_scenes(cfg["data"])
    reports = [evaluate(m, scenes, fixed_density(cfg["density"]), cfg["seed"]) for m in _baseline_methods(cfg)]
    _report_outputs(reports, out, deterministic, "baseline")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    command = args.command
    try:
        cfg = resolve(command, args)
        if args.deterministic:
            set_deterministic()
        out = Path(cfg["out"])
        try:
            write_manifest(out, command, cfg, args.deterministic)
        except OSError as e:
            print(f"error: cannot write to {out}: {e}", file=sys.stderr)
            return EXIT_RUNTIME
        if command == "generate":
            cmd_generate(cfg, out)
        elif command == "pretrain-vae":
            cmd_pretrain_vae(cfg, out)
        elif command == "train":
            cmd_train(cfg, out)
        elif command == "infer":
            cmd_infer(cfg, out)
        elif command == "eval":
            cmd_eval(cfg, out, args.deterministic)
        elif command == "sweep":
            cmd_sweep(cfg, out, args.deterministic)
        elif command == "baseline":
            cmd_baseline(cfg, out, args.deterministic)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # noqa: BLE001 -- any failure maps to the runtime exit code
        log.debug("failure", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
