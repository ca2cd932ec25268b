"""Checkpoint archive: a zip holding ``manifest.json`` plus one raw
little-endian float32 blob per named array (``arrays/<name>.bin``).

The manifest records every array's name, shape and file alongside the model
config, seed and training step. Non-float buffers are stored as float32 as
well; all arrays in this package are float tensors.
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .autoencoder import Autoencoder, AutoencoderConfig, Encoder
from .conditional import ConditionalDecoder
from .denoiser import Denoiser, DenoiserConfig
from .variants import DepthCompletionModel, ScheduleConfig

FORMAT_VERSION = 1
# fixed timestamp keeps archives byte-identical across runs
_ZIP_DATE = (2020, 1, 1, 0, 0, 0)


def _write_member(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_STORED
    zf.writestr(info, data)


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray | torch.Tensor], manifest: dict[str, Any]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    index = []
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w") as zf:
        for name in sorted(arrays):
            arr = arrays[name]
            if torch.is_tensor(arr):
                arr = arr.detach().cpu().numpy()
            arr = np.ascontiguousarray(arr, dtype="<f4")
            member = f"arrays/{name}.bin"
            _write_member(zf, member, arr.tobytes())
            index.append({"name": name, "shape": list(arr.shape), "dtype": "<f4", "file": member})
        full = dict(manifest)
        full["format_version"] = FORMAT_VERSION
        full["arrays"] = index
        _write_member(zf, "manifest.json", json.dumps(full, indent=2, sort_keys=True).encode())
    tmp.replace(path)


def load_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        arrays = {}
        for entry in manifest["arrays"]:
            raw = np.frombuffer(zf.read(entry["file"]), dtype=entry["dtype"])
            arrays[entry["name"]] = raw.reshape(entry["shape"]).copy()
    return arrays, manifest


def read_manifest(path: str | Path) -> dict[str, Any]:
    with zipfile.ZipFile(path) as zf:
        return json.loads(zf.read("manifest.json"))


def model_config(model: DepthCompletionModel) -> dict[str, Any]:
    return {
        "variant": model.variant,
        "autoencoder": model.autoencoder.cfg.to_dict(),
        "denoiser": model.denoiser.cfg.to_dict(),
        "schedule": model.schedule_cfg.to_dict(),
        "condition_mode": model.condition_mode,
    }


def save_model(
    path: str | Path,
    model: DepthCompletionModel,
    *,
    seed: int,
    step: int,
    extra: dict[str, Any] | None = None,
    optimizer_arrays: dict[str, torch.Tensor] | None = None,
) -> None:
    arrays: dict[str, Any] = {f"model/{k}": v for k, v in model.state_dict().items()}
    for k, v in (optimizer_arrays or {}).items():
        arrays[f"optim/{k}"] = v
    manifest = {"kind": "model", "config": model_config(model), "seed": seed, "step": step, "extra": extra or {}}
    save_arrays(path, arrays, manifest)


def build_model(config: dict[str, Any]) -> DepthCompletionModel:
    ae = Autoencoder(AutoencoderConfig.from_dict(config["autoencoder"]))
    den_cfg = DenoiserConfig.from_dict(config["denoiser"])
    sched = ScheduleConfig(**config["schedule"])
    variant = config["variant"]
    if variant == "late":
        return DepthCompletionModel("late", ae, Denoiser(den_cfg), sched, cond_decoder=ConditionalDecoder(ae.cfg))
    if variant == "early_encoder":
        return DepthCompletionModel("early_encoder", ae, Denoiser(den_cfg), sched, cond_encoder=Encoder(ae.cfg))
    return DepthCompletionModel(variant, ae, Denoiser(den_cfg), sched, condition_mode=config.get("condition_mode", "sparse"))


def load_model(path: str | Path) -> tuple[DepthCompletionModel, dict[str, Any], dict[str, np.ndarray]]:
    """Return ``(model, manifest, optimizer_arrays)``."""
    arrays, manifest = load_arrays(path)
    if manifest.get("kind") != "model":
        raise ValueError(f"{path} is not a model checkpoint")
    model = build_model(manifest["config"])
    state = {k[len("model/"):]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("model/")}
    model.load_state_dict(state)
    optim = {k[len("optim/"):]: v for k, v in arrays.items() if k.startswith("optim/")}
    return model, manifest, optim


def save_autoencoder(path: str | Path, ae: Autoencoder, *, seed: int, step: int, extra: dict | None = None) -> None:
    manifest = {"kind": "autoencoder", "config": ae.cfg.to_dict(), "seed": seed, "step": step, "extra": extra or {}}
    save_arrays(path, dict(ae.state_dict()), manifest)


def load_autoencoder(path: str | Path) -> tuple[Autoencoder, dict[str, Any]]:
    arrays, manifest = load_arrays(path)
    if manifest.get("kind") != "autoencoder":
        raise ValueError(f"{path} is not an autoencoder checkpoint")
    ae = Autoencoder(AutoencoderConfig.from_dict(manifest["config"]))
    ae.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()})
    return ae, manifest


def state_hash(module: torch.nn.Module) -> str:
    """SHA-256 over all parameters and buffers, for frozen-weight checks."""
    import hashlib

    h = hashlib.sha256()
    for k, v in sorted(module.state_dict().items()):
        h.update(k.encode())
        h.update(v.detach().cpu().numpy().tobytes())
    return h.hexdigest()
