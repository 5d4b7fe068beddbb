"""Flat-file checkpoints.

A checkpoint is a directory with three files: ``params.bin`` holds every
tensor back to back in little-endian byte order, ``index.json`` maps
``<module>.<key>`` names to shape, dtype, and byte offset, and
``config.json`` stores the model configuration, free-form metadata, and
the SHA-256 of ``params.bin`` (used downstream to tell checkpoints
apart).
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np
import torch

from .errors import DataFormatError
from .model import (
    EstimatorFd,
    EstimatorFdPrime,
    Generator,
    ModelConfig,
)
from .rotor import FactorSpec

PARAMS_FILE = "params.bin"
INDEX_FILE = "index.json"
CONFIG_FILE = "config.json"

_DTYPES = {
    "float32": (torch.float32, np.float32),
    "float64": (torch.float64, np.float64),
    "int64": (torch.int64, np.int64),
    "int32": (torch.int32, np.int32),
    "uint8": (torch.uint8, np.uint8),
    "bool": (torch.bool, np.bool_),
}
_TORCH_NAMES = {t: name for name, (t, _) in _DTYPES.items()}


def model_config_to_dict(cfg: ModelConfig) -> dict:
    return {
        "image_size": cfg.image_size,
        "base_width": cfg.base_width,
        "growth": cfg.growth,
        "z0_units": cfg.z0_units,
        "disc_width": cfg.disc_width,
        "est_width": cfg.est_width,
        "est_backbone": cfg.est_backbone,
        "eval_backbone": cfg.eval_backbone,
        "factors": [
            {"name": f.name, "dof": f.dof, "units": f.units, "supervised": f.supervised}
            for f in cfg.factors
        ],
    }


def model_config_from_dict(d: dict) -> ModelConfig:
    try:
        factors = [FactorSpec(**f) for f in d["factors"]]
        return ModelConfig(
            image_size=d["image_size"],
            base_width=d["base_width"],
            growth=d["growth"],
            z0_units=d["z0_units"],
            factors=factors,
            disc_width=d["disc_width"],
            est_width=d["est_width"],
            est_backbone=d["est_backbone"],
            eval_backbone=d["eval_backbone"],
        )
    except (KeyError, TypeError) as err:
        raise DataFormatError(f"malformed model config: {err}") from err


def module_sha256(module) -> str:
    """Digest of a module's parameter bytes, laid out as save_checkpoint writes them.

    Equals the params_sha256 of a checkpoint that holds exactly this module,
    which makes it usable as a lineage fingerprint without touching disk.
    """
    h = hashlib.sha256()
    for tensor in module.state_dict().values():
        t = tensor.detach().cpu().contiguous()
        if t.dtype not in _TORCH_NAMES:
            raise DataFormatError(f"unsupported tensor dtype {t.dtype}")
        arr = t.numpy()
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        h.update(arr.tobytes())
    return h.hexdigest()


def save_checkpoint(
    out_dir: str,
    modules: dict,
    model_config: ModelConfig,
    extra: dict | None = None,
) -> str:
    """Write `modules` (name -> nn.Module) under `out_dir`; returns the dir.

    Tensor bytes are always little endian regardless of host order, so a
    checkpoint file means the same thing everywhere.
    """
    os.makedirs(out_dir, exist_ok=True)
    index = {}
    offset = 0
    with open(os.path.join(out_dir, PARAMS_FILE), "wb") as blob:
        for mod_name, module in modules.items():
            for key, tensor in module.state_dict().items():
                t = tensor.detach().cpu().contiguous()
                if t.dtype not in _TORCH_NAMES:
                    raise DataFormatError(f"unsupported tensor dtype {t.dtype}")
                dtype_name = _TORCH_NAMES[t.dtype]
                arr = t.numpy()
                if arr.dtype.byteorder == ">":
                    arr = arr.astype(arr.dtype.newbyteorder("<"))
                raw = arr.tobytes()
                blob.write(raw)
                index[f"{mod_name}.{key}"] = {
                    "shape": list(t.shape),
                    "dtype": dtype_name,
                    "offset": offset,
                }
                offset += len(raw)
    with open(os.path.join(out_dir, PARAMS_FILE), "rb") as blob:
        sha = hashlib.sha256(blob.read()).hexdigest()
    with open(os.path.join(out_dir, INDEX_FILE), "w") as f:
        json.dump(index, f, sort_keys=True, indent=1)
    config = {
        "model": model_config_to_dict(model_config),
        "extra": extra or {},
        "params_sha256": sha,
    }
    with open(os.path.join(out_dir, CONFIG_FILE), "w") as f:
        json.dump(config, f, sort_keys=True, indent=1)
    return out_dir


@dataclass
class Checkpoint:
    path: str
    model_config: ModelConfig
    extra: dict
    params_sha256: str
    tensors: dict

    def module_names(self):
        return sorted({k.split(".", 1)[0] for k in self.tensors})

    def state_dict(self, module_name: str) -> dict:
        prefix = module_name + "."
        out = {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}
        if not out:
            raise DataFormatError(
                f"checkpoint {self.path} holds no module named {module_name!r}"
            )
        return out


def load_checkpoint(path: str) -> Checkpoint:
    for name in (PARAMS_FILE, INDEX_FILE, CONFIG_FILE):
        if not os.path.exists(os.path.join(path, name)):
            raise DataFormatError(f"checkpoint {path} is missing {name}")
    with open(os.path.join(path, CONFIG_FILE)) as f:
        config = json.load(f)
    with open(os.path.join(path, INDEX_FILE)) as f:
        index = json.load(f)
    with open(os.path.join(path, PARAMS_FILE), "rb") as f:
        blob = f.read()
    total = 0
    tensors = {}
    for key, entry in index.items():
        if entry["dtype"] not in _DTYPES:
            raise DataFormatError(f"entry {key!r} has unknown dtype {entry['dtype']!r}")
        torch_dt, np_dt = _DTYPES[entry["dtype"]]
        shape = tuple(entry["shape"])
        nbytes = int(np.dtype(np_dt).itemsize * int(np.prod(shape, dtype=np.int64)))
        lo = entry["offset"]
        if lo < 0 or lo + nbytes > len(blob):
            raise DataFormatError(
                f"entry {key!r} spans bytes [{lo}, {lo + nbytes}) outside params.bin"
            )
        arr = np.frombuffer(blob, dtype=np.dtype(np_dt).newbyteorder("<"), count=int(np.prod(shape, dtype=np.int64)), offset=lo)
        arr = arr.astype(np_dt).reshape(shape)
        tensors[key] = torch.from_numpy(arr.copy()).to(torch_dt)
        total += nbytes
    if total != len(blob):
        raise DataFormatError(
            f"params.bin holds {len(blob)} bytes but the index accounts for {total}"
        )
    return Checkpoint(
        path=path,
        model_config=model_config_from_dict(config["model"]),
        extra=config.get("extra", {}),
        params_sha256=config["params_sha256"],
        tensors=tensors,
    )


def load_generator(path: str) -> tuple:
    """Rebuild the generator stored at `path`; returns (module, checkpoint)."""
    ckpt = load_checkpoint(path)
    g = Generator(ckpt.model_config)
    g.load_state_dict(ckpt.state_dict("generator"))
    g.eval()
    return g, ckpt


def load_estimator(path: str) -> tuple:
    """Rebuild a pretrained estimator; returns (module, checkpoint).

    The stored ``estimator_kind`` picks the class: ``training`` estimators
    carry feature taps, ``evaluation`` estimators a linear head.
    """
    ckpt = load_checkpoint(path)
    kind = ckpt.extra.get("estimator_kind")
    if kind == "training":
        est = EstimatorFd(ckpt.model_config)
    elif kind == "evaluation":
        est = EstimatorFdPrime(ckpt.model_config)
    else:
        raise DataFormatError(
            f"checkpoint {path} does not record a usable estimator_kind ({kind!r})"
        )
    est.load_state_dict(ckpt.state_dict("estimator"))
    est.eval()
    return est, ckpt
