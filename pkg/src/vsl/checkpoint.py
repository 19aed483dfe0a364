"""Checkpoint archives.

A checkpoint is a zip file holding manifest.json and blob.bin. The manifest
maps tensor names to dtype/shape/byte-offset entries into the blob, a single
run of little-endian 32-bit floats, and carries the model configuration plus
free-form training metadata. Optimizer moments ride along under an
"optimizer/" name prefix so a resumed run continues the same trajectory.
"""

import dataclasses
import json
import zipfile
from dataclasses import dataclass

import numpy as np
import torch

from .errors import DataError, ShapeError
from .latent_hierarchy import HierarchyConfig
from .model import ModelConfig, VSLModel

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
BLOB_NAME = "blob.bin"
_OPT_M = "optimizer/m/"
_OPT_V = "optimizer/v/"

_TUPLE_FIELDS = ("encoder_channels", "encoder_kernels", "encoder_strides",
                 "regressor_channels", "regressor_kernels", "regressor_strides",
                 "regressor_hidden")


def model_config_to_dict(config: ModelConfig) -> dict:
    out = {f.name: getattr(config, f.name) for f in dataclasses.fields(config)}
    out["hierarchy"] = dataclasses.asdict(config.hierarchy)
    for key in _TUPLE_FIELDS:
        out[key] = list(out[key])
    return out


def model_config_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    try:
        hierarchy = HierarchyConfig(**d.pop("hierarchy"))
        for key in _TUPLE_FIELDS:
            if key in d:
                d[key] = tuple(d[key])
        return ModelConfig(hierarchy=hierarchy, **d)
    except (TypeError, KeyError, ValueError, ShapeError) as exc:
        raise DataError(f"bad model config in checkpoint: {exc}") from exc


@dataclass
class Checkpoint:
    """Everything read back from an archive, not yet applied to a model."""

    model_config: ModelConfig
    tensors: dict
    metadata: dict
    with_regressor: bool = True
    optimizer_m: dict | None = None
    optimizer_v: dict | None = None
    optimizer_step: int = 0


def _named_tensors(model: VSLModel, optimizer=None) -> dict:
    out = {name: p.detach() for name, p in model.named_parameters()}
    if optimizer is not None:
        for name, t in optimizer.m.items():
            out[_OPT_M + name] = t
        for name, t in optimizer.v.items():
            out[_OPT_V + name] = t
    return out


def save_checkpoint(path, model: VSLModel, optimizer=None, metadata=None):
    """Write the archive. Parameters must be float32 (the blob format is
    fixed); optimizer, when given, contributes its m/v moments and step."""
    tensors = _named_tensors(model, optimizer)
    entries = {}
    chunks = []
    offset = 0
    for name in sorted(tensors):
        t = tensors[name]
        if t.dtype != torch.float32:
            raise DataError(f"checkpoint stores float32 only, {name} is {t.dtype}")
        arr = t.cpu().contiguous().numpy().astype("<f4", copy=False)
        entries[name] = {
            "dtype": "float32",
            "shape": list(arr.shape),
            "offset": offset,
        }
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    meta = dict(metadata or {})
    if optimizer is not None:
        meta["optimizer_step"] = int(optimizer.step)
    manifest = {
        "format_version": FORMAT_VERSION,
        "model_config": model_config_to_dict(model.config),
        "with_regressor": model.regressor is not None,
        "tensors": entries,
        "blob_size": offset,
        "metadata": meta,
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr(MANIFEST_NAME, json.dumps(manifest, indent=1, sort_keys=True))
        zf.writestr(BLOB_NAME, b"".join(chunks))


def load_checkpoint(path) -> Checkpoint:
    """Read and fully validate an archive; no partial results on error."""
    try:
        with zipfile.ZipFile(path, "r") as zf:
            names = set(zf.namelist())
            if MANIFEST_NAME not in names or BLOB_NAME not in names:
                raise DataError(f"{path}: not a checkpoint archive")
            manifest = json.loads(zf.read(MANIFEST_NAME))
            blob = zf.read(BLOB_NAME)
    except (zipfile.BadZipFile, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: unreadable checkpoint: {exc}") from exc

    if manifest.get("format_version") != FORMAT_VERSION:
        raise DataError(
            f"{path}: unsupported checkpoint version {manifest.get('format_version')}"
        )
    if manifest.get("blob_size") != len(blob):
        raise DataError(
            f"{path}: blob is {len(blob)} bytes, manifest says "
            f"{manifest.get('blob_size')}"
        )

    tensors = {}
    for name, entry in manifest["tensors"].items():
        if entry["dtype"] != "float32":
            raise DataError(f"{path}: tensor {name} has dtype {entry['dtype']}")
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        start = entry["offset"]
        end = start + 4 * count
        if start < 0 or end > len(blob):
            raise DataError(f"{path}: tensor {name} overruns the blob")
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=start)
        tensors[name] = torch.from_numpy(arr.reshape(shape).copy())

    opt_m = {k[len(_OPT_M):]: v for k, v in tensors.items() if k.startswith(_OPT_M)}
    opt_v = {k[len(_OPT_V):]: v for k, v in tensors.items() if k.startswith(_OPT_V)}
    params = {k: v for k, v in tensors.items()
              if not k.startswith(_OPT_M) and not k.startswith(_OPT_V)}
    metadata = manifest.get("metadata", {})
    return Checkpoint(
        model_config=model_config_from_dict(manifest["model_config"]),
        tensors=params,
        metadata=metadata,
        with_regressor=manifest.get("with_regressor", True),
        optimizer_m=opt_m or None,
        optimizer_v=opt_v or None,
        optimizer_step=int(metadata.get("optimizer_step", 0)),
    )


def apply_parameters(model: VSLModel, tensors: dict):
    """Copy tensors into the model's parameters by name. Every name and shape
    is checked before anything is written, so a mismatch leaves the model
    untouched."""
    params = dict(model.named_parameters())
    missing = sorted(set(params) - set(tensors))
    extra = sorted(set(tensors) - set(params))
    if missing or extra:
        raise ShapeError(
            f"parameter names do not match checkpoint "
            f"(missing {missing[:3]}, extra {extra[:3]})"
        )
    for name, p in params.items():
        if tuple(tensors[name].shape) != tuple(p.shape):
            raise ShapeError(
                f"{name}: checkpoint shape {tuple(tensors[name].shape)} != "
                f"model shape {tuple(p.shape)}"
            )
    with torch.no_grad():
        for name, p in params.items():
            p.copy_(tensors[name].to(p.dtype))


def restore_model(ckpt: Checkpoint) -> VSLModel:
    """Build a model from the stored config and load its parameters."""
    model = VSLModel(ckpt.model_config, with_regressor=ckpt.with_regressor)
    apply_parameters(model, ckpt.tensors)
    return model
