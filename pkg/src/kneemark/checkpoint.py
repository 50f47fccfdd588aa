"""Checkpoint directory format.

A checkpoint is a directory holding:

* manifest.json: format version, the model configuration, and an ordered
  list of {name, shape, offset, size} entries, one per named array
  (parameters and batch-norm running statistics);
* params.bin: the arrays' values as little-endian float32, concatenated in
  manifest order; offset/size are in bytes.

Loading rebuilds the model from the stored configuration and validates the
manifest against it, so any of version mismatch, name mismatch, shape
mismatch, or a truncated blob is a distinct error.
"""

import json
from pathlib import Path

import numpy as np

from .nn.model import HourglassModel, ModelConfig, build_model

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
PARAMS_NAME = "params.bin"


class CheckpointError(RuntimeError):
    """Base class for checkpoint load failures."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointNameError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


def save_checkpoint(model: HourglassModel, path) -> Path:
    """Write the model into directory `path` (created if needed)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    chunks = []
    offset = 0
    for name, arr in model.named_arrays():
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "size": len(blob)})
        chunks.append(blob)
        offset += len(blob)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": model.cfg.to_dict(),
        "params": entries,
        "total_bytes": offset,
    }
    (path / PARAMS_NAME).write_bytes(b"".join(chunks))
    (path / MANIFEST_NAME).write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return path


def read_manifest(path) -> dict:
    mf_path = Path(path) / MANIFEST_NAME
    if not mf_path.exists():
        raise CheckpointError(f"{path}: no {MANIFEST_NAME}")
    try:
        manifest = json.loads(mf_path.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{mf_path}: manifest is not valid JSON: {exc}") from exc
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    return manifest


def load_checkpoint(path, dtype=np.float32) -> HourglassModel:
    """Rebuild a model from a checkpoint directory."""
    path = Path(path)
    manifest = read_manifest(path)
    try:
        cfg = ModelConfig.from_dict(manifest["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: bad model config in manifest: {exc}") from exc
    model = build_model(cfg, seed=0, dtype=dtype)
    expected = dict(model.named_arrays())
    entries = manifest.get("params")
    if not isinstance(entries, list):
        raise CheckpointError(f"{path}: manifest has no params list")
    names = [e.get("name") for e in entries]
    expected_names = [n for n, _ in model.named_arrays()]
    if names != expected_names:
        missing = sorted(set(expected_names) - set(names))
        extra = sorted(set(names) - set(expected_names))
        raise CheckpointNameError(
            f"{path}: parameter names do not match the configured model "
            f"(missing {missing[:3]}, unexpected {extra[:3]})"
        )
    blob = (path / PARAMS_NAME).read_bytes()
    total = manifest.get("total_bytes", sum(e["size"] for e in entries))
    if len(blob) < total:
        raise CheckpointTruncatedError(f"{path}: params blob holds {len(blob)} bytes, manifest expects {total}")
    for entry in entries:
        name = entry["name"]
        shape = tuple(entry["shape"])
        target = expected[name]
        if shape != target.shape:
            raise CheckpointShapeError(f"{path}: {name} has shape {shape}, model expects {target.shape}")
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        start, size = entry["offset"], entry["size"]
        if size != count * 4 or start + size > len(blob):
            raise CheckpointTruncatedError(f"{path}: {name} extent [{start}, {start + size}) is inconsistent")
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=start).reshape(shape)
        target[...] = arr.astype(target.dtype)
    return model
