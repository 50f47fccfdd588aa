"""Checkpoint format: byte-stable round trips and distinct failure modes."""

import json

import numpy as np
import pytest

from kneemark.checkpoint import (
    MANIFEST_NAME,
    PARAMS_NAME,
    CheckpointError,
    CheckpointNameError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    load_checkpoint,
    read_manifest,
    save_checkpoint,
)
from kneemark.nn.model import ModelConfig, build_model
from kneemark.nn.tensor import Tensor


def _read_pair(path):
    return (path / MANIFEST_NAME).read_bytes(), (path / PARAMS_NAME).read_bytes()


@pytest.fixture()
def saved(tiny_model, tmp_path):
    path = save_checkpoint(tiny_model, tmp_path / "ckpt")
    return path


def test_save_load_save_byte_identical(saved, tmp_path):
    model = load_checkpoint(saved)
    again = save_checkpoint(model, tmp_path / "ckpt2")
    assert _read_pair(saved) == _read_pair(again)


def test_loaded_arrays_match_float32_source(saved, tiny_model):
    model = load_checkpoint(saved)
    src = dict(tiny_model.named_arrays())
    for name, arr in model.named_arrays():
        # values survive exactly: the source is already float32
        assert arr.tobytes() == src[name].astype(np.float32).tobytes(), name
    assert model.cfg == tiny_model.cfg


def test_loaded_model_forward_matches(saved, tiny_model, rng):
    model = load_checkpoint(saved)
    x = rng.standard_normal((2, 1, 16, 16)).astype(np.float32)
    a = tiny_model(Tensor(x), train=False).data
    b = model(Tensor(x), train=False).data
    assert a.tobytes() == b.tobytes()


def test_save_overwrites_existing_directory(saved, tiny_model):
    before = _read_pair(saved)
    save_checkpoint(tiny_model, saved)
    assert _read_pair(saved) == before


def test_manifest_structure(saved, tiny_model):
    manifest = read_manifest(saved)
    assert manifest["format_version"] == 1
    names = [e["name"] for e in manifest["params"]]
    assert names == [n for n, _ in tiny_model.named_arrays()]
    sizes = [e["size"] for e in manifest["params"]]
    offsets = [e["offset"] for e in manifest["params"]]
    assert offsets == [sum(sizes[:i]) for i in range(len(sizes))]
    assert manifest["total_bytes"] == sum(sizes) == len((saved / PARAMS_NAME).read_bytes())
    assert ModelConfig.from_dict(manifest["config"]) == tiny_model.cfg


def _rewrite(path, mutate):
    manifest = json.loads((path / MANIFEST_NAME).read_text())
    mutate(manifest)
    (path / MANIFEST_NAME).write_text(json.dumps(manifest))


def test_version_mismatch_rejected(saved):
    _rewrite(saved, lambda m: m.__setitem__("format_version", 2))
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(saved)


def test_renamed_parameter_rejected(saved):
    def mutate(m):
        m["params"][0]["name"] = "entry.conv.kernle"

    _rewrite(saved, mutate)
    with pytest.raises(CheckpointNameError):
        load_checkpoint(saved)


def test_shape_mismatch_rejected(saved):
    def mutate(m):
        entry = m["params"][0]
        entry["shape"] = list(reversed(entry["shape"]))

    _rewrite(saved, mutate)
    with pytest.raises(CheckpointShapeError):
        load_checkpoint(saved)


def test_truncated_blob_rejected(saved):
    blob = (saved / PARAMS_NAME).read_bytes()
    (saved / PARAMS_NAME).write_bytes(blob[:-8])
    with pytest.raises(CheckpointTruncatedError):
        load_checkpoint(saved)


def test_inconsistent_extent_rejected(saved):
    def mutate(m):
        m["params"][-1]["size"] += 4
        m["total_bytes"] += 4

    _rewrite(saved, mutate)
    with pytest.raises(CheckpointTruncatedError):
        load_checkpoint(saved)


def test_invalid_json_rejected(saved):
    (saved / MANIFEST_NAME).write_text("{not json")
    with pytest.raises(CheckpointError):
        load_checkpoint(saved)


def test_missing_manifest_rejected(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nowhere")


def test_bad_config_rejected(saved):
    def mutate(m):
        m["config"]["width"] = -4

    _rewrite(saved, mutate)
    with pytest.raises(CheckpointError):
        load_checkpoint(saved)


def test_error_classes_are_distinct_checkpoint_errors():
    classes = [CheckpointVersionError, CheckpointNameError, CheckpointShapeError, CheckpointTruncatedError]
    for cls in classes:
        assert issubclass(cls, CheckpointError)
        assert issubclass(CheckpointError, RuntimeError)
    assert len(set(classes)) == 4
    # no subclass relations between the leaf classes
    for a in classes:
        for b in classes:
            if a is not b:
                assert not issubclass(a, b)


def test_float64_round_trip_quantizes_to_float32(tmp_path):
    cfg = ModelConfig(width=4, depth=1, landmarks=2, input_side=16, dropout=0.0)
    model = build_model(cfg, seed=11, dtype=np.float64)
    path = save_checkpoint(model, tmp_path / "ckpt64")
    loaded = load_checkpoint(path, dtype=np.float64)
    src = dict(model.named_arrays())
    for name, arr in loaded.named_arrays():
        assert arr.dtype == np.float64
        ref = src[name].astype(np.float32).astype(np.float64)
        assert arr.tobytes() == ref.tobytes(), name
