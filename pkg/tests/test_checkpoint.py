import json

import numpy as np
import pytest
import torch

from ganmem.checkpoint import (
    CheckpointError,
    MissingArtifactError,
    blob_file,
    load_checkpoint,
    read_manifest,
    save_checkpoint,
)
from ganmem.compression import EnergyPolicy, KnowledgeBase, train_task_compressed
from ganmem.registry import TaskRegistry
from ganmem.training import TrainHyper, generate, train_task

FAST = TrainHyper(lr=1e-3, steps=4, batch_size=8, seed=0)


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def plain_registry(tiny_base, tiny_data):
    reg = TaskRegistry(tiny_base)
    reg.register(1, train_task(tiny_base, tiny_data, FAST)[0])
    reg.register(2, train_task(tiny_base, tiny_data, TrainHyper(lr=1e-3, steps=4, batch_size=8, seed=1))[0])
    return reg


@pytest.fixture(scope="module")
def compressed_registry(tiny_base, tiny_data):
    policy = EnergyPolicy(keep={"B0": 90})
    kb = KnowledgeBase()
    c1, kb, _ = train_task_compressed(tiny_base, tiny_data, FAST, kb, policy, task_id=1)
    c2, kb, _ = train_task_compressed(tiny_base, tiny_data, FAST, kb, policy, task_id=2)
    reg = TaskRegistry(tiny_base, kb)
    return reg.register(1, c1).register(2, c2)


@pytest.mark.parametrize("which", ["plain_registry", "compressed_registry"])
def test_round_trip_is_byte_identical(which, request, tmp_path):
    reg = request.getfixturevalue(which)
    save_checkpoint(tmp_path / "a", reg, {"note": "x"})
    loaded, meta = load_checkpoint(tmp_path / "a")
    assert meta == {"note": "x"}
    save_checkpoint(tmp_path / "b", loaded, meta)
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")
    for t in (1, 2):
        assert loaded.get(t).digest() == reg.get(t).digest()
        assert torch.equal(generate(loaded.base, loaded.get(t), 8, 3), generate(reg.base, reg.get(t), 8, 3))


def test_blob_layout(plain_registry, tmp_path):
    save_checkpoint(tmp_path / "c", plain_registry)
    manifest = read_manifest(tmp_path / "c")
    assert manifest["tasks"] == [{"class_count": 1, "id": 1, "kind": "plain"}, {"class_count": 1, "id": 2, "kind": "plain"}]
    for name, info in manifest["blobs"].items():
        raw = blob_file(tmp_path / "c", name).read_bytes()
        assert len(raw) == 4 * int(np.prod(info["shape"]))
    w = plain_registry.base.layers["G/fc"].weight
    raw = blob_file(tmp_path / "c", "base/G/fc/weight").read_bytes()
    assert np.array_equal(np.frombuffer(raw, "<f4").reshape(w.shape), w.numpy())


def test_compressed_blobs_do_not_duplicate_vectors(compressed_registry, tmp_path):
    save_checkpoint(tmp_path / "c", compressed_registry)
    names = read_manifest(tmp_path / "c")["blobs"]
    assert any(n.startswith("kb/") for n in names)
    assert not any(n.endswith(("/u", "/v")) for n in names)


def test_corruption_detected(plain_registry, tmp_path):
    save_checkpoint(tmp_path / "c", plain_registry)
    f = blob_file(tmp_path / "c", "task1/G/fc/scale")
    raw = bytearray(f.read_bytes())
    raw[0] ^= 0xFF
    f.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "c")
    f.write_bytes(bytes(raw[:-4]))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "c")
    f.unlink()
    with pytest.raises(MissingArtifactError):
        load_checkpoint(tmp_path / "c")


def test_missing_and_foreign_manifests(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "nowhere")
    (tmp_path / "x").mkdir()
    (tmp_path / "x" / "manifest.json").write_text(json.dumps({"format": "other"}))
    with pytest.raises(CheckpointError):
        read_manifest(tmp_path / "x")


def test_overwrite_replaces_old_blobs(plain_registry, tiny_base, tmp_path):
    save_checkpoint(tmp_path / "c", plain_registry)
    save_checkpoint(tmp_path / "c", TaskRegistry(tiny_base))
    assert not blob_file(tmp_path / "c", "task1/G/fc/scale").exists()
    assert len(load_checkpoint(tmp_path / "c")[0]) == 1
