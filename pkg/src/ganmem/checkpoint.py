"""Directory checkpoint holding the base model, every task style and the knowledge base.

Layout::

    <dir>/manifest.json         sorted-key JSON: architecture, task table, blob index, metadata
    <dir>/blobs/<name>.f32      one headerless little-endian float32 array per tensor

Blob names are ``base/<layer>/{weight,bias}``, ``stats/<layer>/{mean,std}``,
``task<t>/<layer>/{scale,shift,bias}`` for plain styles,
``task<t>/<layer>/<param>/{lam,s}`` for compressed matrices and
``kb/<layer>/<param>/{L,R}``. A compressed task's singular vectors are not
duplicated: they are the KB columns appended when that task finished.
Saving a freshly loaded checkpoint reproduces every file byte for byte.
"""
from __future__ import annotations

import hashlib
import json
import os
import shutil
import tempfile
from pathlib import Path

import numpy as np
import torch

from .compression import CompressedFactor, CompressedStyle, KnowledgeBase, source_offset
from .models import ArchConfig, BaseModel, LayerStats, layer_specs
from .modulation import ConvLayer, FCLayer, Style
from .registry import StyleSet, TaskRegistry, source_style_set

FORMAT = "ganmem-checkpoint"
VERSION = 1
BLOB_DTYPE = "<f4"


class CheckpointError(Exception):
    pass


class MissingArtifactError(CheckpointError, FileNotFoundError):
    pass


def _blob(t: torch.Tensor) -> np.ndarray:
    if not t.is_floating_point():
        raise CheckpointError(f"unsupported dtype {t.dtype}")
    return np.ascontiguousarray(t.detach().cpu().numpy().astype(BLOB_DTYPE, copy=False))


def blob_file(root: Path, name: str) -> Path:
    return root / "blobs" / f"{name}.f32"


def _collect(registry: TaskRegistry) -> tuple[dict[str, torch.Tensor], list[dict]]:
    base = registry.base
    blobs: dict[str, torch.Tensor] = {}
    for path, layer in base.layers.items():
        blobs[f"base/{path}/weight"] = layer.weight
        blobs[f"base/{path}/bias"] = layer.bias
    for path, st in base.stats.items():
        blobs[f"stats/{path}/mean"] = st.mean
        blobs[f"stats/{path}/std"] = st.std
    tasks = []
    for t in registry.task_ids:
        if t == 0:
            continue
        entry = registry.entry(t)
        info = {"id": t, "class_count": entry.class_count}
        if isinstance(entry, StyleSet):
            info["kind"] = "plain"
            for key, tensor in registry.get(t).tensors().items():
                blobs[f"task{t}/{key}"] = tensor
        else:
            info["kind"] = "compressed"
            info["factors"] = {}
            for path, style in entry.plain.items():
                for name, tensor in style.tensors().items():
                    if f"{path}/{name}" not in entry.factors:
                        blobs[f"task{t}/{path}/{name}"] = tensor
            for key, f in entry.factors.items():
                blobs[f"task{t}/{key}/lam"] = f.lam
                blobs[f"task{t}/{key}/s"] = f.s
                info["factors"][key] = {"kb_width": f.kb_width, "rank": f.rank}
        tasks.append(info)
    kb = registry.kb
    if kb is not None:
        for key in kb.left:
            blobs[f"kb/{key}/L"] = kb.left[key]
            blobs[f"kb/{key}/R"] = kb.right[key]
    return blobs, tasks


def save_checkpoint(path, registry: TaskRegistry, meta: dict | None = None) -> Path:
    """Write (atomically replace) a checkpoint directory."""
    path = Path(path)
    blobs, tasks = _collect(registry)
    index, raws = {}, {}
    for name in sorted(blobs):
        raw = _blob(blobs[name]).tobytes()
        index[name] = {
            "dtype": "float32",
            "shape": list(blobs[name].shape),
            "sha256": hashlib.sha256(raw).hexdigest(),
        }
        raws[name] = raw
    kb = registry.kb
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "arch": registry.base.arch.to_dict(),
        "base_digest": registry.base.to(torch.float32).digest(),
        "tasks": tasks,
        "kb_snapshots": {} if kb is None else {str(t): w for t, w in sorted(kb.snapshots.items())},
        "has_kb": kb is not None,
        "blobs": index,
        "meta": meta or {},
    }
    text = json.dumps(manifest, sort_keys=True, indent=1) + "\n"
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=".ckpt-", dir=path.parent))
    try:
        for name, raw in raws.items():
            f = blob_file(tmp, name)
            f.parent.mkdir(parents=True, exist_ok=True)
            f.write_bytes(raw)
        (tmp / "manifest.json").write_text(text)
        if path.exists():
            shutil.rmtree(path)
        os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    mf = path / "manifest.json"
    if not mf.is_file():
        raise MissingArtifactError(f"no checkpoint at {path} (missing manifest.json)")
    manifest = json.loads(mf.read_text())
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{mf} is not a {FORMAT} manifest")
    if manifest.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {manifest.get('version')}")
    return manifest


def load_checkpoint(path) -> tuple[TaskRegistry, dict]:
    """Return ``(registry, meta)``; every blob is verified against its sha256."""
    path = Path(path)
    manifest = read_manifest(path)

    def get(name: str) -> torch.Tensor:
        try:
            info = manifest["blobs"][name]
        except KeyError:
            raise CheckpointError(f"checkpoint lacks blob {name}") from None
        f = blob_file(path, name)
        if not f.is_file():
            raise MissingArtifactError(f"checkpoint {path} is missing blob file {f}")
        raw = f.read_bytes()
        if len(raw) != 4 * int(np.prod(info["shape"])) or hashlib.sha256(raw).hexdigest() != info["sha256"]:
            raise CheckpointError(f"blob {name} is truncated or corrupt")
        arr = np.frombuffer(raw, dtype=BLOB_DTYPE).reshape(info["shape"])
        return torch.from_numpy(arr.astype(np.float32))

    arch = ArchConfig.from_dict(manifest["arch"])
    specs = {s.path: s for s in layer_specs(arch)}
    layers = {}
    for p, spec in specs.items():
        cls = ConvLayer if spec.kind == "conv" else FCLayer
        layers[p] = cls(get(f"base/{p}/weight"), get(f"base/{p}/bias"))
    stats = {p: LayerStats(get(f"stats/{p}/mean"), get(f"stats/{p}/std")) for p, s in specs.items() if s.modulated}
    base = BaseModel(arch, layers, stats)
    if base.digest() != manifest["base_digest"]:
        raise CheckpointError("base model digest mismatch")

    kb = None
    if manifest["has_kb"]:
        left, right = {}, {}
        for name in manifest["blobs"]:
            if name.startswith("kb/") and name.endswith("/L"):
                key = name[3:-2]
                left[key], right[key] = get(f"kb/{key}/L"), get(f"kb/{key}/R")
        snaps = {int(t): w for t, w in manifest["kb_snapshots"].items()}
        kb = KnowledgeBase(left, right, snaps)
    registry = TaskRegistry(base, kb)

    for info in manifest["tasks"]:
        t, count = info["id"], info["class_count"]
        template = source_style_set(base, count)
        if info["kind"] == "plain":
            layers_t = {
                p: Style(*(get(f"task{t}/{p}/{n}") for n in ("scale", "shift", "bias")))
                for p in template.layers
            }
            registry.register(t, StyleSet(t, layers_t, count, arch.fingerprint()))
            continue
        factors = {}
        for key, dims in info["factors"].items():
            lam, s = get(f"task{t}/{key}/lam"), get(f"task{t}/{key}/s")
            start, rank = dims["kb_width"], dims["rank"]
            if lam.shape[0] != start or s.shape[0] != rank:
                raise CheckpointError(f"task {t} {key}: factor sizes disagree with the manifest")
            u = kb.left[key][:, start : start + rank].clone()
            v = kb.right[key][:, start : start + rank].clone()
            factors[key] = CompressedFactor(lam, s, u, v)
        plain = {}
        for p, style in template.layers.items():
            vals = {}
            for n, src in style.tensors().items():
                key = f"{p}/{n}"
                vals[n] = source_offset(base, key).clone() if key in factors else get(f"task{t}/{key}")
            plain[p] = Style(**vals)
        registry.register(t, CompressedStyle(t, plain, factors, count, arch.fingerprint()))
    return registry, manifest["meta"]
