"""``ganmem`` command line: pretrain-base, train-task, sample, lifelong-classify, evaluate, plot.

Exit codes: 0 success, 2 configuration error, 3 numeric failure, 4 missing artifact.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch
import yaml

from . import __version__
from .checkpoint import CheckpointError, MissingArtifactError, load_checkpoint, save_checkpoint
from .compression import KnowledgeBase, parameter_accounting, train_task_compressed
from .config import DataSpec, ExperimentConfig, from_dict, load_config
from .evaluation import FIDEvaluator, forgetting_report, singular_spectrum_report
from .models import ConfigError
from .registry import BlockMask, GroupMask, TaskRegistry, UnknownTaskError, compose, interpolate
from .replay import make_task_stream, run_lifelong
from .training import NumericalError, generate, pretrain_base, style_parameter_count, train_task, write_ndjson

log = logging.getLogger("ganmem")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_MISSING = 0, 2, 3, 4


# ---------------------------------------------------------------- helpers


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()
    overrides = list(getattr(args, "set", None) or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"train.seed={args.seed}")
    if not overrides:
        return cfg
    d = cfg.to_dict()
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        if section not in d or not isinstance(d[section], dict):
            raise ConfigError(f"unknown config section {section!r}")
        d[section][name] = yaml.safe_load(value)
    return from_dict(d)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def _to_uint8(images: torch.Tensor) -> np.ndarray:
    x = ((images.clamp(-1, 1) + 1) * 127.5).round().to(torch.uint8)
    return x.permute(0, 2, 3, 1).numpy()


def save_images(images: torch.Tensor, out_dir: Path, prefix: str = "sample") -> list[Path]:
    from PIL import Image

    out_dir.mkdir(parents=True, exist_ok=True)
    arr = _to_uint8(images)
    paths = []
    for i, img in enumerate(arr):
        p = out_dir / f"{prefix}_{i:04d}.png"
        Image.fromarray(img.squeeze(-1) if img.shape[-1] == 1 else img).save(p)
        paths.append(p)
    n = len(arr)
    if n:
        cols = int(np.ceil(np.sqrt(n)))
        rows = int(np.ceil(n / cols))
        h, w, c = arr.shape[1:]
        grid = np.zeros((rows * h, cols * w, c), dtype=np.uint8)
        for i, img in enumerate(arr):
            r, q = divmod(i, cols)
            grid[r * h : (r + 1) * h, q * w : (q + 1) * w] = img
        Image.fromarray(grid.squeeze(-1) if c == 1 else grid).save(out_dir / "grid.png")
    return paths


def sample_digest(base, styles, n: int, seed: int, ablation=None) -> str:
    x = generate(base, styles, n, seed, ablation=ablation)
    return hashlib.sha256(x.contiguous().numpy().tobytes()).hexdigest()


def _task_meta(meta: dict, t: int) -> dict:
    return meta.get("tasks", {}).get(str(t), {})


def _evaluator(spec: dict, arch, cfg: ExperimentConfig) -> FIDEvaluator:
    data = DataSpec(**spec).build(arch.image_size)
    return FIDEvaluator(data.images, n_samples=min(cfg.eval.n_samples, len(data)), seed=cfg.eval.seed)


def _record_history(registry: TaskRegistry, meta: dict, cfg: ExperimentConfig, after: int) -> None:
    """FID-surrogate and sample digest of every task so far, as of ``after``."""
    hist = meta.setdefault("history", [])
    for k in registry.task_ids:
        if k == 0:
            continue
        info = _task_meta(meta, k)
        styles = registry.get(k)
        ev = _evaluator(info["data"], registry.base.arch, cfg)
        ab = info.get("ablation")
        fid = ev(lambda n, s: generate(registry.base, styles, n, s, ablation=ab))
        digest = sample_digest(registry.base, styles, cfg.eval.digest_samples, cfg.eval.digest_seed, ab)
        hist.append({"task": k, "after": after, "fid_surrogate": fid, "sample_sha256": digest})


def _run_entry(command: str, cfg: ExperimentConfig, **extra) -> dict:
    return {"command": command, "config": cfg.to_dict(), "version": __version__, **extra}


# ---------------------------------------------------------------- commands


def cmd_pretrain_base(args) -> int:
    cfg = _config(args)
    data = cfg.data.build(cfg.arch.image_size)
    ev = FIDEvaluator(data.images, n_samples=min(cfg.eval.n_samples, len(data)), seed=cfg.eval.seed)
    log.info("pretraining base on %s (%d images, %d steps)", data.name, len(data), cfg.train.steps)
    base, records = pretrain_base(cfg.arch, data, cfg.train, seed=cfg.train.seed, evaluator=ev)
    registry = TaskRegistry(base)
    fid = records[-1]["fid_surrogate"] if records else ev(lambda n, s: generate(base, None, n, s))
    meta = {
        "pretrain": {"data": cfg.data.__dict__, "fid_surrogate": fid},
        "runs": [_run_entry("pretrain-base", cfg)],
        "tasks": {},
        "history": [],
    }
    out = save_checkpoint(args.out, registry, meta)
    write_ndjson(records, Path(str(out) + ".pretrain.ndjson"))
    print(json.dumps({"checkpoint": str(out), "fid_surrogate": fid, "base_sha256": base.digest()}))
    return EXIT_OK


def cmd_train_task(args) -> int:
    cfg = _config(args)
    if args.compressed:
        cfg = cfg.with_overrides(compressed=True)
    if args.ablation:
        cfg = cfg.with_overrides(ablation=args.ablation)
    if args.domain:
        cfg = cfg.with_overrides(**{"data.domain": args.domain})
    registry, meta = load_checkpoint(args.checkpoint)
    base = registry.base
    t = args.task_id if args.task_id is not None else max(registry.task_ids) + 1
    if t in registry:
        raise ConfigError(f"task {t} already exists in {args.checkpoint}")
    data = cfg.data.build(base.arch.image_size)
    classes = data.class_count
    if cfg.compressed:
        kb = registry.kb if registry.kb is not None else KnowledgeBase()
        style, kb, records = train_task_compressed(
            base, data, cfg.train, kb, cfg.energy, task_id=t, class_count=classes
        )
        registry.kb = kb
        accounting = parameter_accounting(base, style)
    else:
        style, records = train_task(base, data, cfg.train, task_id=t, class_count=classes, ablation=cfg.ablation)
        accounting = {"style_params": style.parameter_count(), "base_params": base.parameter_count()}
    registry.register(t, style)
    meta.setdefault("tasks", {})[str(t)] = {
        "data": cfg.data.__dict__,
        "compressed": cfg.compressed,
        "ablation": cfg.ablation,
        "class_count": classes,
        "accounting": {k: v for k, v in accounting.items() if k != "per_matrix"},
    }
    meta.setdefault("runs", []).append(_run_entry("train-task", cfg, task_id=t))
    _record_history(registry, meta, cfg, after=t)
    save_checkpoint(args.checkpoint, registry, meta)
    if args.log:
        write_ndjson(records, args.log)
    report = {"task": t, "final_fid_surrogate": meta["history"][-1]["fid_surrogate"]}
    if cfg.compressed:
        report.update(
            params_naive=accounting["params_naive"],
            params_compressed=accounting["params_compressed"],
            ratio=accounting["ratio"],
        )
    else:
        report.update(accounting)
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def cmd_sample(args) -> int:
    registry, meta = load_checkpoint(args.checkpoint)
    base = registry.base
    if args.interpolate:
        a, b, lam = int(args.interpolate[0]), int(args.interpolate[1]), float(args.interpolate[2])
        ab_a, ab_b = _task_meta(meta, a).get("ablation"), _task_meta(meta, b).get("ablation")
        if ab_a != ab_b:
            raise ConfigError("cannot interpolate tasks trained with different modulation forms")
        styles, ablation = interpolate(registry, a, b, lam), ab_a
    else:
        task = args.task if args.task is not None else max(registry.task_ids)
        groups = GroupMask.parse(args.groups)
        blocks = BlockMask.parse(args.blocks, base.arch)
        styles = compose(registry, task, groups, blocks)
        ablation = _task_meta(meta, task).get("ablation")
    class_ids = None
    if args.class_id is not None:
        if not 0 <= args.class_id < styles.class_count:
            raise ConfigError(f"class id {args.class_id} outside [0, {styles.class_count})")
        class_ids = torch.full((args.n,), args.class_id, dtype=torch.long)
    images = generate(base, styles, args.n, args.seed, class_ids=class_ids, ablation=ablation)
    if not torch.isfinite(images).all():
        raise NumericalError("generated images contain non-finite values")
    out = Path(args.out)
    save_images(images, out)
    _write_json(out / "resolved_config.json", {
        "command": "sample", "checkpoint": str(args.checkpoint), "task": args.task,
        "interpolate": args.interpolate, "groups": args.groups, "blocks": args.blocks,
        "seed": args.seed, "n": args.n, "class_id": args.class_id, "version": __version__,
    })
    print(json.dumps({"out": str(out), "n": args.n}))
    return EXIT_OK


def cmd_lifelong_classify(args) -> int:
    cfg = _config(args)
    base = None
    if args.checkpoint:
        registry, _ = load_checkpoint(args.checkpoint)
        base = registry.base
        size = base.arch.image_size
    else:
        size = cfg.arch.image_size
    if args.mode == "replay" and base is None:
        raise ConfigError("replay mode needs --checkpoint with a pretrained base")
    s = cfg.stream
    stream = make_task_stream(s.n_tasks, s.classes_per_task, s.n_train, s.n_test, size, s.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "resolved_config.json", _run_entry("lifelong-classify", cfg, mode=args.mode))
    result = run_lifelong(stream, cfg.classifier, cfg.train, args.mode, base)
    (out / f"accuracy_{args.mode}.tsv").write_text(result.to_tsv())
    write_ndjson(result.records, out / f"accuracy_{args.mode}.ndjson")
    print(json.dumps({"mode": args.mode, "all_seen": [r["all_seen"] for r in result.records]}))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    registry, meta = load_checkpoint(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    history = {(h["task"], h["after"]): h for h in meta.get("history", [])}
    tasks = [t for t in registry.task_ids if t > 0]
    if not tasks:
        raise MissingArtifactError("checkpoint has no trained tasks to evaluate")
    last = max(tasks)
    # recompute the current state and compare it with what was recorded
    current = []
    for k in tasks:
        info = _task_meta(meta, k)
        ab = info.get("ablation")
        styles = registry.get(k)
        ev = _evaluator(info["data"], registry.base.arch, cfg)
        fid = ev(lambda n, s: generate(registry.base, styles, n, s, ablation=ab))
        digest = sample_digest(registry.base, styles, cfg.eval.digest_samples, cfg.eval.digest_seed, ab)
        first = history.get((k, k), {})
        current.append({
            "task": k, "fid_surrogate": fid, "sample_sha256": digest,
            "identical_to_after_own_task": digest == first.get("sample_sha256"),
        })
    table = forgetting_report({(k, t): h["fid_surrogate"] for (k, t), h in history.items()})
    (out / "forgetting.tsv").write_text(table.to_tsv())
    write_ndjson(table.records(), out / "forgetting.ndjson")
    write_ndjson(current, out / "current.ndjson")
    spectra = {}
    for k in tasks:
        spectra[str(k)] = {key: [list(map(float, x)), list(map(float, y))]
                           for key, (x, y) in singular_spectrum_report(registry.get(k)).items()}
    _write_json(out / "spectra.json", spectra)
    _write_json(out / "accounting.json", {
        "style_params_per_task": style_parameter_count(registry.base),
        "base_params": registry.base.parameter_count(),
        "tasks": {str(k): _task_meta(meta, k).get("accounting") for k in tasks},
    })
    _write_json(out / "resolved_config.json", _run_entry("evaluate", cfg, checkpoint=str(args.checkpoint)))
    print(json.dumps({"tasks": tasks, "after": last, "rows_constant": table.rows_constant(),
                      "identical": all(c["identical_to_after_own_task"] for c in current)}))
    return EXIT_OK


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    acc_series = {}
    for path in map(Path, args.inputs):
        if not path.is_file():
            raise MissingArtifactError(f"input {path} not found")
        recs = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
        if recs and "after" in recs[0]:
            fig, ax = plt.subplots(figsize=(5, 3.5))
            metric = next(k for k in recs[0] if k not in ("task", "after"))
            for k in sorted({r["task"] for r in recs}):
                pts = sorted((r["after"], r[metric]) for r in recs if r["task"] == k)
                ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=f"task {k}")
            ax.set_xlabel("after training task")
            ax.set_ylabel(metric)
            ax.legend()
            fig.tight_layout()
            target = out / f"{path.stem}.png"
            fig.savefig(target, metadata={"Software": None})
            plt.close(fig)
            written.append(str(target))
        elif recs and "all_seen" in recs[0]:
            acc_series[recs[0]["mode"]] = [(r["task"], r["all_seen"]) for r in recs]
        else:
            raise ConfigError(f"{path}: unrecognised record stream")
    if acc_series:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for mode in sorted(acc_series):
            pts = acc_series[mode]
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=mode)
        ax.set_xlabel("number of tasks seen")
        ax.set_ylabel("accuracy on all seen classes")
        ax.set_ylim(0, 1)
        ax.legend()
        fig.tight_layout()
        target = out / "accuracy.png"
        fig.savefig(target, metadata={"Software": None})
        plt.close(fig)
        written.append(str(target))
    print(json.dumps({"figures": written}))
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ganmem", description="Lifelong GAN memory on a frozen base generator.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="YAML or JSON experiment config")
            sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")
            sp.add_argument("--seed", type=int, help="shorthand for --set train.seed=N")

    sp = sub.add_parser("pretrain-base", help="train the base GAN on the source domain")
    common(sp)
    sp.add_argument("--out", required=True, help="checkpoint directory to write")
    sp.set_defaults(fn=cmd_pretrain_base)

    sp = sub.add_parser("train-task", help="learn one task's style parameters into a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--task-id", type=int)
    sp.add_argument("--domain", help="shorthand for --set data.domain=NAME")
    sp.add_argument("--compressed", action="store_true")
    sp.add_argument("--ablation", choices=["NoNorm", "NoBias"])
    sp.add_argument("--log", help="write the per-step metrics as NDJSON")
    sp.set_defaults(fn=cmd_train_task)

    sp = sub.add_parser("sample", help="write generated images for a stored task")
    sp.add_argument("--checkpoint", required=True)
    g = sp.add_mutually_exclusive_group()
    g.add_argument("--task", type=int)
    g.add_argument("--interpolate", nargs=3, metavar=("A", "B", "LAMBDA"))
    sp.add_argument("--groups", default="all", help="all, none or a list of scales,shifts,biases")
    sp.add_argument("--blocks", default="all", help="all, none, upto:B1 or a list like FC,B0")
    sp.add_argument("--class-id", type=int)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--n", type=int, default=64)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_sample)

    sp = sub.add_parser("lifelong-classify", help="class-incremental classification over a task stream")
    common(sp)
    sp.add_argument("--mode", choices=["replay", "naive", "joint"], default="replay")
    sp.add_argument("--checkpoint", help="base checkpoint (required for replay)")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_lifelong_classify)

    sp = sub.add_parser("evaluate", help="forgetting table, spectra and accounting for a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_evaluate)

    sp = sub.add_parser("plot", help="render figures from NDJSON record streams")
    sp.add_argument("inputs", nargs="+")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    torch.set_num_threads(1)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (UnknownTaskError, MissingArtifactError, FileNotFoundError) as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except CheckpointError as exc:
        # a corrupt or foreign checkpoint is as unusable as an absent one
        print(f"unreadable artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (NumericalError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
