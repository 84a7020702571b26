"""Class-incremental classification with generative replay from the GAN memory.

A single classifier sees the task stream in order. In ``replay`` mode each
classifier batch at task ``t`` holds ``n`` real images of task ``t`` plus
``n`` generated images for every earlier task, drawn on the fly from that
task's conditional style; ``naive`` trains on the current task only and
``joint`` on real data of every task seen so far (the upper bound).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from .data import ImageDataset, make_labeled_task
from .models import BaseModel
from .registry import TaskRegistry
from .training import NumericalError, TrainHyper, generate, train_task

MODES = ("replay", "naive", "joint")


@dataclass
class TaskStream:
    train: list[ImageDataset]
    test: list[ImageDataset]

    def __post_init__(self):
        if len(self.train) != len(self.test) or not self.train:
            raise ValueError("stream needs matching, non-empty train/test task lists")

    def __len__(self) -> int:
        return len(self.train)

    def classes(self, t: int) -> int:
        """Class count of task ``t`` (1-based)."""
        return self.train[t - 1].class_count

    def offset(self, t: int) -> int:
        return sum(self.classes(k) for k in range(1, t))

    @property
    def total_classes(self) -> int:
        return self.offset(len(self) + 1)


def make_task_stream(
    n_tasks: int = 4,
    classes_per_task: int = 3,
    n_train: int = 200,
    n_test: int = 100,
    size: int = 32,
    seed: int = 0,
    workers: int | None = None,
) -> TaskStream:
    """Per-class counts ``n_train``/``n_test``; splits come from disjoint seeds."""
    train, test = [], []
    for t in range(n_tasks):
        train.append(make_labeled_task(t, classes_per_task, n_train, size, seed=seed * 1000 + 2 * t, workers=workers))
        test.append(make_labeled_task(t, classes_per_task, n_test, size, seed=seed * 1000 + 2 * t + 1, workers=workers))
    return TaskStream(train, test)


# ---------------------------------------------------------------- classifier


@dataclass(frozen=True)
class ClassifierConfig:
    width: int = 32
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    batch_per_task: int = 32  # n in the n * t batch composition
    steps_per_task: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.batch_per_task < 1:
            raise ValueError("batch_per_task must be >= 1")
        if self.steps_per_task < 0 or self.width < 1 or self.lr <= 0:
            raise ValueError("invalid classifier config")

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["betas"] = list(self.betas)
        return d


def init_classifier(channels: int, n_classes: int, width: int = 32, seed: int = 0) -> dict[str, Tensor]:
    g = torch.Generator().manual_seed(seed)

    def conv(c_out, c_in):
        return torch.randn(c_out, c_in, 3, 3, generator=g) * math.sqrt(2.0 / (c_in * 9))

    params = {
        "c1": conv(width, channels),
        "c2": conv(2 * width, width),
        "c3": conv(2 * width, 2 * width),
        "fc": torch.randn(n_classes, 2 * width, generator=g) / math.sqrt(2 * width),
    }
    params.update({f"{k}_b": torch.zeros(v.shape[0]) for k, v in list(params.items())})
    return {k: v.requires_grad_(True) for k, v in params.items()}


def classifier_forward(params: dict[str, Tensor], x: Tensor) -> Tensor:
    h = F.relu(F.conv2d(x, params["c1"], params["c1_b"], padding=1))
    h = F.avg_pool2d(h, 2)
    h = F.relu(F.conv2d(h, params["c2"], params["c2_b"], padding=1))
    h = F.avg_pool2d(h, 2)
    h = F.relu(F.conv2d(h, params["c3"], params["c3_b"], padding=1))
    return F.linear(h.mean((2, 3)), params["fc"], params["fc_b"])


def predict(params: dict[str, Tensor], x: Tensor, n_seen: int, chunk: int = 512) -> Tensor:
    """Arg-max over the first ``n_seen`` classes (no task identity)."""
    with torch.no_grad():
        return torch.cat(
            [classifier_forward(params, x[i : i + chunk])[:, :n_seen].argmax(1) for i in range(0, len(x), chunk)]
        )


# ---------------------------------------------------------------- replay


@dataclass
class LabeledBatch:
    images: Tensor
    labels: Tensor  # global class ids
    provenance: list[str] = field(default_factory=list)  # "real:task{t}" or "replay:task{t}"

    def __len__(self) -> int:
        return self.images.shape[0]

    @staticmethod
    def concat(parts: list["LabeledBatch"]) -> "LabeledBatch":
        parts = [p for p in parts if len(p)]
        if not parts:
            return LabeledBatch(torch.empty(0), torch.empty(0, dtype=torch.long), [])
        return LabeledBatch(
            torch.cat([p.images for p in parts]),
            torch.cat([p.labels for p in parts]),
            [tag for p in parts for tag in p.provenance],
        )


def build_replay_batch(
    registry: TaskRegistry, base: BaseModel, stream: TaskStream, tasks, n: int, seed: int
) -> LabeledBatch:
    """``n`` generated samples per listed task, labels uniform over its classes."""
    if n < 1:
        raise ValueError("n must be >= 1")
    parts = []
    for k in tasks:
        styles = registry.get(k)  # raises UnknownTaskError for a missing prior task
        gen = torch.Generator().manual_seed(seed * 7919 + k)
        local = torch.randint(styles.class_count, (n,), generator=gen)
        images = generate(base, styles, n, seed * 7919 + k, class_ids=local)
        parts.append(LabeledBatch(images, local + stream.offset(k), [f"replay:task{k}"] * n))
    return LabeledBatch.concat(parts)


def _real_batch(stream: TaskStream, t: int, n: int, gen: torch.Generator) -> LabeledBatch:
    data = stream.train[t - 1]
    idx = torch.randint(len(data), (n,), generator=gen)
    return LabeledBatch(data.images[idx], data.labels[idx] + stream.offset(t), [f"real:task{t}"] * n)


@dataclass
class LifelongResult:
    accuracy: np.ndarray  # A[t-1, k-1] = accuracy on task k after task t; NaN for k > t
    mode: str
    records: list[dict] = field(default_factory=list)
    registry: TaskRegistry | None = None
    completed: int = 0

    def all_seen(self, t: int | None = None) -> float:
        """Mean accuracy over the tasks seen by the end of task ``t`` (default: last completed)."""
        t = self.completed if t is None else t
        return float(np.mean(self.accuracy[t - 1, :t]))

    def to_tsv(self) -> str:
        n = self.accuracy.shape[0]
        lines = ["after\\task\t" + "\t".join(str(k + 1) for k in range(n))]
        for t in range(n):
            cells = ["" if np.isnan(v) else f"{v:.6f}" for v in self.accuracy[t]]
            lines.append(f"{t + 1}\t" + "\t".join(cells))
        return "\n".join(lines) + "\n"


def evaluate_classifier(params, stream: TaskStream, t: int) -> list[float]:
    n_seen = stream.offset(t + 1)
    accs = []
    for k in range(1, t + 1):
        test = stream.test[k - 1]
        pred = predict(params, test.images, n_seen)
        accs.append(float((pred == test.labels + stream.offset(k)).float().mean()))
    return accs


def run_lifelong(
    stream: TaskStream,
    classifier: ClassifierConfig,
    gan_hyper: TrainHyper | None = None,
    mode: str = "replay",
    base: BaseModel | None = None,
    sink=None,
    batch_hook=None,
) -> LifelongResult:
    """Train one classifier over the stream; see the module docstring for the modes.

    On divergence the partial result (rows up to the last finished task) is
    attached to the raised ``NumericalError`` as ``.partial``.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    if mode == "replay" and (base is None or gan_hyper is None):
        raise ValueError("replay mode needs a base model and GAN hyper-parameters")
    T = len(stream)
    channels = stream.train[0].images.shape[1]
    params = init_classifier(channels, stream.total_classes, classifier.width, classifier.seed)
    opt = torch.optim.Adam(params.values(), lr=classifier.lr, betas=classifier.betas)
    registry = TaskRegistry(base) if mode == "replay" else None
    result = LifelongResult(np.full((T, T), np.nan), mode, [], registry)
    gen = torch.Generator().manual_seed(classifier.seed + 1)
    n = classifier.batch_per_task

    def emit(rec):
        result.records.append(rec)
        if sink is not None:
            sink(rec)

    for t in range(1, T + 1):
        if mode == "replay":
            # step (i): grow the GAN memory with a conditional style for task t
            styles, _ = train_task(
                base, stream.train[t - 1], replace(gan_hyper, seed=gan_hyper.seed + t),
                task_id=t, class_count=stream.classes(t),
            )
            registry.register(t, styles)
        n_seen = stream.offset(t + 1)
        # step (ii): classifier on real data of task t plus replay / history
        for step in range(1, classifier.steps_per_task + 1):
            parts = [_real_batch(stream, t, n, gen)]
            if mode == "replay" and t > 1:
                parts.append(build_replay_batch(registry, base, stream, range(1, t), n, seed=t * 100003 + step))
            elif mode == "joint":
                parts += [_real_batch(stream, k, n, gen) for k in range(1, t)]
            batch = LabeledBatch.concat(parts)
            if batch_hook is not None:
                batch_hook(t, step, batch)
            logits = classifier_forward(params, batch.images)[:, :n_seen]
            loss = F.cross_entropy(logits, batch.labels)
            if not torch.isfinite(loss):
                err = NumericalError(f"classifier loss diverged at task {t}, step {step}")
                err.partial = result
                raise err
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
        accs = evaluate_classifier(params, stream, t)
        result.accuracy[t - 1, :t] = accs
        result.completed = t
        emit({"mode": mode, "task": t, "accuracy": accs, "all_seen": float(np.mean(accs))})
    return result
