"""Per-task style storage: the GAN memory proper.

Task 0 is always the source identity style of the base model. Entries are
stored as read-only arrays and handed out as fresh tensors, so nothing a
caller does to a returned StyleSet can reach the stored bytes.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from types import MappingProxyType

import numpy as np
import torch

from .models import BaseModel, block_names
from .modulation import Style, init_source_style

GROUPS = ("scales", "shifts", "biases")
_GROUP_OF = {"scale": "scales", "shift": "shifts", "bias": "biases"}


class RegistryError(KeyError):
    pass


class UnknownTaskError(RegistryError):
    pass


@dataclass
class StyleSet:
    task_id: int
    layers: dict[str, Style]
    class_count: int = 1
    arch_fingerprint: str = ""

    def tensors(self) -> dict[str, torch.Tensor]:
        """Flat ``{layer_path/param: tensor}`` view."""
        return {
            f"{path}/{name}": t
            for path, style in self.layers.items()
            for name, t in style.tensors().items()
        }

    def clone(self, task_id: int | None = None) -> "StyleSet":
        return StyleSet(
            self.task_id if task_id is None else task_id,
            {p: s.map(lambda t: t.detach().clone()) for p, s in self.layers.items()},
            self.class_count,
            self.arch_fingerprint,
        )

    def digest(self) -> str:
        h = hashlib.sha256()
        for key, t in sorted(self.tensors().items()):
            h.update(key.encode())
            h.update(t.detach().contiguous().numpy().tobytes())
        return h.hexdigest()

    def parameter_count(self) -> int:
        return sum(t.numel() for t in self.tensors().values())

    def equal(self, other: "StyleSet") -> bool:
        a, b = self.tensors(), other.tensors()
        return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


def source_style_set(base: BaseModel, class_count: int = 1, task_id: int = 0) -> StyleSet:
    layers = {}
    for spec in base.modulated_specs:
        n = class_count if spec.class_bias else 1
        layers[spec.path] = init_source_style(base.layers[spec.path], base.stats[spec.path], n)
    return StyleSet(task_id, layers, class_count, base.arch.fingerprint())


@dataclass(frozen=True)
class GroupMask:
    scales: bool = True
    shifts: bool = True
    biases: bool = True

    @classmethod
    def all_on(cls) -> "GroupMask":
        return cls(True, True, True)

    @classmethod
    def all_off(cls) -> "GroupMask":
        return cls(False, False, False)

    @classmethod
    def parse(cls, text: str) -> "GroupMask":
        """``"all"``, ``"none"`` or a comma list drawn from scales,shifts,biases."""
        text = text.strip().lower()
        if text == "all":
            return cls.all_on()
        if text == "none":
            return cls.all_off()
        names = {t.strip() for t in text.split(",") if t.strip()}
        unknown = names - set(GROUPS)
        if unknown:
            raise ValueError(f"unknown style groups {sorted(unknown)}")
        return cls(*(g in names for g in GROUPS))

    def enabled(self, param: str) -> bool:
        return getattr(self, _GROUP_OF[param])


@dataclass(frozen=True)
class BlockMask:
    blocks: frozenset = field(default_factory=frozenset)
    all_blocks: bool = False

    @classmethod
    def all_on(cls) -> "BlockMask":
        return cls(frozenset(), True)

    @classmethod
    def all_off(cls) -> "BlockMask":
        return cls(frozenset(), False)

    @classmethod
    def of(cls, *names: str) -> "BlockMask":
        return cls(frozenset(names), False)

    @classmethod
    def accumulative(cls, arch, upto: str) -> "BlockMask":
        """FC, B0, ... up to and including ``upto`` (the FC -> B_m protocol)."""
        order = block_names(arch)
        if upto not in order:
            raise ValueError(f"unknown block {upto!r}; expected one of {order}")
        return cls(frozenset(order[: order.index(upto) + 1]), False)

    @classmethod
    def parse(cls, text: str, arch=None) -> "BlockMask":
        text = text.strip()
        if text.lower() == "all":
            return cls.all_on()
        if text.lower() == "none":
            return cls.all_off()
        if text.lower().startswith("upto:"):
            return cls.accumulative(arch, text.split(":", 1)[1])
        return cls.of(*(t.strip() for t in text.split(",") if t.strip()))

    def enabled(self, block: str) -> bool:
        return self.all_blocks or block in self.blocks


def _freeze(t: torch.Tensor) -> np.ndarray:
    a = t.detach().cpu().numpy().copy()
    a.flags.writeable = False
    return a


class TaskRegistry:
    """Ordered map task_id -> StyleSet (or compressed style)."""

    def __init__(self, base: BaseModel, kb=None):
        self.base = base
        self.kb = kb
        self._entries: dict[int, object] = {}
        self._frozen: dict[int, dict] = {}
        self._put(0, source_style_set(base))

    def _put(self, task_id: int, entry):
        self._entries[task_id] = entry
        if isinstance(entry, StyleSet):
            self._frozen[task_id] = {
                "class_count": entry.class_count,
                "arrays": MappingProxyType(
                    {p: MappingProxyType({k: _freeze(v) for k, v in s.tensors().items()})
                     for p, s in entry.layers.items()}
                ),
            }

    def __contains__(self, task_id: int) -> bool:
        return task_id in self._entries

    def __iter__(self):
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __setitem__(self, key, value):
        raise TypeError("registry entries are immutable; use register()")

    def __delitem__(self, key):
        raise TypeError("registry entries are immutable")

    @property
    def task_ids(self) -> list[int]:
        return list(self._entries)

    def register(self, task_id: int, entry) -> "TaskRegistry":
        if task_id in self._entries:
            raise RegistryError(f"task {task_id} already registered")
        if task_id < 1:
            raise RegistryError("task ids start at 1; 0 is the source")
        if isinstance(entry, StyleSet):
            self._check(entry)
            entry = entry.clone(task_id)
        else:
            entry = entry.frozen_copy(task_id)
        self._put(task_id, entry)
        return self

    def _check(self, styles: StyleSet):
        fp = self.base.arch.fingerprint()
        if styles.arch_fingerprint and styles.arch_fingerprint != fp:
            raise RegistryError("style set was built for a different architecture")
        expected = {s.path for s in self.base.modulated_specs}
        if set(styles.layers) != expected:
            raise RegistryError("style set does not cover exactly the modulated layers")
        ref = source_style_set(self.base, styles.class_count)
        for path, style in styles.layers.items():
            for name, t in style.tensors().items():
                want = ref.layers[path].tensors()[name].shape
                if t.shape != want:
                    raise RegistryError(f"{path}/{name}: shape {tuple(t.shape)} != {tuple(want)}")
                if not torch.isfinite(t).all():
                    raise RegistryError(f"{path}/{name}: non-finite values")

    def entry(self, task_id: int):
        if task_id not in self._entries:
            raise UnknownTaskError(f"unknown task {task_id}")
        return self._entries[task_id]

    def class_count(self, task_id: int) -> int:
        return self.entry(task_id).class_count

    def get(self, task_id: int) -> StyleSet:
        """Fresh, realized StyleSet for ``task_id``."""
        entry = self.entry(task_id)
        if task_id in self._frozen:
            frozen = self._frozen[task_id]
            layers = {
                p: Style(*(torch.tensor(arrs[k]) for k in ("scale", "shift", "bias")))
                for p, arrs in frozen["arrays"].items()
            }
            return StyleSet(task_id, layers, frozen["class_count"], self.base.arch.fingerprint())
        return entry.realize(self.base, self.kb)

    def digest(self, task_ids=None) -> str:
        h = hashlib.sha256()
        for t in sorted(self._entries if task_ids is None else task_ids):
            h.update(str(t).encode())
            h.update(self.get(t).digest().encode())
        return h.hexdigest()


def compose(
    registry: TaskRegistry, task_id: int, group_mask: GroupMask, block_mask: BlockMask
) -> StyleSet:
    """Task style where enabled, source identity style elsewhere."""
    target = registry.get(task_id)
    source = source_style_set(registry.base, target.class_count)
    specs = registry.base.specs
    layers = {}
    for path, t_style in target.layers.items():
        block_on = block_mask.enabled(specs[path].block)
        chosen = {}
        for name, t in t_style.tensors().items():
            src = source.layers[path].tensors()[name]
            chosen[name] = t if block_on and group_mask.enabled(name) else src
        layers[path] = Style(**chosen)
    return StyleSet(task_id, layers, target.class_count, target.arch_fingerprint)


def interpolate(registry: TaskRegistry, task_a: int, task_b: int, lam: float) -> StyleSet:
    """(1 - lam) * style_a + lam * style_b, elementwise."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"interpolation weight {lam} outside [0, 1]")
    a, b = registry.get(task_a), registry.get(task_b)
    if a.class_count != b.class_count:
        raise ValueError(
            f"cannot interpolate tasks with {a.class_count} and {b.class_count} classes"
        )
    if lam in (0.0, 1.0):
        # endpoints verbatim: (1 - 0) * a + 0 * b can flip the sign of a zero
        end = a if lam == 0.0 else b
        return StyleSet(-1, end.layers, end.class_count, end.arch_fingerprint)
    layers = {}
    for path, sa in a.layers.items():
        sb = b.layers[path]
        layers[path] = Style(
            *((1.0 - lam) * ta + lam * tb for ta, tb in zip(
                (sa.scale, sa.shift, sa.bias), (sb.scale, sb.shift, sb.bias)))
        )
    return StyleSet(-1, layers, a.class_count, a.arch_fingerprint)
