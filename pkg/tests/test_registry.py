import pytest
import torch

from ganmem.models import block_names
from ganmem.registry import (
    BlockMask,
    GroupMask,
    RegistryError,
    TaskRegistry,
    UnknownTaskError,
    compose,
    interpolate,
    source_style_set,
)

from conftest import TINY_ARCH


def jittered(base, seed, class_count=1):
    g = torch.Generator().manual_seed(seed)
    styles = source_style_set(base, class_count)
    for style in styles.layers.values():
        for t in style.tensors().values():
            t.add_(0.1 * torch.randn(t.shape, generator=g))
    return styles


@pytest.fixture
def registry(tiny_base):
    reg = TaskRegistry(tiny_base)
    reg.register(1, jittered(tiny_base, 1))
    reg.register(2, jittered(tiny_base, 2))
    return reg


def test_register_copies_and_freezes(tiny_base):
    reg = TaskRegistry(tiny_base)
    styles = jittered(tiny_base, 1)
    reg.register(1, styles)
    digest = reg.get(1).digest()
    for style in styles.layers.values():
        style.scale.mul_(3)
    fetched = reg.get(1)
    fetched.layers["G/fc"].shift.add_(1)
    assert reg.get(1).digest() == digest
    with pytest.raises(TypeError):
        reg[3] = styles
    with pytest.raises(TypeError):
        del reg[1]


def test_register_rejects_duplicates_and_bad_shapes(tiny_base, registry):
    with pytest.raises(RegistryError):
        registry.register(1, jittered(tiny_base, 5))
    with pytest.raises(RegistryError):
        registry.register(0, jittered(tiny_base, 5))
    bad = jittered(tiny_base, 5)
    bad.layers["G/fc"].scale = torch.ones(3)
    with pytest.raises(RegistryError):
        registry.register(9, bad)
    nan = jittered(tiny_base, 5)
    nan.layers["G/fc"].bias[0] = float("nan")
    with pytest.raises(RegistryError):
        registry.register(9, nan)
    with pytest.raises(UnknownTaskError):
        registry.get(42)


def test_task_zero_is_source(tiny_base, registry):
    assert registry.get(0).equal(source_style_set(tiny_base))


def test_compose_all_and_none(tiny_base, registry):
    assert compose(registry, 1, GroupMask.all_on(), BlockMask.all_on()).equal(registry.get(1))
    none = compose(registry, 1, GroupMask.all_off(), BlockMask.all_on())
    assert none.equal(source_style_set(tiny_base))
    assert compose(registry, 1, GroupMask.all_on(), BlockMask.all_off()).equal(none)


def test_compose_single_group(tiny_base, registry):
    mixed = compose(registry, 1, GroupMask.parse("shifts"), BlockMask.all_on())
    src, task = source_style_set(tiny_base), registry.get(1)
    for path, style in mixed.layers.items():
        assert torch.equal(style.shift, task.layers[path].shift)
        assert torch.equal(style.scale, src.layers[path].scale)
        assert torch.equal(style.bias, src.layers[path].bias)


def test_accumulative_block_masks(tiny_base, registry):
    order = block_names(TINY_ARCH)
    assert order[0] == "FC"
    for i, upto in enumerate(order):
        mask = BlockMask.accumulative(TINY_ARCH, upto)
        assert mask.blocks == frozenset(order[: i + 1])
        styled = compose(registry, 2, GroupMask.all_on(), mask)
        task, src = registry.get(2), source_style_set(tiny_base)
        for path, style in styled.layers.items():
            want = task if tiny_base.specs[path].block in mask.blocks else src
            assert torch.equal(style.scale, want.layers[path].scale)
            assert torch.equal(style.bias, want.layers[path].bias)
    with pytest.raises(ValueError):
        BlockMask.accumulative(TINY_ARCH, "B7")
    assert BlockMask.parse(f"upto:{order[-1]}", TINY_ARCH).blocks == frozenset(order)


def test_group_mask_parse():
    assert GroupMask.parse("all") == GroupMask.all_on()
    assert GroupMask.parse("none") == GroupMask.all_off()
    assert GroupMask.parse("scales, biases") == GroupMask(True, False, True)
    with pytest.raises(ValueError):
        GroupMask.parse("gammas")


def test_interpolation_endpoints_and_midpoint(tiny_base):
    base = tiny_base.to(torch.float64)
    registry = TaskRegistry(base)
    registry.register(1, jittered(base, 1)).register(2, jittered(base, 2))
    a, b = registry.get(1), registry.get(2)
    assert a.layers["G/fc"].scale.dtype == torch.float64
    assert interpolate(registry, 1, 2, 0.0).digest() == a.digest()
    assert interpolate(registry, 1, 2, 1.0).digest() == b.digest()
    mid = interpolate(registry, 1, 2, 0.5).tensors()
    ta, tb = a.tensors(), b.tensors()
    for k, t in mid.items():
        assert (t - (ta[k] + tb[k]) / 2).abs().max() <= 1e-12
    with pytest.raises(ValueError):
        interpolate(registry, 1, 2, 1.5)


def test_interpolation_class_count_mismatch(tiny_base, registry):
    registry.register(3, jittered(tiny_base, 3, class_count=2))
    with pytest.raises(ValueError):
        interpolate(registry, 1, 3, 0.5)
