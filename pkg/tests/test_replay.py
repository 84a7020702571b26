import numpy as np
import pytest
import torch

from ganmem.registry import TaskRegistry, UnknownTaskError
from ganmem.replay import (
    ClassifierConfig,
    LabeledBatch,
    build_replay_batch,
    classifier_forward,
    init_classifier,
    make_task_stream,
    run_lifelong,
)
from ganmem.training import TrainHyper, initial_styles

from conftest import TINY_ARCH

CLS = ClassifierConfig(width=4, lr=1e-3, batch_per_task=4, steps_per_task=3, seed=0)
GAN = TrainHyper(lr=1e-3, steps=2, batch_size=4, seed=0)


@pytest.fixture(scope="module")
def stream():
    return make_task_stream(n_tasks=3, classes_per_task=2, n_train=6, n_test=4, size=TINY_ARCH.image_size)


def test_stream_layout(stream):
    assert len(stream) == 3
    assert [stream.offset(t) for t in (1, 2, 3)] == [0, 2, 4]
    assert stream.total_classes == 6
    assert not torch.equal(stream.train[0].images[:4], stream.test[0].images[:4])


def test_classifier_output_shape():
    params = init_classifier(3, 5, width=4)
    assert classifier_forward(params, torch.zeros(2, 3, 8, 8)).shape == (2, 5)


def test_replay_batch_composition(stream, tiny_base):
    seen = []
    run_lifelong(stream, CLS, GAN, "replay", base=tiny_base, batch_hook=lambda t, s, b: seen.append((t, b)))
    for t, batch in seen:
        assert len(batch) == CLS.batch_per_task * t
        assert batch.provenance.count(f"real:task{t}") == CLS.batch_per_task
        for k in range(1, t):
            tags = [i for i, p in enumerate(batch.provenance) if p == f"replay:task{k}"]
            assert len(tags) == CLS.batch_per_task
            labels = batch.labels[tags]
            assert labels.min() >= stream.offset(k) and labels.max() < stream.offset(k + 1)


def test_joint_and_naive_composition(stream):
    for mode, expected in (("joint", lambda t: t), ("naive", lambda t: 1)):
        sizes = []
        run_lifelong(stream, CLS, mode=mode, batch_hook=lambda t, s, b: sizes.append((t, len(b))))
        assert all(n == CLS.batch_per_task * expected(t) for t, n in sizes)


def test_missing_prior_task(stream, tiny_base):
    base = tiny_base
    reg = TaskRegistry(base)
    reg.register(1, initial_styles(base, class_count=2))
    batch = build_replay_batch(reg, base, stream, [1], 5, seed=0)
    assert len(batch) == 5 and batch.provenance == ["replay:task1"] * 5
    with pytest.raises(UnknownTaskError):
        build_replay_batch(reg, base, stream, [1, 2], 5, seed=0)
    with pytest.raises(ValueError):
        build_replay_batch(reg, base, stream, [1], 0, seed=0)


def test_accuracy_matrix_shape_and_determinism(stream):
    a = run_lifelong(stream, CLS, mode="naive")
    b = run_lifelong(stream, CLS, mode="naive")
    assert np.array_equal(a.accuracy, b.accuracy, equal_nan=True)
    assert np.isnan(a.accuracy[0, 1]) and not np.isnan(a.accuracy[2, 2])
    assert a.all_seen() == pytest.approx(np.mean(a.accuracy[2]))
    assert a.to_tsv().count("\n") == 4


def test_mode_validation(stream):
    with pytest.raises(ValueError):
        run_lifelong(stream, CLS, mode="ewc")
    with pytest.raises(ValueError):
        run_lifelong(stream, CLS, mode="replay")


def test_divergence_keeps_partial_result(stream):
    def poison(t, step, batch):
        if t == 2:
            batch.images.fill_(float("nan"))

    with pytest.raises(FloatingPointError) as info:
        run_lifelong(stream, CLS, mode="naive", batch_hook=poison)
    partial = info.value.partial
    assert partial.completed == 1
    assert not np.isnan(partial.accuracy[0, 0])


def test_empty_concat():
    assert len(LabeledBatch.concat([])) == 0
