import numpy as np
import pytest
import torch

from ganmem.data import DOMAINS, make_dataset, make_labeled_task
from ganmem.evaluation import (
    FeatureStats,
    FIDEvaluator,
    embed,
    forgetting_report,
    frechet_distance,
    singular_spectrum_report,
)
from oracles import frechet_scipy


def random_spd(d, rng):
    a = rng.standard_normal((d, d))
    return a @ a.T + 0.1 * np.eye(d)


def test_frechet_matches_scipy_sqrtm():
    rng = np.random.default_rng(0)
    for d in (1, 3, 8):
        mu1, mu2 = rng.standard_normal(d), rng.standard_normal(d)
        s1, s2 = random_spd(d, rng), random_spd(d, rng)
        got = frechet_distance(FeatureStats(mu1, s1, 10), FeatureStats(mu2, s2, 10))
        assert got == pytest.approx(frechet_scipy(mu1, s1, mu2, s2), rel=1e-8, abs=1e-10)


def test_frechet_closed_forms():
    mu = np.array([1.0, -2.0])
    a = FeatureStats(mu, np.diag([4.0, 9.0]), 10)
    assert frechet_distance(a, a) == pytest.approx(0.0, abs=1e-12)
    # isotropic 1-D case: (m1 - m2)^2 + (s1 - s2)^2
    x = FeatureStats(np.array([0.0]), np.array([[4.0]]), 10)
    y = FeatureStats(np.array([3.0]), np.array([[1.0]]), 10)
    assert frechet_distance(x, y) == pytest.approx(9.0 + 1.0)


def test_frechet_rejects_non_psd():
    bad = FeatureStats(np.zeros(2), np.diag([1.0, -1.0]), 10)
    with pytest.raises(FloatingPointError):
        frechet_distance(bad, bad)


def test_feature_stats_needs_two_samples():
    with pytest.raises(ValueError):
        FeatureStats.from_features(np.zeros((1, 4)))


def test_surrogate_fid_orders_domains():
    src = make_dataset("rings", 512, 16, seed=0)
    same = make_dataset("rings", 512, 16, seed=1)
    other = make_dataset("checker", 512, 16, seed=1)
    ev = FIDEvaluator(src.images)
    assert ev.images(same.images) < 0.1 * ev.images(other.images)
    assert ev(lambda n, seed: same.images[:n]) == ev.images(same.images)


def test_embed_validates_shape():
    with pytest.raises(ValueError):
        embed(torch.zeros(3, 16, 16))


def test_spectrum_report_is_normalized():
    from ganmem.modulation import Style

    g = torch.Generator().manual_seed(0)
    styles = {"G/x": Style(torch.randn(6, 4, generator=g), torch.randn(6, 4, generator=g), torch.zeros(6))}
    rep = singular_spectrum_report(styles)
    assert set(rep) == {"G/x/scale", "G/x/shift"}
    x, y = rep["G/x/scale"]
    assert x[0] == 0 and x[-1] == 1 and y.max() == 1
    assert np.all(np.diff(y) <= 0)


def test_forgetting_report():
    hist = {(1, 1): 0.5, (1, 2): 0.5, (2, 2): 0.7}
    table = forgetting_report(hist)
    assert table.rows_constant()
    assert table.to_tsv().splitlines()[2] == "2\t\t0.7"
    assert {"task": 1, "after": 2, "fid_surrogate": 0.5} in table.records()
    assert not forgetting_report({(1, 1): 0.5, (1, 2): 0.6}).rows_constant()
    with pytest.raises(ValueError):
        forgetting_report({(2, 1): 0.1})


@pytest.mark.parametrize("name", sorted(DOMAINS))
def test_domains_are_deterministic_and_in_range(name):
    a = make_dataset(name, 20, 16, seed=7)
    b = make_dataset(name, 20, 16, seed=7, workers=3)
    assert torch.equal(a.images, b.images)
    assert a.images.shape == (20, 3, 16, 16)
    assert a.images.min() >= -1 and a.images.max() <= 1
    assert not torch.equal(a.images, make_dataset(name, 20, 16, seed=8).images)


def test_worker_count_does_not_change_large_sets():
    a = make_dataset("source", 300, 8, seed=2, workers=1)
    b = make_dataset("source", 300, 8, seed=2, workers=4)
    assert torch.equal(a.images, b.images)


def test_labeled_task_balance():
    d = make_labeled_task(2, 3, 10, 16, seed=0)
    assert d.class_count == 3
    assert torch.bincount(d.labels).tolist() == [10, 10, 10]
    with pytest.raises(KeyError):
        make_dataset("nope", 1, 8)
