"""Schedules, stream builders, support-set hygiene, export round-trips."""

import numpy as np
import pytest

from streamadapt.datasets import generate_synthetic_glyphs
from streamadapt.domains import DomainSet, DomainSpec
from streamadapt.streams import (
    StreamSchedule,
    build_support_set,
    build_test_stream,
    build_training_stream,
    load_stream,
    save_stream,
)


@pytest.fixture(scope="module")
def dataset():
    return generate_synthetic_glyphs(200, 5, 16, np.random.default_rng(0))


@pytest.fixture(scope="module")
def source():
    specs = tuple(
        DomainSpec(kind, sev, seed=11)
        for kind in ("gaussian_noise", "impulse_noise", "contrast", "brightness", "motion_blur")
        for sev in (1, 2, 3, 4, 5)
    )
    return DomainSet(specs, "source")


@pytest.fixture(scope="module")
def target():
    return DomainSet(
        (DomainSpec("spatter", 4, 3), DomainSpec("elastic_warp", 4, 3), DomainSpec("jpeg_quantize", 4, 3)),
        "target",
    )


@pytest.mark.parametrize("period", [1, 10, 100, 1000])
def test_periodic_schedule_exact(period):
    order = (0, 1, 2)
    length = 4 * period * len(order) + 5
    sched = StreamSchedule("periodic", period, order, length)
    for t in range(length):
        assert sched.domain_at(t) == order[(t // period) % 3]


def test_schedule_bounds_and_validation():
    sched = StreamSchedule("periodic", 10, (0,), 50)
    with pytest.raises(IndexError):
        sched.domain_at(50)
    with pytest.raises(ValueError, match="period"):
        StreamSchedule("periodic", 0, (0,), 10)
    with pytest.raises(ValueError, match="unknown schedule"):
        StreamSchedule("sometimes", 1, (0,), 10)


def test_randomized_blocks_constant_within_block(dataset, target):
    stream = build_test_stream(dataset, target, "randomized", period=25, length=200,
                               rng=np.random.default_rng(5))
    for t in range(200):
        assert stream.domain_idx[t] == stream.schedule.domain_at(t)
        assert stream.domain_idx[t] == stream.schedule.domain_order[t // 25]


def test_randomized_occupancy_within_3_sigma(dataset, target):
    L, k = 10_000, len(target)
    stream = build_test_stream(dataset, target, "randomized", period=1, length=L,
                               rng=np.random.default_rng(9))
    occ = stream.occupancy()
    p = 1.0 / k
    sigma = np.sqrt(L * p * (1 - p))
    for i in range(k):
        assert abs(occ.get(i, 0) - L * p) <= 3 * sigma


def test_training_stream_layout(dataset, source):
    rng = np.random.default_rng(1)
    stream = build_training_stream(dataset, source, domains_per_stream=3, samples_per_domain=5, rng=rng)
    assert len(stream) == 15
    order = stream.schedule.domain_order
    assert len(set(order)) == 3
    assert np.array_equal(stream.domain_idx, np.repeat(order, 5))
    assert np.array_equal(stream.ys, dataset.labels[stream.clean_ids])
    assert stream.schedule.kind == "inner_training" and stream.schedule.period == 5


def test_training_stream_rejects_too_many_domains(dataset):
    small = DomainSet((DomainSpec("contrast", 1), DomainSpec("contrast", 2)), "source")
    with pytest.raises(ValueError, match="source has only"):
        build_training_stream(dataset, small, 3, 5, np.random.default_rng(0))


def test_support_set_hygiene(dataset, source):
    rng = np.random.default_rng(2)
    stream = build_training_stream(dataset, source, 3, 5, rng)
    support = build_support_set(
        dataset, source, stream.schedule.domain_order, extra_domains=20,
        samples_per_domain=5, exclude_ids=stream.clean_ids, rng=rng,
    )
    assert len(support) == 3 * 5 + 20
    # no reuse of inner clean images, no repeats inside the support set
    assert not set(support.clean_ids.tolist()) & set(stream.clean_ids.tolist())
    assert len(set(support.clean_ids.tolist())) == len(support)
    # extra domains come from outside the inner D
    extra = support.domain_idx[15:]
    assert not set(extra.tolist()) & set(stream.schedule.domain_order)
    assert len(set(extra.tolist())) == 20
    assert np.array_equal(support.ys, dataset.labels[support.clean_ids])


def test_support_set_insufficient_samples(source):
    tiny = generate_synthetic_glyphs(16, 4, 16, np.random.default_rng(3))
    with pytest.raises(ValueError, match="distinct samples"):
        build_support_set(tiny, source, [0, 1, 2], extra_domains=5, samples_per_domain=5,
                          exclude_ids=range(10), rng=np.random.default_rng(0))


def test_support_set_insufficient_extra_domains(dataset):
    small = DomainSet(tuple(DomainSpec("contrast", s) for s in (1, 2, 3, 4)), "source")
    with pytest.raises(ValueError, match="extra domains"):
        build_support_set(dataset, small, [0, 1, 2], extra_domains=2, samples_per_domain=2,
                          exclude_ids=[], rng=np.random.default_rng(0))


def test_test_stream_uses_permutation_of_pool(dataset, target):
    stream = build_test_stream(dataset, target, "periodic", period=10, length=len(dataset),
                               rng=np.random.default_rng(4))
    assert sorted(stream.clean_ids.tolist()) == list(range(len(dataset)))


def test_test_stream_longer_than_pool(dataset, target):
    L = len(dataset) * 2 + 30
    stream = build_test_stream(dataset, target, "periodic", period=7, length=L,
                               rng=np.random.default_rng(6))
    assert len(stream) == L


def test_streams_deterministic_given_rng_seed(dataset, target):
    a = build_test_stream(dataset, target, "randomized", 10, 100, np.random.default_rng(12))
    b = build_test_stream(dataset, target, "randomized", 10, 100, np.random.default_rng(12))
    assert a.xs.tobytes() == b.xs.tobytes()
    assert a.schedule == b.schedule


def test_stream_export_roundtrip(tmp_path, dataset, target):
    stream = build_test_stream(dataset, target, "periodic", period=10, length=60,
                               rng=np.random.default_rng(7))
    path = save_stream(stream, tmp_path / "eval.stream")
    loaded = load_stream(path)
    assert loaded.xs.tobytes() == stream.xs.tobytes()
    assert np.array_equal(loaded.ys, stream.ys)
    assert np.array_equal(loaded.domain_idx, stream.domain_idx)
    assert np.array_equal(loaded.clean_ids, stream.clean_ids)
    assert loaded.schedule == stream.schedule
    assert loaded.domains == stream.domains
