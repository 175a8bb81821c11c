"""Online streams over shifting domains.

A stream is a realized sequence of corrupted samples plus the schedule that
produced it.  Schedules: ``periodic`` cycles a fixed domain order every
``period`` steps; ``randomized`` draws a uniform domain per block of
``period`` steps (the realized block order is stored, so the mapping from
step to domain is always exactly reconstructible); ``inner_training`` is the
training-time layout of D contiguous blocks of K samples.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datasets import Dataset
from .domains import DomainSet, DomainSpec, apply_corruption

SCHEDULE_KINDS = ("periodic", "randomized", "inner_training")

_SEED_CAP = 2**48


@dataclass(frozen=True)
class StreamSchedule:
    kind: str
    period: int
    domain_order: tuple[int, ...]  # periodic: cycle; randomized: realized blocks
    length: int

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.period < 1:
            raise ValueError(f"period must be >= 1, got {self.period}")
        if self.length < 1:
            raise ValueError(f"length must be >= 1, got {self.length}")
        if not self.domain_order:
            raise ValueError("domain_order is empty")

    def domain_at(self, t: int) -> int:
        if not (0 <= t < self.length):
            raise IndexError(f"step {t} outside stream of length {self.length}")
        return self.domain_order[(t // self.period) % len(self.domain_order)]


@dataclass
class Stream:
    xs: np.ndarray            # (L, C, H, W) float32, already corrupted
    ys: np.ndarray            # (L,) int64 — used for scoring only
    domain_idx: np.ndarray    # (L,) int64, index into `domains`
    clean_ids: np.ndarray     # (L,) int64, index into the originating dataset
    schedule: StreamSchedule
    domains: tuple[DomainSpec, ...] = field(default=())

    def __post_init__(self):
        L = self.xs.shape[0]
        if not (self.ys.shape == self.domain_idx.shape == self.clean_ids.shape == (L,)):
            raise ValueError("stream arrays have inconsistent lengths")
        if L != self.schedule.length:
            raise ValueError(f"{L} samples but schedule length {self.schedule.length}")

    def __len__(self):
        return self.xs.shape[0]

    def occupancy(self) -> dict[int, int]:
        idx, counts = np.unique(self.domain_idx, return_counts=True)
        return {int(i): int(c) for i, c in zip(idx, counts)}


@dataclass
class SupportSet:
    xs: np.ndarray
    ys: np.ndarray
    domain_idx: np.ndarray
    clean_ids: np.ndarray

    def __len__(self):
        return self.xs.shape[0]


def _corrupt_batch(dataset: Dataset, clean_ids, specs, rng) -> np.ndarray:
    out = np.empty((len(clean_ids),) + dataset.images.shape[1:], dtype=np.float32)
    for i, (cid, spec) in enumerate(zip(clean_ids, specs)):
        out[i] = apply_corruption(dataset.images[cid], spec, int(rng.integers(_SEED_CAP)))
    return out


def build_training_stream(
    dataset: Dataset, source: DomainSet, domains_per_stream: int, samples_per_domain: int,
    rng: np.random.Generator,
) -> Stream:
    """Inner-loop stream: D distinct source domains, K samples each (drawn
    with replacement), laid out as D contiguous blocks."""
    d, k = domains_per_stream, samples_per_domain
    if d < 1 or k < 1:
        raise ValueError(f"need domains_per_stream >= 1 and samples_per_domain >= 1, got {d}, {k}")
    if d > len(source):
        raise ValueError(f"requested {d} stream domains but source has only {len(source)}")
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    chosen = tuple(int(i) for i in rng.choice(len(source), size=d, replace=False))
    clean_ids = rng.integers(0, len(dataset), size=d * k)
    domain_idx = np.repeat(chosen, k).astype(np.int64)
    specs = [source[i] for i in domain_idx]
    xs = _corrupt_batch(dataset, clean_ids, specs, rng)
    schedule = StreamSchedule("inner_training", period=k, domain_order=chosen, length=d * k)
    return Stream(xs, dataset.labels[clean_ids].copy(), domain_idx,
                  clean_ids.astype(np.int64), schedule, tuple(source.domains))


def build_support_set(
    dataset: Dataset, source: DomainSet, inner_domain_idx, extra_domains: int,
    samples_per_domain: int, exclude_ids, rng: np.random.Generator,
) -> SupportSet:
    """Labeled support batch: K fresh samples per inner domain plus one
    sample from each of `extra_domains` additional domains.  Clean-image ids
    never repeat within the set and never intersect `exclude_ids`."""
    inner_domain_idx = [int(i) for i in inner_domain_idx]
    k = samples_per_domain
    exclude = set(int(i) for i in exclude_ids)
    remaining = np.setdiff1d(np.arange(len(dataset)), np.fromiter(exclude, dtype=np.int64, count=len(exclude)))
    n_needed = len(inner_domain_idx) * k + extra_domains
    if n_needed == 0:
        raise ValueError("support set would be empty (no inner domains and no extra domains)")
    if len(remaining) < n_needed:
        raise ValueError(
            f"need {n_needed} distinct samples outside the excluded set, only {len(remaining)} available"
        )
    pool = set(range(len(source))) - set(inner_domain_idx)
    if extra_domains > len(pool):
        raise ValueError(
            f"requested {extra_domains} extra domains but only {len(pool)} source domains remain"
        )
    ids = rng.choice(remaining, size=n_needed, replace=False).astype(np.int64)
    extra_idx = [int(i) for i in rng.choice(sorted(pool), size=extra_domains, replace=False)] if extra_domains else []
    domain_idx = np.asarray(
        [i for i in inner_domain_idx for _ in range(k)] + extra_idx, dtype=np.int64
    )
    specs = [source[i] for i in domain_idx]
    xs = _corrupt_batch(dataset, ids, specs, rng)
    return SupportSet(xs, dataset.labels[ids].copy(), domain_idx, ids)


def build_test_stream(
    dataset: Dataset, target: DomainSet, kind: str, period: int, length: int,
    rng: np.random.Generator, domain_order=None,
) -> Stream:
    """Evaluation stream over the target domains.  The underlying clean
    images are a random permutation of the test pool (repermuted if the
    stream is longer than the pool)."""
    if kind == "periodic":
        order = tuple(range(len(target))) if domain_order is None else tuple(int(i) for i in domain_order)
        if not order or any(not 0 <= i < len(target) for i in order):
            raise ValueError(f"domain_order {order} invalid for {len(target)} target domains")
    elif kind == "randomized":
        n_blocks = -(-length // period)  # ceil
        order = tuple(int(i) for i in rng.integers(0, len(target), size=n_blocks))
    else:
        raise ValueError(f"test stream kind must be periodic or randomized, got {kind!r}")
    schedule = StreamSchedule(kind, period=period, domain_order=order, length=length)

    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    perm_parts = []
    while sum(len(p) for p in perm_parts) < length:
        perm_parts.append(rng.permutation(len(dataset)))
    clean_ids = np.concatenate(perm_parts)[:length].astype(np.int64)

    domain_idx = np.asarray([schedule.domain_at(t) for t in range(length)], dtype=np.int64)
    specs = [target[i] for i in domain_idx]
    xs = _corrupt_batch(dataset, clean_ids, specs, rng)
    return Stream(xs, dataset.labels[clean_ids].copy(), domain_idx, clean_ids, schedule,
                  tuple(target.domains))


# ---------------------------------------------------------------------------
# stream export / import (bit-exact)
# ---------------------------------------------------------------------------

STREAM_FORMAT = "stream-v1"


def save_stream(stream: Stream, manifest_path) -> Path:
    manifest_path = Path(manifest_path)
    bin_path = manifest_path.with_name(manifest_path.stem + ".streambin")
    L = len(stream)
    c, h, w = stream.xs.shape[1:]
    payload = (
        stream.xs.astype("<f4").tobytes()
        + stream.ys.astype("<i4").tobytes()
        + stream.domain_idx.astype("<i4").tobytes()
        + stream.clean_ids.astype("<i8").tobytes()
    )
    bin_path.write_bytes(payload)
    lines = [
        f"format = {STREAM_FORMAT}",
        f"buffer = {bin_path.name}",
        f"length = {L}",
        f"channels = {c}",
        f"height = {h}",
        f"width = {w}",
        f"schedule.kind = {stream.schedule.kind}",
        f"schedule.period = {stream.schedule.period}",
        "schedule.domain_order = " + ",".join(str(i) for i in stream.schedule.domain_order),
        f"domain_count = {len(stream.domains)}",
    ]
    for i, d in enumerate(stream.domains):
        lines.append(f"domain.{i} = {d.kind}:{d.severity}:{d.seed}")
    manifest_path.write_text("\n".join(lines) + "\n")
    return manifest_path


def load_stream(manifest_path) -> Stream:
    manifest_path = Path(manifest_path)
    kv = {}
    for ln in manifest_path.read_text().splitlines():
        ln = ln.strip()
        if ln and not ln.startswith("#"):
            key, _, value = ln.partition("=")
            kv[key.strip()] = value.strip()
    if kv.get("format") != STREAM_FORMAT:
        raise ValueError(f"{manifest_path}: unknown stream format {kv.get('format')!r}")
    L = int(kv["length"])
    c, h, w = int(kv["channels"]), int(kv["height"]), int(kv["width"])
    raw = manifest_path.with_name(kv["buffer"]).read_bytes()
    nx = L * c * h * w * 4
    xs = np.frombuffer(raw[:nx], dtype="<f4").reshape(L, c, h, w).astype(np.float32, copy=True)
    ys = np.frombuffer(raw[nx : nx + 4 * L], dtype="<i4").astype(np.int64)
    di = np.frombuffer(raw[nx + 4 * L : nx + 8 * L], dtype="<i4").astype(np.int64)
    ci = np.frombuffer(raw[nx + 8 * L :], dtype="<i8").astype(np.int64)
    order = tuple(int(s) for s in kv["schedule.domain_order"].split(","))
    schedule = StreamSchedule(kv["schedule.kind"], int(kv["schedule.period"]), order, L)
    domains = []
    for i in range(int(kv["domain_count"])):
        kind, sev, seed = kv[f"domain.{i}"].rsplit(":", 2)
        domains.append(DomainSpec(kind, int(sev), int(seed)))
    return Stream(xs, ys, di, ci, schedule, tuple(domains))
