from __future__ import annotations

from collections import Counter
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from segeval.model import Dataset, instance_histogram
from segeval.split import (
    SPLITS,
    SplitConfig,
    SplitError,
    SplitInfeasibleError,
    render_split_report,
    search_split,
    split_frame_counts,
    split_report,
    split_sizes,
    stratified_split,
)

from conftest import frame_of, full_dataset, full_split, rect


def single_instance_frames(categories):
    return Dataset(tuple(frame_of(f"f{i:02d}", [rect(8, 8, 1, 1, 4, 4)], [c]) for i, c in enumerate(categories)))


def random_dataset(rng, n_frames, n_classes=4, max_per_frame=3):
    frames = []
    for i in range(n_frames):
        k = int(rng.integers(1, max_per_frame + 1))
        cats = [int(c) for c in rng.integers(1, n_classes + 1, size=k)]
        masks = [rect(12, 8, j * 3, 0, j * 3 + 2, 3) for j in range(k)]
        frames.append(frame_of(f"r{i:03d}", masks, cats))
    return Dataset(tuple(frames))


@pytest.mark.parametrize(
    "n, expected",
    [(333, (200, 67, 66)), (10, (6, 2, 2)), (5, (3, 1, 1)), (1, (1, 0, 0)), (7, (4, 2, 1))],
)
def test_split_sizes(n, expected):
    assert split_sizes(n, (0.6, 0.2, 0.2)) == expected


@given(st.integers(0, 5000))
def test_split_sizes_within_one_frame(n):
    sizes = split_sizes(n, (0.6, 0.2, 0.2))
    assert sum(sizes) == n
    assert all(abs(s - n * f) < 1 for s, f in zip(sizes, (0.6, 0.2, 0.2)))


def test_forced_counts():
    ds = single_instance_frames([3] * 10)
    out = stratified_split(ds, SplitConfig(quota=2, tolerance=0))
    assert split_frame_counts(out) == {"train": 6, "val": 2, "test": 2}
    rows = {(r.split, r.category): r.instances for r in split_report(out)}
    assert rows[("val", 3)] == 2 and rows[("test", 3)] == 2 and rows[("train", 3)] == 6


def test_infeasible_quota_reports_deficit():
    ds = single_instance_frames([1] * 20 + [2] * 3)
    with pytest.raises(SplitInfeasibleError) as err:
        stratified_split(ds, SplitConfig(quota=7))
    assert err.value.deficits == {"Hook": 11}
    assert "Hook: short by 11" in str(err.value)


def test_best_effort_relaxes_targets():
    ds = single_instance_frames([1] * 30 + [2] * 3)
    res = search_split(ds, SplitConfig(quota=7, best_effort=True))
    # 3 * 0.2 rounds down to zero Hook instances per held-out split
    assert res.targets == {1: (7, 7), 2: (0, 0)}
    # 33 frames split 20/7/6, so test can hold at most 6 class-1 frames
    assert res.score == 1 and res.violations == {}


def test_existing_tags_need_force():
    tagged = stratified_split(single_instance_frames([1] * 10), SplitConfig(quota=2))
    with pytest.raises(SplitError, match="force"):
        stratified_split(tagged, SplitConfig(quota=2))
    again = stratified_split(tagged, SplitConfig(quota=2, force=True, seed=5))
    assert split_frame_counts(again) == {"train": 6, "val": 2, "test": 2}


@pytest.mark.parametrize(
    "kwargs",
    [
        {"fractions": (0.8, 0.2, 0.0)},
        {"fractions": (0.6, 0.2, 0.1)},
        {"fractions": (0.5, 0.5)},
        {"quota": -1},
        {"max_attempts": 0},
    ],
)
def test_config_rejects_bad_values(kwargs):
    with pytest.raises(SplitError):
        SplitConfig(**kwargs)


def test_empty_dataset_and_untagged_report():
    with pytest.raises(SplitError):
        stratified_split(Dataset(()))
    with pytest.raises(SplitError):
        split_report(single_instance_frames([1, 2]))


def test_full_scale_split_meets_quota():
    res = full_split()
    out = res.dataset
    assert split_frame_counts(out) == {"train": 200, "val": 67, "test": 66}
    for split in ("val", "test"):
        hist = instance_histogram(Dataset(tuple(f for f in out.frames if f.split == split)))
        assert all(abs(n - 7) <= 1 for n in hist.values()), (split, hist)
    assert res.violations == {}
    assert res.score == min(res.attempt_scores)


def test_split_is_reproducible_and_thread_independent():
    rng = np.random.default_rng(3)
    ds = random_dataset(rng, 60)
    cfg = SplitConfig(quota=3, seed=17, max_attempts=6)
    a = search_split(ds, cfg)
    b = search_split(ds, cfg, threads=3)
    assert a.dataset == b.dataset and a.attempt_scores == b.attempt_scores
    assert stratified_split(ds, cfg) == a.dataset


def test_report_matches_histograms():
    out = full_split().dataset
    rows = split_report(out)
    for split in SPLITS:
        hist = instance_histogram(Dataset(tuple(f for f in out.frames if f.split == split)))
        assert {r.category: r.instances for r in rows if r.split == split} == hist
    totals = Counter()
    for r in rows:
        totals[r.category] += r.instances
    assert dict(totals) == instance_histogram(full_dataset())
    text = render_split_report(out, quota=7)
    assert text.startswith("frames: train=200  val=67  test=66")
    assert "*" not in text
    csv_text = render_split_report(out, style="csv")
    assert len(csv_text.splitlines()) == 13


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(3, 40))
def test_split_invariants(seed, n_frames):
    ds = random_dataset(np.random.default_rng(seed), n_frames)
    res = search_split(ds, SplitConfig(quota=2, best_effort=True, seed=seed % 7, max_attempts=3))
    out = res.dataset
    assert [f.frame_id for f in out.frames] == [f.frame_id for f in ds.frames]
    assert all(f.split in SPLITS for f in out.frames)
    assert [f.instances for f in out.frames] == [f.instances for f in ds.frames]
    assert tuple(split_frame_counts(out).values()) == split_sizes(n_frames, (0.6, 0.2, 0.2))
    assert res.score == min(res.attempt_scores)
    assert res.attempt_scores[res.best_attempt] == res.score
    assert res.best_attempt == res.attempt_scores.index(res.score)
