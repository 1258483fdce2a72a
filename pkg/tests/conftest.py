from __future__ import annotations

from functools import lru_cache
from pathlib import Path

import numpy as np
import pytest

from segeval.dataset_io import read_annotations
from segeval.model import AnnotatedFrame, Dataset, InstanceMask
from segeval.synth import SceneConfig, generate_dataset, reference_scale_dataset

FIXTURES = Path(__file__).parent / "fixtures"


def rect(w, h, x0, y0, x1, y1):
    """Bitmap of size (h, w) with the half-open box [x0, x1) x [y0, y1) set."""
    m = np.zeros((h, w), dtype=bool)
    m[y0:y1, x0:x1] = True
    return m


def frame_of(frame_id, masks, categories, w=None, h=None, image=None, split=None):
    h = h or masks[0].shape[0]
    w = w or masks[0].shape[1]
    inst = tuple(InstanceMask.from_bitmap(m, c) for m, c in zip(masks, categories))
    return AnnotatedFrame(frame_id, w, h, f"{frame_id}.png", inst, split=split, image=image)


def preds_of(masks, categories, scores):
    return [InstanceMask.from_bitmap(m, c, s) for m, c, s in zip(masks, categories, scores)]


@lru_cache(maxsize=None)
def full_dataset() -> Dataset:
    """333 frames / 561 instances, generated once per session."""
    return reference_scale_dataset(seed=0)


@pytest.fixture(scope="session")
def toy_dataset() -> Dataset:
    return read_annotations(FIXTURES / "toy" / "annotations.json")


@pytest.fixture(scope="session")
def small_synth() -> Dataset:
    cfg = SceneConfig(width=160, height=120, length_range=(30, 70), radius_range=(4, 8), seed=11)
    return generate_dataset(cfg, 12, with_images=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@lru_cache(maxsize=None)
def full_split():
    """Default-config split of :func:`full_dataset`; the search takes a few seconds."""
    from segeval.split import SplitConfig, search_split

    return search_split(full_dataset(), SplitConfig(seed=0))


def pytest_terminal_summary(terminalreporter):
    from _acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(LINES):
            terminalreporter.write_line(LINES[n])
