"""Domain types, the instrument taxonomy and dataset-level validation."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field, replace
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .masks import MaskError, RleMask, bbox_from_mask, rle_decode, rle_encode

SPLITS = ("train", "val", "test")

BINARY_CATEGORY_ID = 1
BINARY_CATEGORY_NAME = "instrument"
OTHER_CATEGORY_NAME = "Other"


@dataclass(frozen=True, order=True)
class CategoryId:
    id: int
    name: str


def load_taxonomy(path: Optional[Path | str] = None) -> tuple[CategoryId, ...]:
    """Read a taxonomy manifest (JSON array of ``{id, name}``).

    Without a path the bundled default taxonomy is returned: eleven
    laparoscopic instrument types plus ``Other``.
    """
    if path is None:
        text = resources.files("segeval").joinpath("data/taxonomy.json").read_text("utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    return parse_taxonomy(json.loads(text))


def parse_taxonomy(entries: Iterable[Mapping]) -> tuple[CategoryId, ...]:
    cats = tuple(sorted(CategoryId(int(e["id"]), str(e["name"])) for e in entries))
    ids = [c.id for c in cats]
    if ids != list(range(1, len(ids) + 1)):
        raise ValueError(f"taxonomy ids must be dense from 1, got {ids}")
    if len({c.name for c in cats}) != len(cats):
        raise ValueError("taxonomy names must be unique")
    return cats


def taxonomy_to_json(taxonomy: Sequence[CategoryId]) -> list[dict]:
    return [{"id": c.id, "name": c.name} for c in sorted(taxonomy)]


DEFAULT_TAXONOMY: tuple[CategoryId, ...] = load_taxonomy()
BINARY_TAXONOMY: tuple[CategoryId, ...] = (CategoryId(BINARY_CATEGORY_ID, BINARY_CATEGORY_NAME),)


@dataclass(frozen=True)
class BoundingBox:
    x: int
    y: int
    w: int
    h: int

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x, self.y, self.w, self.h)


@dataclass(frozen=True)
class TransformSpec:
    """One geometric or photometric transform.

    Only the fields belonging to ``kind`` are populated; see
    :func:`segeval.augment.validate_transform`.
    """

    kind: str
    rotation_deg: Optional[float] = None
    scale_factor: Optional[float] = None
    translation: Optional[tuple[float, float]] = None
    mirror_axis: Optional[str] = None
    blur_sigma: Optional[float] = None

    @property
    def tag(self) -> str:
        if self.kind == "rotation":
            return f"rot{self.rotation_deg:03g}".replace(".", "p")
        if self.kind == "scale":
            return f"scale{self.scale_factor:g}".replace(".", "p")
        if self.kind == "translation":
            u, v = self.translation
            return f"shift{u:+g}{v:+g}".replace(".", "p")
        if self.kind == "mirror":
            return f"mirror-{self.mirror_axis}"
        if self.kind == "blur":
            return f"blur{self.blur_sigma:g}".replace(".", "p")
        return "identity"

    def to_json(self) -> dict:
        d = {"kind": self.kind}
        for name in ("rotation_deg", "scale_factor", "mirror_axis", "blur_sigma"):
            value = getattr(self, name)
            if value is not None:
                d[name] = value
        if self.translation is not None:
            d["translation"] = list(self.translation)
        return d

    @classmethod
    def from_json(cls, d: Mapping) -> "TransformSpec":
        translation = d.get("translation")
        return cls(
            kind=d["kind"],
            rotation_deg=d.get("rotation_deg"),
            scale_factor=d.get("scale_factor"),
            translation=tuple(translation) if translation is not None else None,
            mirror_axis=d.get("mirror_axis"),
            blur_sigma=d.get("blur_sigma"),
        )


IDENTITY = TransformSpec("identity")


@dataclass(frozen=True)
class InstanceMask:
    """One instrument instance.

    The mask is held as a canonical :class:`RleMask`; the dense bitmap is
    decoded on demand. ``score`` is ``None`` for ground truth and set for
    predictions.
    """

    category: int
    mask: RleMask
    score: Optional[float] = None

    @classmethod
    def from_bitmap(cls, bitmap: np.ndarray, category: int, score: Optional[float] = None) -> "InstanceMask":
        return cls(category=category, mask=rle_encode(bitmap), score=score)

    @property
    def area(self) -> int:
        return self.mask.area

    @cached_property
    def bbox(self) -> BoundingBox:
        return BoundingBox(*bbox_from_mask(self.mask))

    @property
    def bitmap(self) -> np.ndarray:
        return rle_decode(self.mask)

    def with_category(self, category: int) -> "InstanceMask":
        return replace(self, category=category)


@dataclass(frozen=True)
class AnnotatedFrame:
    """One still frame with its ground-truth instances.

    ``image`` optionally carries the decoded pixels (H, W, 3) uint8; it is not
    part of equality and is never serialized inline, the pixels live at
    ``image_ref``.
    """

    frame_id: str
    width: int
    height: int
    image_ref: str
    instances: tuple[InstanceMask, ...] = ()
    split: Optional[str] = None
    provenance: tuple[TransformSpec, ...] = ()
    image: Optional[np.ndarray] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "instances", tuple(self.instances))
        object.__setattr__(self, "provenance", tuple(self.provenance))

    def category_counts(self) -> Counter:
        return Counter(inst.category for inst in self.instances)


@dataclass(frozen=True)
class Dataset:
    frames: tuple[AnnotatedFrame, ...]
    taxonomy: tuple[CategoryId, ...] = DEFAULT_TAXONOMY

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        object.__setattr__(self, "taxonomy", tuple(self.taxonomy))

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def num_instances(self) -> int:
        return sum(len(f.instances) for f in self.frames)

    def frame(self, frame_id: str) -> AnnotatedFrame:
        for f in self.frames:
            if f.frame_id == frame_id:
                return f
        raise KeyError(frame_id)

    def split_tags(self) -> dict[str, Optional[str]]:
        return {f.frame_id: f.split for f in self.frames}

    def subset(self, split: str) -> "Dataset":
        return Dataset(tuple(f for f in self.frames if f.split == split), self.taxonomy)

    def category_name(self, category: int) -> str:
        for c in self.taxonomy:
            if c.id == category:
                return c.name
        return str(category)


@dataclass(frozen=True)
class Violation:
    frame_id: str
    rule: str
    detail: str = ""

    def __str__(self) -> str:
        return f"{self.frame_id}: {self.rule}" + (f" ({self.detail})" if self.detail else "")


def _frame_violations(frame: AnnotatedFrame, known: set[int]) -> list[Violation]:
    out = []
    fid = frame.frame_id
    if frame.width < 1 or frame.height < 1:
        out.append(Violation(fid, "invalid frame size", f"{frame.width}x{frame.height}"))
    if frame.split is not None and frame.split not in SPLITS:
        out.append(Violation(fid, "invalid split tag", repr(frame.split)))
    for k, inst in enumerate(frame.instances):
        if inst.category not in known:
            out.append(Violation(fid, "unknown category", f"instance {k} has id {inst.category}"))
        if (inst.mask.width, inst.mask.height) != (frame.width, frame.height):
            out.append(
                Violation(
                    fid,
                    "dimension mismatch",
                    f"instance {k} mask {inst.mask.width}x{inst.mask.height}, "
                    f"frame {frame.width}x{frame.height}",
                )
            )
        if inst.area < 1:
            out.append(Violation(fid, "empty mask", f"instance {k}"))
        if inst.score is not None:
            out.append(Violation(fid, "score on ground truth", f"instance {k}"))
    return out


def validate_dataset(ds: Dataset) -> list[Violation]:
    """Check every type invariant; returns an empty list for a valid dataset."""
    violations: list[Violation] = []
    known = {c.id for c in ds.taxonomy}
    try:
        parse_taxonomy(taxonomy_to_json(ds.taxonomy))
    except ValueError as exc:
        violations.append(Violation("<taxonomy>", "invalid taxonomy", str(exc)))
    seen: set[str] = set()
    for frame in ds.frames:
        if frame.frame_id in seen:
            violations.append(Violation(frame.frame_id, "duplicate frame_id"))
        seen.add(frame.frame_id)
        violations.extend(_frame_violations(frame, known))
    tagged = [f.split is not None for f in ds.frames]
    if any(tagged) and not all(tagged):
        for f in ds.frames:
            if f.split is None:
                violations.append(Violation(f.frame_id, "missing split tag"))
    return violations


def instance_histogram(ds: Dataset) -> dict[int, int]:
    """Instances per category id; every taxonomy category is present."""
    hist = {c.id: 0 for c in ds.taxonomy}
    for frame in ds.frames:
        for inst in frame.instances:
            hist[inst.category] = hist.get(inst.category, 0) + 1
    return hist


def collapse_to_binary(instances: Iterable[InstanceMask]) -> list[InstanceMask]:
    """Map every instance to the single ``instrument`` category."""
    return [
        inst if inst.category == BINARY_CATEGORY_ID else inst.with_category(BINARY_CATEGORY_ID)
        for inst in instances
    ]


def binary_dataset(ds: Dataset) -> Dataset:
    frames = tuple(replace(f, instances=tuple(collapse_to_binary(f.instances))) for f in ds.frames)
    return Dataset(frames, BINARY_TAXONOMY)


def canonical_instances(instances: Iterable[InstanceMask]) -> tuple[InstanceMask, ...]:
    """Sort by (category, bbox.x, bbox.y); remaining ties by mask runs then score."""

    def key(inst: InstanceMask):
        try:
            b = inst.bbox
            bx, by = b.x, b.y
        except MaskError:
            bx = by = -1
        return (inst.category, bx, by, inst.mask.counts, -1.0 if inst.score is None else inst.score)

    return tuple(sorted(instances, key=key))


def canonicalize(ds: Dataset) -> Dataset:
    frames = sorted(ds.frames, key=lambda f: f.frame_id)
    frames = [replace(f, instances=canonical_instances(f.instances)) for f in frames]
    return Dataset(tuple(frames), tuple(sorted(ds.taxonomy)))
