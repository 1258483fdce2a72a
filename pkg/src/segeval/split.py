"""Frame-level stratified train/val/test splitting with per-class instance quotas.

Frames are atomic, so hitting a per-class instance quota in val and test is a
combinatorial search. Each restart builds a greedy assignment from a random
frame order and then applies best-improvement swaps between splits until no
swap lowers the L1 distance to the quotas. Split sizes are fixed up front and
swaps preserve them.
"""

from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .model import SPLITS, Dataset

TRAIN, VAL, TEST = 0, 1, 2


class SplitError(ValueError):
    pass


class SplitInfeasibleError(SplitError):
    """Some class has fewer instances than the val and test quotas need together."""

    def __init__(self, deficits: dict[str, int]):
        self.deficits = deficits
        listing = ", ".join(f"{name}: short by {d}" for name, d in deficits.items())
        super().__init__(f"instance quota infeasible ({listing})")


@dataclass(frozen=True)
class SplitConfig:
    fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)
    quota: int = 7
    tolerance: int = 1
    seed: int = 0
    max_attempts: int = 16
    best_effort: bool = False
    force: bool = False

    def __post_init__(self):
        if len(self.fractions) != 3 or any(not f > 0 for f in self.fractions):
            raise SplitError(f"fractions must be three positive numbers, got {self.fractions}")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise SplitError(f"fractions must sum to 1, got {sum(self.fractions)}")
        if self.quota < 0 or self.tolerance < 0:
            raise SplitError("quota and tolerance must be non-negative")
        if self.max_attempts < 1:
            raise SplitError("max_attempts must be at least 1")

    def to_json(self) -> dict:
        return {
            "fractions": list(self.fractions),
            "quota": self.quota,
            "tolerance": self.tolerance,
            "seed": self.seed,
            "max_attempts": self.max_attempts,
            "best_effort": self.best_effort,
            "force": self.force,
        }


@dataclass(frozen=True)
class SplitResult:
    dataset: Dataset
    score: int
    attempt_scores: tuple[int, ...]
    best_attempt: int
    targets: dict[int, tuple[int, int]]
    violations: dict[int, tuple[int, int]]


def split_sizes(n: int, fractions) -> tuple[int, int, int]:
    """Largest-remainder apportionment of ``n`` frames; ties go to the earlier split."""
    raw = [n * f for f in fractions]
    sizes = [int(np.floor(r)) for r in raw]
    order = sorted(range(3), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    return tuple(sizes)


def _count_matrix(ds: Dataset, class_ids: list[int]) -> np.ndarray:
    col = {c: k for k, c in enumerate(class_ids)}
    C = np.zeros((len(ds.frames), len(class_ids)), dtype=np.int64)
    for i, f in enumerate(ds.frames):
        for inst in f.instances:
            C[i, col[inst.category]] += 1
    return C


def _targets(totals: np.ndarray, class_ids, names, cfg: SplitConfig) -> np.ndarray:
    """Per-class instance targets, shape (2, K) for val and test."""
    deficits = {}
    targets = np.full((2, len(class_ids)), cfg.quota, dtype=np.int64)
    for k, total in enumerate(totals):
        if total < 2 * cfg.quota:
            deficits[names[k]] = int(2 * cfg.quota - total)
            for s, f in enumerate(cfg.fractions[1:]):
                targets[s, k] = min(cfg.quota, int(np.floor(total * f)))
    if deficits and not cfg.best_effort:
        raise SplitInfeasibleError(deficits)
    return targets


def _score(counts: np.ndarray, targets: np.ndarray) -> int:
    return int(np.abs(counts - targets).sum())


def _greedy_assign(C, sizes, targets, order) -> np.ndarray:
    n, K = C.shape
    assign = np.full(n, -1, dtype=np.int64)
    counts = np.zeros((2, K), dtype=np.int64)
    filled = [0, 0, 0]
    for i in order:
        best = None
        for s in (TRAIN, VAL, TEST):
            if filled[s] >= sizes[s]:
                continue
            if s == TRAIN:
                delta = 0
            else:
                row = counts[s - 1]
                delta = int(np.abs(row + C[i] - targets[s - 1]).sum() - np.abs(row - targets[s - 1]).sum())
            room = (sizes[s] - filled[s]) / sizes[s]
            key = (delta, -room, s)
            if best is None or key < best[0]:
                best = (key, s)
        s = best[1]
        assign[i] = s
        filled[s] += 1
        if s != TRAIN:
            counts[s - 1] += C[i]
    return assign


def _swap_search(C, assign, targets, max_iter: int) -> np.ndarray:
    assign = assign.copy()
    for _ in range(max_iter):
        cv = C[assign == VAL].sum(axis=0)
        ct = C[assign == TEST].sum(axis=0)
        base_v = np.abs(cv - targets[0]).sum()
        base_t = np.abs(ct - targets[1]).sum()
        if base_v + base_t == 0:
            break
        best = (0, None)
        idx = {s: np.flatnonzero(assign == s) for s in (TRAIN, VAL, TEST)}
        for a, b in ((TRAIN, VAL), (TRAIN, TEST), (VAL, TEST)):
            ia, ib = idx[a], idx[b]
            if ia.size == 0 or ib.size == 0:
                continue
            # D[i, j] moves frame ia[i] into b and frame ib[j] into a
            D = C[ia][:, None, :] - C[ib][None, :, :]
            if a == TRAIN:
                cur, tgt, base = (cv, targets[0], base_v) if b == VAL else (ct, targets[1], base_t)
                delta = np.abs(cur + D - tgt).sum(axis=2) - base
            else:
                delta = (
                    np.abs(cv - D - targets[0]).sum(axis=2)
                    - base_v
                    + np.abs(ct + D - targets[1]).sum(axis=2)
                    - base_t
                )
            flat = int(np.argmin(delta))
            if delta.flat[flat] < best[0]:
                i, j = divmod(flat, delta.shape[1])
                best = (int(delta.flat[flat]), (ia[i], ib[j], a, b))
        if best[1] is None:
            break
        i, j, a, b = best[1]
        assign[i], assign[j] = b, a
    return assign


def _run_attempt(C, sizes, targets, seed: int, attempt: int):
    rng = np.random.default_rng([seed, attempt])
    order = rng.permutation(C.shape[0])
    assign = _greedy_assign(C, sizes, targets, order)
    assign = _swap_search(C, assign, targets, max_iter=10 * C.shape[0] + 10)
    counts = np.stack([C[assign == VAL].sum(axis=0), C[assign == TEST].sum(axis=0)])
    return _score(counts, targets), assign


def search_split(ds: Dataset, cfg: SplitConfig = SplitConfig(), threads: int = 1) -> SplitResult:
    """Run every restart and keep the assignment closest to the quotas.

    Restarts use seeds derived from ``(cfg.seed, attempt)``; the winner is the
    lowest score, ties broken by the lower attempt index, so the outcome does
    not depend on ``threads``.
    """
    if not ds.frames:
        raise SplitError("cannot split an empty dataset")
    if not cfg.force and any(f.split is not None for f in ds.frames):
        raise SplitError("dataset already carries split tags; pass force to overwrite")
    present = sorted({inst.category for f in ds.frames for inst in f.instances})
    class_ids = [c.id for c in ds.taxonomy if c.id in present]
    class_ids += [c for c in present if c not in class_ids]
    names = [ds.category_name(c) for c in class_ids]
    C = _count_matrix(ds, class_ids)
    targets = _targets(C.sum(axis=0), class_ids, names, cfg)
    sizes = split_sizes(len(ds.frames), cfg.fractions)

    def job(attempt):
        return _run_attempt(C, sizes, targets, cfg.seed, attempt)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(job, range(cfg.max_attempts)))
    else:
        results = [job(a) for a in range(cfg.max_attempts)]
    scores = tuple(r[0] for r in results)
    best = int(np.argmin(scores))
    assign = results[best][1]

    frames = tuple(replace(f, split=SPLITS[s]) for f, s in zip(ds.frames, assign))
    counts = np.stack([C[assign == VAL].sum(axis=0), C[assign == TEST].sum(axis=0)])
    over = np.abs(counts - targets) > cfg.tolerance
    violations = {
        class_ids[k]: (int(counts[0, k]), int(counts[1, k])) for k in range(len(class_ids)) if over[:, k].any()
    }
    return SplitResult(
        dataset=Dataset(frames, ds.taxonomy),
        score=scores[best],
        attempt_scores=scores,
        best_attempt=best,
        targets={class_ids[k]: (int(targets[0, k]), int(targets[1, k])) for k in range(len(class_ids))},
        violations=violations,
    )


def stratified_split(ds: Dataset, cfg: SplitConfig = SplitConfig(), threads: int = 1) -> Dataset:
    """Tag every frame train/val/test; see :func:`search_split`."""
    return search_split(ds, cfg, threads).dataset


@dataclass(frozen=True)
class SplitRow:
    split: str
    category: int
    name: str
    frames: int
    instances: int


def split_report(ds: Dataset) -> list[SplitRow]:
    """Frame and instance counts per split and class (every taxonomy class, zeros included)."""
    if not ds.frames or any(f.split is None for f in ds.frames):
        raise SplitError("split report needs a fully tagged dataset")
    rows = []
    for split in SPLITS:
        frames = [f for f in ds.frames if f.split == split]
        for cat in ds.taxonomy:
            n_inst = sum(f.category_counts()[cat.id] for f in frames)
            n_frames = sum(1 for f in frames if cat.id in f.category_counts())
            rows.append(SplitRow(split, cat.id, cat.name, n_frames, n_inst))
    return rows


def split_frame_counts(ds: Dataset) -> dict[str, int]:
    return {s: sum(1 for f in ds.frames if f.split == s) for s in SPLITS}


def render_split_report(ds: Dataset, quota: Optional[int] = None, tolerance: int = 1, style: str = "text") -> str:
    rows = split_report(ds)
    sizes = split_frame_counts(ds)
    by_class: dict[int, dict[str, SplitRow]] = {}
    for r in rows:
        by_class.setdefault(r.category, {})[r.split] = r
    if style == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["category_id", "name"] + [f"{s}_{k}" for s in SPLITS for k in ("frames", "instances")])
        for cid, per in by_class.items():
            name = per["train"].name
            w.writerow([cid, name] + [v for s in SPLITS for v in (per[s].frames, per[s].instances)])
        return buf.getvalue()
    lines = [
        "frames: " + "  ".join(f"{s}={sizes[s]}" for s in SPLITS),
        f"{'class':<18}{'train':>8}{'val':>8}{'test':>8}",
    ]
    for cid, per in by_class.items():
        flag = ""
        if quota is not None and any(abs(per[s].instances - quota) > tolerance for s in ("val", "test")):
            flag = "  *"
        lines.append(
            f"{per['train'].name:<18}"
            + "".join(f"{per[s].instances:>8}" for s in SPLITS)
            + flag
        )
    return "\n".join(lines) + "\n"
