"""Synthetic laparoscopy-like scenes and perturbed predictions.

Instruments are drawn as capsules (a segment thickened by a radius, i.e. a
rectangle with two semicircular caps) or rotated rectangles, both with
closed-form areas. Every frame and every perturbation draws from a Philox
generator keyed by (seed, frame), so frames can be produced in any order or
in parallel with identical results.
"""

from __future__ import annotations

import hashlib
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .masks import rle_encode
from .model import DEFAULT_TAXONOMY, AnnotatedFrame, CategoryId, Dataset, InstanceMask

REFERENCE_FRAMES = 333
REFERENCE_INSTANCES = 561


def _rng(seed: int, *key) -> np.random.Generator:
    text = "\x1f".join(str(k) for k in (seed,) + key)
    digest = hashlib.blake2b(text.encode(), digest_size=16).digest()
    return np.random.Generator(np.random.Philox(key=np.frombuffer(digest, dtype=np.uint64)))


@dataclass(frozen=True)
class SceneConfig:
    width: int = 540
    height: int = 360
    instruments: tuple[int, int] = (1, 3)
    shape: str = "capsule"
    length_range: tuple[float, float] = (80.0, 220.0)
    radius_range: tuple[float, float] = (6.0, 16.0)
    class_weights: Optional[tuple[float, ...]] = None
    taxonomy: tuple[CategoryId, ...] = DEFAULT_TAXONOMY
    occlusion: bool = False
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.instruments
        if not 1 <= lo <= hi:
            raise ValueError(f"instruments per frame must satisfy 1 <= lo <= hi, got {self.instruments}")
        if self.shape not in ("capsule", "rotated-rectangle"):
            raise ValueError(f"unknown shape family {self.shape!r}")
        if self.class_weights is not None and len(self.class_weights) != len(self.taxonomy):
            raise ValueError("class_weights needs one weight per taxonomy entry")

    def to_json(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "instruments": list(self.instruments),
            "shape": self.shape,
            "length_range": list(self.length_range),
            "radius_range": list(self.radius_range),
            "occlusion": self.occlusion,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class Tool:
    """Shape parameters: segment centre, direction, segment length and radius."""

    cx: float
    cy: float
    angle: float
    length: float
    radius: float
    shape: str = "capsule"

    @property
    def analytic_area(self) -> float:
        if self.shape == "capsule":
            return 2 * self.radius * self.length + math.pi * self.radius**2
        return 2 * self.radius * self.length

    def half_extent(self) -> tuple[float, float]:
        c, s = abs(math.cos(self.angle)), abs(math.sin(self.angle))
        hl, r = self.length / 2, self.radius
        if self.shape == "capsule":
            return hl * c + r, hl * s + r
        return hl * c + r * s, hl * s + r * c


def rasterize_tool(tool: Tool, width: int, height: int) -> np.ndarray:
    """Pixel-centre rasterization of one tool shape."""
    ex, ey = tool.half_extent()
    x0, x1 = max(int(math.floor(tool.cx - ex)), 0), min(int(math.ceil(tool.cx + ex)) + 1, width)
    y0, y1 = max(int(math.floor(tool.cy - ey)), 0), min(int(math.ceil(tool.cy + ey)) + 1, height)
    out = np.zeros((height, width), dtype=bool)
    if x0 >= x1 or y0 >= y1:
        return out
    ys, xs = np.mgrid[y0:y1, x0:x1]
    px, py = xs + 0.5 - tool.cx, ys + 0.5 - tool.cy
    c, s = math.cos(tool.angle), math.sin(tool.angle)
    along = px * c + py * s
    across = -px * s + py * c
    hl = tool.length / 2
    if tool.shape == "capsule":
        t = np.clip(along, -hl, hl)
        inside = (along - t) ** 2 + across**2 <= tool.radius**2
    else:
        inside = (np.abs(along) <= hl) & (np.abs(across) <= tool.radius)
    out[y0:y1, x0:x1] = inside
    return out


def _sample_tool(cfg: SceneConfig, rng: np.random.Generator) -> Tool:
    u = rng.random(4)
    angle = u[0] * math.pi
    length = cfg.length_range[0] + u[1] * (cfg.length_range[1] - cfg.length_range[0])
    radius = cfg.radius_range[0] + u[2] * (cfg.radius_range[1] - cfg.radius_range[0])
    tool = Tool(0.0, 0.0, angle, length, radius, cfg.shape)
    ex, ey = tool.half_extent()
    # shrink tools that cannot fit, keeping a one-pixel margin
    fit = min(1.0, (cfg.width / 2 - 1) / ex, (cfg.height / 2 - 1) / ey)
    if fit < 1.0:
        tool = Tool(0.0, 0.0, angle, length * fit, radius * fit, cfg.shape)
        ex, ey = tool.half_extent()
    cx_lo, cx_hi = ex + 1, cfg.width - ex - 1
    cy_lo, cy_hi = ey + 1, cfg.height - ey - 1
    v = rng.random(2)
    return Tool(cx_lo + v[0] * (cx_hi - cx_lo), cy_lo + v[1] * (cy_hi - cy_lo), angle, tool.length, tool.radius, cfg.shape)


def _render_image(cfg: SceneConfig, masks: Sequence[np.ndarray], rng: np.random.Generator) -> np.ndarray:
    h, w = cfg.height, cfg.width
    ys, xs = np.mgrid[0:h, 0:w]
    # reddish tissue with a soft vignette
    r = np.hypot((xs - w / 2) / w, (ys - h / 2) / h)
    shade = 1.0 - 0.6 * r
    image = np.stack([170 * shade, 70 * shade, 60 * shade], axis=-1)
    image += rng.normal(0, 6, size=image.shape)
    for m in masks:
        metal = 120 + 80 * rng.random()
        image[m] = [metal, metal, metal + 10]
    return np.clip(np.floor(image + 0.5), 0, 255).astype(np.uint8)


def frame_id_for(index: int) -> str:
    return f"synth{index:04d}"


def generate_scene(
    cfg: SceneConfig,
    index: int = 0,
    categories: Optional[Sequence[int]] = None,
    with_image: bool = False,
) -> AnnotatedFrame:
    """One synthetic frame with exact ground-truth masks.

    Args:
        cfg: Scene settings.
        index: Frame index; together with ``cfg.seed`` it keys the generator.
        categories: Explicit category per instrument. When omitted the count
            is drawn from ``cfg.instruments`` and classes from
            ``cfg.class_weights`` (uniform by default).
        with_image: Also render RGB pixels into ``frame.image``.
    """
    rng = _rng(cfg.seed, "scene", index)
    ids = [c.id for c in cfg.taxonomy]
    if categories is None:
        n = int(rng.integers(cfg.instruments[0], cfg.instruments[1] + 1))
        p = None
        if cfg.class_weights is not None:
            p = np.asarray(cfg.class_weights, dtype=np.float64)
            p = p / p.sum()
        categories = [int(c) for c in rng.choice(ids, size=n, p=p)]
    tools = [_sample_tool(cfg, rng) for _ in categories]
    masks = [rasterize_tool(t, cfg.width, cfg.height) for t in tools]
    if cfg.occlusion:
        # later tools lie on top of earlier ones
        for i in range(len(masks)):
            for j in range(i + 1, len(masks)):
                masks[i] &= ~masks[j]
    instances = tuple(
        InstanceMask(int(c), rle_encode(m)) for c, m in zip(categories, masks) if m.any()
    )
    fid = frame_id_for(index)
    image = _render_image(cfg, masks, rng) if with_image else None
    return AnnotatedFrame(fid, cfg.width, cfg.height, f"{fid}.png", instances, image=image)


def instance_counts(n_frames: int, total: int, lo: int, hi: int, seed: int) -> list[int]:
    """Instruments per frame summing exactly to ``total``, each within ``[lo, hi]``."""
    if not n_frames * lo <= total <= n_frames * hi:
        raise ValueError(f"cannot place {total} instances on {n_frames} frames with {lo}..{hi} each")
    rng = _rng(seed, "counts")
    counts = np.full(n_frames, lo, dtype=np.int64)
    extra = total - n_frames * lo
    while extra > 0:
        open_ = np.flatnonzero(counts < hi)
        pick = rng.choice(open_, size=min(extra, open_.size), replace=False)
        counts[pick] += 1
        extra -= pick.size
    return counts.tolist()


def generate_dataset(
    cfg: SceneConfig,
    n_frames: int,
    total_instances: Optional[int] = None,
    balanced_classes: bool = False,
    with_images: bool = False,
    threads: int = 1,
) -> Dataset:
    """Generate ``n_frames`` scenes.

    With ``total_instances`` the per-frame counts are fixed to hit that total;
    with ``balanced_classes`` the class labels form a shuffled near-uniform
    multiset over the taxonomy instead of independent draws.
    """
    per_frame: list[Optional[list[int]]] = [None] * n_frames
    if total_instances is not None or balanced_classes:
        if total_instances is None:
            counts = [int(_rng(cfg.seed, "n", i).integers(cfg.instruments[0], cfg.instruments[1] + 1)) for i in range(n_frames)]
        else:
            counts = instance_counts(n_frames, total_instances, *cfg.instruments, seed=cfg.seed)
        total = sum(counts)
        ids = [c.id for c in cfg.taxonomy]
        rng = _rng(cfg.seed, "classes")
        if balanced_classes:
            labels = np.array([ids[k % len(ids)] for k in range(total)])
            rng.shuffle(labels)
        else:
            labels = rng.choice(ids, size=total)
        offsets = np.cumsum([0] + counts)
        per_frame = [labels[offsets[i] : offsets[i + 1]].tolist() for i in range(n_frames)]

    def job(i):
        return generate_scene(cfg, i, per_frame[i], with_images)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            frames = list(pool.map(job, range(n_frames)))
    else:
        frames = [job(i) for i in range(n_frames)]
    return Dataset(tuple(frames), cfg.taxonomy)


def reference_scale_dataset(seed: int = 0, with_images: bool = False) -> Dataset:
    """333 frames at 540x360 holding 561 instruments over the 12-class taxonomy."""
    cfg = SceneConfig(seed=seed)
    return generate_dataset(cfg, REFERENCE_FRAMES, REFERENCE_INSTANCES, balanced_classes=True, with_images=with_images)


@dataclass(frozen=True)
class PerturbationConfig:
    """How predictions deviate from ground truth.

    ``jitter`` displaces each predicted mask by that many pixels in a random
    direction. Scores of kept instances are ``1 - score_noise * |z|`` with
    ``z`` standard normal, clipped to [0, 1]; spurious detections score
    uniformly below ``spurious_max_score``.
    """

    jitter: float = 0.0
    drop_prob: float = 0.0
    spurious_rate: float = 0.0
    class_flip_prob: float = 0.0
    score_noise: float = 0.0
    spurious_max_score: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for name in ("drop_prob", "class_flip_prob"):
            p = getattr(self, name)
            if not 0 <= p <= 1:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")
        if self.jitter < 0 or self.spurious_rate < 0 or self.score_noise < 0:
            raise ValueError("jitter, spurious_rate and score_noise must be non-negative")
        if not 0 <= self.spurious_max_score <= 1:
            raise ValueError("spurious_max_score must lie in [0, 1]")

    def to_json(self) -> dict:
        return {
            "jitter": self.jitter,
            "drop_prob": self.drop_prob,
            "spurious_rate": self.spurious_rate,
            "class_flip_prob": self.class_flip_prob,
            "score_noise": self.score_noise,
            "spurious_max_score": self.spurious_max_score,
            "seed": self.seed,
        }


def shift_mask(bitmap: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Translate by whole pixels; pixels pushed out of the frame are lost."""
    h, w = bitmap.shape
    out = np.zeros_like(bitmap)
    if abs(dx) >= w or abs(dy) >= h:
        return out
    src = bitmap[max(0, -dy) : h - max(0, dy), max(0, -dx) : w - max(0, dx)]
    out[max(0, dy) : max(0, dy) + src.shape[0], max(0, dx) : max(0, dx) + src.shape[1]] = src
    return out


def perturb_predictions(
    frame: AnnotatedFrame,
    pcfg: PerturbationConfig,
    taxonomy: Sequence[CategoryId] = DEFAULT_TAXONOMY,
    scene: Optional[SceneConfig] = None,
) -> list[InstanceMask]:
    """Scored predictions derived from a frame's ground truth.

    Each instance consumes the same random draws whatever the settings, so
    sweeping one parameter with a fixed seed changes only that effect.
    """
    rng = _rng(pcfg.seed, "perturb", frame.frame_id)
    ids = [c.id for c in taxonomy]
    out = []
    for inst in frame.instances:
        u_drop, phi, u_flip, u_cls, b1, b2 = rng.random(6)
        # Box-Muller keeps the number of draws per instance fixed
        z = abs(math.sqrt(-2 * math.log(max(b1, 1e-300))) * math.cos(2 * math.pi * b2))
        if u_drop < pcfg.drop_prob:
            continue
        bitmap = inst.bitmap
        if pcfg.jitter > 0:
            theta = 2 * math.pi * phi
            dx = int(round(pcfg.jitter * math.cos(theta)))
            dy = int(round(pcfg.jitter * math.sin(theta)))
            bitmap = shift_mask(bitmap, dx, dy)
            if not bitmap.any():
                continue
        category = inst.category
        if u_flip < pcfg.class_flip_prob and len(ids) > 1:
            others = [c for c in ids if c != category]
            category = others[min(int(u_cls * len(others)), len(others) - 1)]
        score = min(max(1.0 - pcfg.score_noise * z, 0.0), 1.0)
        out.append(InstanceMask(category, rle_encode(bitmap), score))
    if pcfg.spurious_rate > 0:
        scene = scene or SceneConfig(width=frame.width, height=frame.height, taxonomy=tuple(taxonomy))
        for _ in range(int(rng.poisson(pcfg.spurious_rate))):
            tool = _sample_tool(scene, rng)
            bitmap = rasterize_tool(tool, frame.width, frame.height)
            if not bitmap.any():
                continue
            category = ids[int(rng.integers(len(ids)))]
            score = float(rng.random()) * pcfg.spurious_max_score
            out.append(InstanceMask(category, rle_encode(bitmap), score))
    return out


def perturb_dataset(ds: Dataset, pcfg: PerturbationConfig, threads: int = 1) -> dict[str, list[InstanceMask]]:
    def job(frame):
        return frame.frame_id, perturb_predictions(frame, pcfg, ds.taxonomy)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            pairs = list(pool.map(job, ds.frames))
    else:
        pairs = [job(f) for f in ds.frames]
    return dict(pairs)


def ground_truth_as_predictions(ds: Dataset, score: float = 1.0) -> dict[str, list[InstanceMask]]:
    return {f.frame_id: [InstanceMask(i.category, i.mask, score) for i in f.instances] for f in ds.frames}


def expected_iou_under_shift(w: float, h: float, d: float) -> float:
    """IoU of a ``w`` x ``h`` rectangle and its copy shifted by ``d`` along the width."""
    if w <= 0 or h <= 0:
        raise ValueError("rectangle sides must be positive")
    if not 0 <= d < w:
        raise ValueError(f"shift must satisfy 0 <= d < w, got d={d}, w={w}")
    return ((w - d) * h) / ((w + d) * h)
