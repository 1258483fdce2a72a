"""Two-stage, label-preserving data augmentation.

Offline: a fixed grid of rotations, scalings and translations is applied to
every training frame, and an augmented frame is kept only if each of its
instances still covers (nearly) its expected area after clipping to the
frame. Online: per-sample random flips and Gaussian blur, driven by a
counter-based generator so any sample can be replayed.

Geometry uses continuous pixel coordinates with pixel ``(x, y)`` centred at
``(x + 0.5, y + 0.5)``. Rotation and scaling act about the frame centre and
the output keeps the input size. Images are resampled bilinearly, masks by
nearest neighbour.
"""

from __future__ import annotations

import hashlib
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .masks import rle_encode
from .model import IDENTITY, AnnotatedFrame, Dataset, InstanceMask, TransformSpec

Chain = tuple[TransformSpec, ...]

DEFAULT_ROTATIONS = (0, 45, 90, 135, 180, 225, 270, 315)
DEFAULT_SCALES = (1.25, 1.50, 1.75)
DEFAULT_TRANSLATIONS = ((-0.1, -0.1), (-0.1, 0.1), (0.1, -0.1), (0.1, 0.1))
MAX_SIGMA = 3.0

GEOMETRIC_KINDS = ("rotation", "scale", "translation", "mirror", "identity")


class AugmentationError(ValueError):
    pass


def rotation(deg: float) -> TransformSpec:
    return IDENTITY if deg % 360 == 0 else TransformSpec("rotation", rotation_deg=float(deg))


def scale(c: float) -> TransformSpec:
    return IDENTITY if c == 1 else TransformSpec("scale", scale_factor=float(c))


def translation(u: float, v: float) -> TransformSpec:
    return IDENTITY if u == 0 and v == 0 else TransformSpec("translation", translation=(float(u), float(v)))


def mirror(axis: str) -> TransformSpec:
    return TransformSpec("mirror", mirror_axis=axis)


def blur(sigma: float) -> TransformSpec:
    return TransformSpec("blur", blur_sigma=float(sigma))


_FIELDS = {
    "rotation": "rotation_deg",
    "scale": "scale_factor",
    "translation": "translation",
    "mirror": "mirror_axis",
    "blur": "blur_sigma",
    "identity": None,
}


def validate_transform(t: TransformSpec) -> None:
    if t.kind not in _FIELDS:
        raise AugmentationError(f"unknown transform kind {t.kind!r}")
    for kind, name in _FIELDS.items():
        if name is None:
            continue
        populated = getattr(t, name) is not None
        if populated != (kind == t.kind):
            raise AugmentationError(f"{t.kind} transform must {'' if kind == t.kind else 'not '}set {name}")
    if t.kind == "scale" and not t.scale_factor > 0:
        raise AugmentationError("scale factor must be positive")
    if t.kind == "mirror" and t.mirror_axis not in ("horizontal", "vertical"):
        raise AugmentationError(f"mirror axis must be horizontal or vertical, got {t.mirror_axis!r}")
    if t.kind == "blur" and not 0.0 <= t.blur_sigma <= MAX_SIGMA:
        raise AugmentationError(f"blur sigma must lie in [0, {MAX_SIGMA}], got {t.blur_sigma}")


@dataclass(frozen=True)
class AugmentationConfig:
    """Settings for both augmentation stages.

    The offline grid is built from ``rotations``, ``scales`` and
    ``translations`` (fractions of width and height). With
    ``rotation_scale_product`` the separate rotations and scales are replaced
    by their cartesian product. ``offline_grid`` overrides all of that with
    explicit chains. The identity chain is always present exactly once.
    """

    rotations: tuple[float, ...] = DEFAULT_ROTATIONS
    scales: tuple[float, ...] = DEFAULT_SCALES
    translations: tuple[tuple[float, float], ...] = DEFAULT_TRANSLATIONS
    rotation_scale_product: bool = False
    offline_grid: Optional[tuple[Chain, ...]] = None
    preservation_threshold: float = 0.9
    fill_policy: str = "mean-rgb"
    fill_value: tuple[int, int, int] = (0, 0, 0)
    online_flip_prob: float = 0.5
    online_blur_prob: float = 0.5
    online_sigma_range: tuple[float, float] = (0.0, MAX_SIGMA)
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.preservation_threshold <= 1:
            raise AugmentationError("preservation threshold must lie in (0, 1]")
        for name in ("online_flip_prob", "online_blur_prob"):
            p = getattr(self, name)
            if not 0 <= p <= 1:
                raise AugmentationError(f"{name} must lie in [0, 1], got {p}")
        lo, hi = self.online_sigma_range
        if not 0 <= lo <= hi <= MAX_SIGMA:
            raise AugmentationError(f"sigma range must be within [0, {MAX_SIGMA}], got {(lo, hi)}")
        if self.fill_policy not in ("mean-rgb", "constant"):
            raise AugmentationError(f"unknown fill policy {self.fill_policy!r}")
        if any(not c > 0 for c in self.scales):
            raise AugmentationError("scale factors must be positive")

    def to_json(self) -> dict:
        d = {
            "rotations": list(self.rotations),
            "scales": list(self.scales),
            "translations": [list(t) for t in self.translations],
            "rotation_scale_product": self.rotation_scale_product,
            "preservation_threshold": self.preservation_threshold,
            "fill_policy": self.fill_policy,
            "fill_value": list(self.fill_value),
            "online_flip_prob": self.online_flip_prob,
            "online_blur_prob": self.online_blur_prob,
            "online_sigma_range": list(self.online_sigma_range),
            "seed": self.seed,
        }
        if self.offline_grid is not None:
            d["offline_grid"] = [[t.to_json() for t in chain] for chain in self.offline_grid]
        return d

    @classmethod
    def from_json(cls, d: dict) -> "AugmentationConfig":
        kwargs = dict(d)
        for key in ("rotations", "scales", "fill_value", "online_sigma_range"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        if "translations" in kwargs:
            kwargs["translations"] = tuple(tuple(t) for t in kwargs["translations"])
        if kwargs.get("offline_grid") is not None:
            kwargs["offline_grid"] = tuple(
                tuple(TransformSpec.from_json(t) for t in chain) for chain in kwargs["offline_grid"]
            )
        return cls(**kwargs)


def _normalize_chain(chain: Sequence[TransformSpec]) -> Chain:
    return tuple(t for t in chain if t.kind != "identity")


def enumerate_offline_grid(cfg: AugmentationConfig) -> list[Chain]:
    """Ordered list of transform chains; the identity chain ``()`` comes first."""
    if cfg.offline_grid is not None:
        candidates = [_normalize_chain(c) for c in cfg.offline_grid]
    else:
        candidates = []
        if cfg.rotation_scale_product:
            for a in cfg.rotations:
                for c in cfg.scales:
                    candidates.append(_normalize_chain((rotation(a), scale(c))))
        else:
            candidates += [_normalize_chain((rotation(a),)) for a in cfg.rotations]
            candidates += [_normalize_chain((scale(c),)) for c in cfg.scales]
        candidates += [_normalize_chain((translation(u, v),)) for u, v in cfg.translations]
    for chain in candidates:
        for t in chain:
            validate_transform(t)
            if t.kind == "blur":
                raise AugmentationError("blur belongs to the online stage, not the offline grid")
    grid: list[Chain] = [()]
    grid += [c for c in candidates if c != ()]
    return grid


def chain_tag(chain: Chain) -> str:
    return "+".join(t.tag for t in chain) if chain else "identity"


def mean_rgb(image: np.ndarray) -> tuple[int, ...]:
    """Per-channel mean rounded half up to an integer."""
    image = np.asarray(image)
    if image.size == 0:
        raise AugmentationError("mean of an empty image")
    pixels = image.reshape(-1, image.shape[-1] if image.ndim == 3 else 1).astype(np.int64)
    n = pixels.shape[0]
    sums = pixels.sum(axis=0)
    # floor(sum / n + 1/2) in exact integer arithmetic
    return tuple(int(v) for v in (2 * sums + n) // (2 * n))


def _linear_part(t: TransformSpec, width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """Forward map p' = A @ (p - c) + c + b for one geometric transform."""
    if t.kind == "rotation":
        deg = t.rotation_deg % 360
        if deg % 90 == 0:
            cos, sin = [(1, 0), (0, 1), (-1, 0), (0, -1)][int(deg // 90)]
        else:
            rad = math.radians(deg)
            cos, sin = math.cos(rad), math.sin(rad)
        # counter-clockwise as displayed (y axis points down)
        return np.array([[cos, sin], [-sin, cos]], dtype=np.float64), np.zeros(2)
    if t.kind == "scale":
        return np.eye(2) * t.scale_factor, np.zeros(2)
    if t.kind == "translation":
        u, v = t.translation
        return np.eye(2), np.array([u * width, v * height])
    if t.kind == "mirror":
        if t.mirror_axis == "horizontal":
            return np.diag([-1.0, 1.0]), np.zeros(2)
        return np.diag([1.0, -1.0]), np.zeros(2)
    if t.kind == "identity":
        return np.eye(2), np.zeros(2)
    raise AugmentationError(f"{t.kind} is not a geometric transform")


def chain_matrix(chain: Sequence[TransformSpec], width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """Compose a chain into a single centred forward map ``(A, b)``."""
    A, b = np.eye(2), np.zeros(2)
    for t in chain:
        At, bt = _linear_part(t, width, height)
        A, b = At @ A, At @ b + bt
    return A, b


def _source_coords(A: np.ndarray, b: np.ndarray, width: int, height: int):
    cx, cy = width / 2.0, height / 2.0
    A_inv = np.linalg.inv(A)
    # keep exact inverses for signed permutation matrices
    A_inv = np.where(np.abs(A_inv - np.round(A_inv)) < 1e-12, np.round(A_inv), A_inv)
    dx = (np.arange(width) + 0.5 - cx - b[0])[None, :]
    dy = (np.arange(height) + 0.5 - cy - b[1])[:, None]
    sx = A_inv[0, 0] * dx + A_inv[0, 1] * dy + cx
    sy = A_inv[1, 0] * dx + A_inv[1, 1] * dy + cy
    return sx, sy


def _nearest_lookup(sx: np.ndarray, sy: np.ndarray, width: int, height: int):
    """Flat source index per output pixel, -1 where the source lies outside."""
    ix = np.floor(sx).astype(np.int64)
    iy = np.floor(sy).astype(np.int64)
    inside = (ix >= 0) & (ix < width) & (iy >= 0) & (iy < height)
    return np.where(inside, iy * width + ix, -1)


def transform_mask(bitmap: np.ndarray, A: np.ndarray, b: np.ndarray, _lookup=None) -> np.ndarray:
    """Nearest-neighbour resampling of a binary mask; nothing enters from outside."""
    h, w = bitmap.shape
    if _lookup is None:
        _lookup = _nearest_lookup(*_source_coords(A, b, w, h), w, h)
    flat = np.append(np.asarray(bitmap, dtype=bool).ravel(), False)
    return flat[_lookup]


def transform_image(
    image: np.ndarray, A: np.ndarray, b: np.ndarray, fill: Sequence[float], _coords=None
) -> np.ndarray:
    """Bilinear resampling; samples outside the frame blend towards ``fill``."""
    h, w = image.shape[:2]
    squeeze = image.ndim == 2
    img = image[..., None] if squeeze else image
    channels = img.shape[2]
    fill_arr = np.broadcast_to(np.asarray(fill, dtype=np.float64)[:channels], (channels,))
    sx, sy = _coords if _coords is not None else _source_coords(A, b, w, h)
    # padded index of the sample point; pixel (x, y) sits at index (x + 1, y + 1)
    fx = np.clip(sx + 0.5, 0.0, w + 1.0)
    fy = np.clip(sy + 0.5, 0.0, h + 1.0)
    x0 = np.minimum(np.floor(fx).astype(np.int64), w)
    y0 = np.minimum(np.floor(fy).astype(np.int64), h)
    wx = fx - x0
    wy = fy - y0
    i00 = y0 * (w + 2) + x0
    i10 = i00 + (w + 2)
    out = np.empty((h, w, channels), dtype=np.float64)
    plane = np.empty((h + 2, w + 2), dtype=np.float64)
    for c in range(channels):
        plane[:] = fill_arr[c]
        plane[1:-1, 1:-1] = img[..., c]
        flat = plane.ravel()
        top = np.take(flat, i00)
        top += (np.take(flat, i00 + 1) - top) * wx
        bottom = np.take(flat, i10)
        bottom += (np.take(flat, i10 + 1) - bottom) * wx
        out[..., c] = top + (bottom - top) * wy
    if np.issubdtype(image.dtype, np.integer):
        info = np.iinfo(image.dtype)
        out = np.clip(np.floor(out + 0.5), info.min, info.max)
    out = out.astype(image.dtype)
    return out[..., 0] if squeeze else out


def _fill_for(frame: AnnotatedFrame, fill) -> tuple:
    if fill is not None:
        return tuple(fill)
    if frame.image is not None:
        return mean_rgb(frame.image)
    return (0, 0, 0)


def transform_frame(
    frame: AnnotatedFrame, chain: Sequence[TransformSpec], fill=None
) -> tuple[AnnotatedFrame, list[np.ndarray]]:
    """Apply a geometric chain in a single resampling pass.

    Returns the new frame (instances whose mask vanished are removed) and the
    transformed bitmap of every source instance, empty ones included.
    """
    chain = tuple(chain)
    for t in chain:
        validate_transform(t)
        if t.kind not in GEOMETRIC_KINDS:
            raise AugmentationError(f"{t.kind} is not supported here; use apply_blur")
    geometric = _normalize_chain(chain)
    if not geometric:
        bitmaps = [inst.bitmap for inst in frame.instances]
        return replace(frame, provenance=frame.provenance + chain), bitmaps
    A, b = chain_matrix(geometric, frame.width, frame.height)
    coords = _source_coords(A, b, frame.width, frame.height)
    lookup = _nearest_lookup(*coords, frame.width, frame.height)
    bitmaps = [transform_mask(inst.bitmap, A, b, lookup) for inst in frame.instances]
    instances = tuple(
        InstanceMask(inst.category, rle_encode(bm), inst.score)
        for inst, bm in zip(frame.instances, bitmaps)
        if bm.any()
    )
    image = None
    if frame.image is not None:
        image = transform_image(frame.image, A, b, _fill_for(frame, fill), coords)
    out = replace(frame, instances=instances, provenance=frame.provenance + chain, image=image)
    return out, bitmaps


def apply_affine(frame: AnnotatedFrame, t: TransformSpec, fill=None) -> AnnotatedFrame:
    """Apply one geometric transform to a frame's image and masks.

    ``fill`` colours the uncovered pixels; by default the frame's mean RGB.
    """
    return transform_frame(frame, (t,), fill)[0]


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = math.ceil(3 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2 * sigma * sigma))
    return k / k.sum()


def _convolve_axis(data: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    radius = len(kernel) // 2
    pad = [(0, 0)] * data.ndim
    pad[axis] = (radius, radius)
    padded = np.pad(data, pad, mode="edge")
    n = data.shape[axis]
    out = np.zeros_like(data, dtype=np.float64)
    for k, wk in enumerate(kernel):
        out += wk * np.take(padded, np.arange(k, k + n), axis=axis)
    return out


def apply_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with clamp-to-edge borders.

    Integer images are rounded half up back to their dtype; float images stay
    float.
    """
    if not 0.0 <= sigma <= MAX_SIGMA:
        raise AugmentationError(f"blur sigma must lie in [0, {MAX_SIGMA}], got {sigma}")
    image = np.asarray(image)
    if sigma == 0:
        return image.copy()
    kernel = gaussian_kernel(sigma)
    out = _convolve_axis(_convolve_axis(image.astype(np.float64), kernel, 0), kernel, 1)
    if np.issubdtype(image.dtype, np.integer):
        info = np.iinfo(image.dtype)
        out = np.clip(np.floor(out + 0.5), info.min, info.max)
    return out.astype(image.dtype)


def expected_area_factor(chain: Sequence[TransformSpec]) -> float:
    factor = 1.0
    for t in chain:
        if t.kind == "scale":
            factor *= t.scale_factor**2
    return factor


def preservation_ratio(original: InstanceMask, transformed, t) -> float:
    """Clipped area after transform relative to the area the transform should give.

    ``transformed`` is an :class:`InstanceMask`, a bitmap, or ``None`` for an
    instance that vanished; ``t`` is a transform or a chain.
    """
    chain = (t,) if isinstance(t, TransformSpec) else tuple(t)
    if transformed is None:
        area = 0
    elif isinstance(transformed, InstanceMask):
        area = transformed.area
    else:
        area = int(np.count_nonzero(transformed))
    expected = original.area * expected_area_factor(chain)
    return area / expected if expected > 0 else 0.0


def _derived_image_ref(image_ref: str, tag: str) -> str:
    stem, dot, ext = image_ref.rpartition(".")
    if not dot or "/" in ext:
        return f"{image_ref}__{tag}"
    return f"{stem}__{tag}.{ext}"


def augment_frame(frame: AnnotatedFrame, grid: Sequence[Chain], cfg: AugmentationConfig) -> list[AnnotatedFrame]:
    """Every label-preserving augmentation of one frame, in grid order."""
    fill = None if cfg.fill_policy == "mean-rgb" else cfg.fill_value
    kept = []
    for chain in grid:
        out, bitmaps = transform_frame(frame, chain, fill)
        if not chain:
            kept.append(replace(frame, provenance=frame.provenance + (IDENTITY,)))
            continue
        ratios = [preservation_ratio(inst, bm, chain) for inst, bm in zip(frame.instances, bitmaps)]
        if all(r >= cfg.preservation_threshold for r in ratios):
            tag = chain_tag(chain)
            kept.append(
                replace(
                    out,
                    frame_id=f"{frame.frame_id}/{tag}",
                    image_ref=_derived_image_ref(frame.image_ref, tag),
                )
            )
    return kept


def offline_augment(ds: Dataset, cfg: AugmentationConfig, threads: int = 1) -> Dataset:
    """Materialize the offline grid for training frames.

    Frames tagged ``val`` or ``test`` pass through unchanged. Output frames are
    ordered by source frame id, then grid position, whatever ``threads`` is.
    """
    grid = enumerate_offline_grid(cfg)
    frames = sorted(ds.frames, key=lambda f: f.frame_id)

    def job(frame: AnnotatedFrame) -> list[AnnotatedFrame]:
        if frame.split not in (None, "train"):
            return [frame]
        return augment_frame(frame, grid, cfg)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(job, frames))
    else:
        results = [job(f) for f in frames]
    return Dataset(tuple(f for group in results for f in group), ds.taxonomy)


@dataclass(frozen=True)
class RngState:
    """Replayable position of the online sampler.

    Draws are keyed by (seed, frame id, epoch) and indexed by ``counter``, so
    the result of a call never depends on what other frames or workers did.
    """

    seed: int = 0
    epoch: int = 0
    counter: int = 0


def _generator(state: RngState, frame_id: str) -> np.random.Generator:
    digest = hashlib.blake2b(f"{state.seed}\x1f{frame_id}\x1f{state.epoch}".encode(), digest_size=16).digest()
    key = np.frombuffer(digest, dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=[0, 0, state.counter, 0]))


def online_sample(
    frame: AnnotatedFrame, cfg: AugmentationConfig, rng_state: RngState
) -> tuple[AnnotatedFrame, RngState]:
    """Random flip and blur for one training sample.

    With probability ``online_flip_prob`` the frame is mirrored about an axis
    chosen uniformly; independently with probability ``online_blur_prob``
    the image is blurred with a uniformly drawn sigma. Masks are flipped but
    never blurred.
    """
    u_flip, u_axis, u_blur, u_sigma = _generator(rng_state, frame.frame_id).random(4)
    out = frame
    if u_flip < cfg.online_flip_prob:
        axis = "horizontal" if u_axis < 0.5 else "vertical"
        out = apply_affine(out, mirror(axis))
    if u_blur < cfg.online_blur_prob:
        lo, hi = cfg.online_sigma_range
        sigma = lo + (hi - lo) * u_sigma
        image = apply_blur(out.image, sigma) if out.image is not None else None
        out = replace(out, image=image, provenance=out.provenance + (blur(sigma),))
    return out, replace(rng_state, counter=rng_state.counter + 1)
