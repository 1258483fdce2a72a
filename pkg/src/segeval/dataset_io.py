"""Reading and writing datasets, predictions and split assignments.

Annotations use the COCO layout (``images``, ``annotations``, ``categories``).
Per-frame extras (frame id, split tag, augmentation provenance) live under
the ``segeval`` key of each image record. Masks are written as uncompressed
RLE with ``"order": "row-major"``; on input an RLE without ``order`` is taken
as COCO column-major, a list of coordinate lists as polygons, and a missing
segmentation as ``masks/<frame_id>_<k>.png``.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
from PIL import Image

from ._fs import dumps_canonical, safe_name, write_bytes_atomic, write_text_atomic
from .masks import MaskError, RleMask, polygon_to_mask, rle_encode
from .model import (
    DEFAULT_TAXONOMY,
    AnnotatedFrame,
    Dataset,
    InstanceMask,
    TransformSpec,
    canonicalize,
    parse_taxonomy,
    taxonomy_to_json,
    validate_dataset,
)

FORMAT_VERSION = "segeval/1"
SUPPORTED_VERSIONS = (FORMAT_VERSION,)
VENDOR_KEY = "segeval"


class DatasetIOError(Exception):
    """Missing files, malformed JSON, unknown references or invalid data."""


@dataclass(frozen=True)
class DatasetManifest:
    root: Path
    annotation_file: str = "annotations.json"
    image_dir: str = "images"
    taxonomy_file: Optional[str] = "taxonomy.json"
    format_version: str = FORMAT_VERSION

    @property
    def annotation_path(self) -> Path:
        return self.root / self.annotation_file

    @property
    def image_path(self) -> Path:
        return self.root / self.image_dir

    @property
    def taxonomy_path(self) -> Optional[Path]:
        return self.root / self.taxonomy_file if self.taxonomy_file else None

    def to_json(self) -> dict:
        return {
            "format_version": self.format_version,
            "annotations": self.annotation_file,
            "images": self.image_dir,
            "taxonomy": self.taxonomy_file,
        }

    @classmethod
    def read(cls, path: Path | str) -> "DatasetManifest":
        path = Path(path)
        d = _read_json(path)
        if not isinstance(d, dict):
            raise DatasetIOError(f"{path}: manifest must be a JSON object")
        version = d.get("format_version", FORMAT_VERSION)
        if version not in SUPPORTED_VERSIONS:
            raise DatasetIOError(f"{path}: unsupported format version {version!r}")
        root = (path.parent / d.get("root", ".")).resolve()
        return cls(
            root=root,
            annotation_file=d.get("annotations", "annotations.json"),
            image_dir=d.get("images", "images"),
            taxonomy_file=d.get("taxonomy"),
            format_version=version,
        )

    def write(self, name: str = "manifest.json") -> Path:
        path = self.root / name
        write_text_atomic(path, dumps_canonical(self.to_json()))
        return path


def _read_json(path: Path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise DatasetIOError(f"missing file: {path}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise DatasetIOError(f"{path}: malformed JSON ({exc})") from None


def encode_segmentation(mask: RleMask) -> dict:
    return {"size": [mask.height, mask.width], "counts": list(mask.counts), "order": "row-major"}


def decode_segmentation(seg, width: int, height: int, png_path: Optional[Path] = None) -> RleMask:
    """Turn any supported segmentation encoding into a canonical RLE."""
    if seg is None:
        if png_path is None:
            raise DatasetIOError("annotation has no segmentation")
        return rle_encode(read_mask_png(png_path))
    if isinstance(seg, dict):
        if isinstance(seg.get("counts"), str):
            raise DatasetIOError("compressed COCO RLE strings are not supported")
        h, w = seg.get("size", [height, width])
        counts = seg["counts"]
        order = seg.get("order", "column-major")
        if order == "row-major":
            return RleMask(int(w), int(h), tuple(counts))
        if order == "column-major":
            # a column-major RLE of (h, w) is a row-major RLE of the transpose
            transposed = RleMask(int(h), int(w), tuple(counts))
            return rle_encode(transposed.to_bitmap().T)
        raise DatasetIOError(f"unknown RLE order {order!r}")
    if isinstance(seg, list):
        polys = [seg] if seg and not isinstance(seg[0], (list, tuple)) else seg
        out = np.zeros((height, width), dtype=bool)
        for poly in polys:
            pts = np.asarray(poly, dtype=np.float64).reshape(-1, 2)
            out |= polygon_to_mask(pts, width, height)
        return rle_encode(out)
    raise DatasetIOError(f"unsupported segmentation type {type(seg).__name__}")


def read_mask_png(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"))
    except FileNotFoundError:
        raise DatasetIOError(f"missing file: {path}") from None
    return arr != 0


def write_mask_png(path: Path, bitmap: np.ndarray) -> None:
    write_bytes_atomic(path, _png_bytes(np.where(bitmap, 255, 0).astype(np.uint8)))


def _png_bytes(array: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(array).save(buf, format="PNG", compress_level=1)
    return buf.getvalue()


def read_image(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB")).copy()
    except FileNotFoundError:
        raise DatasetIOError(f"missing image file: {path}") from None


def write_image(path: Path, image: np.ndarray) -> None:
    write_bytes_atomic(path, _png_bytes(np.asarray(image, dtype=np.uint8)))


def dataset_to_coco(ds: Dataset) -> dict:
    ds = canonicalize(ds)
    images, annotations = [], []
    ann_id = 1
    for image_id, frame in enumerate(ds.frames, start=1):
        vendor: dict = {"frame_id": frame.frame_id}
        if frame.split is not None:
            vendor["split"] = frame.split
        if frame.provenance:
            vendor["provenance"] = [t.to_json() for t in frame.provenance]
        images.append(
            {
                "id": image_id,
                "file_name": frame.image_ref,
                "width": frame.width,
                "height": frame.height,
                VENDOR_KEY: vendor,
            }
        )
        for inst in frame.instances:
            annotations.append(
                {
                    "id": ann_id,
                    "image_id": image_id,
                    "category_id": inst.category,
                    "segmentation": encode_segmentation(inst.mask),
                    "bbox": list(inst.bbox.as_tuple()),
                    "area": inst.area,
                    "iscrowd": 0,
                }
            )
            ann_id += 1
    return {
        "info": {"format_version": FORMAT_VERSION},
        "images": images,
        "annotations": annotations,
        "categories": taxonomy_to_json(ds.taxonomy),
    }


def dataset_from_coco(doc: Mapping, mask_dir: Optional[Path] = None, source: str = "<annotations>") -> Dataset:
    try:
        cats = doc.get("categories")
        taxonomy = parse_taxonomy(cats) if cats else DEFAULT_TAXONOMY
        by_image: dict[int, list] = {}
        for ann in doc.get("annotations", []):
            by_image.setdefault(ann["image_id"], []).append(ann)
        frames = []
        for img in doc["images"]:
            vendor = img.get(VENDOR_KEY, {})
            frame_id = str(vendor.get("frame_id", Path(img["file_name"]).stem))
            w, h = int(img["width"]), int(img["height"])
            instances = []
            for k, ann in enumerate(by_image.pop(img["id"], [])):
                if "score" in ann:
                    raise DatasetIOError(f"{source}: ground-truth annotation {ann.get('id')} carries a score")
                png = mask_dir / f"{safe_name(frame_id)}_{k}.png" if mask_dir is not None else None
                rle = decode_segmentation(ann.get("segmentation"), w, h, png)
                instances.append(InstanceMask(int(ann["category_id"]), rle))
            frames.append(
                AnnotatedFrame(
                    frame_id=frame_id,
                    width=w,
                    height=h,
                    image_ref=img["file_name"],
                    instances=tuple(instances),
                    split=vendor.get("split"),
                    provenance=tuple(TransformSpec.from_json(t) for t in vendor.get("provenance", [])),
                )
            )
        if by_image:
            raise DatasetIOError(f"{source}: annotations reference unknown image ids {sorted(by_image)[:5]}")
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetIOError(f"{source}: malformed annotation data ({exc!r})") from None
    return Dataset(tuple(frames), taxonomy)


def read_annotations(path: Path | str, validate: bool = True) -> Dataset:
    """Load a COCO-layout annotation file on its own, without image checks."""
    path = Path(path)
    doc = _read_json(path)
    ds = dataset_from_coco(doc, mask_dir=path.parent / "masks", source=str(path))
    if validate:
        _raise_on_violations(ds, path)
    return ds


def _raise_on_violations(ds: Dataset, source) -> None:
    violations = validate_dataset(ds)
    if violations:
        listing = "; ".join(str(v) for v in violations[:20])
        more = f" (+{len(violations) - 20} more)" if len(violations) > 20 else ""
        raise DatasetIOError(f"{source}: dataset failed validation: {listing}{more}")


def load_dataset(manifest: DatasetManifest | Path | str, check_images: bool = True, load_images: bool = False) -> Dataset:
    """Materialize and validate the dataset a manifest points to.

    ``manifest`` may also be a path to a manifest JSON file.
    """
    if not isinstance(manifest, DatasetManifest):
        manifest = DatasetManifest.read(manifest)
    doc = _read_json(manifest.annotation_path)
    if not isinstance(doc, dict) or "images" not in doc:
        raise DatasetIOError(f"{manifest.annotation_path}: not a COCO-layout annotation file")
    if manifest.taxonomy_path is not None:
        doc = dict(doc)
        doc["categories"] = _read_json(manifest.taxonomy_path)
    ds = dataset_from_coco(doc, mask_dir=manifest.root / "masks", source=str(manifest.annotation_path))
    if check_images or load_images:
        frames = []
        for f in ds.frames:
            path = manifest.image_path / f.image_ref
            if not path.is_file():
                raise DatasetIOError(f"missing image file: {path}")
            if load_images:
                image = read_image(path)
                if image.shape[:2] != (f.height, f.width):
                    raise DatasetIOError(f"{path}: image is {image.shape[1]}x{image.shape[0]}, expected {f.width}x{f.height}")
                f = AnnotatedFrame(f.frame_id, f.width, f.height, f.image_ref, f.instances, f.split, f.provenance, image)
            frames.append(f)
        ds = Dataset(tuple(frames), ds.taxonomy)
    _raise_on_violations(ds, manifest.annotation_path)
    return ds


def save_dataset(ds: Dataset, manifest: DatasetManifest | Path | str) -> DatasetManifest:
    """Write the dataset canonically; frames with pixel data get their images written too.

    A bare path is taken as the output root with default file names. Equal
    datasets produce byte-identical files.
    """
    if not isinstance(manifest, DatasetManifest):
        manifest = DatasetManifest(root=Path(manifest))
    violations = validate_dataset(ds)
    if violations:
        raise DatasetIOError(f"refusing to save an invalid dataset: {violations[0]}")
    try:
        write_text_atomic(manifest.annotation_path, dumps_canonical(dataset_to_coco(ds)))
        if manifest.taxonomy_path is not None:
            write_text_atomic(manifest.taxonomy_path, dumps_canonical(taxonomy_to_json(ds.taxonomy)))
        for f in sorted(ds.frames, key=lambda f: f.frame_id):
            if f.image is not None:
                write_image(manifest.image_path / f.image_ref, f.image)
        manifest.write()
    except OSError as exc:
        raise DatasetIOError(f"cannot write to {manifest.root}: {exc}") from None
    return manifest


def load_predictions(path: Path | str, ds: Dataset) -> dict[str, list[InstanceMask]]:
    """Read ``[{frame_id, category_id, score, segmentation}, ...]``.

    Returns scored instances keyed by frame id, in file order.
    """
    path = Path(path)
    doc = _read_json(path)
    if not isinstance(doc, list):
        raise DatasetIOError(f"{path}: predictions must be a JSON array")
    sizes = {f.frame_id: (f.width, f.height) for f in ds.frames}
    out: dict[str, list[InstanceMask]] = {}
    for n, rec in enumerate(doc):
        if not isinstance(rec, dict):
            raise DatasetIOError(f"{path}: entry {n} is not an object")
        fid = rec.get("frame_id")
        if fid not in sizes:
            raise DatasetIOError(f"{path}: entry {n} references unknown frame_id {fid!r}")
        if "score" not in rec or rec["score"] is None:
            raise DatasetIOError(f"{path}: entry {n} (frame {fid}) is missing a score")
        score = rec["score"]
        if isinstance(score, bool) or not isinstance(score, (int, float)) or not 0.0 <= score <= 1.0:
            raise DatasetIOError(f"{path}: entry {n} (frame {fid}) has score {score!r} outside [0, 1]")
        w, h = sizes[fid]
        try:
            rle = decode_segmentation(rec.get("segmentation"), w, h)
        except (MaskError, KeyError, TypeError, ValueError) as exc:
            raise DatasetIOError(f"{path}: entry {n} (frame {fid}) has a bad segmentation ({exc})") from None
        if (rle.width, rle.height) != (w, h):
            raise DatasetIOError(f"{path}: entry {n} mask is {rle.width}x{rle.height}, frame {fid} is {w}x{h}")
        if rle.area < 1:
            raise DatasetIOError(f"{path}: entry {n} (frame {fid}) has an empty mask")
        out.setdefault(fid, []).append(InstanceMask(int(rec["category_id"]), rle, float(score)))
    return out


def predictions_to_json(preds: Mapping[str, Sequence[InstanceMask]]) -> list[dict]:
    out = []
    for fid in sorted(preds):
        for inst in preds[fid]:
            out.append(
                {
                    "frame_id": fid,
                    "category_id": inst.category,
                    "score": inst.score,
                    "segmentation": encode_segmentation(inst.mask),
                }
            )
    return out


def save_predictions(preds: Mapping[str, Sequence[InstanceMask]], path: Path | str) -> None:
    write_text_atomic(path, dumps_canonical(predictions_to_json(preds)))


def split_csv(ds: Dataset) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["frame_id", "split"])
    for f in sorted(ds.frames, key=lambda f: f.frame_id):
        writer.writerow([f.frame_id, f.split or ""])
    return buf.getvalue()


def read_split_csv(path: Path | str) -> dict[str, str]:
    with open(path, newline="", encoding="utf-8") as fh:
        return {row["frame_id"]: row["split"] for row in csv.DictReader(fh)}

