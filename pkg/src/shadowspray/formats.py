"""On-disk formats: PNG rasters, annotation CSV files and the dataset manifest."""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path

import numpy as np
from PIL import Image

from .deteval import Annotation
from .geometry import OrientedBox

SCHEMA_VERSION = 1
ANNOTATION_HEADER = ("image_id", "class", "cx", "cy", "w", "h", "angle_rad", "confidence")


class FormatError(ValueError):
    pass


def write_image(path, image: np.ndarray) -> None:
    """8-bit grayscale PNG from a float image in [0, 1]."""
    arr = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode != "L":
            im = im.convert("L")
        return np.asarray(im, dtype=float) / 255.0


def write_instance_map(path, instance_map: np.ndarray) -> None:
    """16-bit grayscale PNG holding instance ids (0 = background)."""
    arr = np.asarray(instance_map)
    if arr.size and (arr.min() < 0 or arr.max() > 65535):
        raise FormatError("instance ids must fit in 16 bits")
    Image.fromarray(arr.astype(np.uint16)).save(path, format="PNG")


def read_instance_map(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im).astype(np.uint16)


write_segmentation = write_image
read_segmentation = read_image


def _fmt(v: float) -> str:
    return repr(float(v))


def annotation_row(a: Annotation) -> list[str]:
    b = a.box.to_obb()
    return [
        a.image_id,
        a.cls,
        _fmt(b.center_x),
        _fmt(b.center_y),
        _fmt(b.width),
        _fmt(b.height),
        _fmt(b.angle),
        "" if a.confidence is None else _fmt(a.confidence),
    ]


def dump_annotations(annots) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ANNOTATION_HEADER)
    for a in annots:
        w.writerow(annotation_row(a))
    return buf.getvalue()


def write_annotations(path, annots) -> None:
    Path(path).write_text(dump_annotations(annots), encoding="utf-8")


def parse_annotations(text: str, source: str = "<string>") -> list[Annotation]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != ANNOTATION_HEADER:
        raise FormatError(f"{source}: expected header {','.join(ANNOTATION_HEADER)}")
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(ANNOTATION_HEADER):
            raise FormatError(f"{source}:{lineno}: expected {len(ANNOTATION_HEADER)} fields, got {len(row)}")
        image_id, cls, *nums, conf = row
        try:
            cx, cy, w, h, angle = (float(v) for v in nums)
            confidence = float(conf) if conf != "" else None
        except ValueError as exc:
            raise FormatError(f"{source}:{lineno}: {exc}") from None
        if not all(math.isfinite(v) for v in (cx, cy, w, h, angle)):
            raise FormatError(f"{source}:{lineno}: non-finite numeric field")
        if not 0.0 <= angle < math.pi:
            raise FormatError(f"{source}:{lineno}: angle {angle} outside [0, pi)")
        try:
            out.append(Annotation(cls, OrientedBox(cx, cy, w, h, angle), confidence, image_id))
        except ValueError as exc:
            raise FormatError(f"{source}:{lineno}: {exc}") from None
    return out


def read_annotations(path) -> list[Annotation]:
    return parse_annotations(Path(path).read_text(encoding="utf-8"), str(path))


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_manifest(path, manifest: dict) -> None:
    Path(path).write_text(dump_json(manifest), encoding="utf-8")


def read_manifest(path) -> dict:
    m = json.loads(Path(path).read_text(encoding="utf-8"))
    if m.get("schema_version") != SCHEMA_VERSION:
        raise FormatError(f"{path}: unsupported manifest schema {m.get('schema_version')!r}")
    return m


def validate_manifest(path) -> dict:
    """Read a manifest and check that referenced files exist and seeds are unique."""
    m = read_manifest(path)
    root = Path(path).parent
    problems = []
    seeds = set()
    for rec in m["records"]:
        for key in ("image", "instance_map", "annotations"):
            if not (root / rec[key]).is_file():
                problems.append(f"missing {key} file {rec[key]}")
        if rec["seed"] in seeds:
            problems.append(f"duplicate seed {rec['seed']} at image {rec['image_id']}")
        seeds.add(rec["seed"])
    if problems:
        raise FormatError(f"{path}: " + "; ".join(problems))
    return m
