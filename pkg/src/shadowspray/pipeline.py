"""Batch steps behind the CLI: baseline segmentation and dataset-level evaluation."""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import formats
from .baseline import ThresholdSpec, threshold_segment
from .deteval import ImageIdMismatch, evaluate, group_by_image
from .segpost import (
    TilingSpec,
    binarize,
    connected_components,
    spray_stats,
    split_stitch_segment,
)

log = logging.getLogger(__name__)


def baseline_segmenter(spec: ThresholdSpec, tiling: TilingSpec | None = None):
    if tiling is None:
        return lambda image: threshold_segment(image, spec)
    return lambda image: split_stitch_segment(image, lambda t: threshold_segment(t, spec), tiling)


def segment_baseline(manifest_path, out_dir, spec: ThresholdSpec = ThresholdSpec(),
                     tiling: TilingSpec | None = None, threads: int = 1) -> list[Path]:
    """Write one baseline segmentation map (8-bit PNG, ``<image_id>.png``) per image."""
    m = formats.read_manifest(manifest_path)
    root = Path(manifest_path).parent
    records = m["records"]
    if not records:
        log.warning("manifest %s lists no images; nothing to segment", manifest_path)
        return []
    missing = [r["image"] for r in records if not (root / r["image"]).is_file()]
    if missing:
        raise FileNotFoundError(f"missing images: {', '.join(missing)}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    segment = baseline_segmenter(spec, tiling)

    def work(rec):
        seg = segment(formats.read_image(root / rec["image"]))
        path = out / f"{rec['image_id']}.png"
        formats.write_segmentation(path, seg)
        return path

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(work, records))
    return [work(r) for r in records]


def _records_csv(path, rows):
    fields = ["image_id", "instance_id", "area_px", "diameter_px", "diameter_um",
              "centroid_x", "centroid_y", "touches_border"]
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for image_id, rec in rows:
            w.writerow({"image_id": image_id, **rec.to_dict()})


def evaluate_segmentation(manifest_path, predictions_dir, out_dir=None, threshold: float = 0.5,
                          bin_width: float = 1.0, exclude_border: bool = True) -> dict:
    """Droplet statistics of predicted maps against the ground-truth instance maps."""
    m = formats.read_manifest(manifest_path)
    root = Path(manifest_path).parent
    scale = m["scale"]
    pred_dir = Path(predictions_dir)
    pred_rows, gt_rows = [], []
    for rec in m["records"]:
        pred_path = pred_dir / f"{rec['image_id']}.png"
        if not pred_path.is_file():
            raise FileNotFoundError(f"no prediction map for image {rec['image_id']} ({pred_path})")
        pred = formats.read_segmentation(pred_path)
        gt_mask = formats.read_instance_map(root / rec["instance_map"]) > 0
        if pred.shape != gt_mask.shape:
            raise ValueError(
                f"image {rec['image_id']}: prediction shape {pred.shape} != image shape {gt_mask.shape}"
            )
        pred_rows += [(rec["image_id"], r) for r in connected_components(binarize(pred, threshold), scale)]
        gt_rows += [(rec["image_id"], r) for r in connected_components(gt_mask, scale)]

    pred_stats = spray_stats([r for _, r in pred_rows], bin_width, exclude_border)
    gt_stats = spray_stats([r for _, r in gt_rows], bin_width, exclude_border)
    deviation = {
        "count_ratio": pred_stats.count / gt_stats.count if gt_stats.count else None,
        "smd_deviation_pct": (
            100.0 * (pred_stats.smd_um - gt_stats.smd_um) / gt_stats.smd_um
            if pred_stats.smd_um is not None and gt_stats.smd_um is not None else None
        ),
    }
    result = {
        "scale_um_per_px": scale,
        "threshold": threshold,
        "bin_width_um": bin_width,
        "exclude_border": exclude_border,
        "prediction": pred_stats.to_dict(),
        "ground_truth": gt_stats.to_dict(),
        "deviation": deviation,
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _records_csv(out / "droplets_pred.csv", pred_rows)
        _records_csv(out / "droplets_gt.csv", gt_rows)
        (out / "seg_stats.json").write_text(formats.dump_json(result), encoding="utf-8")
        for name, stats in (("pred", pred_stats), ("gt", gt_stats)):
            _histogram_csv(out / f"histogram_{name}.csv", stats.diameter_histogram, "count")
            if stats.volume_pdf is not None:
                _histogram_csv(out / f"volume_pdf_{name}.csv", stats.volume_pdf, "density")
    return result


def _histogram_csv(path, hist, column):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["lo_um", "hi_um", column])
        for lo, hi, v in zip(hist.edges[:-1], hist.edges[1:], hist.values):
            w.writerow([repr(float(lo)), repr(float(hi)), repr(v.item() if hasattr(v, "item") else v)])


def load_annotation_source(path) -> tuple[dict, bool]:
    """Annotations grouped by image id, plus whether the image id set is closed.

    A directory of per-image CSVs or a manifest defines its image set exactly; an
    aggregate CSV only lists images that have at least one object.
    """
    path = Path(path)
    if path.is_dir():
        out = {}
        for f in sorted(path.glob("*.csv")):
            annots = formats.read_annotations(f)
            bad = {a.image_id for a in annots} - {f.stem}
            if bad:
                raise formats.FormatError(f"{f}: rows for other images {sorted(bad)}")
            out[f.stem] = annots
        return out, True
    if path.suffix == ".json":
        m = formats.read_manifest(path)
        root = path.parent
        return {r["image_id"]: formats.read_annotations(root / r["annotations"]) for r in m["records"]}, True
    return group_by_image(formats.read_annotations(path)), False


def evaluate_detections(gt_path, pred_path, iou_threshold: float = 0.2, class_aware: bool = True):
    gt, gt_closed = load_annotation_source(gt_path)
    pred, pred_closed = load_annotation_source(pred_path)
    if gt_closed and not pred_closed:
        extra = sorted(set(pred) - set(gt))
        if extra:
            raise ImageIdMismatch(f"predictions for images without ground truth: {extra}")
        pred = {k: pred.get(k, []) for k in gt}
    elif pred_closed and not gt_closed:
        extra = sorted(set(gt) - set(pred))
        if extra:
            raise ImageIdMismatch(f"ground truth for images without prediction files: {extra}")
        gt = {k: gt.get(k, []) for k in pred}
    elif not gt_closed and not pred_closed:
        ids = set(gt) | set(pred)
        gt = {k: gt.get(k, []) for k in ids}
        pred = {k: pred.get(k, []) for k in ids}
    return evaluate(gt, pred, iou_threshold, class_aware)
