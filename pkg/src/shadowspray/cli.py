"""Command line interface: ``shadowspray {generate,segment-baseline,eval-seg,eval-det}``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from . import formats
from .baseline import ThresholdSpec
from .config import ConfigError, load_config
from .dataset import generate, regenerate
from .pipeline import evaluate_detections, evaluate_segmentation, segment_baseline
from .segpost import TilingSpec

log = logging.getLogger("shadowspray")


def _tiling(args) -> TilingSpec | None:
    if args.tile_size is None:
        return None
    return TilingSpec(args.tile_size, args.tile_overlap)


def cmd_generate(args) -> int:
    if args.from_manifest:
        path = regenerate(args.from_manifest, args.out, args.threads)
    else:
        if not args.config:
            raise ConfigError("generate needs --config or --from-manifest")
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = dataclasses.replace(cfg, seed=args.seed)
        path = generate(cfg, args.out, args.threads)
    print(path)
    return 0


def cmd_segment_baseline(args) -> int:
    out = args.out or Path(args.manifest).parent / "pred_baseline"
    paths = segment_baseline(args.manifest, out, ThresholdSpec(args.fraction), _tiling(args), args.threads)
    print(f"wrote {len(paths)} segmentation maps to {out}")
    return 0


def cmd_eval_seg(args) -> int:
    res = evaluate_segmentation(
        args.manifest,
        args.predictions,
        args.out,
        threshold=args.threshold,
        bin_width=args.bin_width,
        exclude_border=not args.include_border,
    )
    p, g, dev = res["prediction"], res["ground_truth"], res["deviation"]

    def f(v, spec=".2f"):
        return "n/a" if v is None else format(v, spec)

    print(f"{'':<14}{'count':>8}{'SMD [um]':>10}")
    print(f"{'prediction':<14}{p['count']:>8}{f(p['smd_um']):>10}")
    print(f"{'ground truth':<14}{g['count']:>8}{f(g['smd_um']):>10}")
    print(f"count ratio {f(dev['count_ratio'], '.3f')}, SMD deviation {f(dev['smd_deviation_pct'])}%")
    return 0


def cmd_eval_det(args) -> int:
    report = evaluate_detections(args.gt, args.pred, args.iou_threshold, not args.class_agnostic)
    table = report.summary_table(args.label)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval_report.json").write_text(formats.dump_json(report.to_dict()), encoding="utf-8")
        (out / "summary.txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shadowspray", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="render a synthetic dataset")
    g.add_argument("--config", help="YAML dataset config")
    g.add_argument("--from-manifest", help="re-render the dataset described by a manifest")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int, help="override the config seed")
    g.add_argument("--threads", type=int, default=1)
    g.set_defaults(func=cmd_generate)

    s = sub.add_parser("segment-baseline", help="threshold-at-fraction-of-median segmentation")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", help="output directory (default: <dataset>/pred_baseline)")
    s.add_argument("--fraction", type=float, default=0.8, help="fraction of the median (default 0.8)")
    s.add_argument("--tile-size", type=int, help="threshold each tile separately")
    s.add_argument("--tile-overlap", type=int, default=32)
    s.add_argument("--threads", type=int, default=1)
    s.set_defaults(func=cmd_segment_baseline)

    e = sub.add_parser("eval-seg", help="droplet statistics of segmentation maps vs ground truth")
    e.add_argument("--manifest", required=True)
    e.add_argument("--predictions", required=True, help="directory of <image_id>.png maps")
    e.add_argument("--out", help="directory for records, histograms and stats")
    e.add_argument("--threshold", type=float, default=0.5)
    e.add_argument("--bin-width", type=float, default=1.0, help="histogram bin width in um")
    e.add_argument("--include-border", action="store_true",
                   help="keep components touching the image border")
    e.set_defaults(func=cmd_eval_seg)

    d = sub.add_parser("eval-det", help="Recall / Precision / mAP / mean IoU of detections")
    d.add_argument("--gt", required=True, help="manifest, annotation directory or aggregate CSV")
    d.add_argument("--pred", required=True, help="annotation directory or aggregate CSV")
    d.add_argument("--iou-threshold", type=float, default=0.2)
    d.add_argument("--class-agnostic", action="store_true")
    d.add_argument("--label", default="detector", help="row label in the summary table")
    d.add_argument("--out", help="directory for eval_report.json and summary.txt")
    d.set_defaults(func=cmd_eval_det)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, formats.FormatError, ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
