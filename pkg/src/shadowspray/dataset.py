"""Dataset generation: per-image seeds, parallel rendering, files and manifest."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import formats
from .config import DatasetConfig
from .degrade import DegradeSpec
from .scene import CalibrationPool, SceneSpec, derive_seed, render

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
AGGREGATE_ANNOTATIONS = "annotations.csv"


def image_id_for(index: int) -> str:
    return f"{index:06d}"


def plan_specs(cfg: DatasetConfig) -> list[SceneSpec]:
    """Per-image scene specs. Image ``i`` uses seed ``derive_seed(cfg.seed, i)``."""
    specs = []
    for i in range(cfg.count):
        seed = derive_seed(cfg.seed, i)
        degradation = cfg.sample_degradation(np.random.default_rng(derive_seed(seed, 2)))
        specs.append(cfg.scene_spec(seed, degradation))
    return specs


def _record(index: int, spec: SceneSpec) -> dict:
    image_id = image_id_for(index)
    return {
        "index": index,
        "image_id": image_id,
        "image": f"images/{image_id}.png",
        "instance_map": f"instances/{image_id}.png",
        "annotations": f"annotations/{image_id}.csv",
        "seed": spec.seed,
        "scene_spec": spec.to_dict(),
        "degrade_spec": spec.degradation.to_dict(),
    }


def write_dataset(out_dir, specs: list[SceneSpec], pool: CalibrationPool | None,
                  config_snapshot: dict, threads: int = 1) -> Path:
    """Render and write every image, then the aggregate annotations and the manifest.

    On failure every file written by this call is removed again.
    """
    out = Path(out_dir)
    created: list[Path] = []
    made_dirs: list[Path] = []
    try:
        for d in (out, out / "images", out / "instances", out / "annotations"):
            if not d.exists():
                d.mkdir(parents=True)
                made_dirs.append(d)
        records = [_record(i, s) for i, s in enumerate(specs)]

        def work(i):
            rec, spec = records[i], specs[i]
            bundle = render(spec, pool, rec["image_id"])
            for key, writer, payload in (
                ("image", formats.write_image, bundle.image),
                ("instance_map", formats.write_instance_map, bundle.instance_map),
                ("annotations", formats.write_annotations, bundle.annotations),
            ):
                path = out / rec[key]
                created.append(path)
                writer(path, payload)
            return bundle.annotations

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as ex:
                per_image = list(ex.map(work, range(len(specs))))
        else:
            per_image = [work(i) for i in range(len(specs))]

        agg = out / AGGREGATE_ANNOTATIONS
        created.append(agg)
        formats.write_annotations(agg, [a for annots in per_image for a in annots])

        manifest = {
            "schema_version": formats.SCHEMA_VERSION,
            "scale": specs[0].scale if specs else config_snapshot.get("scale", 0.75),
            "config": config_snapshot,
            "pool": None if pool is None else pool.to_dict(),
            "aggregate_annotations": AGGREGATE_ANNOTATIONS,
            "records": records,
        }
        path = out / MANIFEST_NAME
        created.append(path)
        formats.write_manifest(path, manifest)
        log.info("wrote %d images to %s", len(specs), out)
        return path
    except BaseException:
        for p in created:
            p.unlink(missing_ok=True)
        for d in reversed(made_dirs):
            try:
                d.rmdir()
            except OSError:
                pass
        raise


def generate(cfg: DatasetConfig, out_dir, threads: int = 1) -> Path:
    return write_dataset(out_dir, plan_specs(cfg), cfg.calibration_pool(), cfg.to_dict(), threads)


def regenerate(manifest_path, out_dir, threads: int = 1) -> Path:
    """Re-render a dataset from the specs and seeds recorded in its manifest."""
    m = formats.read_manifest(manifest_path)
    specs = [SceneSpec.from_dict(r["scene_spec"]) for r in m["records"]]
    for r, s in zip(m["records"], specs):
        if s.degradation != DegradeSpec.from_dict(r["degrade_spec"]):
            raise formats.FormatError(f"image {r['image_id']}: degrade_spec disagrees with scene_spec")
    pool = CalibrationPool(**m["pool"]) if m["pool"] is not None else None
    return write_dataset(out_dir, specs, pool, m["config"], threads)
