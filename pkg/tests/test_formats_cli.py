import filecmp
import logging
import math
from pathlib import Path

import numpy as np
import pytest
from scipy import ndimage

from shadowspray import formats
from shadowspray.cli import main
from shadowspray.config import ConfigError, parse_config
from shadowspray.deteval import Annotation
from shadowspray.geometry import AxisAlignedBox, OrientedBox
from shadowspray.scene import CALIBRATION_DIAMETERS

UNIFORM = """\
seed: 7
count: {count}
scene:
  width: 192
  height: 160
  count_range: [10, 20]
  overlap: {{forbid: 0.0}}
  semi_axis_range: [5, 14]
"""

GRADIENT = UNIFORM + """\
background:
  mode: linear_gradient
  level_lo: 0.55
  level_hi: 1.0
degradation:
  blur_sigma: [1.5, 2.5]
"""

DEGRADED = UNIFORM + """\
degradation:
  gaussian_noise_sigma: [0.0, 0.05]
  blur_sigma: [0.0, 1.5]
  contrast_scale: [0.6, 1.0]
  gradient_amplitude: [0.0, 0.3]
  gradient_direction: [0.0, 6.28]
  elastic_alpha: [0.0, 20.0]
  elastic_sigma: 5.0
"""

DROPLETS = """\
seed: {seed}
count: {count}
scene:
  kind: droplets
  width: 384
  height: 384
  count_range: [12, 18]
  overlap: {{forbid: 0.0}}
  min_spacing: 3
  inside: true
pool:
  counts_per_image: [20, 20, 20, 20, 20, 20, 20, 20, 20, 20, 20, 20, 20, 20, 20]
  focal_offsets: [0.0]
"""


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


def make_dataset(tmp_path, text, name="ds", threads=1):
    cfg = write(tmp_path, f"{name}.yaml", text)
    out = tmp_path / name
    assert main(["generate", "--config", str(cfg), "--out", str(out), "--threads", str(threads)]) == 0
    return out / "manifest.json"


def tree_files(root):
    return sorted(p.relative_to(root) for p in Path(root).rglob("*") if p.is_file())


def assert_same_tree(a, b):
    files = tree_files(a)
    assert files == tree_files(b)
    for f in files:
        assert filecmp.cmp(Path(a) / f, Path(b) / f, shallow=False), f


# file formats


def test_image_roundtrip(tmp_path):
    img = np.random.default_rng(0).random((20, 30))
    formats.write_image(tmp_path / "a.png", img)
    back = formats.read_image(tmp_path / "a.png")
    assert np.abs(back - img).max() <= 0.5 / 255 + 1e-12
    formats.write_image(tmp_path / "b.png", back)
    np.testing.assert_array_equal(formats.read_image(tmp_path / "b.png"), back)


def test_instance_map_roundtrip_16bit(tmp_path):
    m = np.random.default_rng(0).integers(0, 65536, (17, 23)).astype(np.uint16)
    formats.write_instance_map(tmp_path / "m.png", m)
    back = formats.read_instance_map(tmp_path / "m.png")
    assert back.dtype == np.uint16
    np.testing.assert_array_equal(back, m)
    with pytest.raises(formats.FormatError):
        formats.write_instance_map(tmp_path / "x.png", np.array([[70000]]))


def test_annotation_roundtrip_lossless(tmp_path):
    rng = np.random.default_rng(1)
    annots = [Annotation("ellipse", OrientedBox(*rng.uniform(0, 500, 2), *rng.uniform(1, 50, 2),
                                               rng.uniform(0, math.pi)), None, "000001") for _ in range(20)]
    annots.append(Annotation("droplet", AxisAlignedBox(1.0, 2.0, 3.5, 4.25), 0.125, "000001"))
    formats.write_annotations(tmp_path / "a.csv", annots)
    back = formats.read_annotations(tmp_path / "a.csv")
    assert back[:-1] == annots[:-1]
    assert back[-1].box == annots[-1].box.to_obb()
    assert back[-1].confidence == 0.125
    assert formats.dump_annotations(back) == formats.dump_annotations(annots)


@pytest.mark.parametrize("text,line", [
    ("image_id,class,cx,cy,w,h,angle_rad,confidence\na,ellipse,1,1,2,2,0,\nb,ellipse,1,1,x,2,0,\n", 3),
    ("image_id,class,cx,cy,w,h,angle_rad,confidence\na,ellipse,1,1,2,2,3.5,\n", 2),
    ("image_id,class,cx,cy,w,h,angle_rad,confidence\na,ellipse,1,1,2,2,0\n", 2),
    ("image_id,class,cx,cy,w,h,angle_rad,confidence\na,comet,1,1,2,2,0,\n", 2),
])
def test_annotation_errors_have_line_numbers(text, line):
    with pytest.raises(formats.FormatError, match=rf"<string>:{line}:"):
        formats.parse_annotations(text)


def test_annotation_bad_header():
    with pytest.raises(formats.FormatError, match="header"):
        formats.parse_annotations("id,cls\n")


def test_manifest_json_is_canonical(tmp_path):
    formats.write_manifest(tmp_path / "m.json", {"schema_version": 1, "b": 1, "a": [1.5, None]})
    text = (tmp_path / "m.json").read_text()
    assert text.index('"a"') < text.index('"b"')
    assert formats.read_manifest(tmp_path / "m.json")["a"] == [1.5, None]


def test_manifest_schema_checked(tmp_path):
    (tmp_path / "m.json").write_text('{"schema_version": 99}')
    with pytest.raises(formats.FormatError, match="schema"):
        formats.read_manifest(tmp_path / "m.json")


# configuration


@pytest.mark.parametrize("text,line,fragment", [
    ("seed: 1\nscene:\n  width: 100\n  colour: red\n", 4, "unknown key"),
    ("seed: 1\ncount: ten\n", 2, "expected an integer"),
    ("seed: 1\ndegradation:\n  blur_sigma: [2, 1]\n", 3, "number or"),
    ("seed: 1\ndegradation:\n  contrast_scale: 0\n", 3, "contrast_scale"),
    ("seed: 1\nscene:\n  overlap: never\n", 3, "forbid"),
    ("seed: 1\nscene: [1, 2\n", 3, "invalid YAML"),
    ("seed: 1\nscene:\n  kind: droplets\npool:\n  diameters: []\n  counts_per_image: []\n", 5, "empty"),
])
def test_config_errors_are_line_precise(text, line, fragment):
    with pytest.raises(ConfigError, match=rf"<config>:{line}:.*{fragment}"):
        parse_config(text)


def test_config_defaults():
    cfg = parse_config("seed: 3\n")
    assert cfg.count == 10 and cfg.scale == 0.75
    spec = cfg.scene_spec(5, cfg.sample_degradation(np.random.default_rng(0)))
    assert spec.degradation.is_identity


def test_missing_config_file(tmp_path, capsys):
    assert main(["generate", "--config", str(tmp_path / "nope.yaml"), "--out", str(tmp_path / "o")]) == 1
    assert "cannot read config" in capsys.readouterr().err


def test_config_error_exit_status(tmp_path, capsys):
    cfg = write(tmp_path, "bad.yaml", "seed: 1\ncount: -3\n")
    assert main(["generate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    assert "bad.yaml:2" in capsys.readouterr().err


# generate


def test_generate_count_and_files(tmp_path):
    manifest = make_dataset(tmp_path, UNIFORM.format(count=10))
    m = formats.validate_manifest(manifest)
    assert len(m["records"]) == 10
    assert len({r["seed"] for r in m["records"]}) == 10
    root = manifest.parent
    for rec in m["records"]:
        inst = formats.read_instance_map(root / rec["instance_map"])
        annots = formats.read_annotations(root / rec["annotations"])
        assert inst.max() == len(annots)
        assert set(np.unique(inst)) == set(range(len(annots) + 1))
        assert all(a.image_id == rec["image_id"] and a.confidence is None for a in annots)
    agg = formats.read_annotations(root / "annotations.csv")
    assert len(agg) == sum(len(formats.read_annotations(root / r["annotations"])) for r in m["records"])


def test_regenerate_is_byte_identical(tmp_path):
    manifest = make_dataset(tmp_path, DEGRADED.format(count=6), threads=1)
    again = make_dataset(tmp_path, DEGRADED.format(count=6), name="again", threads=3)
    assert_same_tree(manifest.parent, again.parent)
    out = tmp_path / "from_manifest"
    assert main(["generate", "--from-manifest", str(manifest), "--out", str(out), "--threads", "4"]) == 0
    assert_same_tree(manifest.parent, out)


def test_seed_override_changes_output(tmp_path):
    cfg = write(tmp_path, "c.yaml", UNIFORM.format(count=2))
    assert main(["generate", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    assert main(["generate", "--config", str(cfg), "--out", str(tmp_path / "b"), "--seed", "8"]) == 0
    assert not filecmp.cmp(tmp_path / "a/images/000000.png", tmp_path / "b/images/000000.png", shallow=False)


def test_droplet_diameters_from_pool_only(tmp_path):
    manifest = make_dataset(tmp_path, DROPLETS.format(seed=1, count=4))
    root = manifest.parent
    m = formats.read_manifest(manifest)
    allowed = np.array(CALIBRATION_DIAMETERS)
    for rec in m["records"]:
        for a in formats.read_annotations(root / rec["annotations"]):
            assert a.cls == "droplet"
            d_um = a.box.width * m["scale"]
            assert np.min(np.abs(allowed - d_um)) < 1e-9


def test_failed_generate_leaves_no_manifest(tmp_path):
    cfg = write(tmp_path, "c.yaml", UNIFORM.format(count=3).replace("count_range: [10, 20]",
                                                                   "count_range: [400, 400]")
                + "  max_attempts: 20\n")
    out = tmp_path / "o"
    assert main(["generate", "--config", str(cfg), "--out", str(out)]) == 1
    assert not (out / "manifest.json").exists()
    assert not list(out.rglob("*.png")) if out.exists() else True


# segment-baseline and eval-seg


def agreement(manifest, pred_dir):
    m = formats.read_manifest(manifest)
    scores = []
    for rec in m["records"]:
        gt = formats.read_instance_map(manifest.parent / rec["instance_map"]) > 0
        pred = formats.read_segmentation(Path(pred_dir) / f"{rec['image_id']}.png") >= 0.5
        scores.append(np.mean(gt == pred))
    return np.array(scores)


def test_segment_baseline_uniform_vs_gradient(tmp_path):
    uniform = make_dataset(tmp_path, UNIFORM.format(count=5), "uniform")
    gradient = make_dataset(tmp_path, GRADIENT.format(count=5), "gradient")
    for manifest in (uniform, gradient):
        assert main(["segment-baseline", "--manifest", str(manifest)]) == 0
    a_uniform = agreement(uniform, uniform.parent / "pred_baseline")
    a_gradient = agreement(gradient, gradient.parent / "pred_baseline")
    assert np.all(a_uniform >= 0.99)
    assert a_gradient.mean() < a_uniform.mean()


def test_segment_baseline_tiled(tmp_path):
    manifest = make_dataset(tmp_path, UNIFORM.format(count=2))
    out = tmp_path / "tiled"
    assert main(["segment-baseline", "--manifest", str(manifest), "--out", str(out),
                 "--tile-size", "64", "--tile-overlap", "16", "--threads", "2"]) == 0
    assert np.all(agreement(manifest, out) >= 0.98)


def test_segment_baseline_empty_manifest(tmp_path, caplog):
    manifest = make_dataset(tmp_path, UNIFORM.format(count=0))
    with caplog.at_level(logging.WARNING):
        assert main(["segment-baseline", "--manifest", str(manifest)]) == 0
    assert "nothing to segment" in caplog.text


def test_segment_baseline_missing_image(tmp_path, capsys):
    manifest = make_dataset(tmp_path, UNIFORM.format(count=2))
    (manifest.parent / "images/000001.png").unlink()
    assert main(["segment-baseline", "--manifest", str(manifest)]) == 1
    assert "000001" in capsys.readouterr().err


def gt_predictions(manifest, out, dilate=0):
    out.mkdir()
    for rec in formats.read_manifest(manifest)["records"]:
        mask = formats.read_instance_map(manifest.parent / rec["instance_map"]) > 0
        if dilate:
            mask = ndimage.binary_dilation(mask, iterations=dilate)
        formats.write_segmentation(out / f"{rec['image_id']}.png", mask.astype(float))
    return out


def test_eval_seg_self_comparison(tmp_path, capsys):
    manifest = make_dataset(tmp_path, DROPLETS.format(seed=2, count=3))
    preds = gt_predictions(manifest, tmp_path / "gt_pred")
    out = tmp_path / "report"
    assert main(["eval-seg", "--manifest", str(manifest), "--predictions", str(preds), "--out", str(out)]) == 0
    stats = formats.json.loads((out / "seg_stats.json").read_text())
    assert stats["deviation"]["smd_deviation_pct"] == 0.0
    assert stats["deviation"]["count_ratio"] == 1.0
    for name in ("droplets_pred.csv", "droplets_gt.csv", "histogram_pred.csv", "volume_pdf_gt.csv"):
        assert (out / name).is_file()
    assert "SMD deviation 0.00%" in capsys.readouterr().out


def test_eval_seg_dilation_is_positive(tmp_path):
    manifest = make_dataset(tmp_path, DROPLETS.format(seed=3, count=3))
    preds = gt_predictions(manifest, tmp_path / "dilated", dilate=1)
    out = tmp_path / "report"
    assert main(["eval-seg", "--manifest", str(manifest), "--predictions", str(preds), "--out", str(out)]) == 0
    stats = formats.json.loads((out / "seg_stats.json").read_text())
    assert stats["deviation"]["smd_deviation_pct"] > 0
    assert stats["prediction"]["smd_um"] > stats["ground_truth"]["smd_um"]


def test_eval_seg_shape_mismatch(tmp_path, capsys):
    manifest = make_dataset(tmp_path, UNIFORM.format(count=1))
    preds = tmp_path / "p"
    preds.mkdir()
    formats.write_segmentation(preds / "000000.png", np.zeros((10, 10)))
    assert main(["eval-seg", "--manifest", str(manifest), "--predictions", str(preds)]) == 1
    assert "shape" in capsys.readouterr().err


def test_eval_seg_calibration_pool_smd(tmp_path):
    manifest = make_dataset(tmp_path, DROPLETS.format(seed=11, count=40))
    preds = gt_predictions(manifest, tmp_path / "gt_pred")
    out = tmp_path / "report"
    assert main(["eval-seg", "--manifest", str(manifest), "--predictions", str(preds), "--out", str(out)]) == 0
    stats = formats.json.loads((out / "seg_stats.json").read_text())
    assert stats["ground_truth"]["smd_um"] == pytest.approx(42.0, abs=1.0)


# eval-det


def perturbed(src, dst, drop=0.0, jitter=0.0, seed=0):
    rng = np.random.default_rng(seed)
    annots = formats.read_annotations(src)
    keep = [a for a in annots if rng.random() >= drop]
    out = []
    for a in keep:
        b = a.box
        dx, dy = rng.uniform(-jitter, jitter, 2) if jitter else (0.0, 0.0)
        out.append(Annotation(a.cls, OrientedBox(b.center_x + dx, b.center_y + dy, b.width, b.height, b.angle),
                              0.9, a.image_id))
    formats.write_annotations(dst, out)
    return dst


def eval_det(args, tmp_path):
    out = tmp_path / "det"
    assert main(["eval-det", *args, "--out", str(out)]) == 0
    return formats.json.loads((out / "eval_report.json").read_text())["aggregate"]


def test_eval_det_self(tmp_path):
    manifest = make_dataset(tmp_path, DEGRADED.format(count=4))
    rep = eval_det(["--gt", str(manifest), "--pred", str(manifest.parent / "annotations")], tmp_path)
    assert (rep["recall"], rep["precision"], rep["map"], rep["mean_iou"]) == (1.0, 1.0, 1.0, 1.0)
    summary = (tmp_path / "det/summary.txt").read_text()
    assert "mAP" in summary and "mean IoU" in summary


def test_eval_det_deleted_boxes(tmp_path):
    manifest = make_dataset(tmp_path, UNIFORM.format(count=30))
    agg = manifest.parent / "annotations.csv"
    pred = perturbed(agg, tmp_path / "pred.csv", drop=0.11, seed=4)
    rep = eval_det(["--gt", str(manifest), "--pred", str(pred)], tmp_path)
    n = rep["tp"] + rep["fn"]
    sigma = math.sqrt(0.11 * 0.89 / n)
    assert abs(rep["recall"] - 0.89) <= 3 * sigma
    assert rep["precision"] == 1.0


def test_eval_det_strict_threshold(tmp_path):
    manifest = make_dataset(tmp_path, UNIFORM.format(count=2))
    pred = perturbed(manifest.parent / "annotations.csv", tmp_path / "pred.csv", jitter=0.5, seed=1)
    rep = eval_det(["--gt", str(manifest), "--pred", str(pred), "--iou-threshold", "1.0"], tmp_path)
    assert rep["recall"] == 0.0


def test_eval_det_id_mismatch(tmp_path, capsys):
    manifest = make_dataset(tmp_path, UNIFORM.format(count=2))
    pred = tmp_path / "pred.csv"
    formats.write_annotations(pred, [Annotation("ellipse", AxisAlignedBox(0, 0, 4, 4), 1.0, "999999")])
    assert main(["eval-det", "--gt", str(manifest), "--pred", str(pred)]) == 1
    assert "999999" in capsys.readouterr().err


def test_eval_det_class_agnostic_flag(tmp_path):
    manifest = make_dataset(tmp_path, UNIFORM.format(count=2))
    annots = formats.read_annotations(manifest.parent / "annotations.csv")
    relabelled = [Annotation("bag", a.box, 1.0, a.image_id) for a in annots]
    formats.write_annotations(tmp_path / "pred.csv", relabelled)
    aware = eval_det(["--gt", str(manifest), "--pred", str(tmp_path / "pred.csv")], tmp_path)
    agnostic = eval_det(["--gt", str(manifest), "--pred", str(tmp_path / "pred.csv"), "--class-agnostic"], tmp_path)
    assert aware["recall"] == 0.0 and agnostic["recall"] == 1.0


def test_cli_requires_subcommand():
    with pytest.raises(SystemExit):
        main([])
