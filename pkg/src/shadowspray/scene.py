"""Random shadowgraphy scenes: sampling, anti-aliased rasterization and ground truth.

Liquid is dark on a bright background. Each shape contributes an opacity map
(coverage times depth, blurred for defocused droplets); overlapping shapes
composite darkest-wins, so ``image = background * (1 - max opacity)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from scipy import ndimage

from .baseline import ThresholdSpec, threshold_segment
from .degrade import DefocusModel, DegradeSpec, apply_degradation, defocus_psf
from .deteval import Annotation
from .geometry import DiskShape, EllipseShape, aabb_of_ellipse, obb_of_ellipse

SUPERSAMPLE = 4

CALIBRATION_DIAMETERS = (60.0, 40.0, 30.0, 25.0, 20.0, 18.0, 16.0, 14.0, 12.0, 10.0, 8.0, 6.0, 4.0, 2.0, 1.0)
CALIBRATION_OFFSETS = (
    -200.0, -175.0, -150.0, -100.0, -75.0, -50.0, -25.0,
    0.0, 25.0, 50.0, 75.0, 100.0, 125.0, 150.0, 200.0,
)


class PlacementError(RuntimeError):
    """The canvas is too crowded to place the requested shapes under the overlap policy."""

    def __init__(self, placed: int, requested: int):
        super().__init__(
            f"placed only {placed} of {requested} shapes before exhausting the retry budget"
        )
        self.placed = placed
        self.requested = requested


def derive_seed(seed: int, *keys: int) -> int:
    """Independent 64-bit seed for a sub-stream, e.g. ``derive_seed(base, image_index)``."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *[int(k) for k in keys]])
    return int(ss.generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class CalibrationPool:
    """Opaque calibration disks of known diameter imaged at several focal offsets."""

    diameters: tuple[float, ...] = CALIBRATION_DIAMETERS
    counts_per_image: tuple[int, ...] | None = None
    focal_offsets: tuple[float, ...] = CALIBRATION_OFFSETS
    images_per_offset: int = 2

    def __post_init__(self):
        object.__setattr__(self, "diameters", tuple(float(d) for d in self.diameters))
        object.__setattr__(self, "focal_offsets", tuple(float(z) for z in self.focal_offsets))
        if self.counts_per_image is None:
            counts = tuple(16 if d <= 25 else 20 for d in self.diameters)
        else:
            counts = tuple(int(c) for c in self.counts_per_image)
        object.__setattr__(self, "counts_per_image", counts)
        if any(d <= 0 for d in self.diameters):
            raise ValueError("pool diameters must be positive")
        if len(counts) != len(self.diameters):
            raise ValueError("counts_per_image must have one entry per diameter")

    @property
    def is_empty(self) -> bool:
        return not self.diameters or not self.focal_offsets or sum(self.counts_per_image) == 0

    def totals(self) -> np.ndarray:
        """Number of pool elements per diameter."""
        return np.array(self.counts_per_image) * self.images_per_offset * len(self.focal_offsets)

    def weights(self) -> np.ndarray:
        t = self.totals().astype(float)
        return t / t.sum()

    def to_dict(self) -> dict:
        return {
            "diameters": list(self.diameters),
            "counts_per_image": list(self.counts_per_image),
            "focal_offsets": list(self.focal_offsets),
            "images_per_offset": self.images_per_offset,
        }


@dataclass(frozen=True)
class BackgroundSpec:
    mode: str = "uniform"
    level: float = 1.0
    level_lo: float = 0.7
    level_hi: float = 1.0
    direction: float = 0.0
    image_path: str | None = None
    erase_existing_structures: bool = True

    def __post_init__(self):
        if self.mode not in ("uniform", "linear_gradient", "imported"):
            raise ValueError(f"unknown background mode {self.mode!r}")
        for v in (self.level, self.level_lo, self.level_hi):
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"background levels must lie in [0, 1], got {v}")
        if self.mode == "imported" and not self.image_path:
            raise ValueError("imported background needs an image_path")

    @classmethod
    def uniform(cls, level: float = 1.0) -> "BackgroundSpec":
        return cls("uniform", level=level)

    @classmethod
    def linear_gradient(cls, level_lo: float, level_hi: float, direction: float = 0.0) -> "BackgroundSpec":
        return cls("linear_gradient", level_lo=level_lo, level_hi=level_hi, direction=direction)

    @classmethod
    def imported(cls, image_path: str, erase_existing_structures: bool = True) -> "BackgroundSpec":
        return cls("imported", image_path=str(image_path),
                   erase_existing_structures=erase_existing_structures)

    def render(self, width: int, height: int) -> np.ndarray:
        if self.mode == "uniform":
            return np.full((height, width), float(self.level))
        if self.mode == "linear_gradient":
            from .degrade import ramp

            t = ramp((height, width), self.direction) + 0.5
            return self.level_lo + (self.level_hi - self.level_lo) * t
        return load_background(self.image_path, width, height, self.erase_existing_structures)

    def to_dict(self) -> dict:
        if self.mode == "uniform":
            return {"mode": "uniform", "level": self.level}
        if self.mode == "linear_gradient":
            return {"mode": "linear_gradient", "level_lo": self.level_lo,
                    "level_hi": self.level_hi, "direction": self.direction}
        return {"mode": "imported", "image_path": self.image_path,
                "erase_existing_structures": self.erase_existing_structures}

    @classmethod
    def from_dict(cls, d: dict) -> "BackgroundSpec":
        return cls(**d)


def load_background(path, width: int, height: int, erase: bool = True) -> np.ndarray:
    """Load a grayscale background, resize to the canvas and optionally erase dark blobs.

    Erased blobs are filled with the background median, which leaves bright
    "white circles" where droplets used to be.
    """
    with Image.open(path) as im:
        im = im.convert("L")
        if im.size != (width, height):
            im = im.resize((width, height), Image.BILINEAR)
        bg = np.asarray(im, dtype=float) / 255.0
    if erase:
        blobs = threshold_segment(bg, ThresholdSpec()) > 0
        blobs = ndimage.binary_dilation(blobs, iterations=1)
        bg = bg.copy()
        bg[blobs] = np.median(bg)
    return bg


@dataclass(frozen=True)
class OverlapPolicy:
    allow: bool = True
    max_pair_iou: float = 0.0

    @classmethod
    def forbid(cls, max_pair_iou: float = 0.0) -> "OverlapPolicy":
        return cls(False, float(max_pair_iou))

    def to_dict(self):
        return "allow" if self.allow else {"forbid": self.max_pair_iou}

    @classmethod
    def from_dict(cls, d) -> "OverlapPolicy":
        if d == "allow":
            return cls()
        return cls.forbid(d["forbid"])


@dataclass(frozen=True)
class SceneSpec:
    """Everything needed to sample and render one image.

    ``min_spacing`` widens the no-overlap test by that many pixels between boxes;
    ``inside`` keeps every shape's bounding box inside the canvas.
    """

    width: int = 512
    height: int = 512
    scene_kind: str = "ellipses"
    count_range: tuple[int, int] = (20, 150)
    overlap: OverlapPolicy = OverlapPolicy()
    semi_axis_range: tuple[float, float] = (4.0, 24.0)
    gray_range: tuple[float, float] = (0.0, 0.0)
    background: BackgroundSpec = BackgroundSpec()
    degradation: DegradeSpec = DegradeSpec()
    seed: int = 0
    scale: float = 0.75
    min_spacing: float = 0.0
    inside: bool = False
    max_attempts: int = 2000
    defocus: DefocusModel = DefocusModel()

    def __post_init__(self):
        lo, hi = self.count_range
        if lo < 1 or hi < lo:
            raise ValueError(f"invalid count_range {self.count_range}")
        if self.scene_kind not in ("ellipses", "droplets"):
            raise ValueError(f"unknown scene_kind {self.scene_kind!r}")
        if not (0 < self.semi_axis_range[0] <= self.semi_axis_range[1]):
            raise ValueError(f"invalid semi_axis_range {self.semi_axis_range}")
        if not (0.0 <= self.gray_range[0] <= self.gray_range[1] <= 1.0):
            raise ValueError(f"invalid gray_range {self.gray_range}")
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("canvas must be at least 1x1")
        object.__setattr__(self, "count_range", (int(lo), int(hi)))

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "scene_kind": self.scene_kind,
            "count_range": list(self.count_range),
            "overlap": self.overlap.to_dict(),
            "semi_axis_range": list(self.semi_axis_range),
            "gray_range": list(self.gray_range),
            "background": self.background.to_dict(),
            "degradation": self.degradation.to_dict(),
            "seed": self.seed,
            "scale": self.scale,
            "min_spacing": self.min_spacing,
            "inside": self.inside,
            "max_attempts": self.max_attempts,
            "defocus": self.defocus.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        d["count_range"] = tuple(d["count_range"])
        d["semi_axis_range"] = tuple(d["semi_axis_range"])
        d["gray_range"] = tuple(d["gray_range"])
        d["overlap"] = OverlapPolicy.from_dict(d["overlap"])
        d["background"] = BackgroundSpec.from_dict(d["background"])
        d["degradation"] = DegradeSpec.from_dict(d["degradation"])
        d["defocus"] = DefocusModel(**d["defocus"])
        return cls(**d)


@dataclass(frozen=True)
class Scene:
    shapes: tuple = ()
    spec: SceneSpec = field(default_factory=SceneSpec)

    def ellipse(self, shape) -> EllipseShape:
        """Pixel-space geometry of a shape (disks become circles via the scale)."""
        if isinstance(shape, DiskShape):
            return shape.to_ellipse(self.spec.scale)
        return shape


@dataclass
class RasterBundle:
    image: np.ndarray
    semantic_mask: np.ndarray
    instance_map: np.ndarray
    annotations: list[Annotation]


def _scene_rng(spec: SceneSpec) -> np.random.Generator:
    return np.random.default_rng(derive_seed(spec.seed, 0))


def _place(spec: SceneSpec, rng, n: int, draw_shape) -> list:
    """Rejection-sample positions for ``n`` shapes drawn by ``draw_shape(rng)``.

    A rejected candidate keeps its size and orientation and only moves, so crowding
    does not bias the size distribution towards small shapes.
    """
    pad = 0.5 * spec.min_spacing
    boxes = np.zeros((0, 4))
    shapes = []
    for _ in range(n):
        shape, half_w, half_h = draw_shape(rng)
        for _attempt in range(spec.max_attempts):
            if spec.inside:
                if 2 * half_w > spec.width or 2 * half_h > spec.height:
                    shape, half_w, half_h = draw_shape(rng)
                    continue
                cx = rng.uniform(half_w, spec.width - half_w)
                cy = rng.uniform(half_h, spec.height - half_h)
            else:
                cx = rng.uniform(0, spec.width)
                cy = rng.uniform(0, spec.height)
            box = np.array([cx - half_w - pad, cy - half_h - pad, cx + half_w + pad, cy + half_h + pad])
            if not spec.overlap.allow and len(boxes):
                iw = np.minimum(boxes[:, 2], box[2]) - np.maximum(boxes[:, 0], box[0])
                ih = np.minimum(boxes[:, 3], box[3]) - np.maximum(boxes[:, 1], box[1])
                inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
                a = (box[2] - box[0]) * (box[3] - box[1])
                b = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
                if np.any(inter / (a + b - inter) > spec.overlap.max_pair_iou):
                    continue
            shapes.append(shape(cx, cy))
            boxes = np.vstack([boxes, box])
            break
        else:
            raise PlacementError(len(shapes), n)
    return shapes


def sample_scene(spec: SceneSpec) -> Scene:
    """Sample a random ellipse field; deterministic in ``spec`` (including its seed)."""
    if spec.scene_kind != "ellipses":
        raise ValueError("sample_scene draws ellipse scenes; use sample_droplet_scene for droplets")
    rng = _scene_rng(spec)
    n = int(rng.integers(spec.count_range[0], spec.count_range[1] + 1))
    lo, hi = spec.semi_axis_range
    glo, ghi = spec.gray_range

    def draw(rng):
        a, b = sorted(rng.uniform(lo, hi, 2), reverse=True)
        theta = rng.uniform(0.0, math.pi)
        gray = rng.uniform(glo, ghi) if ghi > glo else glo
        probe = aabb_of_ellipse(EllipseShape(0.0, 0.0, a, b, theta))
        return (
            lambda cx, cy: EllipseShape(cx, cy, a, b, theta, gray),
            probe.x_max,
            probe.y_max,
        )

    return Scene(tuple(_place(spec, rng, n, draw)), spec)


def sample_droplet_scene(spec: SceneSpec, pool: CalibrationPool) -> Scene:
    """Sample droplets whose (diameter, focal offset) follow the calibration pool."""
    if spec.scene_kind != "droplets":
        raise ValueError("sample_droplet_scene requires scene_kind='droplets'")
    if pool.is_empty:
        raise ValueError("calibration pool is empty")
    rng = _scene_rng(spec)
    n = int(rng.integers(spec.count_range[0], spec.count_range[1] + 1))
    weights = pool.weights()
    diameters = np.array(pool.diameters)
    offsets = np.array(pool.focal_offsets)

    def draw(rng):
        d = float(diameters[rng.choice(len(diameters), p=weights)])
        z = float(offsets[rng.integers(len(offsets))])
        r = 0.5 * d / spec.scale
        return (lambda cx, cy: DiskShape(cx, cy, d, z)), r, r

    return Scene(tuple(_place(spec, rng, n, draw)), spec)


def sample(spec: SceneSpec, pool: CalibrationPool | None = None) -> Scene:
    if spec.scene_kind == "droplets":
        return sample_droplet_scene(spec, pool if pool is not None else CalibrationPool())
    return sample_scene(spec)


def _coverage(e: EllipseShape, x0: int, y0: int, w: int, h: int) -> np.ndarray:
    """Fraction of each pixel in the window covered by the ellipse (4x4 supersampling)."""
    s = SUPERSAMPLE
    xs = x0 + (np.arange(w * s) + 0.5) / s
    ys = y0 + (np.arange(h * s) + 0.5) / s
    inside = e.contains(xs[None, :], ys[:, None])
    return inside.reshape(h, s, w, s).mean(axis=(1, 3))


def _shape_render_params(scene: Scene, shape) -> tuple[float, float]:
    """(depth, blur sigma in px) for one shape."""
    if isinstance(shape, DiskShape):
        e = scene.ellipse(shape)
        psf = defocus_psf(2 * e.semi_major, shape.focal_offset, scene.spec.defocus)
        return psf.attenuation, psf.sigma
    return 1.0 - shape.gray_level, 0.0


def _annotation(scene: Scene, shape, image_id: str) -> Annotation:
    e = scene.ellipse(shape)
    if isinstance(shape, DiskShape):
        return Annotation("droplet", aabb_of_ellipse(e), image_id=image_id)
    return Annotation("ellipse", obb_of_ellipse(e), image_id=image_id)


def rasterize(scene: Scene, image_id: str = "") -> RasterBundle:
    """Render a scene to image, semantic mask, instance map and annotations.

    Instance ids follow the order of on-canvas shapes (1-based). A pixel belongs
    to the shape with the largest sharp coverage, provided that coverage is at
    least 50%; ties go to the lower id.
    """
    spec = scene.spec
    H, W = spec.height, spec.width
    background = spec.background.render(W, H)
    opacity = np.zeros((H, W))
    best = np.zeros((H, W))
    instance_map = np.zeros((H, W), dtype=np.uint16)
    annotations = []

    next_id = 1
    for shape in scene.shapes:
        e = scene.ellipse(shape)
        depth, sigma = _shape_render_params(scene, shape)
        box = aabb_of_ellipse(e)
        pad = int(math.ceil(4 * sigma)) + 1 if sigma > 0 else 0
        x0 = int(math.floor(box.x_min)) - pad
        y0 = int(math.floor(box.y_min)) - pad
        x1 = int(math.ceil(box.x_max)) + pad
        y1 = int(math.ceil(box.y_max)) + pad
        cx0, cy0, cx1, cy1 = max(x0, 0), max(y0, 0), min(x1, W), min(y1, H)
        if cx1 <= cx0 or cy1 <= cy0:
            continue
        cov = _coverage(e, x0, y0, x1 - x0, y1 - y0)
        on_canvas = cov[cy0 - y0:cy1 - y0, cx0 - x0:cx1 - x0]
        if not on_canvas.any():
            continue
        sid = next_id
        next_id += 1
        if sid > np.iinfo(np.uint16).max:
            raise ValueError("more than 65535 instances in one image")

        win = (slice(cy0, cy1), slice(cx0, cx1))
        take = (on_canvas >= 0.5) & (on_canvas > best[win])
        best[win] = np.where(take, on_canvas, best[win])
        instance_map[win] = np.where(take, sid, instance_map[win])

        blurred = ndimage.gaussian_filter(cov, sigma, mode="constant") if sigma > 0 else cov
        dark = depth * blurred[cy0 - y0:cy1 - y0, cx0 - x0:cx1 - x0]
        np.maximum(opacity[win], dark, out=opacity[win])
        annotations.append(_annotation(scene, shape, image_id))

    image = np.clip(background * (1.0 - opacity), 0.0, 1.0)
    return RasterBundle(image, instance_map > 0, instance_map, annotations)


def render(spec: SceneSpec, pool: CalibrationPool | None = None, image_id: str = "") -> RasterBundle:
    """Sample, rasterize and degrade one image. The degradation stream is derived from the seed."""
    scene = sample(spec, pool)
    bundle = rasterize(scene, image_id)
    return apply_degradation(bundle, spec.degradation, derive_seed(spec.seed, 1))
