"""Seeded image degradation applied consistently to an image and its ground truth.

The photometric steps (blur, contrast, luminosity gradient, noise) only touch the
image. Elastic deformation warps image, semantic mask and instance map with one
shared displacement field, after which annotation boxes are recomputed from the
warped instance pixels.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import ndimage
from scipy.spatial import ConvexHull, QhullError

from .deteval import Annotation
from .geometry import AxisAlignedBox, OrientedBox


@dataclass(frozen=True)
class DegradeSpec:
    """Degradation parameters. The pipeline order is fixed:
    elastic -> blur -> contrast -> gradient -> noise.

    ``luminosity_gradient`` is ``(amplitude, direction_rad)``; ``elastic`` is
    ``(alpha_px, sigma_px)`` or ``None``.
    """

    gaussian_noise_sigma: float = 0.0
    blur_sigma: float = 0.0
    contrast_scale: float = 1.0
    luminosity_gradient: tuple[float, float] = (0.0, 0.0)
    elastic: tuple[float, float] | None = None

    def __post_init__(self):
        if self.gaussian_noise_sigma < 0 or self.blur_sigma < 0:
            raise ValueError("noise and blur sigmas must be >= 0")
        if not 0.0 < self.contrast_scale <= 1.0:
            raise ValueError(f"contrast_scale must lie in (0, 1], got {self.contrast_scale}")
        if self.elastic is not None:
            alpha, sigma = self.elastic
            if alpha < 0 or sigma < 0:
                raise ValueError("elastic alpha and sigma must be >= 0")
        object.__setattr__(self, "luminosity_gradient", tuple(float(v) for v in self.luminosity_gradient))
        if self.elastic is not None:
            object.__setattr__(self, "elastic", tuple(float(v) for v in self.elastic))

    @property
    def has_elastic(self) -> bool:
        return self.elastic is not None and self.elastic[0] > 0

    @property
    def is_identity(self) -> bool:
        return (
            not self.has_elastic
            and self.blur_sigma == 0
            and self.contrast_scale == 1.0
            and self.luminosity_gradient[0] == 0
            and self.gaussian_noise_sigma == 0
        )

    def to_dict(self) -> dict:
        return {
            "gaussian_noise_sigma": self.gaussian_noise_sigma,
            "blur_sigma": self.blur_sigma,
            "contrast_scale": self.contrast_scale,
            "luminosity_gradient": list(self.luminosity_gradient),
            "elastic": None if self.elastic is None else list(self.elastic),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DegradeSpec":
        d = dict(d)
        if d.get("elastic") is not None:
            d["elastic"] = tuple(d["elastic"])
        if "luminosity_gradient" in d:
            d["luminosity_gradient"] = tuple(d["luminosity_gradient"])
        return cls(**d)


@dataclass(frozen=True)
class DefocusModel:
    """Parametric defocus: Gaussian PSF with ``sigma = sigma0 + k|z|`` and depth
    attenuated by ``max(0, 1 - c_contrast|z|)``.

    Defaults are illustrative, not measured calibration constants.
    """

    sigma0: float = 0.0
    k: float = 0.02
    c_contrast: float = 0.002
    z_limit: float = 200.0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class DefocusPSF(NamedTuple):
    sigma: float
    attenuation: float
    kernel: np.ndarray
    footprint_px: float


def gaussian_kernel(sigma: float, truncate: float = 4.0) -> np.ndarray:
    if sigma <= 0:
        return np.ones((1, 1))
    r = int(truncate * sigma + 0.5)
    x = np.arange(-r, r + 1, dtype=float)
    g = np.exp(-0.5 * (x / sigma) ** 2)
    g /= g.sum()
    return np.outer(g, g)


def defocus_psf(diameter_px: float, z: float, model: DefocusModel = DefocusModel()) -> DefocusPSF:
    if abs(z) > model.z_limit:
        raise ValueError(f"focal offset {z} um outside calibration range +-{model.z_limit}")
    sigma = model.sigma0 + model.k * abs(z)
    attenuation = max(0.0, 1.0 - model.c_contrast * abs(z))
    kernel = gaussian_kernel(sigma)
    return DefocusPSF(sigma, attenuation, kernel, diameter_px + kernel.shape[0] - 1)


def contrast_and_gradient(image: np.ndarray, contrast_scale: float = 1.0,
                          gradient: tuple[float, float] = (0.0, 0.0)) -> np.ndarray:
    """Scale contrast around the image mean, then add a linear luminosity ramp.

    The ramp adds ``amplitude * t`` where ``t`` is the pixel-center projection on
    the direction, rescaled to ``[-1/2, 1/2]``. Output is clamped to ``[0, 1]``.
    """
    out = np.asarray(image, dtype=float)
    if contrast_scale != 1.0:
        m = out.mean()
        out = m + contrast_scale * (out - m)
    amplitude, direction = gradient
    if amplitude != 0:
        out = out + amplitude * ramp(out.shape, direction)
    return np.clip(out, 0.0, 1.0)


def ramp(shape: tuple[int, int], direction: float) -> np.ndarray:
    """Linear ramp over pixel centers, spanning exactly [-1/2, 1/2] along ``direction``."""
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    proj = xx * math.cos(direction) + yy * math.sin(direction)
    lo, hi = proj.min(), proj.max()
    if hi - lo < 1e-12:
        return np.zeros(shape)
    return (proj - lo) / (hi - lo) - 0.5


@dataclass(frozen=True)
class DisplacementField:
    dx: np.ndarray
    dy: np.ndarray

    @classmethod
    def random(cls, shape: tuple[int, int], alpha: float, sigma: float,
               rng: np.random.Generator) -> "DisplacementField":
        dx = ndimage.gaussian_filter(rng.uniform(-1, 1, shape), sigma, mode="constant") * alpha
        dy = ndimage.gaussian_filter(rng.uniform(-1, 1, shape), sigma, mode="constant") * alpha
        return cls(dx, dy)

    def warp(self, arr: np.ndarray, order: int) -> np.ndarray:
        h, w = arr.shape
        yy, xx = np.mgrid[0:h, 0:w].astype(float)
        coords = np.array([yy + self.dy, xx + self.dx])
        return ndimage.map_coordinates(arr, coords, order=order, mode="nearest")


def min_area_rect(points: np.ndarray) -> OrientedBox:
    """Minimum-area enclosing rectangle of a 2D point set (rotating calipers on the hull)."""
    pts = np.unique(np.asarray(points, dtype=float), axis=0)
    try:
        hull = pts[ConvexHull(pts).vertices]
    except (QhullError, ValueError):
        hull = pts
    best = None
    n = len(hull)
    for i in range(n):
        ex, ey = hull[(i + 1) % n] - hull[i]
        if ex == 0 and ey == 0:
            continue
        theta = math.atan2(ey, ex)
        c, s = math.cos(theta), math.sin(theta)
        u = hull[:, 0] * c + hull[:, 1] * s
        v = -hull[:, 0] * s + hull[:, 1] * c
        area = (u.max() - u.min()) * (v.max() - v.min())
        if best is None or area < best[0] - 1e-9:
            best = (area, theta, u.min(), u.max(), v.min(), v.max())
    _, theta, u0, u1, v0, v1 = best
    c, s = math.cos(theta), math.sin(theta)
    uc, vc = 0.5 * (u0 + u1), 0.5 * (v0 + v1)
    return OrientedBox(uc * c - vc * s, uc * s + vc * c, u1 - u0, v1 - v0, theta)


def boxes_from_instances(instance_map: np.ndarray, classes: dict[int, str],
                         oriented: dict[int, bool], image_id: str = "") -> list[Annotation]:
    """Tight boxes per instance id, in ascending id order."""
    out = []
    slices = ndimage.find_objects(instance_map)
    for idx, sl in enumerate(slices, start=1):
        if sl is None:
            continue
        rows, cols = np.nonzero(instance_map[sl] == idx)
        rows = rows + sl[0].start
        cols = cols + sl[1].start
        if oriented.get(idx, False):
            corners = np.concatenate([
                np.stack([cols + dx, rows + dy], axis=1) for dx in (0, 1) for dy in (0, 1)
            ])
            box = min_area_rect(corners)
        else:
            box = AxisAlignedBox(cols.min(), rows.min(), cols.max() + 1.0, rows.max() + 1.0)
        out.append(Annotation(classes[idx], box, image_id=image_id))
    return out


def apply_degradation(bundle, spec: DegradeSpec, seed: int):
    """Run the degradation pipeline on a raster bundle and return a new bundle."""
    if spec.is_identity:
        return bundle
    rng = np.random.default_rng(seed)
    image = bundle.image
    instance_map = bundle.instance_map
    annotations = bundle.annotations

    if spec.has_elastic:
        alpha, sigma = spec.elastic
        field = DisplacementField.random(image.shape, alpha, sigma, rng)
        image = field.warp(image, order=1)
        warped = field.warp(instance_map, order=0)
        old_ids = [i for i in np.unique(warped) if i != 0]
        relabel = np.zeros(int(instance_map.max()) + 1, dtype=instance_map.dtype)
        relabel[old_ids] = np.arange(1, len(old_ids) + 1)
        instance_map = relabel[warped]
        classes = {new: annotations[old - 1].cls for new, old in enumerate(old_ids, start=1)}
        oriented = {
            new: isinstance(annotations[old - 1].box, OrientedBox)
            for new, old in enumerate(old_ids, start=1)
        }
        image_id = annotations[0].image_id if annotations else ""
        annotations = boxes_from_instances(instance_map, classes, oriented, image_id)

    if spec.blur_sigma > 0:
        image = ndimage.gaussian_filter(image, spec.blur_sigma, mode="nearest")
    image = contrast_and_gradient(image, spec.contrast_scale, spec.luminosity_gradient)
    if spec.gaussian_noise_sigma > 0:
        image = image + rng.normal(0.0, spec.gaussian_noise_sigma, image.shape)
    image = np.clip(image, 0.0, 1.0)

    return dataclasses.replace(
        bundle,
        image=image,
        instance_map=instance_map,
        semantic_mask=instance_map > 0,
        annotations=list(annotations),
    )
