"""Classical threshold and gradient segmentation used as a reference method."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class ThresholdSpec:
    """Dark-on-light threshold at ``fraction_of_median * median(image)``."""

    fraction_of_median: float = 0.8
    polarity: str = "dark-on-light"

    def __post_init__(self):
        if not 0.0 < self.fraction_of_median < 1.0:
            raise ValueError(f"fraction_of_median must lie in (0, 1), got {self.fraction_of_median}")
        if self.polarity != "dark-on-light":
            raise ValueError(f"unsupported polarity {self.polarity!r}")


def threshold_segment(image: np.ndarray, spec: ThresholdSpec = ThresholdSpec()) -> np.ndarray:
    """Binary segmentation map (float 0/1): foreground where pixel < fraction * median.

    The median is taken over the whole array, so a luminosity gradient across the
    image shifts the effective threshold relative to the local background.
    """
    img = np.asarray(image, dtype=float)
    level = spec.fraction_of_median * np.median(img)
    return (img < level).astype(float)


def gradient_magnitude(image: np.ndarray) -> np.ndarray:
    """3x3 Sobel magnitude, scaled so the maximum is 1 (all zeros for flat input)."""
    img = np.asarray(image, dtype=float)
    gx = ndimage.sobel(img, axis=1, mode="nearest")
    gy = ndimage.sobel(img, axis=0, mode="nearest")
    mag = np.hypot(gx, gy)
    peak = mag.max()
    if peak <= 0:
        return np.zeros_like(mag)
    return mag / peak
