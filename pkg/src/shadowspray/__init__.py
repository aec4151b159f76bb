"""Synthetic shadowgraphy spray images, droplet sizing and detection scoring."""

from .baseline import ThresholdSpec, gradient_magnitude, threshold_segment
from .degrade import DefocusModel, DegradeSpec, apply_degradation, defocus_psf
from .deteval import Annotation, evaluate, match, mean_ap, mean_iou, recall_precision
from .geometry import (
    AxisAlignedBox,
    DiskShape,
    EllipseShape,
    OrientedBox,
    aabb_of_ellipse,
    equivalent_diameter,
    iou_aabb,
    iou_obb,
    obb_of_ellipse,
)
from .scene import (
    BackgroundSpec,
    CalibrationPool,
    OverlapPolicy,
    Scene,
    SceneSpec,
    rasterize,
    render,
    sample_droplet_scene,
    sample_scene,
)
from .segpost import (
    TilingSpec,
    binarize,
    connected_components,
    diameter_histogram,
    smd,
    split_stitch_segment,
    volume_pdf,
)

__version__ = "0.1.0"
