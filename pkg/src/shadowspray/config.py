"""YAML dataset configuration with line-precise validation errors.

Degradation parameters accept either a scalar or a ``[lo, hi]`` range; ranges are
sampled once per image and the drawn values are stored in the manifest.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .degrade import DefocusModel, DegradeSpec
from .scene import BackgroundSpec, CalibrationPool, OverlapPolicy, SceneSpec


class ConfigError(ValueError):
    pass


def _collect_marks(node, path, marks):
    marks[path] = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        for knode, vnode in node.value:
            marks[path + (knode.value,)] = knode.start_mark.line + 1
            _collect_marks(vnode, path + (knode.value,), marks)
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            _collect_marks(v, path + (i,), marks)


def load_yaml_with_lines(text: str, source: str):
    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = f":{mark.line + 1}" if mark is not None else ""
        raise ConfigError(f"{source}{line}: invalid YAML: {getattr(exc, 'problem', exc)}") from None
    marks: dict[tuple, int] = {}
    if root is None:
        return {}, marks
    _collect_marks(root, (), marks)
    data = yaml.safe_load(text)
    if not isinstance(data, dict):
        raise ConfigError(f"{source}:1: top level must be a mapping")
    return data, marks


# section -> {key: kind}; kinds: int, number, bool, str, range, pair, list, overlap
SCHEMA = {
    (): {"seed": "int", "count": "int", "scale": "number", "scene": "section",
         "background": "section", "degradation": "section", "defocus": "section", "pool": "section"},
    ("scene",): {"kind": "str", "width": "int", "height": "int", "count_range": "pair",
                 "overlap": "overlap", "semi_axis_range": "pair", "gray_range": "pair",
                 "min_spacing": "number", "inside": "bool", "max_attempts": "int"},
    ("background",): {"mode": "str", "level": "number", "level_lo": "number", "level_hi": "number",
                      "direction": "number", "image_path": "str", "erase_existing_structures": "bool"},
    ("degradation",): {"gaussian_noise_sigma": "range", "blur_sigma": "range", "contrast_scale": "range",
                       "gradient_amplitude": "range", "gradient_direction": "range",
                       "elastic_alpha": "range", "elastic_sigma": "range"},
    ("defocus",): {"sigma0": "number", "k": "number", "c_contrast": "number", "z_limit": "number"},
    ("pool",): {"diameters": "list", "counts_per_image": "list", "focal_offsets": "list",
                "images_per_offset": "int"},
}


def _is_num(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def _check(kind, v):
    if kind == "section":
        return isinstance(v, dict)
    if kind == "int":
        return isinstance(v, int) and not isinstance(v, bool)
    if kind == "number":
        return _is_num(v)
    if kind == "bool":
        return isinstance(v, bool)
    if kind == "str":
        return isinstance(v, str)
    if kind == "pair":
        return isinstance(v, list) and len(v) == 2 and all(_is_num(x) for x in v)
    if kind == "range":
        return _is_num(v) or (isinstance(v, list) and len(v) == 2 and all(_is_num(x) for x in v)
                              and v[0] <= v[1])
    if kind == "list":
        return isinstance(v, list) and all(_is_num(x) for x in v)
    if kind == "overlap":
        return v == "allow" or (isinstance(v, dict) and set(v) == {"forbid"} and _is_num(v["forbid"]))
    raise AssertionError(kind)


KIND_TEXT = {
    "section": "a mapping", "int": "an integer", "number": "a number", "bool": "true/false",
    "str": "a string", "pair": "a two-element numeric list", "range": "a number or [lo, hi] list",
    "list": "a list of numbers", "overlap": "'allow' or {forbid: max_pair_iou}",
}


class _Endpoint:
    """Stand-in generator that returns one end of every range (for validation)."""

    def __init__(self, which: int):
        self.which = which

    def uniform(self, lo, hi):
        return hi if self.which else lo


@dataclass
class DatasetConfig:
    seed: int = 0
    count: int = 10
    scale: float = 0.75
    scene: dict = field(default_factory=dict)
    background: dict = field(default_factory=dict)
    degradation: dict = field(default_factory=dict)
    defocus: dict = field(default_factory=dict)
    pool: dict | None = None

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "count": self.count,
            "scale": self.scale,
            "scene": self.scene,
            "background": self.background,
            "degradation": self.degradation,
            "defocus": self.defocus,
            "pool": self.pool,
        }

    @classmethod
    def from_mapping(cls, data: dict, marks: dict | None = None, source: str = "<config>") -> "DatasetConfig":
        marks = marks or {}

        def fail(path, msg):
            line = marks.get(path)
            where = f"{source}:{line}" if line else source
            raise ConfigError(f"{where}: {'.'.join(map(str, path)) or '<root>'}: {msg}")

        for section, keys in SCHEMA.items():
            node = data
            for part in section:
                node = node.get(part) if isinstance(node, dict) else None
            if node is None:
                continue
            for key, value in node.items():
                path = section + (key,)
                if key not in keys:
                    fail(path, f"unknown key (allowed: {', '.join(sorted(keys))})")
                if not _check(keys[key], value):
                    fail(path, f"expected {KIND_TEXT[keys[key]]}, got {value!r}")

        cfg = cls(
            seed=data.get("seed", 0),
            count=data.get("count", 10),
            scale=float(data.get("scale", 0.75)),
            scene=data.get("scene", {}),
            background=data.get("background", {"mode": "uniform", "level": 1.0}),
            degradation=data.get("degradation", {}),
            defocus=data.get("defocus", {}),
            pool=data.get("pool"),
        )
        if cfg.count < 0:
            fail(("count",), "must be >= 0")
        # build one spec eagerly so semantic errors surface with a line number
        for section, build in (
            (("background",), cfg.background_spec),
            (("defocus",), lambda: DefocusModel(**cfg.defocus)),
            (("pool",), cfg.calibration_pool),
            (("degradation",), lambda: cfg.sample_degradation(_Endpoint(0))),
            (("degradation",), lambda: cfg.sample_degradation(_Endpoint(1))),
            (("scene",), lambda: cfg.scene_spec(cfg.seed, DegradeSpec())),
        ):
            try:
                build()
            except (ValueError, TypeError) as exc:
                fail(section, str(exc))
        return cfg

    @property
    def scene_kind(self) -> str:
        return self.scene.get("kind", "ellipses")

    def background_spec(self) -> BackgroundSpec:
        return BackgroundSpec.from_dict(self.background)

    def calibration_pool(self) -> CalibrationPool | None:
        if self.scene_kind != "droplets":
            return None
        pool = CalibrationPool(**(self.pool or {}))
        if pool.is_empty:
            raise ValueError("calibration pool is empty")
        return pool

    def sample_degradation(self, rng: np.random.Generator) -> DegradeSpec:
        """Draw one image's degradation; keys are visited in a fixed order."""
        d = self.degradation

        def draw(key, default):
            v = d.get(key, default)
            if isinstance(v, list):
                return float(rng.uniform(v[0], v[1])) if v[1] > v[0] else float(v[0])
            return float(v)

        noise = draw("gaussian_noise_sigma", 0.0)
        blur = draw("blur_sigma", 0.0)
        contrast = draw("contrast_scale", 1.0)
        amp = draw("gradient_amplitude", 0.0)
        direction = draw("gradient_direction", 0.0)
        alpha = draw("elastic_alpha", 0.0)
        sigma = draw("elastic_sigma", 6.0)
        return DegradeSpec(
            gaussian_noise_sigma=noise,
            blur_sigma=blur,
            contrast_scale=contrast,
            luminosity_gradient=(amp, direction),
            elastic=(alpha, sigma) if alpha > 0 else None,
        )

    def scene_spec(self, seed: int, degradation: DegradeSpec) -> SceneSpec:
        s = self.scene
        overlap = s.get("overlap", "allow")
        return SceneSpec(
            width=s.get("width", 512),
            height=s.get("height", 512),
            scene_kind=self.scene_kind,
            count_range=tuple(s.get("count_range", (20, 150))),
            overlap=OverlapPolicy.from_dict(overlap),
            semi_axis_range=tuple(float(v) for v in s.get("semi_axis_range", (4.0, 24.0))),
            gray_range=tuple(float(v) for v in s.get("gray_range", (0.0, 0.0))),
            background=self.background_spec(),
            degradation=degradation,
            seed=seed,
            scale=self.scale,
            min_spacing=float(s.get("min_spacing", 0.0)),
            inside=s.get("inside", False),
            max_attempts=s.get("max_attempts", 2000),
            defocus=DefocusModel(**self.defocus),
        )


def load_config(path) -> DatasetConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc.strerror}") from None
    data, marks = load_yaml_with_lines(text, str(path))
    return DatasetConfig.from_mapping(data, marks, str(path))


def parse_config(text: str, source: str = "<config>") -> DatasetConfig:
    data, marks = load_yaml_with_lines(text, source)
    return DatasetConfig.from_mapping(data, marks, source)
