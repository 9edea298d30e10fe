"""Dot-matrix geometry, labelling, colouring and rendering.

Coordinates follow the matrix convention: ``x`` is the row index counted
from the top (1..h) and ``y`` the column index counted from the left (1..w).
Pixel positions use image convention: ``u`` grows rightwards, ``v`` downwards.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from PIL import Image, ImageDraw, ImageFont
from sklearn.base import BaseEstimator, TransformerMixin

from .exceptions import ArityMismatch, ImageTooSmall, MissingSequenceIndex, UnknownSetting
from .utils.validation import check_image, check_positive

COORDINATE_FORMATS = ("cartesian2d", "cartesian3d", "alphabetic", "one_dimensional", "pixel_absolute")
COLOR_STRATEGIES = ("binary", "uniform_black", "uniform_white", "complementary")
SETTINGS = ("single", "double", "sequence")

LUMA_THRESHOLD = 128.0
_LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])
_RGB = {"black": (0, 0, 0), "white": (255, 255, 255)}

Color = Union[str, tuple]


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class PerturbationSpec:
    """Gaussian jitter of dot positions, std = ``sigma_fraction`` x dot spacing."""

    seed: int = 0
    sigma_fraction: float = 0.25

    def __post_init__(self):
        if not isinstance(self.seed, (int, np.integer)) or self.seed < 0:
            raise ValueError(f"seed must be a non-negative integer, got {self.seed!r}")
        check_positive("sigma_fraction", self.sigma_fraction, strict=False)


@dataclass(frozen=True)
class GridSpec:
    h: int = 6
    w: int = 6
    coordinate_format: str = "cartesian2d"
    color_strategy: str = "binary"
    perturbation: Optional[PerturbationSpec] = None
    dot_radius_px: Optional[int] = None
    label_px: Optional[int] = None

    def __post_init__(self):
        for name in ("h", "w"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < 1:
                raise ValueError(f"{name} must be an integer >= 1, got {value!r}")
        if self.coordinate_format not in COORDINATE_FORMATS:
            raise ValueError(f"unknown coordinate_format {self.coordinate_format!r}")
        if self.color_strategy not in COLOR_STRATEGIES:
            raise ValueError(f"unknown color_strategy {self.color_strategy!r}")
        if self.dot_radius_px is not None:
            check_positive("dot_radius_px", self.dot_radius_px)
        if self.label_px is not None:
            check_positive("label_px", self.label_px)

    def radius_for(self, width_px: int, height_px: int) -> int:
        if self.dot_radius_px is not None:
            return int(self.dot_radius_px)
        return max(3, round_half_up(min(width_px, height_px) / 200))

    def label_px_for(self, width_px: int, height_px: int) -> int:
        if self.label_px is not None:
            return int(self.label_px)
        return max(10, round_half_up(min(width_px, height_px) / 40))

    def spacing(self, width_px: int, height_px: int) -> tuple[float, float]:
        """Return ``(l_h, l_w)``: vertical and horizontal distance between neighbouring dots."""
        return height_px / self.h, width_px / self.w

    def replace(self, **changes) -> "GridSpec":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class DotPlacement:
    logical: tuple  # (x, y): row, column, both 1-based
    pixel_u: int
    pixel_v: int
    color: Optional[Color] = None

    @property
    def x(self) -> int:
        return self.logical[0]

    @property
    def y(self) -> int:
        return self.logical[1]


@dataclass
class OverlayResult:
    overlaid_image: Image.Image
    placements: list
    original_retained: bool
    original: Optional[Image.Image] = None
    grid: tuple = (6, 6)
    coordinate_format: str = "cartesian2d"
    t: Optional[int] = None
    labels: list = field(default_factory=list)
    label_boxes: list = field(default_factory=list)
    dot_boxes: list = field(default_factory=list)

    @property
    def size(self) -> tuple[int, int]:
        return self.overlaid_image.size

    def lookup(self, x: int, y: int) -> DotPlacement:
        h, w = self.grid
        if not (1 <= x <= h and 1 <= y <= w):
            raise KeyError((x, y))
        return self.placements[(x - 1) * w + (y - 1)]

    def to_sidecar(self) -> dict:
        h, w = self.grid
        return {
            "grid": {"h": h, "w": w},
            "format": self.coordinate_format,
            "t": self.t,
            "image_size": list(self.overlaid_image.size),
            "dots": [
                {
                    "label": label,
                    "x": p.x,
                    "y": p.y,
                    "u": p.pixel_u,
                    "v": p.pixel_v,
                    "color": p.color if isinstance(p.color, str) else list(p.color),
                }
                for p, label in zip(self.placements, self.labels)
            ],
        }

    def sidecar_json(self) -> str:
        return json.dumps(self.to_sidecar(), indent=2, sort_keys=False) + "\n"

    def save(self, image_path: Union[str, Path]) -> tuple[Path, Path]:
        """Write the overlaid image and its ``.json`` sidecar next to it."""
        image_path = Path(image_path)
        self.overlaid_image.save(image_path)
        sidecar = image_path.with_suffix(".json")
        sidecar.write_text(self.sidecar_json(), encoding="utf-8")
        return image_path, sidecar


def placements_from_sidecar(data: dict) -> tuple[tuple[int, int], list[DotPlacement]]:
    grid = (int(data["grid"]["h"]), int(data["grid"]["w"]))
    dots = []
    for d in data["dots"]:
        color = d.get("color")
        dots.append(DotPlacement((int(d["x"]), int(d["y"])), int(d["u"]), int(d["v"]),
                                 tuple(color) if isinstance(color, list) else color))
    return grid, dots


def compute_grid(spec: GridSpec, width_px: int, height_px: int) -> list[DotPlacement]:
    """Place one dot at the centre of every cell of an ``h x w`` partition, row-major."""
    radius = spec.radius_for(width_px, height_px)
    if width_px < spec.w * 2 * radius or height_px < spec.h * 2 * radius:
        raise ImageTooSmall(
            f"{width_px}x{height_px} image cannot hold a {spec.h}x{spec.w} matrix of "
            f"radius-{radius} dots"
        )
    placements = []
    for i in range(1, spec.h + 1):
        v = round_half_up((i - 0.5) * height_px / spec.h)
        for j in range(1, spec.w + 1):
            u = round_half_up((j - 0.5) * width_px / spec.w)
            placements.append(DotPlacement((i, j), u, v))
    return placements


def draw_offsets(rng: np.random.Generator, n: int, sigma_v: float, sigma_u: float):
    """Draw ``n`` (vertical, horizontal) Gaussian offsets."""
    dv = rng.normal(0.0, sigma_v, size=n) if sigma_v > 0 else np.zeros(n)
    du = rng.normal(0.0, sigma_u, size=n) if sigma_u > 0 else np.zeros(n)
    return dv, du


def perturb(
    placements: Sequence[DotPlacement],
    spec: PerturbationSpec,
    l_h_px: float,
    l_w_px: float,
    width_px: int,
    height_px: int,
    rng: Optional[np.random.Generator] = None,
) -> list[DotPlacement]:
    """Jitter dot positions; logical coordinates are left untouched.

    Offsets that would push a dot off the image are clamped to the border.
    """
    check_positive("l_h_px", l_h_px)
    check_positive("l_w_px", l_w_px)
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    if spec.sigma_fraction == 0:
        return list(placements)
    dv, du = draw_offsets(rng, len(placements), spec.sigma_fraction * l_h_px,
                          spec.sigma_fraction * l_w_px)
    out = []
    for p, ov, ou in zip(placements, dv, du):
        u = min(max(round_half_up(p.pixel_u + ou), 0), width_px - 1)
        v = min(max(round_half_up(p.pixel_v + ov), 0), height_px - 1)
        out.append(replace(p, pixel_u=u, pixel_v=v))
    return out


def _window(arr: np.ndarray, u: int, v: int, half: int) -> np.ndarray:
    height, width = arr.shape[:2]
    u0, u1 = max(u - half, 0), min(u + half, width)
    v0, v1 = max(v - half, 0), min(v + half, height)
    if u1 <= u0:
        u0, u1 = min(u, width - 1), min(u, width - 1) + 1
    if v1 <= v0:
        v0, v1 = min(v, height - 1), min(v, height - 1) + 1
    return arr[v0:v1, u0:u1, :3]


def window_mean(image, placement: DotPlacement, label_px: int) -> np.ndarray:
    arr = image if isinstance(image, np.ndarray) else np.asarray(check_image(image))
    if arr.ndim == 2:
        arr = arr[:, :, None].repeat(3, axis=2)
    return _window(arr, placement.pixel_u, placement.pixel_v, label_px).reshape(-1, 3).mean(axis=0)


def choose_color(image, placement: DotPlacement, strategy: str, label_px: int = 10) -> Color:
    """Pick the colour for one dot from the background in a ``2*label_px`` square around it."""
    if strategy == "uniform_black":
        return "black"
    if strategy == "uniform_white":
        return "white"
    if strategy not in COLOR_STRATEGIES:
        raise ValueError(f"unknown color strategy {strategy!r}")
    mean = window_mean(image, placement, label_px)
    if strategy == "binary":
        # rounded so a uniform 128 background is not lost to float error
        luma = round(float(mean @ _LUMA_WEIGHTS), 9)
        return "black" if luma >= LUMA_THRESHOLD else "white"
    return tuple(255 - round_half_up(c) for c in mean)


def alphabetic_label(index: int) -> str:
    """Spreadsheet-style column name for a 1-based index: 1 -> A, 27 -> AA."""
    if index < 1:
        raise ValueError("index must be >= 1")
    letters = []
    while index:
        index, rem = divmod(index - 1, 26)
        letters.append(chr(ord("A") + rem))
    return "".join(reversed(letters))


def format_label(
    placement: DotPlacement,
    fmt: str,
    *,
    h: int,
    w: int,
    t: Optional[int] = None,
    width_px: Optional[int] = None,
    height_px: Optional[int] = None,
) -> str:
    x, y = placement.logical[:2]
    if fmt == "cartesian3d":
        if t is None:
            raise MissingSequenceIndex("cartesian3d labels need a sequence index t")
        return f"({t},{x},{y})"
    if fmt == "cartesian2d":
        return f"({x},{y})"
    index = (x - 1) * w + y
    if fmt == "one_dimensional":
        return str(index)
    if fmt == "alphabetic":
        return alphabetic_label(index)
    if fmt == "pixel_absolute":
        if width_px is None or height_px is None:
            raise ValueError("pixel_absolute labels need the image size")
        # nominal cell centre, independent of any perturbation
        u = round_half_up((y - 0.5) * width_px / w)
        v = round_half_up((x - 0.5) * height_px / h)
        return f"({u},{v})"
    raise ValueError(f"unknown coordinate format {fmt!r}")


def _font(size: int) -> ImageFont.FreeTypeFont:
    return ImageFont.load_default(size=size)


def _label_origin(font, text, u, v, radius, width, height):
    x = u + radius + 2
    y = v - radius - 2
    left, top, right, bottom = font.getbbox(text, anchor="ld")
    if x + right > width - 1:
        x = width - 1 - right
    if x + left < 0:
        x = -left
    if y + top < 0:
        y = -top
    if y + bottom > height - 1:
        y = height - 1 - bottom
    return x, y, (x + left, y + top, x + right, y + bottom)


def render_overlay(
    image,
    placements: Sequence[DotPlacement],
    spec: GridSpec,
    *,
    t: Optional[int] = None,
    coordinate_format: Optional[str] = None,
    original_retained: bool = False,
) -> OverlayResult:
    """Draw dots and labels on a copy of ``image``."""
    original = check_image(image)
    width, height = original.size
    fmt = coordinate_format or spec.coordinate_format
    if fmt == "cartesian3d" and t is None:
        raise MissingSequenceIndex("cartesian3d labels need a sequence index t")
    radius = spec.radius_for(width, height)
    if width < spec.w * 2 * radius or height < spec.h * 2 * radius:
        raise ImageTooSmall(f"{width}x{height} image too small for a {spec.h}x{spec.w} matrix")
    label_px = spec.label_px_for(width, height)
    font = _font(label_px)

    background = np.asarray(original)
    canvas = original.copy()
    draw = ImageDraw.Draw(canvas)
    colored, labels, label_boxes, dot_boxes = [], [], [], []
    for p in placements:
        color = choose_color(background, p, spec.color_strategy, label_px)
        rgb = _RGB[color] if isinstance(color, str) else tuple(color)
        box = (p.pixel_u - radius, p.pixel_v - radius, p.pixel_u + radius, p.pixel_v + radius)
        draw.ellipse(box, fill=rgb)
        text = format_label(p, fmt, h=spec.h, w=spec.w, t=t, width_px=width, height_px=height)
        lx, ly, lbox = _label_origin(font, text, p.pixel_u, p.pixel_v, radius, width, height)
        draw.text((lx, ly), text, fill=rgb, font=font, anchor="ld")
        colored.append(replace(p, color=color))
        labels.append(text)
        label_boxes.append(lbox)
        dot_boxes.append(box)
    return OverlayResult(
        overlaid_image=canvas,
        placements=colored,
        original_retained=original_retained,
        original=original,
        grid=(spec.h, spec.w),
        coordinate_format=fmt,
        t=t,
        labels=labels,
        label_boxes=label_boxes,
        dot_boxes=dot_boxes,
    )


def _format_for_setting(fmt: str, setting: str) -> str:
    if setting == "single" and fmt == "cartesian3d":
        return "cartesian2d"
    if setting != "single" and fmt == "cartesian2d":
        return "cartesian3d"
    return fmt


def overlay_image(image, spec: GridSpec, *, t: Optional[int] = None,
                  coordinate_format: Optional[str] = None,
                  original_retained: bool = False) -> OverlayResult:
    """Compute (and optionally perturb) placements for one image, then render."""
    img = check_image(image)
    width, height = img.size
    placements = compute_grid(spec, width, height)
    if spec.perturbation is not None:
        seed = spec.perturbation.seed
        rng = np.random.default_rng(seed if t is None else [seed, t])
        l_h, l_w = spec.spacing(width, height)
        placements = perturb(placements, spec.perturbation, l_h, l_w, width, height, rng=rng)
    return render_overlay(img, placements, spec, t=t, coordinate_format=coordinate_format,
                          original_retained=original_retained)


def overlay_for_setting(images: Sequence, spec: GridSpec, setting: str) -> list[OverlayResult]:
    """Overlay every image of one task according to its delivery setting.

    ``single`` keeps the original alongside a 2-D labelled copy; ``double`` and
    ``sequence`` label each image with 3-D coordinates whose ``t`` is its
    1-based position.
    """
    if setting not in SETTINGS:
        raise UnknownSetting(setting)
    n = len(images)
    if (setting == "single" and n != 1) or (setting == "double" and n != 2) or (
        setting == "sequence" and n < 2
    ):
        raise ArityMismatch(f"setting {setting!r} cannot take {n} image(s)")
    fmt = _format_for_setting(spec.coordinate_format, setting)
    if setting == "single":
        return [overlay_image(images[0], spec, coordinate_format=fmt, original_retained=True)]
    return [
        overlay_image(img, spec, t=k, coordinate_format=fmt, original_retained=False)
        for k, img in enumerate(images, start=1)
    ]


class DotMatrixOverlay(TransformerMixin, BaseEstimator):
    """Estimator wrapper around the overlay routines.

    ``X`` is a sequence of samples. In the ``single`` setting a sample is one
    image; otherwise it is the ordered list of images for that sample.
    ``transform`` returns one list of :class:`OverlayResult` per sample.
    """

    def __init__(self, h=6, w=6, coordinate_format="cartesian2d", color_strategy="binary",
                 perturbation_seed=None, sigma_fraction=0.25, dot_radius_px=None,
                 label_px=None, setting="single"):
        self.h = h
        self.w = w
        self.coordinate_format = coordinate_format
        self.color_strategy = color_strategy
        self.perturbation_seed = perturbation_seed
        self.sigma_fraction = sigma_fraction
        self.dot_radius_px = dot_radius_px
        self.label_px = label_px
        self.setting = setting

    def _make_spec(self) -> GridSpec:
        perturbation = None
        if self.perturbation_seed is not None:
            perturbation = PerturbationSpec(int(self.perturbation_seed), self.sigma_fraction)
        return GridSpec(self.h, self.w, self.coordinate_format, self.color_strategy,
                        perturbation, self.dot_radius_px, self.label_px)

    def fit(self, X=None, y=None):
        if self.setting not in SETTINGS:
            raise UnknownSetting(self.setting)
        self.grid_spec_ = self._make_spec()
        return self

    def transform(self, X):
        if not hasattr(self, "grid_spec_"):
            self.fit()
        out = []
        for sample in X:
            images = [sample] if self.setting == "single" else list(sample)
            out.append(overlay_for_setting(images, self.grid_spec_, self.setting))
        return out
