"""Spotting-differences scoring: filters, a gradient Hough circle detector, matching."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError
from sklearn.base import BaseEstimator

from .exceptions import AnswerImageUnreadable
from .utils.validation import check_positive, check_raster

MATCH_DISTANCE_PX = 50.0


@dataclass(frozen=True)
class Circle:
    center_u: float
    center_v: float
    radius: float
    votes: int

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class GradientField:
    gx: np.ndarray
    gy: np.ndarray

    @property
    def magnitude(self) -> np.ndarray:
        return np.hypot(self.gx, self.gy)


def to_grayscale(image) -> np.ndarray:
    """BT.601 luma as uint8. Single-channel input is returned unchanged."""
    arr = check_raster(image)
    if arr.ndim == 2:
        return np.clip(np.floor(arr + 0.5), 0, 255).astype(np.uint8)
    rgb = arr[..., :3]
    luma = rgb @ np.array([0.299, 0.587, 0.114])
    return np.clip(np.floor(luma + 0.5), 0, 255).astype(np.uint8)


def gaussian_kernel(sigma: float) -> np.ndarray:
    check_positive("sigma", sigma)
    radius = math.ceil(3 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2 * sigma * sigma))
    return k / k.sum()


def _convolve_axis(arr: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    r = len(kernel) // 2
    pad = [(0, 0)] * arr.ndim
    pad[axis] = (r, r)
    padded = np.pad(arr, pad, mode="edge")
    out = np.zeros_like(arr, dtype=np.float64)
    n = arr.shape[axis]
    for i, weight in enumerate(kernel):
        out += weight * np.take(padded, np.arange(i, i + n), axis=axis)
    return out


def gaussian_blur(raster, sigma: float) -> np.ndarray:
    """Separable Gaussian blur (radius ceil(3 sigma), clamped edges), float output."""
    arr = check_raster(raster)
    k = gaussian_kernel(sigma)
    return _convolve_axis(_convolve_axis(arr, k, 0), k, 1)


def sobel_gradients(raster) -> GradientField:
    arr = check_raster(raster, allow_color=False)
    p = np.pad(arr, 1, mode="edge")
    right = p[:-2, 2:] + 2 * p[1:-1, 2:] + p[2:, 2:]
    left = p[:-2, :-2] + 2 * p[1:-1, :-2] + p[2:, :-2]
    bottom = p[2:, :-2] + 2 * p[2:, 1:-1] + p[2:, 2:]
    top = p[:-2, :-2] + 2 * p[:-2, 1:-1] + p[:-2, 2:]
    return GradientField(right - left, bottom - top)


def _thin_edges(mag: np.ndarray, gx: np.ndarray, gy: np.ndarray, threshold: float) -> np.ndarray:
    """Edge mask after non-maximum suppression along the gradient direction."""
    angle = (np.rad2deg(np.arctan2(gy, gx)) + 180.0) % 180.0
    sector = np.round(angle / 45.0).astype(int) % 4
    offsets = [(0, 1), (1, 1), (1, 0), (1, -1)]  # (dv, du) for 0, 45, 90, 135 degrees
    p = np.pad(mag, 1, mode="constant")
    height, width = mag.shape
    keep = np.zeros_like(mag, dtype=bool)
    for s, (dv, du) in enumerate(offsets):
        fwd = p[1 + dv:1 + dv + height, 1 + du:1 + du + width]
        bwd = p[1 - dv:1 - dv + height, 1 - du:1 - du + width]
        keep |= (sector == s) & (mag >= fwd) & (mag >= bwd)
    return keep & (mag >= threshold)


def _local_peaks(acc: np.ndarray, min_votes: float, nms_radius: float, limit: int):
    p = np.pad(acc, 2, mode="constant", constant_values=-np.inf)
    height, width = acc.shape
    is_max = acc >= min_votes
    for dv in range(-2, 3):
        for du in range(-2, 3):
            if dv or du:
                is_max &= acc >= p[2 + dv:2 + dv + height, 2 + du:2 + du + width]
    flat = np.flatnonzero(is_max)
    if flat.size == 0:
        return []
    order = flat[np.argsort(-acc.flat[flat], kind="stable")]
    width = acc.shape[1]
    peaks: list[tuple[int, int]] = []
    r2 = nms_radius * nms_radius
    for idx in order:
        v, u = divmod(int(idx), width)
        if all((u - pu) ** 2 + (v - pv) ** 2 > r2 for pu, pv in peaks):
            peaks.append((u, v))
            if len(peaks) >= limit:
                break
    return peaks


def _fit_circle(us: np.ndarray, vs: np.ndarray):
    """Algebraic least-squares circle fit; returns (u, v, r) or None."""
    if us.size < 3:
        return None
    a = np.column_stack([us, vs, np.ones_like(us)])
    b = -(us * us + vs * vs)
    try:
        (d, e, f), *_ = np.linalg.lstsq(a, b, rcond=None)
    except np.linalg.LinAlgError:
        return None
    cu, cv = -d / 2, -e / 2
    rr = cu * cu + cv * cv - f
    if rr <= 0:
        return None
    return cu, cv, math.sqrt(rr)


def hough_circles(
    raster,
    r_min: int = 15,
    r_max: int = 60,
    edge_threshold: float = 80.0,
    vote_threshold: float = 0.6,
    nms_radius: float = 20.0,
    *,
    sigma: float = 1.0,
    max_candidates: int = 200,
) -> list[Circle]:
    """Detect circles with gradient-directed Hough voting.

    Edge pixels (thinned Sobel magnitude >= ``edge_threshold``) vote for
    centres at distance ``r`` in both directions along their gradient for every
    ``r`` in ``[r_min, r_max]``. Peaks of the centre accumulator are then
    verified: a circle is kept when radially aligned edge pixels cover at
    least ``vote_threshold`` of its ``2*pi*r`` circumference. ``votes`` is the
    number of covered circumference pixels.
    """
    if not 0 < r_min <= r_max:
        raise ValueError(f"need 0 < r_min <= r_max, got {r_min}, {r_max}")
    gray = to_grayscale(raster).astype(np.float64)
    smooth = gaussian_blur(gray, sigma) if sigma > 0 else gray
    grad = sobel_gradients(smooth)
    mag = grad.magnitude
    edges = _thin_edges(mag, grad.gx, grad.gy, edge_threshold)
    vs, us = np.nonzero(edges)
    if us.size == 0:
        return []
    height, width = gray.shape
    dx = grad.gx[vs, us] / mag[vs, us]
    dy = grad.gy[vs, us] / mag[vs, us]

    radii = np.arange(r_min, r_max + 1, dtype=np.float64)
    acc = np.zeros(height * width, dtype=np.float64)
    for sign in (1.0, -1.0):
        cu = np.floor(us[:, None] + sign * radii[None, :] * dx[:, None] + 0.5).astype(np.int64).ravel()
        cv = np.floor(vs[:, None] + sign * radii[None, :] * dy[:, None] + 0.5).astype(np.int64).ravel()
        ok = (cu >= 0) & (cu < width) & (cv >= 0) & (cv < height)
        acc += np.bincount(cv[ok] * width + cu[ok], minlength=height * width)
    acc = gaussian_blur(acc.reshape(height, width), 1.0)

    # a full circle of radius r_min puts ~2*pi*r_min votes near its centre;
    # the blur above spreads them over ~9 px
    min_center_votes = 0.5 * vote_threshold * 2 * math.pi * r_min / 9.0
    candidates = _local_peaks(acc, min_center_votes, max(2.0, nms_radius / 2), max_candidates)

    found: list[Circle] = []
    for cu0, cv0 in candidates:
        circle = _verify(cu0, cv0, us, vs, dx, dy, r_min, r_max, vote_threshold)
        if circle is not None:
            found.append(circle)

    found.sort(key=lambda c: (-c.votes, c.center_v, c.center_u))
    kept: list[Circle] = []
    for c in found:
        if all(math.hypot(c.center_u - k.center_u, c.center_v - k.center_v) > nms_radius for k in kept):
            kept.append(c)
    return kept


def _support(cu, cv, us, vs, dx, dy, r_min, r_max):
    ru, rv = us - cu, vs - cv
    d = np.hypot(ru, rv)
    with np.errstate(invalid="ignore", divide="ignore"):
        align = np.abs((ru * dx + rv * dy) / d)
    sel = (d >= r_min - 1.5) & (d <= r_max + 1.5) & (align >= 0.9)
    return d[sel], np.arctan2(rv[sel], ru[sel]), us[sel], vs[sel]


def _coverage(d, theta, r) -> int:
    band = np.abs(d - r) <= 1.0
    n_bins = max(1, int(math.ceil(2 * math.pi * r)))
    bins = np.floor((theta[band] + math.pi) / (2 * math.pi) * n_bins).astype(int) % n_bins
    return int(np.unique(bins).size)


def _refine(u, v, radius, us, vs, dx, dy, r_min, r_max):
    u0, v0, inliers = u, v, 0
    for _ in range(6):
        d, _, su, sv = _support(u, v, us, vs, dx, dy, r_min, r_max)
        band = np.abs(d - radius) <= 1.0
        fit = _fit_circle(su[band].astype(np.float64), sv[band].astype(np.float64))
        if fit is None or math.hypot(fit[0] - u0, fit[1] - v0) > 4.0 or not r_min - 2 <= fit[2] <= r_max + 2:
            return None
        moved = math.hypot(fit[0] - u, fit[1] - v)
        u, v, radius = fit
        inliers = int(band.sum())
        if moved < 0.05:
            break
    return u, v, radius, inliers


def _verify(cu, cv, us, vs, dx, dy, r_min, r_max, vote_threshold) -> Optional[Circle]:
    d, theta, su, sv = _support(cu, cv, us, vs, dx, dy, r_min, r_max)
    if d.size == 0:
        return None
    best_r, best_frac, best_votes = None, 0.0, 0
    for r in range(r_min, r_max + 1):
        votes = _coverage(d, theta, r)
        frac = votes / (2 * math.pi * r)
        if frac > best_frac:
            best_r, best_frac, best_votes = r, frac, votes
    if best_r is None or best_frac < vote_threshold:
        return None
    # a thick marker has two concentric boundaries; refine from several start
    # radii and keep the fit with the most inliers
    best = (float(cu), float(cv), float(best_r), -1)
    for start in np.arange(best_r - 2.0, best_r + 2.01, 1.0):
        fit = _refine(float(cu), float(cv), float(start), us, vs, dx, dy, r_min, r_max)
        if fit is not None and fit[3] > best[3]:
            best = fit
    u, v, radius, _ = best
    return Circle(round(float(u), 2), round(float(v), 2), round(float(radius), 2), int(best_votes))


class HoughCircleDetector(BaseEstimator):
    """Estimator front end for :func:`hough_circles`; ``predict`` maps images to circle lists."""

    def __init__(self, r_min=15, r_max=60, edge_threshold=80.0, vote_threshold=0.6,
                 nms_radius=20.0, sigma=1.0, max_circles=None):
        self.r_min = r_min
        self.r_max = r_max
        self.edge_threshold = edge_threshold
        self.vote_threshold = vote_threshold
        self.nms_radius = nms_radius
        self.sigma = sigma
        self.max_circles = max_circles

    def fit(self, X=None, y=None):
        if not 0 < self.r_min <= self.r_max:
            raise ValueError("need 0 < r_min <= r_max")
        return self

    def detect(self, image) -> list[Circle]:
        circles = hough_circles(image, self.r_min, self.r_max, self.edge_threshold,
                                self.vote_threshold, self.nms_radius, sigma=self.sigma)
        return circles[: self.max_circles] if self.max_circles else circles

    def predict(self, X) -> list[list[Circle]]:
        return [self.detect(image) for image in X]


def greedy_match(predicted: Sequence[tuple], circles: Sequence[Circle],
                 max_distance: float = MATCH_DISTANCE_PX) -> list[tuple[int, int, float]]:
    """One-to-one matching, repeatedly pairing the globally closest (prediction, circle).

    Only pairs strictly closer than ``max_distance`` qualify. Returns
    ``(prediction_index, circle_index, distance)`` triples.
    """
    pairs = []
    for i, (x, y) in enumerate(predicted):
        for j, c in enumerate(circles):
            dist = math.hypot(x - c.center_u, y - c.center_v)
            if dist < max_distance:
                pairs.append((dist, i, j))
    # ties broken by coordinates, not list position, so the result is order independent
    pairs.sort(key=lambda p: (p[0], tuple(predicted[p[1]]), p[2]))
    used_p, used_c, out = set(), set(), []
    for dist, i, j in pairs:
        if i in used_p or j in used_c:
            continue
        used_p.add(i)
        used_c.add(j)
        out.append((i, j, dist))
    return out


@dataclass
class SpottingResult:
    matched: int
    score: float
    circles: list
    pairs: list
    level: Optional[int] = None

    def to_dict(self) -> dict:
        return {
            "level": self.level,
            "matched": self.matched,
            "score": self.score,
            "circles": [c.to_dict() for c in self.circles],
            "pairs": [{"prediction": i, "circle": j, "distance": round(d, 3)} for i, j, d in self.pairs],
        }


def _load_answer(answer_image):
    if isinstance(answer_image, (np.ndarray, Image.Image)):
        return answer_image
    try:
        with Image.open(answer_image) as im:
            return np.asarray(im.convert("RGB"))
    except (OSError, UnidentifiedImageError) as exc:
        raise AnswerImageUnreadable(f"cannot read answer image {answer_image!s}: {exc}") from exc


def score_spotting(predicted: Sequence[tuple], answer_image, expected_count: int = 10,
                   detector: Optional[HoughCircleDetector] = None,
                   level: Optional[int] = None) -> SpottingResult:
    """Match pixel predictions against marker circles found in the answer image."""
    detector = detector or HoughCircleDetector()
    circles = detector.detect(_load_answer(answer_image))[:expected_count]
    preds = [tuple(map(float, p)) for p in predicted]
    pairs = greedy_match(preds, circles)
    return SpottingResult(len(pairs), len(pairs) / expected_count, circles, pairs, level)
