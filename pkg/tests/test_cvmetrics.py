import math
from functools import lru_cache

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image, ImageDraw

from scaffold.cvmetrics import (
    Circle,
    HoughCircleDetector,
    gaussian_blur,
    gaussian_kernel,
    greedy_match,
    hough_circles,
    score_spotting,
    sobel_gradients,
    to_grayscale,
)
from scaffold.exceptions import AnswerImageUnreadable


def optimal_match_count(predicted, circles, max_distance=50.0):
    """Exhaustive maximum one-to-one matching under the strict distance gate."""
    ok = [[math.hypot(p[0] - c.center_u, p[1] - c.center_v) < max_distance for c in circles]
          for p in predicted]

    @lru_cache(maxsize=None)
    def best(i, used):
        if i == len(predicted):
            return 0
        out = best(i + 1, used)  # leave prediction i unmatched
        for j in range(len(circles)):
            if ok[i][j] and not used >> j & 1:
                out = max(out, 1 + best(i + 1, used | 1 << j))
        return out

    return best(0, 0)


def disk_image(center=(50, 50), r=20, size=(120, 110), ring=False):
    img = Image.new("L", size, 0)
    d = ImageDraw.Draw(img)
    u, v = center
    if ring:
        d.ellipse((u - r, v - r, u + r, v + r), outline=255, width=3)
    else:
        d.ellipse((u - r, v - r, u + r, v + r), fill=255)
    return img


class TestFilters:
    def test_grayscale(self):
        arr = np.array([[[255, 255, 255], [255, 0, 0]]], dtype=np.uint8)
        assert to_grayscale(arr).tolist() == [[255, 76]]
        gray = np.array([[0, 17, 255]], dtype=np.uint8)
        assert to_grayscale(gray).tolist() == [[0, 17, 255]]

    def test_kernel(self):
        k = gaussian_kernel(1.0)
        assert len(k) == 7 and abs(k.sum() - 1) < 1e-6
        assert len(gaussian_kernel(1.2)) == 2 * math.ceil(3.6) + 1

    def test_constant_unchanged(self):
        arr = np.full((20, 30), 77.0)
        assert np.allclose(gaussian_blur(arr, 2.0), 77.0)

    def test_impulse_center_weight(self):
        arr = np.zeros((21, 21))
        arr[10, 10] = 1.0
        center = gaussian_blur(arr, 1.0)[10, 10]
        # normalized 2-D Gaussian at the origin, 1 / (2 pi), up to truncation at 3 sigma
        assert center == pytest.approx(1 / (2 * math.pi), abs=2e-3)
        assert center == pytest.approx(gaussian_kernel(1.0)[3] ** 2)

    def test_semigroup(self, gradient_image):
        gray = to_grayscale(gradient_image).astype(float)
        twice = gaussian_blur(gaussian_blur(gray, 1.0), 1.0)
        once = gaussian_blur(gray, math.sqrt(2))
        assert np.max(np.abs(twice - once)) < 1.0

    def test_sobel_vertical_step(self):
        arr = np.zeros((10, 10))
        arr[:, 5:] = 100
        g = sobel_gradients(arr)
        assert np.all(g.gx[:, 4:6] > 0) and np.all(g.gy == 0)

    def test_sobel_constant(self):
        g = sobel_gradients(np.full((8, 8), 9.0))
        assert not g.gx.any() and not g.gy.any() and not g.magnitude.any()

    def test_sobel_diagonal_ramp(self):
        yy, xx = np.mgrid[0:12, 0:12]
        g = sobel_gradients((xx + yy).astype(float))
        assert np.allclose(np.abs(g.gx[2:-2, 2:-2]), np.abs(g.gy[2:-2, 2:-2]))


class TestHough:
    def test_filled_disk(self):
        (c,) = hough_circles(disk_image())
        assert abs(c.center_u - 50) <= 2 and abs(c.center_v - 50) <= 2 and abs(c.radius - 20) <= 2

    def test_two_rings(self):
        img = Image.new("L", (300, 160), 0)
        d = ImageDraw.Draw(img)
        d.ellipse((30, 30, 110, 110), outline=255, width=3)
        d.ellipse((180, 40, 260, 120), outline=255, width=3)
        circles = hough_circles(img)
        assert len(circles) == 2
        centers = sorted((round(c.center_u), round(c.center_v)) for c in circles)
        assert abs(centers[0][0] - 70) <= 2 and abs(centers[1][0] - 220) <= 2

    def test_blank(self):
        assert hough_circles(np.zeros((100, 100))) == []

    def test_sorted_by_votes(self, answer_image_factory):
        img, _ = answer_image_factory(np.random.default_rng(3), n=6)
        votes = [c.votes for c in hough_circles(img)]
        assert votes == sorted(votes, reverse=True)

    @settings(max_examples=10, deadline=None)
    @given(st.integers(-20, 20), st.integers(-20, 20))
    def test_translation_equivariance(self, du, dv):
        (a,) = hough_circles(disk_image((60, 60), 25, (160, 160), ring=True))
        (b,) = hough_circles(disk_image((60 + du, 60 + dv), 25, (160, 160), ring=True))
        assert abs((b.center_u - a.center_u) - du) <= 1
        assert abs((b.center_v - a.center_v) - dv) <= 1

    def test_radius_range_validated(self):
        with pytest.raises(ValueError):
            HoughCircleDetector(r_min=30, r_max=10).fit()

    def test_detector_predict(self):
        det = HoughCircleDetector(max_circles=1).fit()
        out = det.predict([disk_image(), np.zeros((50, 50))])
        assert len(out[0]) == 1 and out[1] == []


class TestMatching:
    def test_exact_hit(self):
        assert greedy_match([(10, 10)], [Circle(10, 10, 20, 1)]) == [(0, 0, 0.0)]

    def test_distance_fifty_rejected(self):
        assert greedy_match([(80, 50)], [Circle(50, 10, 20, 1)]) == []  # 3-4-5 triangle, d = 50
        assert len(greedy_match([(79.9, 50)], [Circle(50, 10, 20, 1)])) == 1

    def test_one_to_one(self):
        circles = [Circle(100, 100, 20, 1), Circle(140, 100, 20, 1)]
        preds = [(100, 100), (120, 100), (141, 101)]
        pairs = greedy_match(preds, circles)
        assert len(pairs) == 2 == optimal_match_count(preds, circles)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.tuples(st.floats(0, 600), st.floats(0, 400)), max_size=5), st.integers(0, 10**6))
    def test_agrees_with_optimal_when_separated(self, preds, seed):
        rng = np.random.default_rng(seed)
        circles = []
        while len(circles) < 4:
            u, v = rng.uniform(0, 600), rng.uniform(0, 400)
            if all(math.hypot(u - c.center_u, v - c.center_v) > 100 for c in circles):
                circles.append(Circle(u, v, 20, 1))
        # nudge some predictions near circles so matches actually occur
        preds = preds + [(c.center_u + 10, c.center_v - 5) for c in circles[:2]]
        pairs = greedy_match(preds, circles)
        assert len(pairs) == optimal_match_count(preds, circles)
        assert len(pairs) <= min(len(preds), len(circles))

    @settings(max_examples=30, deadline=None)
    @given(st.permutations([(10, 10), (60, 12), (200, 200), (15, 8), (400, 40)]))
    def test_permutation_invariant(self, preds):
        circles = [Circle(12, 10, 20, 1), Circle(58, 10, 20, 1), Circle(390, 45, 20, 1)]
        assert len(greedy_match(preds, circles)) == len(
            greedy_match([(10, 10), (60, 12), (200, 200), (15, 8), (400, 40)], circles))
        got = sorted((tuple(preds[i]), j) for i, j, _ in greedy_match(preds, circles))
        ref_preds = [(10, 10), (60, 12), (200, 200), (15, 8), (400, 40)]
        ref = sorted((ref_preds[i], j) for i, j, _ in greedy_match(ref_preds, circles))
        assert got == ref


class TestScoreSpotting:
    def test_synthetic_level(self, answer_image_factory, tmp_path):
        img, truth = answer_image_factory(np.random.default_rng(0))
        path = tmp_path / "answer.png"
        img.save(path)
        preds = [(u + 3, v - 4) for u, v, _ in truth[:7]] + [(5, 5)]
        res = score_spotting(preds, path, level=4)
        assert res.matched == 7 and res.score == pytest.approx(0.7)
        d = res.to_dict()
        assert d["level"] == 4 and d["matched"] == 7 and len(d["pairs"]) == 7

    def test_unreadable(self, tmp_path):
        bad = tmp_path / "x.png"
        bad.write_bytes(b"not an image")
        with pytest.raises(AnswerImageUnreadable):
            score_spotting([(1, 1)], bad)
        with pytest.raises(AnswerImageUnreadable):
            score_spotting([(1, 1)], tmp_path / "missing.png")
