import csv
import io
import json

import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from conftest import write_jsonl
from scaffold.client import ChatClient, MockProvider
from scaffold.evaluation import Sample, load_manifest
from scaffold.exceptions import UnknownCoordinate
from scaffold.overlay import GridSpec, PerturbationSpec, compute_grid
from scaffold.pipelines import (
    AblationAxis,
    ablation_subset,
    ablation_sweep,
    active_perception_run,
    crop_regions,
    crop_windows,
)


def client(provider, **kw):
    return ChatClient(provider, "test-model", rate_per_s=None, sleep=lambda s: None, **kw)


GRID66 = compute_grid(GridSpec(6, 6), 600, 600)


class TestCropWindows:
    def test_corner_clamped(self):
        (win,) = crop_windows((600, 600), [(1, 1)], GRID66)
        assert win.bounds == (0, 0, 150, 150)

    def test_interior(self):
        (win,) = crop_windows((600, 600), [(3, 3)], GRID66)
        assert win.bounds == (150, 150, 350, 350)

    def test_adjacent_merge(self):
        grid = compute_grid(GridSpec(10, 12), 1200, 1000)
        (win,) = crop_windows((1200, 1000), [(7, 9), (7, 10)], grid)
        assert win.members == [(7, 9), (7, 10)]
        assert win.bounds == (750, 550, 1050, 750)

    def test_distant_not_merged_and_ordered(self):
        wins = crop_windows((600, 600), [(5, 5), (1, 1)], GRID66)
        assert [w.members for w in wins] == [[(5, 5)], [(1, 1)]]

    def test_high_iou_merges(self):
        # with cells=3 the two windows around (3,3) and (3,5) overlap heavily
        (win,) = crop_windows((600, 600), [(3, 3), (3, 5)], GRID66, cells=3)
        assert win.members == [(3, 3), (3, 5)]

    def test_cells_widen(self):
        (a,) = crop_windows((600, 600), [(3, 3)], GRID66, cells=1)
        (b,) = crop_windows((600, 600), [(3, 3)], GRID66, cells=2)
        assert b.area > a.area

    def test_unknown(self):
        with pytest.raises(UnknownCoordinate):
            crop_windows((600, 600), [(7, 1)], GRID66)

    def test_crop_regions(self):
        img = Image.new("RGB", (600, 600), "white")
        crops = crop_regions(img, [(3, 3), (6, 6)], GRID66)
        assert [c.size for c in crops] == [(200, 200), (150, 150)]

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 9), st.integers(1, 9), st.integers(60, 900), st.integers(60, 900),
           st.floats(0.2, 3), st.integers(0, 1000))
    def test_containment_and_clamping(self, h, w, W, H, cells, seed):
        spec = GridSpec(h, w, dot_radius_px=3, perturbation=PerturbationSpec(seed))
        placements = compute_grid(spec, W, H)
        for p in placements:
            (win,) = crop_windows((W, H), [p.logical], placements, cells, (h, w))
            u0, v0, u1, v1 = win.bounds
            assert 0 <= u0 < u1 <= W and 0 <= v0 < v1 <= H
            assert win.contains(p.pixel_u, p.pixel_v)


@pytest.fixture
def vstar(tmp_path):
    Image.new("RGB", (600, 600), (90, 140, 60)).save(tmp_path / "scene.png")
    return Sample("v1", [str(tmp_path / "scene.png")], "What is the color of the little girl's shirt?", "A",
                  options=["(A) pink.", "(B) white.", "(C) yellow.", "(D) black."])


class TestActivePerception:
    def test_two_phase(self, vstar, tmp_path):
        provider = MockProvider(rules=[("conclude the coordinates", "She is near [[(3,4)]]."),
                                       ("cropped images", "The shirt is pink. [[A]]")])
        v = active_perception_run(vstar, GridSpec(), client(provider), crop_dir=tmp_path / "crops")
        assert v.score == 1.0 and not v.refusal
        assert "coords=[[3, 4]]" in v.notes
        convo = provider.calls[1].messages
        assert [m.role for m in convo] == ["user", "assistant", "user"]
        assert len(convo[0].images) == 2 and len(convo[2].images) == 1
        assert "Options: (A) pink. (B) white. (C) yellow. (D) black." in convo[2].text
        crop = Image.open(tmp_path / "crops" / "v1_0.png")
        assert crop.size == (200, 200)

    def test_no_coords_fallback(self, vstar):
        provider = MockProvider(rules=[("conclude the coordinates", "I cannot tell where she is."),
                                       ("Options:", "Probably pink, [[A]]")])
        v = active_perception_run(vstar, GridSpec(), client(provider))
        assert v.score == 1.0 and "no_coords" in v.notes
        assert len(provider.calls) == 2 and len(provider.calls[1].messages) == 1

    def test_phase2_refusal(self, vstar):
        provider = MockProvider(rules=[("conclude the coordinates", "[[(2,2)]]"),
                                       ("cropped images", "I'm sorry, I couldn't find the girl.")])
        v = active_perception_run(vstar, GridSpec(), client(provider))
        assert v.score == 0.0 and v.refusal

    def test_out_of_grid_coords_ignored(self, vstar):
        provider = MockProvider(rules=[("conclude the coordinates", "[[(9,9)]]"),
                                       ("Options:", "[[B]]")])
        v = active_perception_run(vstar, GridSpec(), client(provider))
        assert "no_coords" in v.notes and v.score == 0.0

    def test_crop_contains_dot_pixel(self, vstar):
        provider = MockProvider(rules=[("conclude the coordinates", "[[(6,1)]]"),
                                       ("cropped images", "[[A]]")])
        v = active_perception_run(vstar, GridSpec(perturbation=PerturbationSpec(3)), client(provider))
        (win,) = json.loads(next(n for n in v.notes if n.startswith("windows="))[8:])
        u, v_ = win["center_px"]
        u0, v0, u1, v1 = win["bounds"]
        assert u0 <= u < u1 and v0 <= v_ < v1


@pytest.fixture
def pope(tmp_path):
    Image.new("RGB", (420, 420), (200, 200, 200)).save(tmp_path / "a.png")
    records = [{"id": f"p{i}", "images": ["a.png"], "question": f"Is there object {i} in the image?",
                "ground_truth": "yes" if i % 3 else "no", "source": "pope"} for i in range(6)]
    return write_jsonl(tmp_path / "pope.jsonl", records)


def echo_client(manifest):
    samples = load_manifest(manifest)
    return client(MockProvider(rules=[(s.question, f"[[{s.ground_truth}]]") for s in samples]))


class TestAblation:
    def test_matrix_size_grid(self, pope, tmp_path):
        axis = AblationAxis.matrix_sizes(3, 7)
        result = ablation_sweep(pope, axis, "scaffold", echo_client(pope))
        assert len(result.cells) == 25
        rows = list(csv.reader(io.StringIO(result.grid_csv())))
        assert rows[0] == ["h\\w", "3", "4", "5", "6", "7"]
        assert [r[0] for r in rows[1:]] == ["3", "4", "5", "6", "7"]
        assert all(cell == "100.0" for r in rows[1:] for cell in r[1:])
        grid_path = result.save(tmp_path / "results")
        assert (tmp_path / "results" / "matrix_size" / "3x7" / "report.json").exists()
        assert grid_path.read_text() == result.grid_csv()

    def test_color_axis(self, pope):
        axis = AblationAxis("color_strategy", ["binary", "uniform_black", "uniform_white", "complementary"])
        result = ablation_sweep(pope, axis, "scaffold", echo_client(pope))
        assert len(result.cells) == 4
        assert [r.config["grid"]["color_strategy"] for _, r in result.cells] == axis.values

    def test_isolation(self, pope):
        axis = AblationAxis("perturbation", [None, 7])
        (_, off), (_, on) = ablation_sweep(pope, axis, "scaffold", echo_client(pope)).cells
        diff = {k for k in off.config["grid"] if off.config["grid"][k] != on.config["grid"][k]}
        assert diff == {"perturbation"}
        assert [v.sample_id for v in off.verdicts] == [v.sample_id for v in on.verdicts]

    def test_repeats_average(self, pope):
        provider = MockProvider(script=["[[yes]]"] * 6 + ["[[no]]"] * 6)
        axis = AblationAxis("coordinate_format", ["alphabetic"])
        ((_, report),) = ablation_sweep(pope, axis, "scaffold", client(provider), repeats=2).cells
        assert len(provider.calls) == 12  # the salt keeps the second run out of the cache
        assert report.aggregate["runs"] == [66.7, 33.3]
        assert report.aggregate["score"] == 50.0

    def test_invalid_axis(self):
        with pytest.raises(ValueError):
            AblationAxis("brightness", [1])
        with pytest.raises(ValueError):
            AblationAxis("color_strategy", ["neon"])
        with pytest.raises(ValueError):
            AblationAxis("matrix_size", [])

    def test_subset_preset(self):
        samples = [Sample(f"{src}{i}", [], "q", "A", source=src) for src in ("a", "b", "c") for i in range(80)]
        picked = ablation_subset(samples, 50, seed=1)
        assert len(picked) == 150
        assert picked == ablation_subset(samples, 50, seed=1)
        assert picked != ablation_subset(samples, 50, seed=2)
