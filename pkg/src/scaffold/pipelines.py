"""Active-perception loop (locate, crop, answer) and ablation sweeps."""
from __future__ import annotations

import csv
import io
import json
import logging
import random
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from PIL import Image

from .client import ChatClient, Message
from .evaluation import (
    Report,
    Sample,
    Verdict,
    load_manifest,
    run_benchmark,
    score_response,
    validate_samples,
)
from .exceptions import ScaffoldError, UnknownCoordinate
from .overlay import COLOR_STRATEGIES, COORDINATE_FORMATS, DotPlacement, GridSpec, PerturbationSpec, overlay_for_setting
from .parsing import extract_coordinates
from .prompting import build_bundle, build_followup_prompt
from .utils.validation import check_image, load_image

log = logging.getLogger(__name__)

MERGE_IOU = 0.5
AXES = ("matrix_size", "color_strategy", "coordinate_format", "perturbation")


@dataclass
class CropWindow:
    center: DotPlacement
    half_width_px: float
    half_height_px: float
    bounds: tuple  # (u0, v0, u1, v1), u1/v1 exclusive
    members: list = field(default_factory=list)

    @property
    def area(self) -> int:
        u0, v0, u1, v1 = self.bounds
        return (u1 - u0) * (v1 - v0)

    def contains(self, u: int, v: int) -> bool:
        u0, v0, u1, v1 = self.bounds
        return u0 <= u < u1 and v0 <= v < v1

    def to_dict(self) -> dict:
        return {
            "center": list(self.center.logical),
            "center_px": [self.center.pixel_u, self.center.pixel_v],
            "bounds": list(self.bounds),
            "members": [list(m) for m in self.members],
        }


def _iou(a: tuple, b: tuple) -> float:
    iu = max(0, min(a[2], b[2]) - max(a[0], b[0]))
    iv = max(0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iu * iv
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union else 0.0


def _grid_neighbours(a: Sequence, b: Sequence) -> bool:
    return any(abs(p[0] - q[0]) + abs(p[1] - q[1]) == 1 for p in a for q in b)


def crop_windows(image_size: tuple, coords: Sequence[tuple], placements: Sequence[DotPlacement],
                 cells: float = 1, grid: Optional[tuple] = None) -> list[CropWindow]:
    """Windows of ``cells`` dot spacings around each requested dot, clamped and merged.

    Windows merge when their IoU exceeds 0.5 or their dots share a grid edge;
    a merged window is the bounding box of its parts and takes the position of
    its earliest member.
    """
    width, height = image_size
    by_logical = {tuple(p.logical[:2]): p for p in placements}
    if grid is None:
        grid = (max(k[0] for k in by_logical), max(k[1] for k in by_logical))
    h, w = grid
    l_h, l_w = height / h, width / w
    windows: list[CropWindow] = []
    for coord in coords:
        key = tuple(coord)
        if key not in by_logical:
            raise UnknownCoordinate(key)
        p = by_logical[key]
        hw, hh = cells * l_w, cells * l_h
        bounds = (
            max(0, int(np.floor(p.pixel_u - hw))),
            max(0, int(np.floor(p.pixel_v - hh))),
            min(width, int(np.ceil(p.pixel_u + hw))),
            min(height, int(np.ceil(p.pixel_v + hh))),
        )
        windows.append(CropWindow(p, hw, hh, bounds, [key]))

    merged = True
    while merged:
        merged = False
        for i in range(len(windows)):
            for j in range(i + 1, len(windows)):
                a, b = windows[i], windows[j]
                if _iou(a.bounds, b.bounds) > MERGE_IOU or _grid_neighbours(a.members, b.members):
                    box = (min(a.bounds[0], b.bounds[0]), min(a.bounds[1], b.bounds[1]),
                           max(a.bounds[2], b.bounds[2]), max(a.bounds[3], b.bounds[3]))
                    windows[i] = CropWindow(a.center, a.half_width_px, a.half_height_px, box,
                                            a.members + b.members)
                    del windows[j]
                    merged = True
                    break
            if merged:
                break
    return windows


def crop_regions(image, coords: Sequence[tuple], placements: Sequence[DotPlacement],
                 cells: float = 1, grid: Optional[tuple] = None) -> list[Image.Image]:
    img = check_image(image)
    return [img.crop(win.bounds) for win in crop_windows(img.size, coords, placements, cells, grid)]


def _valid_coords(coords, grid):
    h, w = grid
    return [c for c in coords if 1 <= c[0] <= h and 1 <= c[1] <= w]


def active_perception_run(sample: Sample, grid_spec: GridSpec, client: ChatClient, *,
                          cells: float = 1, cache_salt: str = "",
                          crop_dir: Optional[Union[str, Path]] = None) -> Verdict:
    """Two-turn locate -> crop -> answer loop for one single-image sample.

    Without usable coordinates the sample falls back to plain scaffold
    answering and is flagged ``no_coords``. The crop windows are recorded in
    the verdict notes.
    """
    if sample.setting != "single":
        raise ValueError("active perception needs a single-image sample")
    start = time.perf_counter()
    try:
        image = load_image(sample.images[0])
        overlays = overlay_for_setting([image], grid_spec, "single")
        locate = build_bundle(sample.question, overlays, "single", "scaffold_ap_phase1")
        first_turn = Message.user(locate.text, locate.images)
        phase1 = client.send(client.request([first_turn], cache_salt))
        coords = _valid_coords(extract_coordinates(phase1.text), overlays[0].grid)

        if not coords:
            plain = build_bundle(sample.task_text(), overlays, "single", "scaffold")
            answer = client.send(client.request([Message.user(plain.text, plain.images)], cache_salt))
            v = score_response(sample, answer.text, judge_client=client, overlays=overlays, scaffolded=True)
            v.notes.append("no_coords")
            v.cached = phase1.from_cache and answer.from_cache
        else:
            windows = crop_windows(image.size, coords, overlays[0].placements, cells, overlays[0].grid)
            crops = [image.crop(win.bounds) for win in windows]
            if crop_dir is not None:
                crop_dir = Path(crop_dir)
                crop_dir.mkdir(parents=True, exist_ok=True)
                for k, crop in enumerate(crops):
                    crop.save(crop_dir / f"{sample.id}_{k}.png")
            followup = build_bundle(build_followup_prompt(sample.question, sample.options_text()),
                                    crops, "single", "scaffold_ap_phase2")
            turns = [first_turn, Message.assistant(phase1.text),
                     Message.user(followup.text, followup.images)]
            answer = client.send_conversation(turns, cache_salt)
            v = score_response(sample, answer.text, judge_client=client, overlays=overlays, scaffolded=True)
            v.notes.append("coords=" + json.dumps([list(c) for c in coords]))
            v.notes.append("windows=" + json.dumps([win.to_dict() for win in windows]))
            v.cached = phase1.from_cache and answer.from_cache
    except (ScaffoldError, OSError, ValueError) as exc:
        log.warning("sample %s failed: %s", sample.id, exc)
        v = Verdict(sample.id, group_id=sample.group_id, notes=[f"error: {type(exc).__name__}: {exc}"])
    v.latency_ms = round((time.perf_counter() - start) * 1000, 3)
    return v


# ---------------------------------------------------------------------------
# ablations


@dataclass
class AblationAxis:
    kind: str
    values: list

    def __post_init__(self):
        if self.kind not in AXES:
            raise ValueError(f"unknown ablation axis {self.kind!r}")
        if not self.values:
            raise ValueError("an ablation axis needs at least one value")
        for value in self.values:
            self.apply(GridSpec(), value)

    def apply(self, base: GridSpec, value) -> GridSpec:
        if self.kind == "matrix_size":
            h, w = value
            return base.replace(h=int(h), w=int(w))
        if self.kind == "color_strategy":
            if value not in COLOR_STRATEGIES:
                raise ValueError(f"unknown color strategy {value!r}")
            return base.replace(color_strategy=value)
        if self.kind == "coordinate_format":
            if value not in COORDINATE_FORMATS:
                raise ValueError(f"unknown coordinate format {value!r}")
            return base.replace(coordinate_format=value)
        if value in (None, "off"):
            return base.replace(perturbation=None)
        seed = int(value["seed"]) if isinstance(value, dict) else int(value)
        sigma = float(value.get("sigma_fraction", 0.25)) if isinstance(value, dict) else 0.25
        return base.replace(perturbation=PerturbationSpec(seed, sigma))

    @staticmethod
    def label(kind: str, value) -> str:
        if kind == "matrix_size":
            return f"{value[0]}x{value[1]}"
        if kind == "perturbation":
            if value in (None, "off"):
                return "off"
            seed = value["seed"] if isinstance(value, dict) else value
            return f"seed{seed}"
        return str(value)

    @classmethod
    def matrix_sizes(cls, lo: int = 3, hi: int = 7) -> "AblationAxis":
        return cls("matrix_size", [(h, w) for h in range(lo, hi + 1) for w in range(lo, hi + 1)])


@dataclass
class SweepResult:
    axis: AblationAxis
    cells: list  # (value, Report)

    def grid_csv(self) -> str:
        """CSV of aggregate scores; rows are h and columns w for size sweeps."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        if self.axis.kind == "matrix_size":
            hs = sorted({v[0] for v, _ in self.cells})
            ws = sorted({v[1] for v, _ in self.cells})
            table = {tuple(v): r.aggregate["score"] for v, r in self.cells}
            writer.writerow(["h\\w"] + ws)
            for h in hs:
                writer.writerow([h] + [f"{table[(h, w)]:.1f}" if (h, w) in table else "" for w in ws])
        else:
            writer.writerow([self.axis.kind, "score", "not_found_rate"])
            for v, r in self.cells:
                writer.writerow([AblationAxis.label(self.axis.kind, v), f"{r.aggregate['score']:.1f}",
                                 f"{r.aggregate['not_found_rate']:.1f}"])
        return buf.getvalue()

    def save(self, results_dir: Union[str, Path]) -> Path:
        root = Path(results_dir) / self.axis.kind
        for value, report in self.cells:
            report.save(root / AblationAxis.label(self.axis.kind, value) / "report.json")
        out = root / "grid.csv"
        out.write_text(self.grid_csv(), encoding="utf-8")
        return out


def _average_reports(reports: Sequence[Report]) -> Report:
    if len(reports) == 1:
        return reports[0]
    first = reports[0]
    agg = dict(first.aggregate)
    for key in ("score", "not_found_rate", "success_rate"):
        agg[key] = round(sum(r.aggregate[key] for r in reports) / len(reports), 1)
    agg["runs"] = [r.aggregate["score"] for r in reports]
    verdicts = [v for r in reports for v in r.verdicts]
    return Report(first.method, first.metric, agg, verdicts, dict(first.config, repeats=len(reports)))


def ablation_sweep(manifest: Union[str, Path, Sequence[Sample]], axis: AblationAxis, method_tag: str,
                   client: ChatClient, *, base_spec: Optional[GridSpec] = None, repeats: int = 1,
                   workers: int = 1) -> SweepResult:
    """Run one report per axis value; samples, seeds and all other settings stay fixed."""
    samples = load_manifest(manifest) if isinstance(manifest, (str, Path)) else list(manifest)
    validate_samples(samples)
    base_spec = base_spec or GridSpec()
    cells = []
    for value in axis.values:
        spec = axis.apply(base_spec, value)
        runs = []
        for k in range(repeats):
            salt = f"repeat{k}" if k else ""
            runs.append(run_benchmark(samples, method_tag, spec, client, workers=workers, cache_salt=salt,
                                      config={"axis": axis.kind,
                                              "value": AblationAxis.label(axis.kind, value)}))
        cells.append((value, _average_reports(runs)))
    return SweepResult(axis, cells)


def ablation_subset(samples: Sequence[Sample], per_source: int = 50, seed: int = 0) -> list[Sample]:
    """Seeded subset of ``per_source`` samples from each ``source`` (the 150x2 preset draws 3 x 50)."""
    by_source: dict = {}
    for s in samples:
        by_source.setdefault(s.source or "default", []).append(s)
    rng = random.Random(seed)
    picked = []
    for name in sorted(by_source):
        pool = by_source[name]
        if any(s.group_id for s in pool):
            groups: dict = {}
            for s in pool:
                groups.setdefault(s.group_id, []).append(s)
            keys = sorted(groups)
            chosen = sorted(rng.sample(keys, min(len(keys), max(1, per_source // 4))))
            picked.extend(s for k in chosen for s in groups[k])
        else:
            idx = sorted(rng.sample(range(len(pool)), min(per_source, len(pool))))
            picked.extend(pool[i] for i in idx)
    return picked


PRESETS = {"ablation-150x2": {"per_source": 50, "repeats": 2}}
