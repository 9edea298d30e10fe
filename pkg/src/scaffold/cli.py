"""Command-line entry point: ``scaffold {overlay,prompt,run,ablate,perceive}``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import random
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .client import CACHE_DIR_ENV, ChatClient, MockProvider, OpenAIChatProvider
from .evaluation import Report, format_table, load_manifest, run_benchmark, validate_samples
from .exceptions import ScaffoldError
from .overlay import COLOR_STRATEGIES, COORDINATE_FORMATS, GridSpec, PerturbationSpec, overlay_for_setting
from .pipelines import PRESETS, AblationAxis, ablation_subset, ablation_sweep
from .prompting import ANSWER_FORMATS, METHOD_TAGS, build_guidance, compose_with_cot
from .utils.validation import load_image

log = logging.getLogger("scaffold")

DEFAULTS = {
    "h": 6,
    "w": 6,
    "coordinate_format": "cartesian2d",
    "color_strategy": "binary",
    "perturb": False,
    "sigma_fraction": 0.25,
    "dot_radius_px": None,
    "label_px": None,
    "seed": 0,
    "method": "scaffold",
    "metric": None,
    "provider": "openai",
    "endpoint": "https://api.openai.com/v1/chat/completions",
    "model": "gpt-4-vision-preview",
    "mock": None,
    "concurrency": 4,
    "budget": None,
    "rate": 1.0,
    "cache_dir": None,
    "out": "scaffold_out",
    "cells": 1.0,
    "shuffle": False,
}

AXIS_NAMES = {
    "matrix-size": "matrix_size",
    "color": "color_strategy",
    "format": "coordinate_format",
    "perturbation": "perturbation",
}


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)

    def __getattr__(self, name):
        try:
            return self.values[name]
        except KeyError:
            raise AttributeError(name) from None

    def grid_spec(self) -> GridSpec:
        perturbation = PerturbationSpec(int(self.seed), float(self.sigma_fraction)) if self.perturb else None
        try:
            return GridSpec(int(self.h), int(self.w), self.coordinate_format, self.color_strategy,
                            perturbation, self.dot_radius_px, self.label_px)
        except (TypeError, ValueError) as exc:
            raise UsageError(str(exc)) from None

    def snapshot(self) -> dict:
        skip = {"command", "func", "images", "manifest", "task"}
        return {k: v for k, v in sorted(self.values.items()) if k not in skip and not callable(v)}


def load_config(path: Optional[str]) -> dict:
    if not path:
        return {}
    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    if not isinstance(data, dict):
        raise UsageError("config file must hold a mapping")
    unknown = set(data) - set(DEFAULTS)
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    return data


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Merge built-in defaults < config file < command-line flags."""
    values = dict(DEFAULTS)
    values.update(load_config(getattr(args, "config", None)))
    for key, value in vars(args).items():
        if key == "config":
            continue
        if value is not None or key not in values:
            values[key] = value
    return RunConfig(values)


# ---------------------------------------------------------------------------


def _grid_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("dot matrix")
    g.add_argument("--h", type=int, help="matrix rows (default 6)")
    g.add_argument("--w", type=int, help="matrix columns (default 6)")
    g.add_argument("--format", dest="coordinate_format", choices=COORDINATE_FORMATS)
    g.add_argument("--color", dest="color_strategy", choices=COLOR_STRATEGIES)
    g.add_argument("--perturb", action="store_const", const=True, help="jitter dots (seeded by --seed)")
    g.add_argument("--sigma-fraction", type=float)
    g.add_argument("--dot-radius", dest="dot_radius_px", type=int)
    g.add_argument("--label-px", type=int)
    g.add_argument("--seed", type=int)


def _client_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model access")
    g.add_argument("--config", help="YAML config file")
    g.add_argument("--mock", help="fixture file or directory; no network access")
    g.add_argument("--endpoint")
    g.add_argument("--model")
    g.add_argument("--concurrency", type=int)
    g.add_argument("--budget", type=int, help="maximum number of uncached requests")
    g.add_argument("--rate", type=float, help="requests per second (0 disables limiting)")
    g.add_argument("--cache-dir")
    g.add_argument("--out", help="output directory")
    g.add_argument("--shuffle", action="store_const", const=True, help="shuffle samples with --seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scaffold", description="Dot-matrix visual prompting toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("overlay", help="overlay dot matrices on images")
    p.add_argument("images", nargs="+")
    p.add_argument("--setting", choices=("single", "double", "sequence"), default="single")
    p.add_argument("--out")
    p.add_argument("--config")
    _grid_flags(p)
    p.set_defaults(func=cmd_overlay)

    p = sub.add_parser("prompt", help="print the assembled guidance and task")
    p.add_argument("task", nargs="?", default="")
    p.add_argument("--setting", choices=("single", "double", "sequence"), required=True)
    p.add_argument("--h", type=int)
    p.add_argument("--w", type=int)
    p.add_argument("--cot", action="store_true")
    p.add_argument("--answer-format", help=f"one of {sorted(ANSWER_FORMATS)} or literal text")
    p.set_defaults(func=cmd_prompt)

    p = sub.add_parser("run", help="evaluate a benchmark manifest")
    p.add_argument("manifest")
    p.add_argument("--method", choices=[m for m in METHOD_TAGS if m != "scaffold_ap_phase2"])
    p.add_argument("--metric", choices=("accuracy", "group_score", "judge", "spot_accuracy", "keyword_f1"))
    _grid_flags(p)
    _client_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", help="sweep one dot-matrix factor")
    p.add_argument("manifest")
    p.add_argument("--axis", choices=sorted(AXIS_NAMES), required=True)
    p.add_argument("--min", dest="size_min", type=int, default=3)
    p.add_argument("--max", dest="size_max", type=int, default=7)
    p.add_argument("--values", nargs="+", help="explicit axis values")
    p.add_argument("--method", choices=("scaffold", "scaffold_cot"))
    p.add_argument("--preset", choices=sorted(PRESETS))
    _grid_flags(p)
    _client_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("perceive", help="two-phase locate/crop/answer run")
    p.add_argument("manifest")
    p.add_argument("--cells", type=float, help="crop half-extent in dot spacings (default 1)")
    _grid_flags(p)
    _client_flags(p)
    p.set_defaults(func=cmd_perceive)
    return parser


# ---------------------------------------------------------------------------


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_samples(cfg: RunConfig):
    path = Path(cfg.manifest)
    if not path.is_file():
        raise UsageError(f"manifest not found: {path}")
    try:
        samples = load_manifest(path)
        if cfg.values.get("metric"):
            for s in samples:
                s.metric = cfg.metric
            validate_samples(samples)
    except ScaffoldError as exc:
        raise UsageError(str(exc)) from None
    if cfg.shuffle:
        random.Random(cfg.seed).shuffle(samples)
    return samples


def make_client(cfg: RunConfig, samples=None) -> ChatClient:
    cache_dir = cfg.cache_dir or os.environ.get(CACHE_DIR_ENV) or str(Path(cfg.out) / "cache")
    if cfg.mock:
        try:
            provider = MockProvider.from_fixture(cfg.mock)
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot load mock fixtures: {exc}") from None
        fixture_path = Path(cfg.mock)
        fixture_path = fixture_path / "fixtures.json" if fixture_path.is_dir() else fixture_path
        data = json.loads(fixture_path.read_text(encoding="utf-8"))
        if data.get("echo_ground_truth") and samples:
            provider.rules = sorted(provider.rules + echo_rules(samples), key=lambda r: -len(r[0]))
        rate = None
    else:
        try:
            provider = OpenAIChatProvider(cfg.endpoint)
        except ScaffoldError as exc:
            raise UsageError(str(exc)) from None
        rate = cfg.rate or None
    return ChatClient(provider, cfg.model, cache_dir=cache_dir, max_in_flight=max(1, int(cfg.concurrency)),
                      rate_per_s=rate, budget=cfg.budget)


def echo_rules(samples) -> list[tuple[str, str]]:
    """Mock rules answering every sample's question with its ground truth."""
    rules = []
    for s in samples:
        gt = s.ground_truth[0] if isinstance(s.ground_truth, list) else s.ground_truth
        rules.append((s.question, f"[[{gt}]]"))
    return rules


def cmd_overlay(cfg: RunConfig) -> int:
    spec = cfg.grid_spec()
    out = _out_dir(cfg)
    try:
        images = [load_image(p) for p in cfg.images]
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        results = overlay_for_setting(images, spec, cfg.setting)
    except ScaffoldError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2 if "setting" in str(exc) else 1
    for path, result in zip(cfg.images, results):
        target = out / f"{Path(path).stem}.scaffold.png"
        png, sidecar = result.save(target)
        first, last = result.labels[0], result.labels[-1]
        print(f"{png}: {len(result.placements)} dots {first}..{last} -> {sidecar.name}")
    return 0


def cmd_prompt(cfg: RunConfig) -> int:
    h = cfg.h or DEFAULTS["h"]
    w = cfg.w or DEFAULTS["w"]
    text = build_guidance(cfg.setting, h, w, cfg.answer_format)
    if cfg.cot:
        text += "\n" + compose_with_cot(cfg.task)
    elif cfg.task:
        text += "\n" + cfg.task
    print(text)
    return 0


def _print_report(name: str, report: Report) -> None:
    print(format_table([(name, report)]))
    agg = report.aggregate
    print(f"not found rate: {agg['not_found_rate']:.1f}  success rate: {agg['success_rate']:.1f}")


def cmd_run(cfg: RunConfig) -> int:
    samples = _load_samples(cfg)
    spec = cfg.grid_spec()
    client = make_client(cfg, samples)
    report = run_benchmark(samples, cfg.method, spec, client, workers=int(cfg.concurrency),
                           config=cfg.snapshot())
    out = _out_dir(cfg)
    report.save(out / "report.json")
    _print_report(Path(cfg.manifest).stem, report)
    return 0


def _axis_from_args(cfg: RunConfig) -> AblationAxis:
    kind = AXIS_NAMES[cfg.axis]
    if kind == "matrix_size":
        if cfg.values_list:
            values = [tuple(int(x) for x in v.lower().split("x")) for v in cfg.values_list]
        else:
            values = AblationAxis.matrix_sizes(cfg.size_min, cfg.size_max).values
    elif kind == "color_strategy":
        values = cfg.values_list or list(COLOR_STRATEGIES)
    elif kind == "coordinate_format":
        values = cfg.values_list or [f for f in COORDINATE_FORMATS if f != "cartesian3d"]
    else:
        raw = cfg.values_list or ["off", str(cfg.seed)]
        values = [None if v == "off" else int(v) for v in raw]
    try:
        return AblationAxis(kind, values)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def cmd_ablate(cfg: RunConfig) -> int:
    cfg.values["values_list"] = cfg.values.pop("values", None)
    samples = _load_samples(cfg)
    repeats = 1
    if cfg.preset:
        preset = PRESETS[cfg.preset]
        samples = ablation_subset(samples, preset["per_source"], int(cfg.seed))
        repeats = preset["repeats"]
    axis = _axis_from_args(cfg)
    client = make_client(cfg, samples)
    method = cfg.method if cfg.method in ("scaffold", "scaffold_cot") else "scaffold"
    result = ablation_sweep(samples, axis, method, client, base_spec=cfg.grid_spec(), repeats=repeats,
                            workers=int(cfg.concurrency))
    grid_path = result.save(_out_dir(cfg) / "results")
    print(result.grid_csv(), end="")
    print(f"wrote {grid_path}")
    return 0


def cmd_perceive(cfg: RunConfig) -> int:
    samples = _load_samples(cfg)
    client = make_client(cfg, samples)
    out = _out_dir(cfg)
    report = run_benchmark(samples, "scaffold_ap_phase1", cfg.grid_spec(), client,
                           workers=int(cfg.concurrency), config=cfg.snapshot(), cells=float(cfg.cells),
                           crop_dir=out / "crops")
    report.save(out / "perception.json")
    _print_report(Path(cfg.manifest).stem, report)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with code 2
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return args.func(cfg)
    except UsageError as exc:
        print(f"scaffold: error: {exc}", file=sys.stderr)
        return 2
    except ScaffoldError as exc:
        print(f"scaffold: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
