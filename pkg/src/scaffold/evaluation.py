"""Benchmark manifests, per-sample scoring and report aggregation."""
from __future__ import annotations

import json
import logging
import time
from collections import Counter, OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional, Sequence, Union

from .client import ChatClient, Message
from .cvmetrics import HoughCircleDetector, score_spotting
from .exceptions import (
    EmptyRun,
    IncompleteGroup,
    InvalidRating,
    ManifestError,
    NoAnswerMarker,
    ScaffoldError,
)
from .overlay import GridSpec, overlay_for_setting
from .parsing import (
    Extraction,
    detect_refusal,
    extract_final_answer_span,
    extract_keyword_lists,
    extract_rating,
    extract_spots,
    normalize_answer,
)
from .prompting import METHOD_TAGS, build_bundle, build_judge_prompt, build_keyword_prompt
from .utils.validation import load_image

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
METRICS = ("accuracy", "group_score", "judge", "spot_accuracy", "keyword_f1")
JUDGE_REMINDER = '\n\nRemember to end with your rating in the format "Rating: [[rating]]" using 0, 0.5, or 1.'


@dataclass
class Sample:
    id: str
    images: list
    question: str
    ground_truth: Any
    setting: str = "single"
    metric: str = "accuracy"
    options: Optional[list] = None
    group_id: Optional[str] = None
    answer_image: Optional[str] = None
    answer_format: Optional[str] = None
    spot_units: Optional[str] = None
    source: Optional[str] = None

    def task_text(self) -> str:
        if not self.options:
            return self.question
        return f"{self.question}\nOptions: {self.options_text()}"

    def options_text(self) -> str:
        return " ".join(self.options or [])


def _sample_from_record(record: dict, base: Path, lineno: int) -> Sample:
    version = record.pop("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ManifestError(f"line {lineno}: unsupported schema_version {version}")
    try:
        sample = Sample(**record)
    except TypeError as exc:
        raise ManifestError(f"line {lineno}: {exc}") from None
    if sample.metric not in METRICS:
        raise ManifestError(f"line {lineno}: unknown metric {sample.metric!r}")
    sample.images = [str((base / p) if not Path(p).is_absolute() else p) for p in sample.images]
    if sample.answer_image:
        sample.answer_image = str(base / sample.answer_image)
    if sample.metric == "spot_accuracy" and not sample.answer_image:
        raise ManifestError(f"line {lineno}: spot_accuracy samples need answer_image")
    return sample


def load_manifest(path: Union[str, Path]) -> list[Sample]:
    """Read a JSON Lines manifest; relative image paths resolve against its directory."""
    path = Path(path)
    base = path.parent
    samples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"line {lineno}: {exc}") from None
            samples.append(_sample_from_record(record, base, lineno))
    validate_samples(samples)
    return samples


def validate_samples(samples: Sequence[Sample]) -> None:
    if not samples:
        raise EmptyRun("manifest has no samples")
    metrics = {s.metric for s in samples}
    if len(metrics) != 1:
        raise EmptyRun(f"manifest mixes metrics {sorted(metrics)}")
    ids = Counter(s.id for s in samples)
    dup = [k for k, n in ids.items() if n > 1]
    if dup:
        raise ManifestError(f"duplicate sample ids: {dup[:5]}")
    if metrics == {"group_score"}:
        groups = Counter(s.group_id for s in samples)
        bad = {g: n for g, n in groups.items() if g is None or n != 4}
        if bad:
            raise IncompleteGroup(f"groups must have exactly 4 samples: {bad}")


@dataclass
class Verdict:
    sample_id: str
    raw_response: str = ""
    parsed: Optional[Extraction] = None
    score: float = 0.0
    refusal: bool = False
    latency_ms: float = 0.0
    cached: bool = False
    group_id: Optional[str] = None
    notes: list = field(default_factory=list)

    def to_dict(self, timing: bool = False) -> dict:
        out = {
            "sample_id": self.sample_id,
            "raw_response": self.raw_response,
            "parsed": None if self.parsed is None else {
                "kind": self.parsed.kind, "value": self.parsed.value, "span": list(self.parsed.span)},
            "score": self.score,
            "refusal": self.refusal,
            "cached": self.cached,
            "group_id": self.group_id,
            "notes": list(self.notes),
        }
        if timing:
            out["latency_ms"] = self.latency_ms
        return out


# ---------------------------------------------------------------------------
# scoring


def score_accuracy(parsed_token, ground_truth) -> int:
    if parsed_token is None or isinstance(parsed_token, Exception):
        return 0
    if isinstance(ground_truth, (list, tuple)):
        return int(any(score_accuracy(parsed_token, g) for g in ground_truth))
    return int(normalize_answer(str(parsed_token)) == normalize_answer(str(ground_truth)))


def score_group(scores: Sequence[float]) -> int:
    """1 when all four questions of a group were answered correctly."""
    if len(scores) != 4:
        raise IncompleteGroup(f"a group needs 4 verdicts, got {len(scores)}")
    return int(all(s == 1 for s in scores))


def judge_score(question: str, reference: str, answer: str, judge_client: ChatClient) -> tuple[float, list]:
    """Rate ``answer`` against ``reference`` with the judge prompt.

    Returns ``(rating, notes)``. A reply without a usable rating is retried
    once with a reminder; a second failure scores 0 with a note.
    """
    prompt = build_judge_prompt(question, reference, answer)
    notes = []
    for attempt in range(2):
        text = judge_client.ask(prompt if attempt == 0 else prompt + JUDGE_REMINDER).text
        try:
            return extract_rating(text), notes
        except (NoAnswerMarker, InvalidRating) as exc:
            notes.append(f"judge_unparseable: {exc}")
    notes.append("judge_failed")
    return 0.0, notes


def f1_multiset(pred: Sequence[str], gold: Sequence[str]) -> float:
    pred_c = Counter(p.strip().lower() for p in pred)
    gold_c = Counter(g.strip().lower() for g in gold)
    if not pred_c and not gold_c:
        return 1.0
    if not pred_c or not gold_c:
        return 0.0
    overlap = sum((pred_c & gold_c).values())
    if overlap == 0:
        return 0.0
    precision = overlap / sum(pred_c.values())
    recall = overlap / sum(gold_c.values())
    return 2 * precision * recall / (precision + recall)


def mementos_f1(pred_objects, gt_objects, pred_behaviors, gt_behaviors) -> float:
    return (f1_multiset(pred_objects, gt_objects) + f1_multiset(pred_behaviors, gt_behaviors)) / 2


def aggregate(verdicts: Sequence[Verdict], metric: str) -> dict:
    """Mean score x100 to one decimal, plus Not Found and Success rates (percent)."""
    if not verdicts:
        raise EmptyRun("no verdicts to aggregate")
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}")
    total = len(verdicts)
    if metric == "group_score":
        groups: "OrderedDict[str, list]" = OrderedDict()
        for v in verdicts:
            groups.setdefault(v.group_id, []).append(v.score)
        unit_scores = [score_group(s) for s in groups.values()]
    else:
        unit_scores = [v.score for v in verdicts]
    mean = sum(unit_scores) / len(unit_scores)
    refusals = sum(v.refusal for v in verdicts)
    correct = sum(v.score == 1 for v in verdicts)
    return {
        "metric": metric,
        "score": round(100 * mean, 1),
        "n": len(unit_scores),
        "not_found_rate": round(100 * refusals / total, 1),
        "success_rate": round(100 * correct / total, 1),
    }


# ---------------------------------------------------------------------------
# running


@dataclass
class Report:
    method: str
    metric: str
    aggregate: dict
    verdicts: list
    config: dict = field(default_factory=dict)

    def to_dict(self, timing: bool = False) -> dict:
        return {
            "method": self.method,
            "metric": self.metric,
            "aggregate": self.aggregate["score"],
            "not_found_rate": self.aggregate["not_found_rate"],
            "success_rate": self.aggregate["success_rate"],
            "n": self.aggregate["n"],
            "config": self.config,
            "verdicts": [v.to_dict(timing) for v in self.verdicts],
        }

    def to_json(self, timing: bool = False) -> str:
        return json.dumps(self.to_dict(timing), indent=2, ensure_ascii=False, default=str) + "\n"

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json(), encoding="utf-8")
        return path


METRIC_LABELS = {
    "accuracy": "Accuracy",
    "group_score": "Group Score",
    "judge": "LLM as Judge",
    "spot_accuracy": "Accuracy",
    "keyword_f1": "LLM as Judge",
}


def format_table(rows: Sequence[tuple[str, Report]]) -> str:
    """Plain-text table in the Dataset | Size | Metric | <method> layout."""
    methods = list(OrderedDict.fromkeys(r.method for _, r in rows))
    datasets = list(OrderedDict.fromkeys(name for name, _ in rows))
    cells = {(name, r.method): r for name, r in rows}
    header = ["Dataset", "Size", "Metric"] + methods
    lines = []
    for name in datasets:
        first = next(r for (n, _m), r in cells.items() if n == name)
        line = [name, str(len(first.verdicts)), METRIC_LABELS[first.metric]]
        line += [f"{cells[(name, m)].aggregate['score']:.1f}" if (name, m) in cells else "-" for m in methods]
        lines.append(line)
    widths = [max(len(str(x)) for x in col) for col in zip(header, *lines)]
    fmt = " | ".join(f"{{:<{w}}}" for w in widths)
    sep = "-+-".join("-" * w for w in widths)
    return "\n".join([fmt.format(*header), sep] + [fmt.format(*line) for line in lines])


def _answer_format_for(sample: Sample) -> Optional[str]:
    if sample.answer_format:
        return sample.answer_format
    if sample.metric == "spot_accuracy":
        return "spots"
    if sample.metric in ("judge", "keyword_f1") and sample.setting != "sequence":
        return "free"
    return None


def prepare_bundle(sample: Sample, method_tag: str, grid_spec: GridSpec):
    images = [load_image(p) for p in sample.images]
    scaffolded = method_tag.startswith("scaffold")
    overlays = overlay_for_setting(images, grid_spec, sample.setting) if scaffolded else images
    bundle = build_bundle(sample.task_text(), overlays, sample.setting,
                          "scaffold" if method_tag.startswith("scaffold_ap") else method_tag,
                          _answer_format_for(sample))
    return bundle, overlays


def _spot_predictions(sample: Sample, spots, overlays, scaffolded: bool):
    units = sample.spot_units or ("grid" if scaffolded else "pixel")
    if units == "pixel":
        return [(x, y) for _i, x, y in spots]
    overlay = overlays[0]
    preds = []
    for _i, x, y in spots:
        try:
            p = overlay.lookup(x, y)
        except KeyError:
            continue
        preds.append((p.pixel_u, p.pixel_v))
    return preds


def score_response(sample: Sample, text: str, *, judge_client: Optional[ChatClient] = None,
                   overlays=None, scaffolded: bool = False,
                   detector: Optional[HoughCircleDetector] = None) -> Verdict:
    """Parse one response and score it with the sample's metric."""
    v = Verdict(sample.id, text, group_id=sample.group_id)
    v.refusal = detect_refusal(text)
    metric = sample.metric
    if metric in ("accuracy", "group_score"):
        try:
            v.parsed = extract_final_answer_span(text)
        except NoAnswerMarker:
            v.notes.append("no_answer_marker")
            return v
        v.score = float(score_accuracy(v.parsed.value, sample.ground_truth))
    elif metric == "judge":
        if judge_client is None:
            raise ScaffoldError("judge metric needs a judge client")
        try:
            answer = extract_final_answer_span(text)
            v.parsed = answer
        except NoAnswerMarker:
            pass
        v.score, notes = judge_score(sample.question, str(sample.ground_truth), text, judge_client)
        v.notes.extend(notes)
        if v.parsed is None:
            v.parsed = Extraction("rating", v.score, (0, len(text)))
    elif metric == "keyword_f1":
        if judge_client is None:
            raise ScaffoldError("keyword_f1 metric needs a judge client")
        reply = judge_client.ask(build_keyword_prompt(text)).text
        objects, behaviors = extract_keyword_lists(reply)
        gt = sample.ground_truth or {}
        v.score = mementos_f1(objects, gt.get("objects", []), behaviors, gt.get("behaviors", []))
        v.parsed = Extraction("final_answer", {"objects": objects, "behaviors": behaviors}, (0, len(text)))
    elif metric == "spot_accuracy":
        spots = extract_spots(text)
        v.parsed = Extraction("spots", spots, (0, len(text)))
        preds = _spot_predictions(sample, spots, overlays or [], scaffolded)
        expected = int(sample.ground_truth) if sample.ground_truth else 10
        result = score_spotting(preds, sample.answer_image, expected, detector)
        v.score = result.score
        v.notes.append(f"matched={result.matched}")
    v.score = min(max(float(v.score), 0.0), 1.0)
    return v


def evaluate_sample(sample: Sample, method_tag: str, grid_spec: GridSpec, client: ChatClient, *,
                    judge_client: Optional[ChatClient] = None, cache_salt: str = "",
                    detector: Optional[HoughCircleDetector] = None) -> Verdict:
    start = time.perf_counter()
    try:
        bundle, overlays = prepare_bundle(sample, method_tag, grid_spec)
        response = client.send(client.request([Message.user(bundle.text, bundle.images)], cache_salt))
        v = score_response(sample, response.text, judge_client=judge_client or client,
                           overlays=overlays, scaffolded=method_tag.startswith("scaffold"),
                           detector=detector)
        v.cached = response.from_cache
    except (ScaffoldError, OSError, ValueError) as exc:
        log.warning("sample %s failed: %s", sample.id, exc)
        v = Verdict(sample.id, group_id=sample.group_id, notes=[f"error: {type(exc).__name__}: {exc}"])
    v.latency_ms = round((time.perf_counter() - start) * 1000, 3)
    return v


def run_samples(samples: Sequence[Sample], evaluate: Callable[[Sample], Verdict],
                workers: int = 1) -> list[Verdict]:
    if workers <= 1:
        return [evaluate(s) for s in samples]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(evaluate, samples))


def run_benchmark(manifest: Union[str, Path, Sequence[Sample]], method_tag: str, grid_spec: GridSpec,
                  client: ChatClient, *, judge_client: Optional[ChatClient] = None, workers: int = 1,
                  cache_salt: str = "", config: Optional[dict] = None, cells: float = 1,
                  crop_dir: Optional[Union[str, Path]] = None) -> Report:
    """Evaluate every sample with one prompting method and aggregate the scores."""
    if method_tag not in METHOD_TAGS or method_tag == "scaffold_ap_phase2":
        raise ValueError(f"unsupported method tag {method_tag!r}")
    samples = load_manifest(manifest) if isinstance(manifest, (str, Path)) else list(manifest)
    validate_samples(samples)
    if method_tag.startswith("scaffold_ap"):
        from .pipelines import active_perception_run

        def evaluate(s):
            return active_perception_run(s, grid_spec, client, cells=cells, cache_salt=cache_salt,
                                         crop_dir=crop_dir)
    else:
        detector = HoughCircleDetector()

        def evaluate(s):
            return evaluate_sample(s, method_tag, grid_spec, client, judge_client=judge_client,
                                   cache_salt=cache_salt, detector=detector)
    verdicts = run_samples(samples, evaluate, workers)
    metric = samples[0].metric
    snapshot = {"grid": asdict(grid_spec), "method": method_tag, "model": client.model_id}
    snapshot.update(config or {})
    return Report(method_tag, metric, aggregate(verdicts, metric), verdicts, snapshot)

