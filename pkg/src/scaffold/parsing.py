"""Extraction of answers, ratings, coordinates and spot lists from model output.

Every extractor accepts arbitrary text. Only ``extract_final_answer`` and
``extract_rating`` raise, and only their documented exceptions.
"""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence

from .exceptions import InvalidRating, NoAnswerMarker

log = logging.getLogger(__name__)

DEFAULT_REFUSAL_PATTERNS = ("I'm sorry", "I cannot assist", "couldn't find", "does not contain")
VALID_RATINGS = (0.0, 0.5, 1.0)

_MARKER = re.compile(r"\[\[(.*?)\]\]", re.DOTALL)
_COORD = re.compile(r"\[\[\s*\(\s*(-?\d+)\s*,\s*(-?\d+)\s*\)\s*\]\]")
_BRACKET = re.compile(r"(?<!\[)\[([^\[\]]*)\](?!\])")
_INT = re.compile(r"^\s*[+-]?\d+\s*$")
_APOSTROPHES = str.maketrans({"’": "'", "‘": "'"})


@dataclass(frozen=True)
class Extraction:
    kind: str  # final_answer | rating | coords | spots | refusal
    value: Any
    span: tuple


def normalize_answer(token: str) -> str:
    """Canonical form used for comparisons.

    Single letters become upper case, booleans lower case; surrounding
    brackets, quotes and trailing punctuation are dropped.
    """
    t = token.strip().strip("\"'`").strip()
    t = t.strip("().:;,!? ").strip()
    low = t.lower()
    if low in ("yes", "no", "true", "false"):
        return low
    if len(t) == 1 and t.isalpha():
        return t.upper()
    return t


def _last_marker(text: str):
    matches = list(_MARKER.finditer(text))
    if not matches:
        raise NoAnswerMarker("no [[...]] marker in response")
    return matches[-1]


def extract_final_answer_span(text: str) -> Extraction:
    m = _last_marker(text)
    return Extraction("final_answer", normalize_answer(m.group(1)), m.span())


def extract_final_answer(text: str) -> str:
    """Return the normalised payload of the last ``[[...]]`` marker."""
    return extract_final_answer_span(text).value


def extract_rating(text: str) -> float:
    m = _last_marker(text)
    payload = m.group(1).strip()
    try:
        value = float(payload)
    except ValueError:
        raise InvalidRating(f"rating payload {payload!r} is not a number") from None
    if value not in VALID_RATINGS:
        raise InvalidRating(f"rating {value} not in {{0, 0.5, 1}}")
    return value


def extract_coordinates(text: str) -> list[tuple[int, int]]:
    """All ``[[(x,y)]]`` integer pairs in order of appearance, first occurrence kept."""
    seen, out = set(), []
    for m in _COORD.finditer(text):
        pair = (int(m.group(1)), int(m.group(2)))
        if pair not in seen:
            seen.add(pair)
            out.append(pair)
    return out


def format_coordinates(coords: Iterable[tuple[int, int]]) -> str:
    """Inverse of :func:`extract_coordinates` for deduplicated lists."""
    return " ".join(f"[[({x},{y})]]" for x, y in coords)


def extract_spots_with_warnings(text: str) -> tuple[list[tuple[int, int, int]], int]:
    spots, warnings = [], 0
    for m in _BRACKET.finditer(text):
        fields = m.group(1).split(",")
        if not all(_INT.match(f) for f in fields):
            continue  # prose in brackets, e.g. "[Question]"
        if len(fields) != 3:
            warnings += 1
            continue
        spots.append(tuple(int(f) for f in fields))
    if warnings:
        log.warning("skipped %d malformed spot entries", warnings)
    return spots, warnings


def extract_spots(text: str) -> list[tuple[int, int, int]]:
    """Bracketed ``[index, x, y]`` integer triples in order of appearance."""
    return extract_spots_with_warnings(text)[0]


def load_refusal_patterns(path) -> list[str]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [line.strip() for line in lines if line.strip() and not line.lstrip().startswith("#")]


def detect_refusal(text: str, patterns: Optional[Sequence[str]] = None) -> bool:
    """True when ``text`` apologises or gives up and commits to no ``[[...]]`` answer."""
    if _MARKER.search(text):
        return False
    hay = text.translate(_APOSTROPHES).lower()
    return any(p.translate(_APOSTROPHES).lower() in hay for p in (patterns or DEFAULT_REFUSAL_PATTERNS))


_KEYWORD_LINE = re.compile(r"^\s*(objects|behaviors|behaviours)\s*:\s*\[\[(.*?)\]\]", re.I | re.M)


def extract_keyword_lists(text: str) -> tuple[list[str], list[str]]:
    """Parse ``Objects: [[a, b]]`` / ``Behaviors: [[c]]`` lines; missing lines give []."""
    found = {"objects": [], "behaviors": []}
    for m in _KEYWORD_LINE.finditer(text):
        key = "objects" if m.group(1).lower() == "objects" else "behaviors"
        found[key] = [k.strip().lower() for k in m.group(2).split(",") if k.strip()]
    return found["objects"], found["behaviors"]
