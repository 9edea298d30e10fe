"""Textual guidance templates and prompt bundles."""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence, Union

from PIL import Image

from .exceptions import ArityMismatch, TemplateError, UnknownSetting
from .overlay import OverlayResult

log = logging.getLogger(__name__)

COT_LINE = "Let's think step by step."
METHOD_TAGS = ("naive", "cot", "scaffold", "scaffold_cot", "scaffold_ap_phase1", "scaffold_ap_phase2")
GUIDANCE_SETTINGS = ("single", "double", "sequence")

# Guideline 4 variants, keyed by the kind of answer a task expects.
ANSWER_FORMATS = {
    "choice": "Finally, conclude your answer in format [[ANSWER]], such as [[A]], [[B]], [[C]] or [[D]].",
    "binary": "Finally, you must conclude your answer in format [[ANSWER]], such as [[A]] or [[B]].",
    "yes_no": "Finally, conclude your answer in format [[ANSWER]], such as [[yes]] or [[no]].",
    "true_false": "Finally, conclude your answer in format [[ANSWER]], such as [[true]] or [[false]].",
    "concise": "you need to keep your descriptions concise and clear.",
    "free": "Finally, conclude your answer in format [[ANSWER]].",
    "spots": "Finally, list every answer in the format [spot index, x, y].",
}
DEFAULT_ANSWER_FORMAT = {"single": "choice", "double": "binary", "sequence": "concise"}

_PLACEHOLDER = re.compile(r"(?<!\{)\{([A-Z_]+)\}(?!\})")


def _template_dir() -> Path:
    return Path(str(resources.files("scaffold") / "templates"))


@lru_cache(maxsize=None)
def load_template(name: str, directory: Optional[str] = None) -> str:
    """Read ``<name>.txt`` from the template directory, dropping the final newline."""
    base = Path(directory) if directory else _template_dir()
    path = base / f"{name}.txt"
    if not path.exists():
        raise TemplateError(f"no template named {name!r} in {base}")
    text = path.read_text(encoding="utf-8")
    return text[:-1] if text.endswith("\n") else text


def render_template(template: str, **values) -> str:
    """Substitute ``{NAME}`` placeholders; ``{{`` and ``}}`` render literal braces.

    Values are inserted literally and never re-expanded.
    """
    missing = set(_PLACEHOLDER.findall(template)) - set(values)
    if missing:
        raise TemplateError(f"unresolved placeholders: {sorted(missing)}")
    try:
        return template.format_map({k: str(v) for k, v in values.items()})
    except (KeyError, ValueError, IndexError) as exc:
        raise TemplateError(str(exc)) from exc


def build_guidance(setting: str, h: int, w: int, answer_format_line: Optional[str] = None,
                   template_dir: Optional[str] = None) -> str:
    if setting not in GUIDANCE_SETTINGS:
        raise UnknownSetting(setting)
    if h < 1 or w < 1:
        raise ValueError("h and w must be >= 1")
    if answer_format_line is None:
        answer_format_line = ANSWER_FORMATS[DEFAULT_ANSWER_FORMAT[setting]]
    elif answer_format_line in ANSWER_FORMATS:
        answer_format_line = ANSWER_FORMATS[answer_format_line]
    return render_template(load_template(setting, template_dir),
                           HEIGHT=h, WIDTH=w, ANSWER_FORMAT=answer_format_line)


def compose_with_cot(task_text: str) -> str:
    return f"{COT_LINE}\n{task_text}"


def build_locate_prompt(question: str, template_dir: Optional[str] = None) -> str:
    if not question:
        log.warning("empty question passed to the locate prompt")
    return render_template(load_template("locate", template_dir), QUESTION=question)


def build_followup_prompt(question: str, options_text: str = "",
                          template_dir: Optional[str] = None) -> str:
    return render_template(load_template("followup", template_dir),
                           QUESTION=question, OPTIONS=options_text)


def build_judge_prompt(question: str, reference: str, answer: str,
                       template_dir: Optional[str] = None) -> str:
    return render_template(load_template("judge", template_dir),
                           QUESTION=question, REFERENCE=reference, ANSWER=answer)


def build_keyword_prompt(description: str, template_dir: Optional[str] = None) -> str:
    return render_template(load_template("keywords", template_dir), DESCRIPTION=description)


@dataclass
class PromptBundle:
    text: str
    images: list = field(default_factory=list)
    setting: str = "single"
    method_tag: str = "naive"


def _is_scaffold(method_tag: str) -> bool:
    return method_tag.startswith("scaffold") and method_tag != "scaffold_ap_phase2"


def _check_arity(setting: str, n: int) -> None:
    ok = {"single": n == 1, "double": n == 2, "sequence": n >= 2}
    if setting not in ok:
        raise UnknownSetting(setting)
    if not ok[setting]:
        raise ArityMismatch(f"setting {setting!r} cannot take {n} image(s)")


def build_bundle(
    task_text: str,
    overlay_results: Sequence[Union[OverlayResult, Image.Image]],
    setting: str,
    method_tag: str,
    answer_format_line: Optional[str] = None,
) -> PromptBundle:
    """Assemble text and image attachments for one model call.

    Text is ordered guidance -> CoT line -> task. For ``scaffold_ap_phase1``
    the task text is the question and is wrapped in the locate prompt. For
    ``scaffold_ap_phase2`` the images are the crops and the text is used as
    given.
    """
    if method_tag not in METHOD_TAGS:
        raise ValueError(f"unknown method tag {method_tag!r}")
    items = list(overlay_results)

    if method_tag == "scaffold_ap_phase2":
        images = [r.overlaid_image if isinstance(r, OverlayResult) else r for r in items]
        return PromptBundle(task_text, images, setting, method_tag)

    _check_arity(setting, len(items))
    if not _is_scaffold(method_tag):
        images = [r.original if isinstance(r, OverlayResult) else r for r in items]
        text = compose_with_cot(task_text) if method_tag == "cot" else task_text
        return PromptBundle(text, images, setting, method_tag)

    if not all(isinstance(r, OverlayResult) for r in items):
        raise TypeError("scaffold bundles need OverlayResult inputs")
    want_3d = setting != "single"
    for r in items:
        if r.coordinate_format.startswith("cartesian") and (r.coordinate_format == "cartesian3d") != want_3d:
            raise ValueError(
                f"{r.coordinate_format} labels cannot be paired with {setting} guidance"
            )
    h, w = items[0].grid
    if setting == "single":
        images = [items[0].original, items[0].overlaid_image]
    else:
        images = [r.overlaid_image for r in items]
    parts = [build_guidance(setting, h, w, answer_format_line)]
    if method_tag == "scaffold_cot":
        parts.append(COT_LINE)
    parts.append(build_locate_prompt(task_text) if method_tag == "scaffold_ap_phase1" else task_text)
    return PromptBundle("\n".join(parts), images, setting, method_tag)
