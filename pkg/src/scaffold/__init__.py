"""Dot-matrix visual prompting toolkit for multimodal models."""
from .client import ChatClient, ChatRequest, ChatResponse, Message, MockProvider, OpenAIChatProvider
from .cvmetrics import HoughCircleDetector, greedy_match, hough_circles, score_spotting
from .evaluation import Report, Sample, Verdict, aggregate, load_manifest, run_benchmark
from .exceptions import *  # noqa: F401,F403
from .overlay import (
    DotMatrixOverlay,
    DotPlacement,
    GridSpec,
    OverlayResult,
    PerturbationSpec,
    compute_grid,
    overlay_for_setting,
    overlay_image,
)
from .parsing import detect_refusal, extract_coordinates, extract_final_answer, extract_rating, extract_spots
from .pipelines import AblationAxis, ablation_sweep, active_perception_run, crop_windows
from .prompting import PromptBundle, build_bundle, build_guidance

__version__ = "0.1.0"
