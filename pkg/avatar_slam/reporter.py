"""Console reporter for dataset generation, SLAM runs and metric rows."""
from __future__ import annotations

import math
import os
import sys
import traceback
from typing import Dict, Mapping, Optional

import colorama

colorama.init()


_DEF = "\033[0m"
_GREEN = "\033[32m"
_RED = "\033[31m"
_YELLOW = "\033[33m"
_DIM = "\033[2m"


def _color_enabled() -> bool:
    return os.getenv("AVATAR_SLAM_COLOR", "1") != "0"


def _c(text: str, color: str) -> str:
    if not _color_enabled():
        return text
    return f"{color}{text}{_DEF}"


def print_dataset_summary(path: str, frames: int, scene_gaussians: int, avatar_vertices: int, seed: int):
    print(_c("✓", _GREEN) + f" wrote {path}")
    print(f"    → frames={frames} scene_gaussians={scene_gaussians} avatar_vertices={avatar_vertices} seed={seed}")


def print_run_summary(frames: int, keyframes: int, warnings: int, flagged_frames: int, seconds: float):
    mark = _c("✓", _GREEN) if flagged_frames == 0 else _c("✗", _YELLOW)
    print(f"{mark} tracked {frames} frame(s), {keyframes} keyframe(s) ({seconds:.1f}s)")
    if warnings:
        print(_c(f"    → {warnings} warning(s) recorded in the run log", _YELLOW))
    if flagged_frames:
        print(_c(f"    → {flagged_frames} frame(s) rolled back after a non-finite loss", _YELLOW))


def print_metrics(row: Mapping[str, object], thresholds: Optional[Dict[str, float]] = None):
    """Print one metric row; keys listed in thresholds get a pass/fail mark."""
    thresholds = thresholds or {}
    for key, value in row.items():
        text = _format_value(value)
        if key in thresholds and isinstance(value, float):
            ok = value <= thresholds[key]
            mark = _c("✓", _GREEN) if ok else _c("✗", _RED)
            print(f"{mark} {key} = {text} " + _c(f"(≤ {thresholds[key]:g})", _DIM))
        else:
            print(f"  {key} = {text}")


def print_error(err: BaseException, to_stderr: bool = False):
    print(_c("✗ " + _format_error(err), _RED), file=sys.stderr if to_stderr else sys.stdout)


def _format_value(value: object) -> str:
    if isinstance(value, float):
        if math.isinf(value):
            return "inf"
        return f"{value:.6g}"
    return str(value)


def _format_error(err: BaseException) -> str:
    try:
        tb = traceback.TracebackException.from_exception(err)
        parts = list(tb.format_exception_only())
        rendered = "\n".join([p.rstrip() for p in parts if p]).strip()
        if rendered:
            return rendered
    except Exception:
        pass
    name = err.__class__.__name__
    message = str(err)
    return f"{name}: {message}" if message else name
