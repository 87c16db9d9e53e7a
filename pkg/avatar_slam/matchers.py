"""Assertion helpers for run traces."""
from __future__ import annotations

import math
from typing import Any, Callable, Iterable, Optional

from .trace import KeyframeEvent, LossStep, RunEvent, RunTrace


class Expectation:
    def __init__(self, subject: Any):
        self.subject = subject

    # --- Loss steps ---
    def to_have_loss_step(
        self,
        *,
        phase: Optional[str] = None,
        frame: Optional[int] = None,
        term: Optional[str] = None,
        times: Optional[int] = None,
        min_times: Optional[int] = None,
        max_times: Optional[int] = None,
    ):
        trace = _ensure_trace(self.subject)
        steps = trace.get_loss_steps()

        def matches(step: LossStep) -> bool:
            if phase and step.phase != phase:
                return False
            if frame is not None and step.frame != frame:
                return False
            if term and term not in step.losses:
                return False
            return True

        _assert_count("loss step", steps, matches, times, min_times, max_times)
        return trace

    def to_have_finite_losses(self, *, phase: Optional[str] = None):
        trace = _ensure_trace(self.subject)
        for step in trace.get_loss_steps(phase):
            bad = {k: v for k, v in step.losses.items() if not math.isfinite(v) or v < 0}
            if bad:
                raise AssertionError(f"Non-finite or negative loss at {step.phase}#{step.iteration}: {bad}")
        return trace

    # --- Keyframes ---
    def to_have_keyframe(
        self,
        *,
        frame: Optional[int] = None,
        reason: Optional[str] = None,
        times: Optional[int] = None,
        min_times: Optional[int] = None,
        max_times: Optional[int] = None,
    ):
        trace = _ensure_trace(self.subject)
        events = trace.get_keyframes()

        def matches(event: KeyframeEvent) -> bool:
            if frame is not None and event.frame != frame:
                return False
            if reason and event.reason != reason:
                return False
            return True

        _assert_count("keyframe", events, matches, times, min_times, max_times)
        return trace

    # --- Events ---
    def to_have_event(
        self,
        *,
        kind: Optional[str] = None,
        name: Optional[str] = None,
        frame: Optional[int] = None,
        payload_contains: Optional[str] = None,
        times: Optional[int] = None,
        min_times: Optional[int] = None,
        max_times: Optional[int] = None,
    ):
        trace = _ensure_trace(self.subject)
        events = trace.get_events()

        def matches(event: RunEvent) -> bool:
            if kind and event.kind != kind:
                return False
            if name and event.name != name:
                return False
            if frame is not None and event.frame != frame:
                return False
            if payload_contains and not _contains(event.payload, payload_contains):
                return False
            return True

        _assert_count("event", events, matches, times, min_times, max_times)
        return trace

    def to_have_warning(self, name: Optional[str] = None, **kwargs):
        return self.to_have_event(kind="warning", name=name, **kwargs)


def expect(subject: Any) -> Expectation:
    return Expectation(subject)


# --- Helpers ---


def _ensure_trace(subject: Any) -> RunTrace:
    if not isinstance(subject, RunTrace):
        raise AssertionError("Expect subject must be a RunTrace")
    return subject


def _contains(container: Any, needle: str) -> bool:
    if container is None:
        return False
    return needle.lower() in str(container).lower()


def _assert_count(
    label: str,
    items: Iterable[Any],
    predicate: Callable[[Any], bool],
    times: Optional[int],
    min_times: Optional[int],
    max_times: Optional[int],
):
    matches = [item for item in items if predicate(item)]
    count = len(matches)
    if times is not None and count != times:
        raise AssertionError(f"Expected {label} {times} time(s); observed {count}")
    if min_times is not None and count < min_times:
        raise AssertionError(f"Expected {label} at least {min_times} time(s); observed {count}")
    if max_times is not None and count > max_times:
        raise AssertionError(f"Expected {label} at most {max_times} time(s); observed {count}")
    if times is None and min_times is None and max_times is None and count == 0:
        samples = items if isinstance(items, list) else list(items)
        raise AssertionError(f"Expected {label} but none recorded; observed={_format_sample(samples)}")


def _format_sample(items: list[Any], limit: int = 3) -> str:
    if not items:
        return "[]"
    shown = items[:limit]
    extra = "" if len(items) <= limit else f", ... ({len(items) - limit} more)"
    return f"[{', '.join(repr(x) for x in shown)}{extra}]"
