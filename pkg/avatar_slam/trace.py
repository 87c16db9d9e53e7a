"""Run log primitives for tracking, mapping and pretraining."""
from __future__ import annotations

import json
from contextvars import ContextVar
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union


@dataclass
class LossStep:
    phase: str
    iteration: int
    losses: Dict[str, float]
    frame: Optional[int] = None


@dataclass
class KeyframeEvent:
    frame: int
    reason: str
    window: List[int] = field(default_factory=list)
    evicted: Optional[int] = None


@dataclass
class RunEvent:
    kind: str
    name: Optional[str] = None
    frame: Optional[int] = None
    payload: Optional[Any] = None


class RunTrace:
    def __init__(self, record_losses: bool = True):
        self.record_losses = record_losses
        self._loss_steps: List[LossStep] = []
        self._keyframes: List[KeyframeEvent] = []
        self._events: List[RunEvent] = []
        self._order: List[Union[LossStep, KeyframeEvent, RunEvent]] = []

    def record_loss_step(self, step: Optional[LossStep] = None, **kwargs):
        """Record one optimizer iteration; accepts LossStep or keyword args."""
        if not self.record_losses:
            return
        if step is None:
            losses = {k: float(v) for k, v in kwargs.pop("losses", {}).items()}
            step = LossStep(losses=losses, **kwargs)
        self._loss_steps.append(step)
        self._order.append(step)

    def record_keyframe(self, event: Optional[KeyframeEvent] = None, **kwargs):
        if event is None:
            event = KeyframeEvent(**kwargs)
        self._keyframes.append(event)
        self._order.append(event)

    def record_event(self, event: Optional[RunEvent] = None, **kwargs):
        if event is None:
            event = RunEvent(**kwargs)
        self._events.append(event)
        self._order.append(event)

    def warn(self, name: str, frame: Optional[int] = None, **payload):
        self.record_event(kind="warning", name=name, frame=frame, payload=payload or None)

    def get_loss_steps(self, phase: Optional[str] = None) -> List[LossStep]:
        if phase is None:
            return list(self._loss_steps)
        return [s for s in self._loss_steps if s.phase == phase]

    def get_keyframes(self) -> List[KeyframeEvent]:
        return list(self._keyframes)

    def get_events(self) -> List[RunEvent]:
        return list(self._events)

    def get_warnings(self) -> List[RunEvent]:
        return [e for e in self._events if e.kind == "warning"]

    def get_steps(self) -> List[Any]:
        return list(self._order)

    def write_jsonl(self, path: Union[str, Path]):
        """One JSON object per record, in recording order."""
        with open(path, "w", encoding="utf-8") as fh:
            for record in self._order:
                payload = {"type": _record_type(record), **asdict(record)}
                fh.write(json.dumps(payload, sort_keys=True, default=_jsonable) + "\n")


def _record_type(record: Any) -> str:
    if isinstance(record, LossStep):
        return "loss"
    if isinstance(record, KeyframeEvent):
        return "keyframe"
    return "event"


def _jsonable(value: Any):
    if hasattr(value, "tolist"):
        return value.tolist()
    return str(value)


_current_trace: ContextVar[Optional[RunTrace]] = ContextVar("_current_trace", default=None)


def set_current_trace(trace: Optional[RunTrace]):
    _current_trace.set(trace)


def get_current_trace() -> Optional[RunTrace]:
    return _current_trace.get()


def warn(name: str, frame: Optional[int] = None, **payload):
    """Record a warning on the current trace, if one is bound."""
    trace = get_current_trace()
    if trace:
        trace.warn(name, frame=frame, **payload)


def record_losses(phase: str, iteration: int, losses: Dict[str, Any], frame: Optional[int] = None):
    trace = get_current_trace()
    if trace:
        trace.record_loss_step(phase=phase, iteration=iteration, frame=frame, losses=losses)
