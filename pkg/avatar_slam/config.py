"""Config files and environment switches.

A config file is either a Python module exposing ``config = {...}`` or a JSON
document with the same structure. Dicts map onto (nested) dataclasses; keys
the dataclass does not declare are rejected.
"""
from __future__ import annotations

import dataclasses
import importlib.util
import json
import os
import typing
from pathlib import Path
from typing import Any, Dict, Type, TypeVar, Union

import torch

from .errors import ContractViolation

T = TypeVar("T")


def load_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    if path.suffix == ".json":
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    else:
        spec = importlib.util.spec_from_file_location("avatar_slam_config", path)
        if spec is None or spec.loader is None:
            raise ContractViolation(f"cannot import config module {path}")
        module = importlib.util.module_from_spec(spec)
        spec.loader.exec_module(module)  # type: ignore[arg-type]
        data = getattr(module, "config", {}) or {}
    if not isinstance(data, dict):
        raise ContractViolation(f"{path}: config must be a mapping, got {type(data).__name__}")
    return data


def from_dict(cls: Type[T], data: Dict[str, Any], where: str = "") -> T:
    """Build dataclass ``cls`` from ``data``, recursing into dataclass-typed fields."""
    if not isinstance(data, dict):
        raise ContractViolation(f"{where or cls.__name__}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ContractViolation(f"{where or cls.__name__}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        hint = hints.get(name)
        if dataclasses.is_dataclass(hint) and isinstance(value, dict):
            value = from_dict(hint, value, f"{where}{name}.")
        elif isinstance(value, list) and typing.get_origin(hint) is tuple:
            value = tuple(value)
        kwargs[name] = value
    return cls(**kwargs)


def to_dict(obj: Any) -> Dict[str, Any]:
    return dataclasses.asdict(obj)


def apply_thread_override():
    """Honour AVATAR_SLAM_THREADS for torch's intra-op pool."""
    value = os.getenv("AVATAR_SLAM_THREADS")
    if value:
        try:
            torch.set_num_threads(max(1, int(value)))
        except ValueError:
            raise ContractViolation(f"AVATAR_SLAM_THREADS must be an integer, got {value!r}")
