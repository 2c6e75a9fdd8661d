"""Mediator prompt templates shipped under ``assets/``."""

from __future__ import annotations

import hashlib
import json
from functools import lru_cache
from importlib import resources
from typing import Any, Iterable

from .agents import AgentId


@lru_cache(maxsize=None)
def template(name: str) -> str:
    text = resources.files("aicollective.assets").joinpath(f"{name}.txt").read_text(encoding="utf-8")
    return text.rstrip("\n")


def render(template_name: str, **fields: Any) -> str:
    return template(template_name).format(**fields)


def template_hashes() -> dict[str, str]:
    out = {}
    for entry in sorted(resources.files("aicollective.assets").iterdir(), key=lambda p: p.name):
        if entry.name.endswith((".txt", ".json")):
            out[entry.name] = hashlib.sha256(entry.read_bytes()).hexdigest()
    return out


def load_json_asset(name: str) -> Any:
    return json.loads(resources.files("aicollective.assets").joinpath(name).read_text(encoding="utf-8"))


def name_list(agents: Iterable[AgentId]) -> str:
    """'L2', 'L2 and L5', 'L3, L5, L6, and L8'."""
    names = [a.name for a in agents]
    if len(names) <= 1:
        return "".join(names)
    if len(names) == 2:
        return f"{names[0]} and {names[1]}"
    return ", ".join(names[:-1]) + f", and {names[-1]}"
