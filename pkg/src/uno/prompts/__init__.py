"""Versioned prompt assets.

Templates are plain text files rendered with ``str.format``.  Their
SHA-256 digests go into the run manifest so a store records exactly which
prompt versions produced it.  The first line of each template is a task
marker (``[task: ...]``) that the in-process mock backends dispatch on.
"""

from __future__ import annotations

import re
from importlib import resources

from ..serde import text_digest

TEMPLATE_NAMES = (
    "distill",
    "revise_with_rules",
    "revise_with_log",
    "predict_rules",
    "judge",
    "critic_input",
    "critique_revise",
)

_MARKER_RE = re.compile(r"^\[task: ([a-z-]+)\]", re.MULTILINE)


def _read(name: str) -> str:
    return resources.files(__package__).joinpath(f"{name}.txt").read_text(encoding="utf-8")


_TEMPLATES = {name: _read(name) for name in TEMPLATE_NAMES}


def template(name: str) -> str:
    return _TEMPLATES[name]


def render(name: str, **kwargs: object) -> str:
    return _TEMPLATES[name].format(**kwargs)


def task_marker(prompt: str) -> str | None:
    """Extract the task marker from a rendered prompt, if present."""
    m = _MARKER_RE.match(prompt)
    return m.group(1) if m else None


def prompt_hashes() -> dict[str, str]:
    return {name: text_digest(_TEMPLATES[name]) for name in TEMPLATE_NAMES}
