"""Prompt templates: plain-text files with [SYSTEM]/[USER] sections and named slots."""

from __future__ import annotations

import re
from importlib import resources
from pathlib import Path

from .errors import ConfigError

_SECTION_RE = re.compile(r"^\[(SYSTEM|USER)\][ \t]*$", re.MULTILINE)


def builtin_template_text(name: str) -> str:
    return resources.files("plansql").joinpath(f"templates/{name}").read_text(
        encoding="utf-8"
    )


def load_template(name: str, template_dir=None) -> dict[str, str]:
    """Split a template into its system and user sections.

    Looks in ``template_dir`` first (when given) so runs can override the
    built-in prompt frames without touching the package.
    """
    if template_dir is not None:
        candidate = Path(template_dir) / name
        if candidate.is_file():
            return split_sections(candidate.read_text(encoding="utf-8"), name)
    return split_sections(builtin_template_text(name), name)


def split_sections(text: str, name: str = "<inline>") -> dict[str, str]:
    sections: dict[str, str] = {}
    matches = list(_SECTION_RE.finditer(text))
    if not matches:
        raise ConfigError(f"template {name}: no [SYSTEM]/[USER] section markers")
    for i, match in enumerate(matches):
        end = matches[i + 1].start() if i + 1 < len(matches) else len(text)
        sections[match.group(1).lower()] = text[match.end():end].strip("\n")
    if "system" not in sections or "user" not in sections:
        raise ConfigError(f"template {name}: both [SYSTEM] and [USER] sections required")
    return sections


def fill(section: str, **slots) -> str:
    """Substitute {name} slots, then collapse blank runs left by empty slots."""
    try:
        rendered = section.format(**slots)
    except KeyError as exc:
        raise ConfigError(f"template references unknown slot {exc}") from exc
    rendered = re.sub(r"\n{3,}", "\n\n", rendered)
    return rendered.strip()
