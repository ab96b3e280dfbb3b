"""Versioned prompt templates stored as data files.

Templates live under ``lectern/templates/<version>/`` with named slots
like ``{question}``. Substitution is literal slot replacement, not
str.format, so braces inside course material or exam text never break a
render. The active version is recorded in every run log.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Optional

DEFAULT_VERSION = "v1"


@dataclass(frozen=True)
class TemplateSet:
    version: str
    texts: dict

    def render(self, name: str, **slots: str) -> str:
        try:
            text = self.texts[name]
        except KeyError:
            raise KeyError(f"template {name!r} not in version {self.version!r}") from None
        for key, value in slots.items():
            text = text.replace("{" + key + "}", value)
        return text


def load_templates(version: str = DEFAULT_VERSION, root: Optional[str] = None) -> TemplateSet:
    """Load all ``*.txt`` templates of one version.

    ``root`` overrides the packaged data directory, letting deployments
    ship their own prompt versions without code changes.
    """
    if root is not None:
        base = Path(root) / version
        if not base.is_dir():
            raise FileNotFoundError(f"template directory {base} not found")
        texts = {p.stem: p.read_text(encoding="utf-8") for p in sorted(base.glob("*.txt"))}
    else:
        base = resources.files("lectern").joinpath("templates", version)
        if not base.is_dir():
            raise FileNotFoundError(f"packaged template version {version!r} not found")
        texts = {
            entry.name[: -len(".txt")]: entry.read_text(encoding="utf-8")
            for entry in sorted(base.iterdir(), key=lambda e: e.name)
            if entry.name.endswith(".txt")
        }
    if not texts:
        raise FileNotFoundError(f"template version {version!r} is empty")
    return TemplateSet(version=version, texts=texts)
