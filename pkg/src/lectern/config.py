"""Run configuration: TOML-style file, environment overrides, endpoint wiring.

The config format is flat sections of scalar keys (strings, numbers,
booleans). A minimal strict reader keeps the dependency surface at zero;
anything it cannot parse is a loud error, not a guess.

Environment variables of the form ``LECTERN_<SECTION>_<KEY>`` override
file values, so deployments can rotate endpoints and tokens without
editing files.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
from dataclasses import dataclass, field
from typing import Any, Optional

from .embedding import HttpEmbeddingProvider, StubEmbedder
from .llm import ChatClient, GeneratorEndpoint
from .rag import MaterialSelector, Mode, RagConfig
from .stubs import ScriptedGenerator, stub_endpoint

_SECTION_RE = re.compile(r"^\[([A-Za-z0-9_.-]+)\]$")
_KEY_RE = re.compile(r"^([A-Za-z0-9_-]+)\s*=\s*(.+)$")


class ConfigError(ValueError):
    """Config file or overrides are malformed."""


def _parse_scalar(raw: str, where: str) -> Any:
    raw = raw.strip()
    if raw.startswith('"') and raw.endswith('"') and len(raw) >= 2:
        return raw[1:-1]
    if raw in ("true", "false"):
        return raw == "true"
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        pass
    raise ConfigError(f"{where}: cannot parse value {raw!r} (quote strings)")


def _strip_comment(line: str) -> str:
    in_string = False
    for i, ch in enumerate(line):
        if ch == '"':
            in_string = not in_string
        elif ch == "#" and not in_string:
            return line[:i]
    return line


def parse_toml_subset(text: str) -> dict[str, dict[str, Any]]:
    """Sections of ``key = value`` scalars; comments start with '#'."""
    sections: dict[str, dict[str, Any]] = {}
    current: Optional[str] = None
    for line_no, line in enumerate(text.splitlines(), 1):
        stripped = _strip_comment(line).strip()
        if not stripped:
            continue
        m = _SECTION_RE.match(stripped)
        if m:
            current = m.group(1)
            sections.setdefault(current, {})
            continue
        m = _KEY_RE.match(stripped)
        if m:
            if current is None:
                raise ConfigError(f"line {line_no}: key outside any [section]")
            sections[current][m.group(1)] = _parse_scalar(m.group(2), f"line {line_no}")
            continue
        raise ConfigError(f"line {line_no}: cannot parse {line!r}")
    return sections


def _apply_env_overrides(sections: dict, environ: Optional[dict] = None) -> None:
    environ = os.environ if environ is None else environ
    for key, value in environ.items():
        if not key.startswith("LECTERN_"):
            continue
        parts = key[len("LECTERN_"):].lower().split("_", 1)
        if len(parts) != 2:
            continue
        section, option = parts
        if section in sections:
            try:
                sections[section][option] = _parse_scalar(value, key)
            except ConfigError:
                sections[section][option] = value


@dataclass
class EndpointConfig:
    id: str = "default"
    type: str = "stub"  # stub | http
    base_url: str = ""
    model: str = ""
    dim: int = 256
    image_capable: bool = False
    behavior: str = "echo"
    auth_env: str = ""
    timeout: float = 120.0
    max_retries: int = 3
    max_in_flight: int = 4


@dataclass
class AppConfig:
    rag: RagConfig = field(default_factory=RagConfig)
    embedder: EndpointConfig = field(default_factory=lambda: EndpointConfig(id="stub-embedder"))
    generator: EndpointConfig = field(default_factory=lambda: EndpointConfig(id="stub-generator"))
    grader: EndpointConfig = field(default_factory=lambda: EndpointConfig(id="stub-grader", behavior="fixed:Score: 0"))
    chunk_store: str = "chunks.ndjson"
    index_path: str = "index.ndjson"
    run_log: str = ""
    template_root: str = ""
    host: str = "127.0.0.1"
    port: int = 8040
    cors_origin: str = ""
    frontend_dir: str = ""
    raw_sections: dict = field(default_factory=dict)

    def fingerprint(self) -> str:
        canonical = {
            "rag": {
                "k": self.rag.k,
                "max_chunk_tokens": self.rag.max_chunk_tokens,
                "mode": self.rag.mode.value,
                "material_kind": self.rag.material_kind.value,
                "course_filter": self.rag.course_filter,
                "template_version": self.rag.template_version,
                "allow_mixed_languages": self.rag.allow_mixed_languages,
            },
            "embedder": self.embedder.__dict__,
            "generator": self.generator.__dict__,
            "grader": self.grader.__dict__,
        }
        return hashlib.sha256(json.dumps(canonical, sort_keys=True).encode("utf-8")).hexdigest()[:16]


def _endpoint_from_section(section: dict, default_id: str) -> EndpointConfig:
    cfg = EndpointConfig(id=section.get("id", default_id))
    for key in ("type", "base_url", "model", "dim", "image_capable", "behavior",
                "auth_env", "timeout", "max_retries", "max_in_flight"):
        if key in section:
            setattr(cfg, key, section[key])
    return cfg


def load_config(path: Optional[str] = None, environ: Optional[dict] = None) -> AppConfig:
    sections: dict[str, dict[str, Any]] = {"rag": {}, "embedder": {}, "generator": {}, "grader": {}, "paths": {}, "service": {}}
    if path:
        with open(path, encoding="utf-8") as fh:
            parsed = parse_toml_subset(fh.read())
        for name, body in parsed.items():
            sections.setdefault(name, {}).update(body)
    _apply_env_overrides(sections, environ)

    rag_section = sections["rag"]
    rag = RagConfig(
        k=rag_section.get("k", 4),
        max_chunk_tokens=rag_section.get("max_chunk_tokens", 300),
        mode=Mode.parse(rag_section.get("mode", "text")),
        material_kind=MaterialSelector(rag_section.get("material_kind", "slides")),
        course_filter=rag_section.get("course_filter") or None,
        template_version=rag_section.get("template_version", "v1"),
        allow_mixed_languages=rag_section.get("allow_mixed_languages", False),
    )
    embedder = _endpoint_from_section(sections["embedder"], "stub-embedder")
    generator = _endpoint_from_section(sections["generator"], "stub-generator")
    grader = _endpoint_from_section(sections["grader"], "stub-grader")
    rag.embedder = ""  # pinned against the index at load time
    rag.generator = generator.id
    paths = sections["paths"]
    service = sections["service"]
    return AppConfig(
        rag=rag,
        embedder=embedder,
        generator=generator,
        grader=grader,
        chunk_store=paths.get("chunk_store", "chunks.ndjson"),
        index_path=paths.get("index", "index.ndjson"),
        run_log=paths.get("run_log", ""),
        template_root=paths.get("template_root", ""),
        host=service.get("host", "127.0.0.1"),
        port=service.get("port", 8040),
        cors_origin=service.get("cors_origin", ""),
        frontend_dir=service.get("frontend_dir", ""),
        raw_sections=sections,
    )


def make_embedder(cfg: EndpointConfig):
    if cfg.type == "stub":
        return StubEmbedder(dim=cfg.dim)
    if cfg.type == "http":
        token = os.environ.get(cfg.auth_env, "") if cfg.auth_env else None
        return HttpEmbeddingProvider(cfg.base_url, cfg.model, auth_token=token, timeout=cfg.timeout)
    raise ConfigError(f"unknown embedder type {cfg.type!r}")


def make_generator(cfg: EndpointConfig, log_path: Optional[str] = None):
    if cfg.type == "stub":
        return ScriptedGenerator(cfg.behavior, endpoint=stub_endpoint(cfg.id, cfg.image_capable))
    if cfg.type == "http":
        endpoint = GeneratorEndpoint(
            id=cfg.id,
            base_url=cfg.base_url,
            model_name=cfg.model,
            image_capable=cfg.image_capable,
            auth_env=cfg.auth_env or None,
            request_timeout=cfg.timeout,
            max_retries=cfg.max_retries,
            max_in_flight=cfg.max_in_flight,
        )
        return ChatClient(endpoint, log_path=log_path)
    raise ConfigError(f"unknown generator type {cfg.type!r}")
