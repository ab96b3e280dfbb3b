"""Run manifests: one JSON record per mutating command."""

from __future__ import annotations

import getpass
import json
import time
from typing import Optional, Sequence


def write_manifest(
    command: str,
    outputs: Sequence[str],
    config_fingerprint: str = "",
    template_version: str = "",
    endpoint_ids: Sequence[str] = (),
    extra: Optional[dict] = None,
    path: Optional[str] = None,
) -> str:
    """Write the manifest next to the first output (``<out>.manifest.json``)
    unless an explicit path is given. Returns the manifest path."""
    if not outputs and path is None:
        raise ValueError("manifest needs an output path to attach to")
    manifest_path = path or f"{outputs[0]}.manifest.json"
    record = {
        "command": command,
        "config_fingerprint": config_fingerprint,
        "template_version": template_version,
        "endpoint_ids": list(endpoint_ids),
        "outputs": list(outputs),
        "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "user": _safe_user(),
    }
    if extra:
        record.update(extra)
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest_path


def _safe_user() -> str:
    try:
        return getpass.getuser()
    except Exception:
        return "unknown"
