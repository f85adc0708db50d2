"""Item manifests: JSON lines with item_id, sentences[], image_paths[].

After fallback handling every record has at least one sentence and one
image descriptor; sentence and image lists are capped at 10.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

MAX_ROWS = 10
FALLBACK_TOKEN = "unknown"


class ManifestError(Exception):
    pass


@dataclass
class RawItemRecord:
    item_id: str
    sentences: list[str]
    image_paths: list[str] = field(default_factory=list)

    def normalized(self) -> "RawItemRecord":
        """Cap list lengths and substitute fallbacks for empty content."""
        sentences = [s.strip() for s in self.sentences[:MAX_ROWS]]
        sentences = [s if s else FALLBACK_TOKEN for s in sentences]
        if not sentences:
            sentences = [FALLBACK_TOKEN]
        return RawItemRecord(self.item_id, sentences, list(self.image_paths[:MAX_ROWS]))


def load_manifest(path) -> list[RawItemRecord]:
    records = []
    seen = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: invalid JSON: {exc}") from None
            if not isinstance(raw, dict) or "item_id" not in raw:
                raise ManifestError(f"{path}:{lineno}: record needs an item_id")
            item_id = str(raw["item_id"])
            if item_id in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate item_id {item_id!r}")
            seen.add(item_id)
            records.append(
                RawItemRecord(
                    item_id=item_id,
                    sentences=[str(s) for s in raw.get("sentences", [])],
                    image_paths=[str(p) for p in raw.get("image_paths", [])],
                ).normalized()
            )
    if not records:
        raise ManifestError(f"{path}: manifest has no records")
    return records
