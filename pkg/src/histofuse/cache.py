"""Content-addressed caching for pipeline stages.

A stage's cache key hashes everything that determines its output: the
config fragment, seeds, and digests of its inputs. Outputs live in the
run's workspace; the cache only keeps marker files recording the key and
the output digests. A hit requires both the key to match and every
recorded output to still hash correctly, so corrupted or hand-edited
artifacts trigger a rebuild instead of being trusted.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Callable, Iterable

_SAFE = "abcdefghijklmnopqrstuvwxyz0123456789-_"


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def digest_json(obj) -> str:
    return sha256_bytes(json.dumps(obj, sort_keys=True, default=str).encode("utf-8"))


def digest_tree(root: str | Path) -> str:
    """Content hash of a directory tree: sorted relative paths and file
    digests. Any added, removed, or edited file changes the digest."""
    rootp = Path(root)
    entries = []
    for p in sorted(rootp.rglob("*")):
        if p.is_file():
            entries.append([p.relative_to(rootp).as_posix(), sha256_file(p)])
    return digest_json(entries)


class StageCache:
    """Marker-file cache over a workspace directory."""

    def __init__(self, marker_dir: str | Path, workspace: str | Path):
        self.marker_dir = Path(marker_dir)
        self.workspace = Path(workspace)
        self.marker_dir.mkdir(parents=True, exist_ok=True)

    def _marker(self, stage: str, key: str) -> Path:
        safe_stage = "".join(c if c in _SAFE else "_" for c in stage.lower())
        return self.marker_dir / f"{safe_stage}-{key[:12]}.json"

    def _verify(self, outputs: dict[str, str]) -> bool:
        for rel, digest in outputs.items():
            p = self.workspace / rel
            if not p.is_file() or sha256_file(p) != digest:
                return False
        return True

    def run(
        self,
        stage: str,
        key_parts: dict,
        producer: Callable[[], tuple[dict, Iterable[Path]]],
    ) -> tuple[bool, dict, list[str]]:
        """Return (was_cached, payload, workspace-relative output paths).

        producer() does the work, writes its outputs under the workspace,
        and returns (payload, output paths). Payload must be JSON-safe;
        cache hits get it back without re-running anything.
        """
        key = digest_json({"stage": stage, **key_parts})
        marker = self._marker(stage, key)
        if marker.is_file():
            try:
                info = json.loads(marker.read_text(encoding="utf-8"))
            except (OSError, json.JSONDecodeError):
                info = None
            if info and info.get("key") == key and self._verify(info["outputs"]):
                return True, info["payload"], sorted(info["outputs"])
        payload, outputs = producer()
        recorded = {}
        for p in outputs:
            p = Path(p)
            rel = p.relative_to(self.workspace).as_posix()
            recorded[rel] = sha256_file(p)
        marker.write_text(
            json.dumps(
                {"stage": stage, "key": key, "outputs": recorded, "payload": payload},
                sort_keys=True,
            )
            + "\n",
            encoding="utf-8",
        )
        return False, payload, sorted(recorded)
