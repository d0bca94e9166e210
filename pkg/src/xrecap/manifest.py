"""Reproducible run manifests: config hash, input/output digests, seeds, timings."""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

from .errors import XrecapError


def file_digest(path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config_hash: str = ""
    seeds: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    timings_ms: dict = field(default_factory=dict)
    tool_version: str = ""

    def record_input(self, path) -> None:
        self.inputs[str(path)] = file_digest(path)

    def record_output(self, path) -> None:
        self.outputs[str(path)] = file_digest(path)

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "config_hash": self.config_hash,
            "seeds": self.seeds,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "timings_ms": self.timings_ms,
            "tool_version": self.tool_version,
        }

    def save(self, path) -> None:
        """Write atomically: temp file in the same directory, then rename."""
        path = Path(path)
        payload = json.dumps(self.to_dict(), ensure_ascii=False, indent=2, sort_keys=True) + "\n"
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(payload, encoding="utf-8", newline="\n")
        os.replace(tmp, path)

    @classmethod
    def load(cls, path) -> "RunManifest":
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        manifest = cls(command=obj["command"], config_hash=obj.get("config_hash", ""))
        manifest.seeds = dict(obj.get("seeds", {}))
        manifest.inputs = dict(obj.get("inputs", {}))
        manifest.outputs = dict(obj.get("outputs", {}))
        manifest.timings_ms = dict(obj.get("timings_ms", {}))
        manifest.tool_version = obj.get("tool_version", "")
        return manifest

    def verify_outputs(self) -> None:
        """Re-hash every recorded output; raise listing all mismatches."""
        problems = []
        for path, digest in self.outputs.items():
            if not Path(path).exists():
                problems.append(f"missing output {path}")
            elif file_digest(path) != digest:
                problems.append(f"digest mismatch for {path}")
        if problems:
            raise XrecapError("manifest verification failed: " + "; ".join(problems))


class StageTimer:
    """Records wall time per stage into a manifest."""

    def __init__(self, manifest: RunManifest, stage: str):
        self._manifest = manifest
        self._stage = stage

    def __enter__(self):
        self._start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self._manifest.timings_ms[self._stage] = (time.perf_counter() - self._start) * 1e3
        return False
