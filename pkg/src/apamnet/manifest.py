"""Run manifests: every CLI command records what it did, where, and when."""
from __future__ import annotations

import json
import os
import tempfile
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

MANIFEST_FILENAME = "run_manifest.json"


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    subcommand: str
    config: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    seed: int | None = None
    tool_version: str = ""
    started_at: str = field(default_factory=_now)
    finished_at: str | None = None

    def finish(self) -> None:
        self.finished_at = _now()

    def write(self, out_dir) -> Path:
        """Atomically write the manifest next to the command's outputs."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        if not self.tool_version:
            from . import __version__

            self.tool_version = __version__
        if self.finished_at is None:
            self.finish()
        path = out_dir / MANIFEST_FILENAME
        payload = json.dumps(asdict(self), indent=2, default=str) + "\n"
        fd, tmp = tempfile.mkstemp(dir=out_dir, prefix=".manifest-", suffix=".tmp")
        try:
            with os.fdopen(fd, "w") as fh:
                fh.write(payload)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        return path
