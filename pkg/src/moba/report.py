"""Machine-readable run reports and their published JSON schema."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from importlib import resources


@dataclass
class RunReport:
    """One command's outcome: echoed config, numeric metrics, pass flag."""

    command: str
    config: dict
    metrics: dict = field(default_factory=dict)
    passed: bool = False

    def to_dict(self) -> dict:
        from . import __version__

        return {
            "command": self.command,
            "config": self.config,
            "metrics": self.metrics,
            "pass": self.passed,
            "version": __version__,
        }

    def to_json(self) -> str:
        # allow_nan=False keeps the output strict JSON; metrics must be finite
        return json.dumps(self.to_dict(), indent=2, allow_nan=False)


def load_schema() -> dict:
    """The JSON schema every emitted report validates against."""
    text = resources.files("moba").joinpath("report_schema.json").read_text()
    return json.loads(text)


def write_json_atomic(obj, path) -> None:
    tmp = f"{path}.tmp.{os.getpid()}"
    try:
        with open(tmp, "w") as fh:
            json.dump(obj, fh, indent=2, allow_nan=False)
        os.replace(tmp, path)
    except OSError:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
