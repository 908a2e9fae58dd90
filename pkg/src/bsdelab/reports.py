"""Experiment reports: JSON document plus per-series CSV files.

The timestamp lives in exactly one top-level field so two runs of the same
config can be diffed after dropping it.
"""

from __future__ import annotations

import csv
import datetime as _dt
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

PASS, FAIL, INFO = "PASS", "FAIL", "INFO"


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_default, allow_nan=True)


def config_hash(config: dict) -> str:
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()


def _default(o):
    try:
        import numpy as np

        if isinstance(o, np.generic):
            return o.item()
        if isinstance(o, np.ndarray):
            return o.tolist()
    except ImportError:  # pragma: no cover
        pass
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _clean(x):
    # JSON has no inf/nan; spell them as strings
    if isinstance(x, float) and not math.isfinite(x):
        return repr(x)
    return x


@dataclass
class Metric:
    name: str
    value: float
    stderr: float | None = None

    def to_dict(self):
        return {"name": self.name, "value": _clean(float(self.value)),
                "stderr": None if self.stderr is None else _clean(float(self.stderr))}


@dataclass
class ExperimentReport:
    tag: str
    metrics: list = field(default_factory=list)
    rules: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)
    digests: dict = field(default_factory=dict)
    series: dict = field(default_factory=dict)
    details: dict = field(default_factory=dict)
    informational: bool = False
    config_hash: str = ""
    config: dict | None = None
    artifacts: list = field(default_factory=list)
    timestamp: str = ""

    @property
    def verdict(self) -> str:
        if not self.rules:
            return INFO if self.informational else PASS
        return PASS if all(self.rules.values()) else FAIL

    @property
    def passed(self) -> bool:
        return self.verdict in (PASS, INFO)

    def add(self, name, value, stderr=None) -> None:
        self.metrics.append(Metric(name, float(value), None if stderr is None else float(stderr)))

    def metric(self, name) -> float:
        for m in self.metrics:
            if m.name == name:
                return m.value
        raise KeyError(name)

    def stderr(self, name) -> float | None:
        for m in self.metrics:
            if m.name == name:
                return m.stderr
        raise KeyError(name)

    def to_dict(self, with_timestamp: bool = True) -> dict:
        out = {
            "tag": self.tag,
            "config_hash": self.config_hash,
            "config": self.config,
            "inputs": self.inputs,
            "metrics": [m.to_dict() for m in self.metrics],
            "rules": {k: bool(v) for k, v in self.rules.items()},
            "verdict": self.verdict,
            "digests": self.digests,
            "details": self.details,
            "artifacts": list(self.artifacts),
        }
        if with_timestamp:
            out["timestamp"] = self.timestamp
        return json.loads(canonical_json(out), parse_constant=lambda c: c)

    def to_json(self, with_timestamp: bool = True) -> str:
        return json.dumps(self.to_dict(with_timestamp), sort_keys=True, indent=2, default=_default)

    def metrics_bytes(self) -> bytes:
        return canonical_json([m.to_dict() for m in self.metrics]).encode()

    def write(self, out_dir, stem: str | None = None) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        stem = stem or self.tag
        self.artifacts = []
        for name, rows in sorted(self.series.items()):
            if not rows:
                continue
            path = out / f"{stem}.{name}.csv"
            keys = list(rows[0].keys())
            with open(path, "w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=keys)
                w.writeheader()
                for row in rows:
                    w.writerow({k: _clean(v) for k, v in row.items()})
            self.artifacts.append(path.name)
        if not self.timestamp:
            self.timestamp = _dt.datetime.now(_dt.timezone.utc).isoformat()
        path = out / f"{stem}.report.json"
        path.write_text(self.to_json() + "\n")
        return path
