"""Append-only line-delimited JSON metrics stream."""

from __future__ import annotations

import json
import math
import time
from pathlib import Path

FORMAT = "icrl-metrics"
VERSION = 1
KINDS = ("train-window", "eval-trial", "fewshot", "context-generalization", "probe")


class MetricsFormatError(ValueError):
    pass


def _clean(x):
    # JSON has no NaN/inf; encode them as null.
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    return x


class MetricsWriter:
    """Single writer; the first line of a new file is a version header."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if not self.path.exists() or self.path.stat().st_size == 0:
            with open(self.path, "w") as f:
                f.write(json.dumps({"format": FORMAT, "version": VERSION}) + "\n")
        else:
            read_header(self.path)
        self._last_train_step: int | None = None

    def write(self, kind: str, env_step: int, payload: dict) -> dict:
        if kind not in KINDS:
            raise ValueError(f"unknown record kind {kind!r}")
        if kind == "train-window":
            if self._last_train_step is not None and env_step < self._last_train_step:
                raise ValueError("train-window env_step must be non-decreasing")
            self._last_train_step = env_step
        rec = {"wall_clock": time.time(), "env_step": int(env_step), "kind": kind, "payload": _clean(payload)}
        with open(self.path, "a") as f:
            f.write(json.dumps(rec) + "\n")
        return rec


def read_header(path: str | Path) -> dict:
    with open(path) as f:
        first = f.readline()
    try:
        header = json.loads(first)
    except ValueError as e:
        raise MetricsFormatError(f"{path}: missing metrics header") from e
    if header.get("format") != FORMAT:
        raise MetricsFormatError(f"{path}: not an {FORMAT} file")
    if header.get("version") != VERSION:
        raise MetricsFormatError(f"{path}: unsupported metrics version {header.get('version')}")
    return header


def read_metrics(path: str | Path, kind: str | None = None) -> list[dict]:
    read_header(path)
    out = []
    with open(path) as f:
        next(f)
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            if kind is None or rec["kind"] == kind:
                out.append(rec)
    return out
