"""Append-only metrics log.

``metrics.jsonl`` holds only reproducible fields so that two identical runs
produce identical files; wall-clock times go to ``timing.jsonl`` with the same
``phase``/``step`` keys.
"""

from __future__ import annotations

import json
from pathlib import Path


class MetricsWriter:
    def __init__(self, run_dir: str | Path | None):
        self.records: list[dict] = []
        self._fh = self._th = None
        if run_dir is not None:
            run_dir = Path(run_dir)
            run_dir.mkdir(parents=True, exist_ok=True)
            self._fh = open(run_dir / "metrics.jsonl", "a", encoding="utf-8")
            self._th = open(run_dir / "timing.jsonl", "a", encoding="utf-8")

    def __call__(self, record: dict, wall_ms: float = 0.0) -> None:
        self.records.append(record)
        if self._fh is not None:
            self._fh.write(json.dumps(record, sort_keys=True) + "\n")
            self._th.write(json.dumps({"phase": record.get("phase", record.get("stage")),
                                       "step": record.get("step"), "wall_ms": round(wall_ms, 3)}) + "\n")

    def close(self) -> None:
        for fh in (self._fh, self._th):
            if fh is not None:
                fh.close()
        self._fh = self._th = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
