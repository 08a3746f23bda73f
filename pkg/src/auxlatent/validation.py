"""Input checks shared by the estimator and the harness."""

from __future__ import annotations

from pathlib import Path
from typing import Iterable, Sequence

from .taskgen import TaskInstance, load_dataset


def check_tasks(X, *, require_aux: bool = False) -> list[TaskInstance]:
    """Accept TaskInstances, their JSON dicts, or a dataset path; return a non-empty list."""
    if isinstance(X, (str, Path)):
        X = load_dataset(X)
    if isinstance(X, TaskInstance) or isinstance(X, dict):
        raise TypeError("expected a sequence of tasks, got a single task")
    out = []
    for i, t in enumerate(X):
        if isinstance(t, dict):
            t = TaskInstance.from_json(t)
        if not isinstance(t, TaskInstance):
            raise TypeError(f"item {i}: expected TaskInstance or dict, got {type(t).__name__}")
        if require_aux and t.aux_raster is None:
            raise ValueError(f"item {i} ({t.id}): auxiliary raster required")
        out.append(t)
    if not out:
        raise ValueError("at least one task is required")
    return out


def check_answers(y: Iterable | None, n: int) -> list[str] | None:
    if y is None:
        return None
    y = [str(v) for v in y]
    if len(y) != n:
        raise ValueError(f"got {len(y)} answers for {n} tasks")
    if any(not v.strip() for v in y):
        raise ValueError("answers must be non-empty")
    return y


def check_fraction(name: str, value: float, *, allow_zero: bool = False) -> float:
    lo_ok = value >= 0 if allow_zero else value > 0
    if not (lo_ok and value <= 1):
        raise ValueError(f"{name} must lie in {'[0' if allow_zero else '(0'}, 1], got {value}")
    return float(value)


def same_length(**seqs: Sequence) -> int:
    lengths = {k: len(v) for k, v in seqs.items()}
    if len(set(lengths.values())) > 1:
        raise ValueError(f"length mismatch: {lengths}")
    return next(iter(lengths.values()), 0)
