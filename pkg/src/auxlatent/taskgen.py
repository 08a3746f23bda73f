"""Synthetic construct-then-reason micro tasks on a 16x16 canvas.

Each kind needs one auxiliary stroke before its closed form applies:

* ``connect-midline-area``: join the midpoints of two triangle sides; the
  cut-off top triangle has area ``base * height / 8``.
* ``reflect-shortest-path``: reflect B across the line; the shortest A-line-B
  path is the straight segment to the reflection.
* ``parallel-angle-transfer``: a parallel through the apex moves both base
  angles up, so the apex angle is ``180 - a - b``.
* ``unfold-surface-distance``: unfold two box faces into a plane; the surface
  distance becomes a diagonal.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .vocab import join_tokens, tokenize_text

CANVAS = 16
KINDS = (
    "connect-midline-area",
    "reflect-shortest-path",
    "parallel-angle-transfer",
    "unfold-surface-distance",
)
OPTION_LETTERS = ("A", "B", "C", "D")
PLAN_WORDS = frozenset({"connect", "reflect", "drop-perp", "unfold", "parallel"})
PLAN_POINTS = frozenset("ABCDEFMNPQ")
MAX_PLAN_LEN = 8

Point = tuple[int, int]
Segment = tuple[Point, Point]


@dataclass
class Geometry:
    segments: list[Segment] = field(default_factory=list)
    points: list[Point] = field(default_factory=list)
    aux_segments: list[Segment] = field(default_factory=list)


@dataclass
class TaskInstance:
    id: str
    kind: str
    question: str
    question_raster: list[list[int]]
    aux_raster: list[list[int]]
    plan: list[str]
    answer: str
    question_type: str
    params: dict
    options: dict | None = None
    geometry: Geometry | None = None

    @property
    def question_tokens(self) -> list[str]:
        return tokenize_text(self.question)

    def to_json(self) -> dict:
        d = asdict(self)
        d["geometry"] = asdict(self.geometry) if self.geometry is not None else None
        # tuples become lists, so a saved and reloaded task serializes identically
        return json.loads(json.dumps(d))

    @classmethod
    def from_json(cls, d: dict) -> "TaskInstance":
        d = dict(d)
        g = d.get("geometry")
        if g is not None:
            d["geometry"] = Geometry(
                segments=[(tuple(a), tuple(b)) for a, b in g["segments"]],
                points=[tuple(p) for p in g["points"]],
                aux_segments=[(tuple(a), tuple(b)) for a, b in g["aux_segments"]],
            )
        if d.get("aux_raster") is None:
            d["aux_raster"] = None
        return cls(**d)


def _line_pixels(p: Point, q: Point) -> list[Point]:
    (x0, y0), (x1, y1) = p, q
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    out = []
    while True:
        out.append((x0, y0))
        if x0 == x1 and y0 == y1:
            return out
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy


def render_diagram(geometry: Geometry, with_aux: bool = False, size: int = CANVAS) -> np.ndarray:
    """Rasterize 1-pixel strokes; ``with_aux`` adds the auxiliary segments."""
    img = np.zeros((size, size), dtype=np.int64)
    segs = list(geometry.segments) + (list(geometry.aux_segments) if with_aux else [])
    pts = [p for s in segs for p in s] + list(geometry.points)
    for x, y in pts:
        if not (0 <= x < size and 0 <= y < size):
            raise ValueError(f"geometry point {(x, y)} outside the {size}x{size} canvas")
    for p, q in segs:
        for x, y in _line_pixels(p, q):
            img[y, x] = 1
    for x, y in geometry.points:
        img[y, x] = 1
    return img


# ---- closed-form generators -------------------------------------------------

_TRIPLES = [(3, 4), (4, 3), (6, 8), (8, 6), (5, 12), (12, 5), (9, 12), (12, 9), (15, 8), (8, 15)]


def _gen_midline(rng: random.Random):
    b = rng.choice([4, 8, 12])
    h = rng.choice([2, 4, 6, 8, 10, 12, 14])
    x0 = rng.randint(0, CANVAS - 1 - b)
    apex_off = rng.choice(range(0, b + 1, 2))
    yb = CANVAS - 1
    A, B, C = (x0, yb), (x0 + b, yb), (x0 + apex_off, yb - h)
    M = ((A[0] + C[0]) // 2, (A[1] + C[1]) // 2)
    N = ((B[0] + C[0]) // 2, (B[1] + C[1]) // 2)
    geo = Geometry(segments=[(A, B), (B, C), (C, A)], aux_segments=[(M, N)])
    question = f"triangle base {b} height {h} midline top area ?"
    plan = ["connect", "M", "N"]
    params = {"A": A, "B": B, "C": C}
    return geo, question, plan, b * h // 8, params


def _gen_reflect(rng: random.Random):
    choices = [(d, s) for d, s in _TRIPLES if d <= CANVAS - 1 and 2 <= s <= 14]
    d, s = rng.choice(choices)
    line_y = 8
    splits = [(a, s - a) for a in range(1, s) if a <= 7 and s - a <= 7]
    ha, hb = rng.choice(splits)
    xa = rng.randint(0, CANVAS - 1 - d)
    A = (xa, line_y - ha)
    B = (xa + d, line_y - hb)
    B_ref = (B[0], line_y + hb)
    geo = Geometry(segments=[((0, line_y), (CANVAS - 1, line_y))], points=[A, B],
                   aux_segments=[(A, B_ref)])
    question = f"points heights {ha} and {hb} apart {d} line shortest path ?"
    plan = ["reflect", "B", "Q", "connect", "A", "Q"]
    params = {"A": A, "B": B, "line_y": line_y}
    return geo, question, plan, int(math.isqrt(d * d + s * s)), params


def _gen_parallel(rng: random.Random):
    while True:
        a = rng.choice(range(30, 90, 10))
        b = rng.choice(range(30, 90, 10))
        if 100 <= a + b <= 150:
            break
    yb = CANVAS - 1
    # apex placed by the base angles, rounded onto the grid
    base = 12
    ta, tb = math.tan(math.radians(a)), math.tan(math.radians(b))
    xc = base * tb / (ta + tb)
    hc = min(yb - 1, max(2, round(xc * ta)))
    x0 = rng.randint(0, CANVAS - 1 - base)
    A, B = (x0, yb), (x0 + base, yb)
    C = (x0 + min(base, max(0, round(xc))), yb - hc)
    geo = Geometry(segments=[(A, B), (B, C), (C, A)],
                   aux_segments=[((0, C[1]), (CANVAS - 1, C[1]))])
    question = f"triangle angles {a} and {b} apex angle ?"
    plan = ["parallel", "D", "C", "E"]
    params = {"angle_a": a, "angle_b": b}
    return geo, question, plan, 180 - a - b, params


def _gen_unfold(rng: random.Random):
    options = []
    for s, h in _TRIPLES:
        for l in range(1, s):
            w = s - l
            if h >= l and h >= w and s <= CANVAS - 1 and h <= CANVAS - 1:
                options.append((l, w, h))
    l, w, h = rng.choice(options)
    x0 = rng.randint(0, CANVAS - 1 - (l + w))
    top = CANVAS - 1 - h - rng.randint(0, CANVAS - 1 - h)
    bl, br = (x0, top + h), (x0 + l + w, top + h)
    tl, tr = (x0, top), (x0 + l + w, top)
    fold_b, fold_t = (x0 + l, top + h), (x0 + l, top)
    geo = Geometry(segments=[(bl, br), (br, tr), (tr, tl), (tl, bl), (fold_b, fold_t)],
                   aux_segments=[(bl, tr)])
    question = f"box {l} by {w} by {h} surface shortest path ?"
    plan = ["unfold", "F", "connect", "A", "Q"]
    params = {"l": l, "w": w, "h": h}
    return geo, question, plan, int(math.isqrt((l + w) ** 2 + h * h)), params


_GENERATORS = {
    "connect-midline-area": _gen_midline,
    "reflect-shortest-path": _gen_reflect,
    "parallel-angle-transfer": _gen_parallel,
    "unfold-surface-distance": _gen_unfold,
}


def _distractors(answer: int, rng: random.Random) -> list[int]:
    pool = [v for v in range(max(1, answer - 6), answer + 7) if v != answer]
    return rng.sample(pool, 3)


def generate_task(kind: str, seed: int, multiple_choice: bool | None = None,
                  mc_fraction: float = 0.25) -> TaskInstance:
    """Deterministic per ``(kind, seed, multiple_choice)``."""
    if kind not in _GENERATORS:
        raise ValueError(f"unknown task kind {kind!r}; expected one of {KINDS}")
    rng = random.Random(f"{kind}:{seed}")
    while True:
        geo, question, plan, value, params = _GENERATORS[kind](rng)
        q_img = render_diagram(geo, with_aux=False)
        a_img = render_diagram(geo, with_aux=True)
        if (a_img != q_img).any():
            break
    if multiple_choice is None:
        multiple_choice = rng.random() < mc_fraction
    options = None
    answer = str(value)
    if multiple_choice:
        values = _distractors(value, rng) + [value]
        rng.shuffle(values)
        options = dict(zip(OPTION_LETTERS, values))
        answer = OPTION_LETTERS[values.index(value)]
        question += " options " + " ".join(f"{k} {v}" for k, v in options.items())
    return TaskInstance(
        id=f"{kind}-{seed}" + ("-mc" if multiple_choice else ""),
        kind=kind,
        question=join_tokens(tokenize_text(question)),
        question_raster=q_img.tolist(),
        aux_raster=a_img.tolist(),
        plan=plan,
        answer=answer,
        question_type="multiple-choice" if multiple_choice else "free-form",
        params=params,
        options=options,
        geometry=geo,
    )


# ---- independent oracle -----------------------------------------------------

def _shoelace(*pts) -> float:
    s = 0.0
    for (x0, y0), (x1, y1) in zip(pts, pts[1:] + pts[:1]):
        s += x0 * y1 - x1 * y0
    return abs(s) / 2


def _value_from_params(kind: str, p: dict) -> float:
    if kind == "connect-midline-area":
        A, B, C = (tuple(p[k]) for k in "ABC")
        M = ((A[0] + C[0]) / 2, (A[1] + C[1]) / 2)
        N = ((B[0] + C[0]) / 2, (B[1] + C[1]) / 2)
        return _shoelace(C, M, N)
    if kind == "reflect-shortest-path":
        (ax, ay), (bx, by), ly = tuple(p["A"]), tuple(p["B"]), p["line_y"]
        if ay > ly or by > ly:
            raise ValueError("points must lie on one side of the line")
        return math.hypot(bx - ax, (2 * ly - by) - ay)
    if kind == "parallel-angle-transfer":
        # alternate angles at the apex along the parallel
        left, right = p["angle_a"], p["angle_b"]
        return 180 - left - right
    if kind == "unfold-surface-distance":
        l, w, h = p["l"], p["w"], p["h"]
        return min(math.hypot(l + w, h), math.hypot(l + h, w), math.hypot(w + h, l))
    raise ValueError(f"unknown task kind {kind!r}")


def solve_oracle(task: TaskInstance) -> str:
    """Recompute the answer from raw geometry, never reading ``task.answer``."""
    try:
        value = _value_from_params(task.kind, task.params)
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed task {task.id}: {exc}") from exc
    iv = round(value)
    if abs(value - iv) > 1e-9 or iv <= 0:
        raise ValueError(f"malformed task {task.id}: non-integer value {value}")
    if task.question_type == "multiple-choice":
        if not task.options:
            raise ValueError(f"malformed task {task.id}: missing options")
        hits = [k for k, v in task.options.items() if v == iv]
        if len(hits) != 1:
            raise ValueError(f"malformed task {task.id}: options do not single out {iv}")
        return hits[0]
    return str(iv)


# ---- datasets ---------------------------------------------------------------

def make_dataset(n: int, seed: int = 0, kinds: Sequence[str] = KINDS,
                 mc_fraction: float = 0.25) -> list[TaskInstance]:
    """``n`` tasks cycling through ``kinds`` with per-task seeds derived from ``seed``."""
    return [generate_task(kinds[i % len(kinds)], seed * 1_000_003 + i, mc_fraction=mc_fraction)
            for i in range(n)]


def split_dataset(tasks: Sequence[TaskInstance], fractions: Sequence[float] = (0.8, 0.2),
                  seed: int = 0) -> list[list[TaskInstance]]:
    """Stratified by kind; each kind is shuffled and cut by cumulative fractions."""
    if abs(sum(fractions) - 1) > 1e-9 or any(f < 0 for f in fractions):
        raise ValueError(f"fractions must be non-negative and sum to 1, got {fractions}")
    if not tasks:
        raise ValueError("cannot split an empty dataset")
    rng = random.Random(seed)
    parts: list[list[TaskInstance]] = [[] for _ in fractions]
    by_kind: dict[str, list[TaskInstance]] = {}
    for t in tasks:
        by_kind.setdefault(t.kind, []).append(t)
    for kind in sorted(by_kind):
        group = list(by_kind[kind])
        rng.shuffle(group)
        bounds = np.round(np.cumsum([0.0, *fractions]) * len(group)).astype(int)
        for i in range(len(fractions)):
            parts[i].extend(group[bounds[i]:bounds[i + 1]])
    for i, f in enumerate(fractions):
        if f > 0 and not parts[i]:
            raise ValueError(f"split {i} (fraction {f}) came out empty")
    return parts


def save_dataset(tasks: Iterable[TaskInstance], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in tasks:
            fh.write(json.dumps(t.to_json()) + "\n")


def load_dataset(path: str | Path) -> list[TaskInstance]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(TaskInstance.from_json(json.loads(line)))
            except (json.JSONDecodeError, TypeError, KeyError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed task record ({exc})") from exc
    return out
