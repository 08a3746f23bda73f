"""Outcome rewards: accuracy, format, latent-block count, length and repetition."""

from __future__ import annotations

import ast
import itertools
import math
import operator
import re
import warnings
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

from .vocab import BOX_OPEN, LATENT_TOKENS, count_latent_blocks, tokenize_text

COMPONENTS = ("acc", "fmt", "lat", "len", "rep")


@dataclass
class RewardConfig:
    l_max: int = 2048
    lambda_len: float = 0.2
    lt_ratio: float = 0.81
    lambda_rep: float = 1.2
    tau3: float = 0.18
    tau4: float = 0.12
    m0: int = 6
    r_max: float = 2.0
    tol: float = 0.02
    # "sum": floor(A + B); "literal_max": max(-R_max, A, B) as printed
    rep_combination: str = "sum"
    # "literal": onset at 0.81 * l_t; "lt": onset at l_t
    len_onset: str = "literal"

    def __post_init__(self):
        for name in ("l_max", "lambda_len", "lt_ratio", "lambda_rep", "tau3", "tau4", "m0", "r_max", "tol"):
            if getattr(self, name) <= 0:
                raise ValueError(f"RewardConfig.{name} must be positive")
        if self.rep_combination not in ("sum", "literal_max"):
            raise ValueError(f"unknown rep_combination {self.rep_combination!r}")
        if self.len_onset not in ("literal", "lt"):
            raise ValueError(f"unknown len_onset {self.len_onset!r}")

    @property
    def l_t(self) -> float:
        return self.lt_ratio * self.l_max


@dataclass
class RewardBreakdown:
    acc: float
    fmt: float
    lat: float
    len: float
    rep: float
    total: float

    def as_dict(self) -> dict:
        return asdict(self)

    def component(self, k: str) -> float:
        return getattr(self, k)


@dataclass
class Response:
    tokens: list[str]
    text: str

    @classmethod
    def from_text(cls, text: str) -> "Response":
        return cls(tokenize_text(text), text)

    @property
    def length(self) -> int:
        return len(self.tokens)

    @property
    def n_lat(self) -> int:
        return count_latent_blocks(self.tokens)


# ---- answer extraction and judging -------------------------------------------

def _boxed_regions(text: str) -> list[str | None]:
    """Contents of every ``\\boxed{...}``; ``None`` for an unclosed one."""
    out = []
    i = text.find(BOX_OPEN)
    while i != -1:
        depth = 1
        j = i + len(BOX_OPEN)
        start = j
        while j < len(text) and depth:
            if text[j] == "{":
                depth += 1
            elif text[j] == "}":
                depth -= 1
            j += 1
        out.append(text[start:j - 1] if depth == 0 else None)
        i = text.find(BOX_OPEN, j if depth == 0 else start)
    return out


def has_closed_box(text: str) -> bool:
    return any(r is not None for r in _boxed_regions(text))


_SPECIAL_RE = re.compile(r"<\|[a-z_]+\|>|<[a-z]+>")
_NUMBER_RE = re.compile(r"-?\d+(?:\.\d+)?")
_LETTER_RE = re.compile(r"(?:^|[\s(:])\(?([A-Ea-e])\)?[.\s]*$")


def parse_answer(text: str) -> str | None:
    """Last closed boxed region, else a trailing option letter, else the final number."""
    closed = [r for r in _boxed_regions(text) if r is not None]
    if closed:
        return closed[-1].strip()
    plain = _SPECIAL_RE.sub(" ", text).strip()
    if not plain:
        return None
    m = _LETTER_RE.search(plain)
    if m:
        return m.group(1)
    nums = _NUMBER_RE.findall(plain)
    return nums[-1] if nums else None


_BINOPS = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul,
           ast.Div: operator.truediv, ast.Pow: operator.pow}
_FUNCS = {"sqrt": math.sqrt}
_NAMES = {"pi": math.pi}


def _eval_node(node):
    if isinstance(node, ast.Expression):
        return _eval_node(node.body)
    if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
        return float(node.value)
    if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
        return _BINOPS[type(node.op)](_eval_node(node.left), _eval_node(node.right))
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
        v = _eval_node(node.operand)
        return -v if isinstance(node.op, ast.USub) else v
    if isinstance(node, ast.Call) and isinstance(node.func, ast.Name) and node.func.id in _FUNCS \
            and len(node.args) == 1:
        return _FUNCS[node.func.id](_eval_node(node.args[0]))
    if isinstance(node, ast.Name) and node.id in _NAMES:
        return _NAMES[node.id]
    raise ValueError("unsupported expression")


def to_number(s: str) -> float | None:
    """Evaluate simple LaTeX-ish numeric forms: ``40\\sqrt{5}``, ``\\frac{3}{4}``, ``2.5``, ``30^\\circ``."""
    e = s.strip().strip("$").replace(" ", "")
    if not e:
        return None
    e = re.sub(r"\^\{?\\circ\}?|°|\\%|%", "", e)
    e = e.replace("\\left", "").replace("\\right", "").replace("\\cdot", "*").replace("\\times", "*")
    e = e.replace("\\dfrac", "\\frac").replace("\\tfrac", "\\frac")
    for _ in range(8):
        new = re.sub(r"\\frac\{([^{}]*)\}\{([^{}]*)\}", r"((\1)/(\2))", e)
        new = re.sub(r"\\sqrt\{([^{}]*)\}", r"sqrt(\1)", new)
        if new == e:
            break
        e = new
    e = re.sub(r"\\sqrt(\d+)", r"sqrt(\1)", e)
    e = e.replace("\\pi", "pi").replace("^", "**").replace("{", "(").replace("}", ")")
    # implicit multiplication: 40sqrt(5), 2pi, )(
    e = re.sub(r"(\d|\))(?=sqrt|pi|\()", r"\1*", e)
    e = re.sub(r"(pi)(?=\d|\(|sqrt)", r"\1*", e)
    if "\\" in e:
        return None
    try:
        with warnings.catch_warnings():
            # model text like "3x" trips literal warnings before the SyntaxError
            warnings.simplefilter("ignore", (SyntaxWarning, DeprecationWarning))
            tree = ast.parse(e, mode="eval")
        v = _eval_node(tree)
    except (SyntaxError, ValueError, ZeroDivisionError, OverflowError, TypeError):
        return None
    return v if math.isfinite(v) else None


_OPTION_RE = re.compile(r"^\(?([A-Za-z])\)?\.?$")


def answer_equivalent(pred: str | None, truth: str, tol: float = 0.02) -> int:
    if not truth or not truth.strip():
        raise ValueError("truth must be non-empty")
    if pred is None or not pred.strip():
        return 0
    t_opt = _OPTION_RE.match(truth.strip())
    if t_opt:
        p_opt = _OPTION_RE.match(pred.strip())
        return int(bool(p_opt) and p_opt.group(1).lower() == t_opt.group(1).lower())
    t = to_number(truth)
    if t is not None:
        p = to_number(pred)
        if p is None:
            return 0
        if t == 0:
            return int(abs(p) <= tol)
        return int(abs(p - t) <= tol * abs(t))
    return int(re.sub(r"\s+", "", pred) == re.sub(r"\s+", "", truth))


# ---- shaping terms ----------------------------------------------------------

def r_lat(n_lat: int) -> float:
    if n_lat < 0:
        raise ValueError("n_lat must be non-negative")
    return 0.5 if n_lat == 1 else -0.2


def _ramp(x: float) -> float:
    return min(1.0, max(0.0, x))


def r_len(length: float, cfg: RewardConfig | None = None) -> float:
    cfg = cfg or RewardConfig()
    if length < 0:
        raise ValueError("length must be non-negative")
    lt = cfg.l_t
    onset = 0.81 * lt if cfg.len_onset == "literal" else lt
    return -cfg.lambda_len * _ramp((length - onset) / (0.1 * lt)) + 0.0  # no -0.0


def ngram_dup_ratio(tokens: Sequence, n: int) -> float:
    """(total n-grams - distinct n-grams) / total, in one sliding pass."""
    total = len(tokens) - n + 1
    if total <= 0:
        return 0.0
    seen = set()
    dup = 0
    window = tuple(tokens[:n - 1])
    for tok in itertools.islice(tokens, n - 1, None):
        window = window[-(n - 1):] + (tok,) if n > 1 else (tok,)
        if window in seen:
            dup += 1
        else:
            seen.add(window)
    return dup / total


def max_run(tokens: Sequence) -> int:
    return max((sum(1 for _ in g) for _, g in itertools.groupby(tokens)), default=0)


def repetition_tokens(tokens: Sequence[str]) -> list[str]:
    """Tokens the repetition penalty looks at: latent specials are dropped."""
    return [t for t in tokens if t not in LATENT_TOKENS]


def r_rep(tokens: Sequence, cfg: RewardConfig | None = None) -> float:
    cfg = cfg or RewardConfig()
    taus = {3: cfg.tau3, 4: cfg.tau4}
    ngram = -cfg.lambda_rep * sum(_ramp((ngram_dup_ratio(tokens, n) - tau) / (1 - tau))
                                  for n, tau in taus.items())
    run = -cfg.lambda_rep * _ramp((max_run(tokens) - cfg.m0 + 1) / cfg.m0)
    if cfg.rep_combination == "literal_max":
        return max(-cfg.r_max, ngram, run) + 0.0
    return max(-cfg.r_max, ngram + run) + 0.0


def total_reward(response: Response, truth: str, cfg: RewardConfig | None = None,
                 judge: Callable[[str, str], int] | None = None) -> RewardBreakdown:
    """Sum of the five components.

    ``judge(text, truth)`` is consulted only when nothing can be extracted.
    """
    cfg = cfg or RewardConfig()
    pred = parse_answer(response.text)
    if pred is None and judge is not None:
        acc = float(judge(response.text, truth))
    else:
        acc = float(answer_equivalent(pred, truth, cfg.tol))
    fmt = 0.2 if has_closed_box(response.text) else 0.0
    lat = r_lat(response.n_lat)
    ln = r_len(response.length, cfg)
    rep = r_rep(repetition_tokens(response.tokens), cfg)
    return RewardBreakdown(acc, fmt, lat, ln, rep, acc + fmt + lat + ln + rep)
