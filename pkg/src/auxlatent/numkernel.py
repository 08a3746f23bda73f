"""Differentiable array substrate, backed by float64 torch tensors.

Everything here checks shapes and finiteness up front so that a bad value
fails at the op that produced it instead of surfacing as a NaN loss later.
"""

from __future__ import annotations

import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator

import torch

logger = logging.getLogger(__name__)

DTYPE = torch.float64
NORM_EPS = 1e-6
COSINE_EPS = 1e-8
# mse averages over every element; row cosine averages over rows
MSE_REDUCTION = "mean"
COSINE_REDUCTION = "mean_over_rows"


class ShapeError(ValueError):
    pass


class NonFiniteError(ValueError):
    pass


def tensor(values, requires_grad: bool = False) -> torch.Tensor:
    t = torch.as_tensor(values, dtype=DTYPE).clone()
    _check_finite(t, "tensor")
    return t.requires_grad_(requires_grad)


def _check_finite(t: torch.Tensor, op: str) -> None:
    if t.is_floating_point() and not bool(torch.isfinite(t.detach()).all()):
        raise NonFiniteError(f"{op}: non-finite values in input of shape {tuple(t.shape)}")


def _check_same(a: torch.Tensor, b: torch.Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise ShapeError(f"matmul: shape mismatch {tuple(a.shape)} @ {tuple(b.shape)}")
    _check_finite(a, "matmul")
    _check_finite(b, "matmul")
    return a @ b


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _check_same(a, b, "add")
    return a + b


def mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _check_same(a, b, "mul")
    return a * b


def scale(a: torch.Tensor, c: float) -> torch.Tensor:
    if not math.isfinite(c):
        raise NonFiniteError(f"scale: non-finite factor {c}")
    return a * c


def exp(a: torch.Tensor) -> torch.Tensor:
    _check_finite(a, "exp")
    return torch.exp(a)


def softmax(x: torch.Tensor) -> torch.Tensor:
    """Softmax over the last axis with max subtraction."""
    _check_finite(x, "softmax")
    shifted = x - x.max(dim=-1, keepdim=True).values.detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=-1, keepdim=True)


def log_softmax(x: torch.Tensor) -> torch.Tensor:
    _check_finite(x, "log_softmax")
    shifted = x - x.max(dim=-1, keepdim=True).values.detach()
    return shifted - torch.log(torch.exp(shifted).sum(dim=-1, keepdim=True))


def layer_norm(x: torch.Tensor, weight: torch.Tensor | None = None,
               bias: torch.Tensor | None = None, eps: float = NORM_EPS) -> torch.Tensor:
    _check_finite(x, "layer_norm")
    mu = x.mean(dim=-1, keepdim=True)
    var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
    y = (x - mu) / torch.sqrt(var + eps)
    if weight is not None:
        y = y * weight
    if bias is not None:
        y = y + bias
    return y


def embedding(table: torch.Tensor, ids: torch.Tensor) -> torch.Tensor:
    if table.dim() != 2:
        raise ShapeError(f"embedding: table must be 2-D, got {tuple(table.shape)}")
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= table.shape[0]):
        raise ShapeError(f"embedding: ids out of range for table {tuple(table.shape)}")
    return table[ids]


def mean(x: torch.Tensor, dim=None) -> torch.Tensor:
    return x.mean() if dim is None else x.mean(dim=dim)


def sum_(x: torch.Tensor, dim=None) -> torch.Tensor:
    return x.sum() if dim is None else x.sum(dim=dim)


def row_cosine(a: torch.Tensor, b: torch.Tensor, eps: float = COSINE_EPS) -> torch.Tensor:
    """Per-row cosine similarity of two (..., K, D) arrays, shape (..., K)."""
    _check_same(a, b, "row_cosine")
    _check_finite(a, "row_cosine")
    _check_finite(b, "row_cosine")
    na = a.norm(dim=-1)
    nb = b.norm(dim=-1)
    if bool((na.detach() < eps).any()) or bool((nb.detach() < eps).any()):
        logger.warning("row_cosine: near-zero row norm, denominator guarded by %g", eps)
    return (a * b).sum(dim=-1) / (torch.clamp(na, min=eps) * torch.clamp(nb, min=eps))


def mse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _check_same(a, b, "mse")
    _check_finite(a, "mse")
    _check_finite(b, "mse")
    return ((a - b) ** 2).mean()


def backward(loss: torch.Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every leaf's ``.grad``."""
    if loss.numel() != 1 or loss.dim() != 0:
        raise ShapeError(f"backward: loss must be a scalar, got shape {tuple(loss.shape)}")
    _check_finite(loss, "backward")
    loss.backward()


def grad_check(fn: Callable[[torch.Tensor], torch.Tensor], point, step: float = 1e-5,
               return_details: bool = False):
    """Compare autograd against central differences at ``point``.

    Returns the max over coordinates of
    ``|analytic - numeric| / (|analytic| + |numeric| + 1e-12)``. Coordinates
    where a perturbed evaluation is non-finite are listed in the details and
    make the result ``inf``.
    """
    if step <= 0:
        raise ValueError("grad_check: step must be positive")
    x = torch.as_tensor(point, dtype=DTYPE).detach().clone().requires_grad_(True)
    y = fn(x)
    if y.numel() != 1:
        raise ShapeError(f"grad_check: function must be scalar, got shape {tuple(y.shape)}")
    analytic = None
    if y.requires_grad:
        (analytic,) = torch.autograd.grad(y.reshape(()), x, allow_unused=True)
    if analytic is None:
        analytic = torch.zeros_like(x)
    flat = x.detach().reshape(-1)
    numeric = torch.zeros_like(flat)
    bad = []
    with torch.no_grad():
        for i in range(flat.numel()):
            xp = flat.clone()
            xm = flat.clone()
            xp[i] += step
            xm[i] -= step
            fp = float(fn(xp.reshape(x.shape)))
            fm = float(fn(xm.reshape(x.shape)))
            if not (math.isfinite(fp) and math.isfinite(fm)):
                bad.append(i)
                continue
            numeric[i] = (fp - fm) / (2 * step)
    a = analytic.detach().reshape(-1)
    rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12)
    err = float("inf") if bad else float(rel.max()) if rel.numel() else 0.0
    if return_details:
        return err, {"analytic": a, "numeric": numeric, "non_finite": bad}
    return err


def clip_global_norm(grads: Iterable[torch.Tensor | None], max_norm: float) -> float:
    """Scale gradients in place so their joint L2 norm is at most ``max_norm``.

    Returns the scale that was applied (1.0 when no clipping happened).
    """
    if max_norm <= 0:
        raise ValueError("clip_global_norm: max_norm must be positive")
    grads = [g for g in grads if g is not None]
    total = math.sqrt(sum(float((g.detach() ** 2).sum()) for g in grads))
    if total <= max_norm:
        return 1.0
    s = max_norm / total
    for g in grads:
        g.mul_(s)
    return s


class ParamStore:
    """Ordered name -> tensor mapping; iteration follows insertion order."""

    def __init__(self, items: Iterable[tuple[str, torch.Tensor]] = ()):
        self._params: OrderedDict[str, torch.Tensor] = OrderedDict()
        for name, p in items:
            self.add(name, p)

    @classmethod
    def from_module(cls, module: torch.nn.Module, trainable_only: bool = False) -> "ParamStore":
        return cls((n, p) for n, p in module.named_parameters()
                   if p.requires_grad or not trainable_only)

    def add(self, name: str, p: torch.Tensor) -> None:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        self._params[name] = p

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._params[name]

    def __iter__(self) -> Iterator[tuple[str, torch.Tensor]]:
        return iter(self._params.items())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grad(self) -> None:
        for _, p in self:
            p.grad = None


@dataclass
class OptState:
    step: int = 0
    exp_avg: dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, torch.Tensor] = field(default_factory=dict)
    skipped: int = 0


def optimizer_step(params: ParamStore, state: OptState, lr: float, weight_decay: float = 0.01,
                   betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> None:
    """One AdamW update (decoupled weight decay, bias-corrected moments).

    Parameters whose gradient is missing are left alone; parameters with a
    non-finite gradient are skipped and the incident is logged.
    """
    b1, b2 = betas
    state.step += 1
    t = state.step
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    with torch.no_grad():
        for name, p in params:
            if not p.requires_grad or p.grad is None:
                continue
            g = p.grad
            if not bool(torch.isfinite(g).all()):
                logger.warning("optimizer_step: non-finite gradient for %s, update skipped", name)
                state.skipped += 1
                continue
            if name not in state.exp_avg:
                state.exp_avg[name] = torch.zeros_like(p)
                state.exp_avg_sq[name] = torch.zeros_like(p)
            m = state.exp_avg[name]
            v = state.exp_avg_sq[name]
            if weight_decay:
                p.mul_(1 - lr * weight_decay)
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            denom = (v / c2).sqrt_().add_(eps)
            p.addcdiv_(m / c1, denom, value=-lr)
