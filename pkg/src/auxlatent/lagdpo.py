"""Latent-aware group-decoupled policy optimization.

Advantages are built per reward component: each component is normalized
within its group of N samples, the normalized components are summed, and the
sums are whitened over the update minibatch. The policy loss is a dual-clip
PPO surrogate plus a low-variance token KL to a frozen reference.
"""

from __future__ import annotations

import logging
import math
import random
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from . import numkernel as nk
from .latent_model import LatentTransformer, sequence_logprobs
from .rewards import COMPONENTS, RewardConfig
from .rollout import (BiasSchedulerState, GroupBatch, SamplerConfig,
                      collect_groups, update_bias)
from .taskgen import TaskInstance

logger = logging.getLogger(__name__)


@dataclass
class RLConfig:
    mode: str = "lagdpo"
    n_updates: int = 200
    update_batch: int = 16
    ppo_epochs: int = 1
    lr: float = 1e-7
    warmup_ratio: float = 0.15
    max_grad_norm: float = 2.0
    weight_decay: float = 0.0
    beta: float = 0.03
    eps_low: float = 0.2
    eps_high: float = 0.3
    dual_clip: float = 3.0
    adv_eps: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("lagdpo", "grpo_like"):
            raise ValueError(f"unknown RL mode {self.mode!r}")
        if self.dual_clip <= 1 + self.eps_high:
            raise ValueError("dual_clip must exceed 1 + eps_high")


@dataclass
class AdvantageMap:
    per_group: list[np.ndarray]
    normalized: list[np.ndarray] | None = None

    def per_rollout(self) -> np.ndarray:
        return np.concatenate(self.per_group) if self.per_group else np.zeros(0)

    def broadcast(self, lengths: Sequence[int]) -> list[np.ndarray]:
        """Every response token of rollout j carries A_j."""
        flat = self.per_rollout()
        if len(flat) != len(lengths):
            raise ValueError("one length per rollout required")
        return [np.full(n, a) for a, n in zip(flat, lengths)]


def _normalize(x: np.ndarray, eps: float) -> np.ndarray:
    return (x - x.mean(axis=0)) / (x.std(axis=0) + eps)


def group_decoupled_advantages(groups: Sequence[GroupBatch], eps: float = 1e-6) -> AdvantageMap:
    normed, sums = [], []
    for g in groups:
        r = g.component_matrix()
        if r.shape[0] < 2:
            raise ValueError(f"group {g.prompt_id} has {r.shape[0]} samples; need at least 2")
        z = _normalize(r, eps)
        normed.append(z)
        sums.append(z.sum(axis=1))
    flat = np.concatenate(sums)
    white = (flat - flat.mean()) / (flat.std() + eps)
    out, i = [], 0
    for s in sums:
        out.append(white[i:i + len(s)])
        i += len(s)
    return AdvantageMap(out, normed)


def grpo_advantages(groups: Sequence[GroupBatch], eps: float = 1e-6) -> AdvantageMap:
    """Baseline: normalize the summed reward within each group, no component split."""
    out = []
    for g in groups:
        total = np.array([rb.total for rb in g.rewards], dtype=np.float64)
        if len(total) < 2:
            raise ValueError(f"group {g.prompt_id} has {len(total)} samples; need at least 2")
        out.append(_normalize(total, eps))
    return AdvantageMap(out)


def pg_token_loss(ratio, adv, eps_low: float = 0.2, eps_high: float = 0.3, dual_clip: float = 3.0):
    """Dual-clip surrogate: the usual clipped max for A >= 0, further capped at -c*A for A < 0."""
    ratio = torch.as_tensor(ratio, dtype=nk.DTYPE)
    adv = torch.as_tensor(adv, dtype=nk.DTYPE)
    clipped = torch.clamp(ratio, 1 - eps_low, 1 + eps_high)
    surr = torch.maximum(-ratio * adv, -clipped * adv)
    dual = torch.minimum(surr, -dual_clip * adv)
    return torch.where(adv < 0, dual, surr)


def kl_penalty(actor_logp, ref_logp):
    """Per-token ``exp(d) - d - 1`` with ``d = ref - actor``; zero iff the policies agree."""
    d = torch.as_tensor(ref_logp, dtype=nk.DTYPE) - torch.as_tensor(actor_logp, dtype=nk.DTYPE)
    return torch.exp(d) - d - 1


def lagdpo_loss(actor_logp: torch.Tensor, old_logp: torch.Tensor, ref_logp: torch.Tensor,
                adv: torch.Tensor, cfg: RLConfig):
    """Token-mean policy loss plus beta times token-mean KL over all response tokens."""
    ratio = torch.exp(actor_logp - old_logp)
    pg = pg_token_loss(ratio, adv, cfg.eps_low, cfg.eps_high, cfg.dual_clip).mean()
    kl = kl_penalty(actor_logp, ref_logp).mean()
    return pg + cfg.beta * kl, pg, kl


def _images(groups: Sequence[GroupBatch]) -> torch.Tensor:
    return torch.as_tensor([g.task.question_raster for g in groups for _ in g.rollouts], dtype=nk.DTYPE)


def lagdpo_update(groups: Sequence[GroupBatch], model: LatentTransformer, ref_model: LatentTransformer,
                  opt_state: nk.OptState, cfg: RLConfig, lr: float) -> dict:
    """One optimization pass over a rollout batch; returns scalar metrics."""
    rollouts = [r for g in groups for r in g.rollouts]
    adv_map = (group_decoupled_advantages(groups, cfg.adv_eps) if cfg.mode == "lagdpo"
               else grpo_advantages(groups, cfg.adv_eps))
    lengths = [len(r.tokens) for r in rollouts]
    adv = torch.as_tensor(np.concatenate(adv_map.broadcast(lengths)), dtype=nk.DTYPE)
    old = torch.as_tensor([lp for r in rollouts for lp in r.logp_actor], dtype=nk.DTYPE)
    images = _images(groups)
    with torch.no_grad():
        ref_rows = sequence_logprobs(ref_model, rollouts, images)
    for r, row in zip(rollouts, ref_rows):
        r.logp_ref = row.tolist()
    ref = torch.cat(ref_rows)
    params = model.trainable()
    metrics = {}
    for _ in range(cfg.ppo_epochs):
        params.zero_grad()
        actor = torch.cat(sequence_logprobs(model, rollouts, images))
        loss, pg, kl = lagdpo_loss(actor, old, ref, adv, cfg)
        if not math.isfinite(loss.item()):
            logger.warning("lagdpo_update: non-finite loss, update skipped")
            metrics["skipped"] = 1
            continue
        nk.backward(loss)
        scale = nk.clip_global_norm([p.grad for _, p in params], cfg.max_grad_norm)
        nk.optimizer_step(params, opt_state, lr=lr, weight_decay=cfg.weight_decay)
        metrics.update(loss=loss.item(), pg=pg.item(), kl=kl.item(), clip_scale=scale)
    params.zero_grad()
    return metrics


def warmup_lr(cfg: RLConfig, update_idx: int) -> float:
    warm = max(1, math.ceil(cfg.warmup_ratio * cfg.n_updates))
    return cfg.lr * min(1.0, (update_idx + 1) / warm)


def rollout_stats(groups: Sequence[GroupBatch], latent_size: int, vocab) -> dict:
    rb = [r for g in groups for r in g.rewards]
    rolls = [r for g in groups for r in g.rollouts]
    stats = {f"r_{k}": float(np.mean([x.component(k) for x in rb])) for k in COMPONENTS}
    stats["r_total"] = float(np.mean([x.total for x in rb]))
    stats["one_block_rate"] = float(np.mean([x.lat == 0.5 for x in rb]))
    stats["mean_len"] = float(np.mean([len(r.tokens) for r in rolls]))
    return stats


def train_rl(model: LatentTransformer, tasks: Sequence[TaskInstance], cfg: RLConfig,
             sampler: SamplerConfig, reward_cfg: RewardConfig, bias_state: BiasSchedulerState,
             log: Callable[[dict, float], None] | None = None, ref_model: LatentTransformer | None = None) -> list[dict]:
    """Run ``cfg.n_updates`` updates, each on ``cfg.update_batch`` fresh prompts."""
    if not tasks:
        raise ValueError("RL needs at least one task")
    ref_model = ref_model or model.clone()
    for p in ref_model.parameters():
        p.requires_grad_(False)
    opt_state = nk.OptState()
    rng = random.Random(cfg.seed)
    order: list[TaskInstance] = []
    history = []
    for u in range(cfg.n_updates):
        t0 = time.perf_counter()
        batch = []
        while len(batch) < cfg.update_batch:
            if not order:
                order = list(tasks)
                rng.shuffle(order)
            batch.append(order.pop())
        bias = bias_state.bias
        groups = collect_groups(batch, model, sampler, bias, reward_cfg,
                                base_seed=cfg.seed * 100_003 + u)
        stats = rollout_stats(groups, model.cfg.latent_size, model.vocab)
        new_bias = update_bias(bias_state, stats["r_lat"])
        lr = warmup_lr(cfg, u)
        m = lagdpo_update(groups, model, ref_model, opt_state, cfg, lr)
        rec = {"phase": "rl", "step": u, "lr": lr, "bias": bias, "next_bias": new_bias, **stats, **m}
        history.append(rec)
        if log is not None:
            log(rec, (time.perf_counter() - t0) * 1000)
    return history
