"""Sampling harness: nucleus decoding, group collection and the latent-bias scheduler."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .latent_model import LatentTransformer, Rollout, generate
from .rewards import COMPONENTS, RewardBreakdown, RewardConfig, Response, total_reward
from .taskgen import TaskInstance


@dataclass
class SamplerConfig:
    temperature: float = 0.9
    top_p: float = 0.99
    max_response_len: int = 2048
    n_samples: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must lie in (0, 1]")


@dataclass
class BiasSchedulerState:
    b0: float = 10.0
    decay: float = 1.0
    rho: float = 0.9
    b_min: float = 0.0
    ema: float = 0.0
    step: int = 0
    enabled: bool = True

    @property
    def bias(self) -> float:
        if not self.enabled:
            return 0.0
        # a negative EMA would push the bias above b0; cap it there
        return min(self.b0, max(self.b_min, self.b0 * math.exp(-self.decay * self.ema)))


def update_bias(state: BiasSchedulerState, batch_mean_latent_reward: float) -> float:
    """EMA the batch latent reward, then recompute the bias from the new EMA."""
    state.ema = state.rho * state.ema + (1 - state.rho) * batch_mean_latent_reward
    state.step += 1
    return state.bias


@dataclass
class GroupBatch:
    prompt_id: str
    task: TaskInstance
    rollouts: list[Rollout]
    rewards: list[RewardBreakdown] = field(default_factory=list)

    def __post_init__(self):
        if any(r.prompt_ids != self.rollouts[0].prompt_ids for r in self.rollouts):
            raise ValueError("all rollouts in a group must share the prompt")

    def component_matrix(self) -> np.ndarray:
        """(N, 5) rewards ordered as :data:`COMPONENTS`."""
        return np.array([[rb.component(k) for k in COMPONENTS] for rb in self.rewards], dtype=np.float64)


def prompt_ids_for(task: TaskInstance, model: LatentTransformer) -> list[int]:
    v = model.vocab
    return [v.bos_id] + v.encode(task.question) + [v.ans_id]


def score_rollout(rollout: Rollout, truth: str, model: LatentTransformer,
                  reward_cfg: RewardConfig) -> RewardBreakdown:
    resp = Response(model.vocab.to_tokens(rollout.tokens), rollout.text)
    return total_reward(resp, truth, reward_cfg)


def sample_response(task: TaskInstance, model: LatentTransformer, sampler: SamplerConfig,
                    bias: float, seed: int | None = None, image: bool = True) -> Rollout:
    img = torch.as_tensor([task.question_raster], dtype=torch.float64) if image else None
    seed = sampler.seed if seed is None else seed
    return generate(model, [prompt_ids_for(task, model)], img, max_new_tokens=sampler.max_response_len,
                    greedy=False, temperature=sampler.temperature, top_p=sampler.top_p, bias=bias,
                    seeds=[seed], prompt_ids=[task.id])[0]


def collect_groups(tasks: Sequence[TaskInstance], model: LatentTransformer, sampler: SamplerConfig,
                   bias: float, reward_cfg: RewardConfig, base_seed: int = 0) -> list[GroupBatch]:
    """N rollouts per task, all decoded in one batch, each with its own sub-seed."""
    n = sampler.n_samples
    if n < 2:
        raise ValueError("need at least 2 samples per prompt")
    prompts, images, seeds, pids = [], [], [], []
    for ti, task in enumerate(tasks):
        p = prompt_ids_for(task, model)
        for j in range(n):
            prompts.append(p)
            images.append(task.question_raster)
            seeds.append(_sub_seed(base_seed, ti, j))
            pids.append(task.id)
    rolls = generate(model, prompts, torch.as_tensor(images, dtype=torch.float64),
                     max_new_tokens=sampler.max_response_len, greedy=False,
                     temperature=sampler.temperature, top_p=sampler.top_p, bias=bias,
                     seeds=seeds, prompt_ids=pids)
    groups = []
    for ti, task in enumerate(tasks):
        rs = rolls[ti * n:(ti + 1) * n]
        for j, r in enumerate(rs):
            r.sample_idx = j
            r.reward = score_rollout(r, task.answer, model, reward_cfg)
        groups.append(GroupBatch(task.id, task, rs, [r.reward for r in rs]))
    return groups


def collect_group(task: TaskInstance, model: LatentTransformer, sampler: SamplerConfig,
                  state: BiasSchedulerState, reward_cfg: RewardConfig | None = None,
                  base_seed: int = 0) -> GroupBatch:
    return collect_groups([task], model, sampler, state.bias, reward_cfg or RewardConfig(), base_seed)[0]


def batch_mean_latent_reward(groups: Sequence[GroupBatch]) -> float:
    vals = [rb.lat for g in groups for rb in g.rewards]
    return float(np.mean(vals)) if vals else 0.0


def _sub_seed(base: int, task_idx: int, sample_idx: int) -> int:
    return int(np.random.SeedSequence([base, task_idx, sample_idx]).generate_state(1)[0])


def dump_rollouts(groups: Sequence[GroupBatch], fh) -> None:
    for g in groups:
        for r in g.rollouts:
            fh.write(json.dumps({
                "prompt_id": r.prompt_id,
                "sample_idx": r.sample_idx,
                "tokens": r.tokens,
                "text": r.text,
                "logp_actor": r.logp_actor,
                "logp_ref": r.logp_ref,
                "reward_breakdown": r.reward.as_dict() if r.reward is not None else None,
            }) + "\n")
