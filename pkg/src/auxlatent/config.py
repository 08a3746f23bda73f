"""Flat ``key = value`` run configuration.

Every key has a default, so an empty file gives the full-size SFT/RL settings
on the toy model. Lines starting with ``#`` (and trailing ``# ...``) are
comments. Unknown keys are errors.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .alignment import AlignWeights
from .curriculum import StageConfig
from .lagdpo import RLConfig
from .latent_model import ModelConfig
from .rewards import RewardConfig
from .rollout import BiasSchedulerState, SamplerConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    dataset: str = ""
    sft_fraction: float = 0.8
    num_threads: int = 1

    # model
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    latent_size: int = 10
    max_seq_len: int = 1024
    raster_size: int = 16
    patch_size: int = 4
    d_vis: int = 32

    # supervised stages
    sft_lr: float = 1e-5
    sft_weight_decay: float = 0.01
    sft_batch_size: int = 8
    stage1_epochs: int = 5
    stage2_epochs: int = 2
    stage3_epochs: int = 5
    stage2_align_weight: float = 2.0
    stage3_align_weight: float = 2.0
    lambda_cos: float = 1.0
    lambda_mse: float = 1.0
    stage1_ce_weight: float = 0.0
    cosine_schedule: bool = True
    save_every_epoch: bool = True

    # reinforcement learning
    rl_mode: str = "lagdpo"
    rl_updates: int = 200
    kl_coef: float = 0.03
    ppo_epochs: int = 1
    clip_low: float = 0.2
    clip_high: float = 0.3
    dual_clip: float = 3.0
    rl_lr: float = 1e-7
    rl_weight_decay: float = 0.0
    warmup_ratio: float = 0.15
    max_grad_norm: float = 2.0
    update_batch: int = 16
    samples_per_prompt: int = 8
    max_prompt_len: int = 4096
    max_response_len: int = 2048
    temperature: float = 0.9
    top_p: float = 0.99
    adv_eps: float = 1e-6

    # rewards
    length_reward_max: float = 0.2
    rep_penalty_weight: float = 1.2
    rep_max_penalty: float = 2.0
    rep_tau3: float = 0.18
    rep_tau4: float = 0.12
    rep_run_m0: int = 6
    numeric_tol: float = 0.02
    rep_combination: str = "sum"
    len_onset: str = "literal"

    # latent bias scheduler
    latent_bias_enabled: bool = True
    latent_logit_bias: float = 10.0
    latent_bias_decay: float = 1.0
    latent_reward_ema: float = 0.9
    latent_bias_min: float = 0.0

    # ablations
    skip_stage2: bool = False
    skip_stage3: bool = False
    plan_stream: bool = True
    text_only: bool = False

    # evaluation
    eval_after_train: bool = True
    eval_batch_size: int = 64

    def __post_init__(self):
        if self.rl_mode not in ("lagdpo", "grpo_like", "none"):
            raise ConfigError(f"rl_mode must be lagdpo, grpo_like or none, got {self.rl_mode!r}")
        if not 0 < self.sft_fraction <= 1:
            raise ConfigError("sft_fraction must lie in (0, 1]")
        try:
            self.model_config()
            self.reward_config()
            self.sampler_config()
            self.rl_config()
            self.align_weights(2)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    # -- derived component configs -----------------------------------------

    def model_config(self) -> ModelConfig:
        return ModelConfig(d_model=self.d_model, n_layers=self.n_layers, n_heads=self.n_heads,
                           latent_size=0 if self.text_only else self.latent_size,
                           max_seq_len=self.max_seq_len, raster_size=self.raster_size,
                           patch_size=self.patch_size, d_vis=self.d_vis, seed=self.seed)

    def align_weights(self, stage: int) -> AlignWeights:
        w = {1: 1.0, 2: self.stage2_align_weight, 3: self.stage3_align_weight}[stage]
        return AlignWeights(self.lambda_cos, self.lambda_mse, w)

    def stage_config(self, stage: int, allow_out_of_order: bool = False) -> StageConfig:
        epochs = {1: self.stage1_epochs, 2: self.stage2_epochs, 3: self.stage3_epochs}[stage]
        return StageConfig(stage, epochs=epochs, lr=self.sft_lr, weight_decay=self.sft_weight_decay,
                           batch_size=self.sft_batch_size, seed=self.seed, align=self.align_weights(stage),
                           cosine_schedule=self.cosine_schedule, stage1_ce_weight=self.stage1_ce_weight,
                           plan_stream=self.plan_stream, allow_out_of_order=allow_out_of_order)

    def reward_config(self) -> RewardConfig:
        return RewardConfig(l_max=self.max_response_len, lambda_len=self.length_reward_max,
                            lambda_rep=self.rep_penalty_weight, tau3=self.rep_tau3, tau4=self.rep_tau4,
                            m0=self.rep_run_m0, r_max=self.rep_max_penalty, tol=self.numeric_tol,
                            rep_combination=self.rep_combination, len_onset=self.len_onset)

    def sampler_config(self) -> SamplerConfig:
        return SamplerConfig(temperature=self.temperature, top_p=self.top_p,
                             max_response_len=self.max_response_len, n_samples=self.samples_per_prompt,
                             seed=self.seed)

    def rl_config(self) -> RLConfig:
        return RLConfig(mode="lagdpo" if self.rl_mode == "none" else self.rl_mode,
                        n_updates=self.rl_updates, update_batch=self.update_batch,
                        ppo_epochs=self.ppo_epochs, lr=self.rl_lr, warmup_ratio=self.warmup_ratio,
                        max_grad_norm=self.max_grad_norm, weight_decay=self.rl_weight_decay,
                        beta=self.kl_coef, eps_low=self.clip_low, eps_high=self.clip_high,
                        dual_clip=self.dual_clip, adv_eps=self.adv_eps, seed=self.seed)

    def bias_state(self) -> BiasSchedulerState:
        return BiasSchedulerState(b0=self.latent_logit_bias, decay=self.latent_bias_decay,
                                  rho=self.latent_reward_ema, b_min=self.latent_bias_min,
                                  enabled=self.latent_bias_enabled)

    # -- text round trip ---------------------------------------------------

    @classmethod
    def from_text(cls, text: str, **overrides) -> "RunConfig":
        types = {f.name: type(f.default) for f in fields(cls)}
        values: dict = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            values[key] = _coerce(key, val, types[key], lineno)
        for key, val in overrides.items():
            if key not in types:
                raise ConfigError(f"unknown key {key!r}")
            values[key] = val
        return cls(**values)

    @classmethod
    def from_file(cls, path: str | Path, **overrides) -> "RunConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"), **overrides)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"


def _coerce(key: str, val: str, typ: type, lineno: int):
    try:
        if typ is bool:
            low = val.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(val)
            return low in ("true", "1", "yes")
        if typ is int:
            return int(val)
        if typ is float:
            return float(val)
        return val
    except ValueError:
        raise ConfigError(f"line {lineno}: {key} expects {typ.__name__}, got {val!r}") from None
