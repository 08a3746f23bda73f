"""Run orchestration behind the command line: train, eval, reward-check, gen-data."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import replace
from importlib import resources
from pathlib import Path
from typing import Iterable

import torch

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig
from .curriculum import run_stage
from .evaluate import evaluate
from .lagdpo import train_rl
from .latent_model import LatentTransformer
from .metrics import MetricsWriter
from .rewards import COMPONENTS, RewardConfig, Response, total_reward
from .taskgen import KINDS, TaskInstance, load_dataset, make_dataset, save_dataset, split_dataset

logger = logging.getLogger(__name__)

FIXTURE_TOL = 1e-9


class HarnessError(Exception):
    """Failure with a stable machine-readable code and process exit status."""

    EXIT = {"E_CONFIG": 2, "E_NOFILE": 3, "E_DATA": 4, "E_CHECKPOINT": 5, "E_FIXTURE": 6}

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code

    @property
    def exit_status(self) -> int:
        return self.EXIT.get(self.code, 1)

    def line(self) -> str:
        return f"error {self.code}: {' '.join(str(self).split())}"


def _require_file(path: str | Path, what: str) -> Path:
    p = Path(path)
    if not str(path) or not p.is_file():
        raise HarnessError("E_NOFILE", f"{what} not found: {path!s}")
    return p


def _read_tasks(path: str | Path) -> list[TaskInstance]:
    try:
        tasks = load_dataset(_require_file(path, "dataset"))
    except ValueError as exc:
        raise HarnessError("E_DATA", str(exc)) from exc
    if not tasks:
        raise HarnessError("E_DATA", f"dataset {path} is empty")
    return tasks


def load_config(path: str | Path | None, **overrides) -> RunConfig:
    clean = {k: v for k, v in overrides.items() if v is not None}
    try:
        if path is None:
            return RunConfig(**clean)
        return RunConfig.from_file(_require_file(path, "config"), **clean)
    except (ConfigError, TypeError) as exc:
        raise HarnessError("E_CONFIG", str(exc)) from exc


# ---- train ------------------------------------------------------------------

def _check_prompts(tasks: Iterable[TaskInstance], model: LatentTransformer, cfg: RunConfig) -> None:
    for t in tasks:
        try:
            n = len(model.vocab.encode(t.question)) + 2
        except KeyError as exc:
            raise HarnessError("E_DATA", f"task {t.id}: token {exc} not in vocabulary") from None
        if n > cfg.max_prompt_len:
            raise HarnessError("E_DATA", f"task {t.id}: prompt of {n} tokens exceeds max_prompt_len")
        if n + model.cfg.n_patches >= model.cfg.max_seq_len:
            raise HarnessError("E_DATA", f"task {t.id}: prompt does not fit max_seq_len")


def train(cfg: RunConfig, tasks: list[TaskInstance], run_dir: str | Path) -> dict:
    """Stages 1-3 then RL as the toggles allow; returns a deterministic summary."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    torch.set_num_threads(cfg.num_threads)
    torch.manual_seed(cfg.seed)

    if cfg.sft_fraction < 1:
        sft_tasks, rl_tasks = split_dataset(tasks, (cfg.sft_fraction, 1 - cfg.sft_fraction), cfg.seed)
    else:
        sft_tasks = rl_tasks = list(tasks)
    model = LatentTransformer(cfg.model_config())
    _check_prompts(tasks, model, cfg)

    stages = [3] if cfg.text_only else [1, 2, 3]
    if cfg.skip_stage2:
        stages = [s for s in stages if s != 2]
    if cfg.skip_stage3:
        stages = [s for s in stages if s != 3]
    summary: dict = {"n_sft": len(sft_tasks), "n_rl": len(rl_tasks), "stages": {}}
    with MetricsWriter(run_dir) as log:
        def stage_log(rec, ms):
            log({"phase": f"stage{rec['stage']}", **rec}, ms)

        for s in stages:
            # a skipped predecessor is an intended ablation, not an ordering mistake
            scfg = cfg.stage_config(s, allow_out_of_order=s > 1 and s - 1 not in stages)
            res = run_stage(sft_tasks, model, scfg, run_dir, stage_log, cfg.save_every_epoch)
            summary["stages"][s] = {"epoch_means": res.epoch_means, "skipped": res.skipped}
        sft_path = run_dir / "checkpoints" / "sft_final.lgeo"
        save_checkpoint(model, sft_path, {"phase": "sft"})
        if cfg.eval_after_train:
            summary["eval_sft"] = _eval_summary(model, rl_tasks, cfg)
        if cfg.rl_mode != "none":
            bias_state = cfg.bias_state()
            hist = train_rl(model, rl_tasks, cfg.rl_config(), cfg.sampler_config(),
                            cfg.reward_config(), bias_state, log=log)
            summary["rl"] = {"final": hist[-1] if hist else None, "final_bias": bias_state.bias}
            if cfg.eval_after_train:
                summary["eval_rl"] = _eval_summary(model, rl_tasks, cfg)
    final = run_dir / "checkpoints" / "final.lgeo"
    save_checkpoint(model, final, {"phase": "final"})
    summary["final_checkpoint"] = str(final)
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True), encoding="utf-8")
    return summary


def _eval_summary(model: LatentTransformer, tasks: list[TaskInstance], cfg: RunConfig) -> dict:
    rep = evaluate(model, tasks, cfg.max_response_len, cfg.eval_batch_size, cfg.numeric_tol)
    rep.pop("predictions")
    return rep


def cmd_train(config: str | Path | RunConfig | None, seed: int | None = None,
              out: str | Path | None = None) -> Path:
    if isinstance(config, RunConfig):
        cfg = config if seed is None else replace(config, seed=seed)
    else:
        cfg = load_config(config, seed=seed)
    tasks = _read_tasks(cfg.dataset)
    run_dir = Path(out) if out is not None else Path("runs") / f"seed{cfg.seed}"
    train(cfg, tasks, run_dir)
    return run_dir


# ---- eval -------------------------------------------------------------------

def cmd_eval(checkpoint: str | Path, dataset: str | Path, out: str | Path | None = None,
             max_new_tokens: int = 64) -> dict:
    try:
        model, _ = load_checkpoint(_require_file(checkpoint, "checkpoint"))
    except (CheckpointError, OSError) as exc:
        raise HarnessError("E_CHECKPOINT", str(exc)) from exc
    tasks = _read_tasks(dataset)
    report = evaluate(model, tasks, max_new_tokens)
    if out is not None:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(json.dumps(report, indent=2, sort_keys=True), encoding="utf-8")
    return report


# ---- reward-check -----------------------------------------------------------

def default_fixture() -> Path:
    return Path(str(resources.files("auxlatent") / "data" / "reward_fixture.jsonl"))


def _fixture_reward_config(case: dict) -> RewardConfig:
    kw = dict(case.get("config", {}))
    if "L_max" in case:
        kw["l_max"] = case["L_max"]
    try:
        return RewardConfig(**kw)
    except (TypeError, ValueError) as exc:
        raise ValueError(f"bad config ({exc})") from exc


def check_reward_case(case: dict) -> tuple[dict, list[str]]:
    """Recomputed breakdown and the fields that differ from ``case['expected']``."""
    cfg = _fixture_reward_config(case)
    resp = Response.from_text(case["response_text"])
    got = total_reward(resp, case["truth"], cfg).as_dict()
    diffs = []
    for key in (*COMPONENTS, "total"):
        if key not in case["expected"]:
            continue
        want = float(case["expected"][key])
        if not math.isclose(got[key], want, rel_tol=0.0, abs_tol=FIXTURE_TOL):
            diffs.append(f"{key}: expected {want!r}, got {got[key]!r}")
    return got, diffs


def cmd_reward_check(fixture: str | Path | None = None) -> tuple[list[dict], bool]:
    """Recompute every case; rows carry the breakdown, a pass flag and named diffs."""
    path = _require_file(fixture, "fixture") if fixture is not None else default_fixture()
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                case = json.loads(line)
                got, diffs = check_reward_case(case)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError, AttributeError) as exc:
                raise HarnessError("E_FIXTURE", f"{path}:{lineno}: malformed fixture line ({exc!r})") from exc
            rows.append({"line": lineno, "name": case.get("name", f"case{lineno}"),
                         "ok": not diffs, "diffs": diffs, "breakdown": got})
    if not rows:
        raise HarnessError("E_FIXTURE", f"{path}: fixture has no cases")
    return rows, all(r["ok"] for r in rows)


# ---- gen-data ---------------------------------------------------------------

def cmd_gen_data(n: int, seed: int, out: str | Path, mc_fraction: float = 0.25,
                 kinds: tuple[str, ...] = KINDS) -> Path:
    if n < 1:
        raise HarnessError("E_CONFIG", "n must be >= 1")
    bad = [k for k in kinds if k not in KINDS]
    if bad:
        raise HarnessError("E_CONFIG", f"unknown task kinds {bad}")
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(make_dataset(n, seed, kinds, mc_fraction), out)
    return out
