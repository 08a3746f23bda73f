"""Three-stage supervised curriculum.

Stage 1 aligns latent-position hidden states to projected auxiliary-diagram
features. Stage 2 adds a plan-only stream (no image prefix) supervised
against the same targets and pulled toward the image stream. Stage 3 is plain
cross-entropy over plan, latent block and answer.
"""

from __future__ import annotations

import logging
import math
import random
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import torch

from . import numkernel as nk
from .alignment import AlignWeights, align_loss, consistency_loss, stage2_loss, stage3_ce
from .checkpoint import save_checkpoint
from .latent_model import LatentTransformer, SequenceLayout, latent_hidden, left_pad
from .taskgen import TaskInstance
from .vocab import BOX_CLOSE, BOX_OPEN, EOS, LATENT_END, LATENT_PAD, LATENT_START

logger = logging.getLogger(__name__)

DEFAULT_EPOCHS = {1: 5, 2: 2, 3: 5}


class StageOrderError(RuntimeError):
    pass


@dataclass
class StageConfig:
    stage: int
    epochs: int | None = None
    lr: float = 1e-5
    weight_decay: float = 0.01
    batch_size: int = 8
    seed: int = 0
    align: AlignWeights = field(default_factory=AlignWeights)
    cosine_schedule: bool = True
    stage1_ce_weight: float = 0.0
    plan_stream: bool = True
    allow_out_of_order: bool = False

    def __post_init__(self):
        if self.stage not in (1, 2, 3):
            raise ValueError(f"stage must be 1, 2 or 3, got {self.stage}")
        if self.epochs is None:
            self.epochs = DEFAULT_EPOCHS[self.stage]
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class StageResult:
    stage: int
    epoch_means: list[dict]
    skipped: int = 0
    checkpoints: list[str] = field(default_factory=list)
    init_loss: dict | None = None


def response_tokens(task: TaskInstance, latent_size: int) -> list[str]:
    """Assistant output: plan, latent block (when K > 0), boxed answer, end marker."""
    toks = list(task.plan)
    if latent_size > 0:
        toks += [LATENT_START] + [LATENT_PAD] * latent_size + [LATENT_END]
    return toks + [BOX_OPEN, *list(task.answer), BOX_CLOSE, EOS]


@dataclass
class Batch:
    ids: torch.Tensor
    mask: torch.Tensor
    offsets: list[int]
    layouts: list[SequenceLayout]
    images: torch.Tensor
    aux: torch.Tensor | None
    targets: torch.Tensor
    loss_mask: torch.Tensor


def make_batch(tasks: Sequence[TaskInstance], model: LatentTransformer) -> Batch:
    v = model.vocab
    k = model.cfg.latent_size
    seqs, layouts = [], []
    for t in tasks:
        prompt = [v.bos_id] + v.encode(t.question) + [v.ans_id]
        full = prompt + v.encode_tokens(response_tokens(t, k))
        seqs.append(full)
        layouts.append(SequenceLayout.from_ids(full, len(prompt), v, k))
    ids, mask, offsets = left_pad(seqs, v.pad_id)
    targets = torch.full_like(ids, v.pad_id)
    targets[:, :-1] = ids[:, 1:]
    loss_mask = torch.zeros_like(mask)
    for i, lay in enumerate(layouts):
        # position q predicts token q+1; supervise every response token
        lo = offsets[i] + lay.response_start - 1
        loss_mask[i, lo:ids.shape[1] - 1] = True
    images = torch.as_tensor([t.question_raster for t in tasks], dtype=nk.DTYPE)
    aux = None
    if all(t.aux_raster is not None for t in tasks):
        aux = torch.as_tensor([t.aux_raster for t in tasks], dtype=nk.DTYPE)
    return Batch(ids, mask, offsets, layouts, images, aux, targets, loss_mask)


def _stub_snapshot(model: LatentTransformer) -> list[torch.Tensor]:
    return [p.detach().clone() for p in model.stub.parameters()]


def _check_stub(model: LatentTransformer, snap: list[torch.Tensor]) -> None:
    for p, s in zip(model.stub.parameters(), snap):
        if p.requires_grad or p.grad is not None or not torch.equal(p, s):
            raise RuntimeError("visual stub parameters changed or received gradient")


def stage_losses(model: LatentTransformer, batch: Batch, cfg: StageConfig) -> dict[str, torch.Tensor]:
    """Loss components for one batch; ``loss`` is the optimized total."""
    w = cfg.align
    if cfg.stage == 3:
        logits, _ = model(batch.ids, batch.images, batch.mask)
        ce = stage3_ce(logits, batch.targets, batch.loss_mask)
        return {"loss": ce, "ce": ce}
    if batch.aux is None:
        raise ValueError("alignment stages need auxiliary rasters")
    target = model.project_target(batch.aux)
    logits, hidden = model(batch.ids, batch.images, batch.mask)
    h_img = latent_hidden(hidden, batch.layouts, batch.offsets)
    if h_img is None:
        raise ValueError("alignment stages need a latent block in every sequence")
    l_img = align_loss(h_img, target, w)
    if cfg.stage == 1:
        out = {"align": l_img}
        loss = l_img
        if cfg.stage1_ce_weight:
            ce = stage3_ce(logits, batch.targets, batch.loss_mask)
            out["ce"] = ce
            loss = loss + cfg.stage1_ce_weight * ce
        out["loss"] = loss
        return out
    ce = stage3_ce(logits, batch.targets, batch.loss_mask)
    sim_img = w.stage * l_img
    out = {"ce": ce, "sim_img": sim_img}
    if cfg.plan_stream:
        _, hidden_txt = model(batch.ids, None, batch.mask)
        h_txt = latent_hidden(hidden_txt, batch.layouts, batch.offsets)
        sim_txt = w.stage * align_loss(h_txt, target, w)
        cons = consistency_loss(h_txt, h_img)
        out.update(sim_txt=sim_txt, cons=cons, align_txt=sim_txt / w.stage)
    else:
        sim_txt = cons = torch.zeros((), dtype=nk.DTYPE)
    out["loss"] = stage2_loss(ce, sim_img, sim_txt, cons)
    return out


def _filter(tasks: Sequence[TaskInstance], cfg: StageConfig) -> tuple[list[TaskInstance], int]:
    if cfg.stage == 3:
        return list(tasks), 0
    kept = [t for t in tasks if t.aux_raster is not None]
    return kept, len(tasks) - len(kept)


@torch.no_grad()
def evaluate_stage_loss(model: LatentTransformer, tasks: Sequence[TaskInstance], cfg: StageConfig) -> dict:
    """Mean loss components over ``tasks`` without updating anything."""
    tasks, _ = _filter(tasks, cfg)
    sums: dict[str, float] = {}
    n = 0
    for i in range(0, len(tasks), cfg.batch_size):
        chunk = tasks[i:i + cfg.batch_size]
        parts = stage_losses(model, make_batch(chunk, model), cfg)
        for key, val in parts.items():
            sums[key] = sums.get(key, 0.0) + float(val) * len(chunk)
        n += len(chunk)
    return {key: val / n for key, val in sums.items()}


def run_stage(tasks: Sequence[TaskInstance], model: LatentTransformer, cfg: StageConfig,
              run_dir: str | Path | None = None, log: Callable[[dict, float], None] | None = None,
              save_every_epoch: bool = True) -> StageResult:
    if model.completed_stage < cfg.stage - 1 and not cfg.allow_out_of_order:
        raise StageOrderError(
            f"stage {cfg.stage} needs a stage-{cfg.stage - 1} checkpoint "
            f"(model has completed stage {model.completed_stage})")
    if model.cfg.latent_size == 0 and cfg.stage in (1, 2):
        raise ValueError("alignment stages need latent_size > 0")
    data, skipped = _filter(tasks, cfg)
    if skipped:
        logger.warning("stage %d: skipped %d tasks without an auxiliary raster", cfg.stage, skipped)
    result = StageResult(cfg.stage, [], skipped)
    if not data:
        raise ValueError(f"stage {cfg.stage}: no usable tasks")
    snap = _stub_snapshot(model)
    params = model.trainable()
    opt = nk.OptState()
    rng = random.Random(f"stage{cfg.stage}:{cfg.seed}")
    steps_per_epoch = math.ceil(len(data) / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = list(data)
        rng.shuffle(order)
        sums: dict[str, float] = {}
        for i in range(0, len(order), cfg.batch_size):
            t0 = time.perf_counter()
            chunk = order[i:i + cfg.batch_size]
            parts = stage_losses(model, make_batch(chunk, model), cfg)
            loss = parts["loss"]
            params.zero_grad()
            lr = cfg.lr * (0.5 * (1 + math.cos(math.pi * step / total)) if cfg.cosine_schedule else 1.0)
            if not math.isfinite(loss.item()):
                logger.warning("stage %d step %d: non-finite loss, skipped", cfg.stage, step)
            else:
                nk.backward(loss)
                nk.optimizer_step(params, opt, lr=lr, weight_decay=cfg.weight_decay)
            _check_stub(model, snap)
            rec = {"stage": cfg.stage, "epoch": epoch, "step": step, "lr": lr,
                   **{key: val.item() for key, val in parts.items()}}
            for key, val in parts.items():
                sums[key] = sums.get(key, 0.0) + val.item() * len(chunk)
            if log is not None:
                log(rec, (time.perf_counter() - t0) * 1000)
            step += 1
        result.epoch_means.append({key: val / len(order) for key, val in sums.items()})
        params.zero_grad()
        if epoch == cfg.epochs:
            model.completed_stage = max(model.completed_stage, cfg.stage)
        if run_dir is not None and (save_every_epoch or epoch == cfg.epochs):
            path = Path(run_dir) / "checkpoints" / f"stage{cfg.stage}_epoch{epoch}.lgeo"
            save_checkpoint(model, path, {"stage": cfg.stage, "epoch": epoch})
            result.checkpoints.append(str(path))
    model.completed_stage = max(model.completed_stage, cfg.stage)
    return result


def run_stage1(tasks, model, cfg: StageConfig | None = None, **kw) -> StageResult:
    return run_stage(tasks, model, cfg or StageConfig(1), **kw)


def run_stage2(tasks, model, cfg: StageConfig | None = None, **kw) -> StageResult:
    return run_stage(tasks, model, cfg or StageConfig(2), **kw)


def run_stage3(tasks, model, cfg: StageConfig | None = None, **kw) -> StageResult:
    return run_stage(tasks, model, cfg or StageConfig(3), **kw)
