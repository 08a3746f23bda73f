"""Greedy evaluation: answer extraction, then deterministic judging."""

from __future__ import annotations

import logging
from collections import defaultdict
from typing import Sequence

import numpy as np
import torch

from .latent_model import LatentTransformer, Rollout, generate
from .rewards import Response, answer_equivalent, has_closed_box, parse_answer
from .rollout import prompt_ids_for
from .taskgen import TaskInstance

logger = logging.getLogger(__name__)


def greedy_rollouts(model: LatentTransformer, tasks: Sequence[TaskInstance], max_new_tokens: int = 64,
                    batch_size: int = 64, bias: float = 0.0) -> list[Rollout]:
    out = []
    for i in range(0, len(tasks), batch_size):
        chunk = tasks[i:i + batch_size]
        prompts = [prompt_ids_for(t, model) for t in chunk]
        images = torch.as_tensor([t.question_raster for t in chunk], dtype=torch.float64)
        out += generate(model, prompts, images, max_new_tokens=max_new_tokens, greedy=True,
                        bias=bias, prompt_ids=[t.id for t in chunk])
    return out


def evaluate(model: LatentTransformer, tasks: Sequence[TaskInstance], max_new_tokens: int = 64,
             batch_size: int = 64, tol: float = 0.02) -> dict:
    """Accuracy overall and per kind, exactly-one-block rate, boxed rate, mean length."""
    if not tasks:
        raise ValueError("evaluation needs at least one task")
    try:
        rolls = greedy_rollouts(model, tasks, max_new_tokens, batch_size)
    except Exception:  # noqa: BLE001 - a failed batch is scored as wrong, per item
        logger.exception("generation failed; falling back to per-item decoding")
        rolls = []
        for t in tasks:
            try:
                rolls += greedy_rollouts(model, [t], max_new_tokens, 1)
            except Exception:  # noqa: BLE001
                logger.exception("generation failed for %s", t.id)
                rolls.append(None)
    correct, one_block, boxed, lengths = [], [], [], []
    per_kind = defaultdict(list)
    predictions = []
    for t, r in zip(tasks, rolls):
        if r is None:
            ok, n_lat, box, ln, pred = 0, 0, False, 0, None
        else:
            resp = Response(model.vocab.to_tokens(r.tokens), r.text)
            pred = parse_answer(r.text)
            ok = answer_equivalent(pred, t.answer, tol)
            n_lat, box, ln = resp.n_lat, has_closed_box(r.text), resp.length
        correct.append(ok)
        per_kind[t.kind].append(ok)
        one_block.append(n_lat == 1)
        boxed.append(box)
        lengths.append(ln)
        predictions.append(pred)
    return {
        "n": len(tasks),
        "accuracy": float(np.mean(correct)),
        "per_kind": {k: float(np.mean(v)) for k, v in sorted(per_kind.items())},
        "one_block_rate": float(np.mean(one_block)),
        "boxed_rate": float(np.mean(boxed)),
        "boxed_and_one_block_rate": float(np.mean([a and b for a, b in zip(one_block, boxed)])),
        "mean_response_len": float(np.mean(lengths)),
        "predictions": predictions,
    }
