"""scikit-learn style wrapper around the training pipeline."""

from __future__ import annotations

import tempfile

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import numkernel as nk
from .checkpoint import load_checkpoint
from .config import RunConfig
from .evaluate import evaluate, greedy_rollouts
from .harness import train
from .latent_model import latent_hidden, left_pad
from .rewards import answer_equivalent
from .validation import check_answers, check_tasks


class LatentGeoSolver(BaseEstimator):
    """Fit runs the curriculum (and RL unless ``rl_mode='none'``) on the given tasks.

    Every constructor argument is a :class:`RunConfig` key.
    """

    def __init__(self, d_model=64, n_layers=2, n_heads=4, latent_size=10, sft_lr=1e-3,
                 sft_batch_size=8, stage1_epochs=5, stage2_epochs=2, stage3_epochs=5,
                 rl_mode="none", rl_updates=200, rl_lr=1e-5, max_response_len=64,
                 sft_fraction=1.0, seed=0, run_dir=None):
        self.d_model = d_model
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.latent_size = latent_size
        self.sft_lr = sft_lr
        self.sft_batch_size = sft_batch_size
        self.stage1_epochs = stage1_epochs
        self.stage2_epochs = stage2_epochs
        self.stage3_epochs = stage3_epochs
        self.rl_mode = rl_mode
        self.rl_updates = rl_updates
        self.rl_lr = rl_lr
        self.max_response_len = max_response_len
        self.sft_fraction = sft_fraction
        self.seed = seed
        self.run_dir = run_dir

    def _run_config(self) -> RunConfig:
        params = self.get_params()
        params.pop("run_dir")
        return RunConfig(**params, eval_after_train=False, save_every_epoch=False)

    def fit(self, X, y=None):
        tasks = check_tasks(X)
        if check_answers(y, len(tasks)) is not None:
            raise ValueError("labels come from the tasks themselves; pass y=None")
        cfg = self._run_config()
        if self.run_dir is None:
            with tempfile.TemporaryDirectory() as d:
                self.summary_ = train(cfg, tasks, d)
                self.model_ = self._load(self.summary_["final_checkpoint"])
        else:
            self.summary_ = train(cfg, tasks, self.run_dir)
            self.model_ = self._load(self.summary_["final_checkpoint"])
        return self

    @staticmethod
    def _load(path):
        return load_checkpoint(path)[0]

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        tasks = check_tasks(X)
        rep = evaluate(self.model_, tasks, self.max_response_len)
        return np.array([p if p is not None else "" for p in rep["predictions"]], dtype=object)

    def score(self, X, y=None) -> float:
        tasks = check_tasks(X)
        truth = check_answers(y, len(tasks)) or [t.answer for t in tasks]
        pred = self.predict(tasks)
        return float(np.mean([answer_equivalent(p or None, t) for p, t in zip(pred, truth)]))

    @torch.no_grad()
    def transform(self, X) -> np.ndarray:
        """Latent-position hidden states of the greedy response, (n, K * d_model); NaN rows when no block."""
        check_is_fitted(self, "model_")
        tasks = check_tasks(X)
        m = self.model_
        k, d = m.cfg.latent_size, m.cfg.d_model
        out = np.full((len(tasks), k * d), np.nan)
        rolls = greedy_rollouts(m, tasks, self.max_response_len)
        for i, (t, r) in enumerate(zip(tasks, rolls)):
            lay = r.layout(m.vocab, k)
            if not lay.pad_positions():
                continue
            ids, mask, offs = left_pad([r.prompt_ids + r.tokens], m.vocab.pad_id)
            img = torch.as_tensor([t.question_raster], dtype=nk.DTYPE)
            _, hidden = m(ids, img, mask)
            out[i] = latent_hidden(hidden, [lay], offs)[0].reshape(-1).numpy()
        return out
