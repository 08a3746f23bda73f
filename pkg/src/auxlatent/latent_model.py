"""Toy multimodal decoder with latent-construction tokens.

A response is laid out as ``plan, <|latent_start|>, K x <|latent_pad|>,
<|latent_end|>, answer``. The pad positions are fed the learned pad embedding;
their final-layer hidden states are the latent "imagined" construction and are
what the alignment losses act on.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn

from . import numkernel as nk
from .vocab import Vocabulary

ROLE_PREFIX, ROLE_PROMPT, ROLE_PLAN, ROLE_LATENT, ROLE_ANSWER, ROLE_PAD = range(6)


@dataclass
class ModelConfig:
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    latent_size: int = 10
    max_seq_len: int = 1024
    raster_size: int = 16
    patch_size: int = 4
    d_vis: int = 32
    vocab_size: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.raster_size % self.patch_size:
            raise ValueError("raster_size must be a multiple of patch_size")
        if self.latent_size < 0:
            raise ValueError("latent_size must be >= 0")

    @property
    def n_patches(self) -> int:
        return (self.raster_size // self.patch_size) ** 2


@dataclass
class SequenceLayout:
    """Half-open spans over the text stream (image prefix not included)."""

    prompt: tuple[int, int]
    plan: tuple[int, int]
    latent: tuple[int, int] | None
    answer: tuple[int, int]
    roles: list[int] = field(default_factory=list)

    @property
    def response_start(self) -> int:
        return self.plan[0]

    @classmethod
    def from_ids(cls, ids: Sequence[int], prompt_len: int, vocab: Vocabulary,
                 latent_size: int) -> "SequenceLayout":
        ids = list(ids)
        n = len(ids)
        start = None
        for i in range(prompt_len, n):
            if ids[i] == vocab.latent_start_id:
                end = i + latent_size + 1
                if (latent_size > 0 and end < n and ids[end] == vocab.latent_end_id
                        and all(t == vocab.latent_pad_id for t in ids[i + 1:end])):
                    start = i
                break
        if start is None:
            latent = None
            plan = (prompt_len, n)
            for i in range(prompt_len, n):
                if ids[i] == vocab.box_open_id:
                    plan = (prompt_len, i)
                    break
            answer = (plan[1], n)
        else:
            latent = (start, start + latent_size + 2)
            plan = (prompt_len, start)
            answer = (latent[1], n)
        roles = [ROLE_PROMPT] * prompt_len + [ROLE_PLAN] * (plan[1] - plan[0])
        if latent:
            roles += [ROLE_LATENT] * (latent[1] - latent[0])
        roles += [ROLE_ANSWER] * (answer[1] - answer[0])
        return cls(prompt=(0, prompt_len), plan=plan, latent=latent, answer=answer, roles=roles)

    def pad_positions(self) -> list[int] | None:
        if self.latent is None:
            return None
        return list(range(self.latent[0] + 1, self.latent[1] - 1))


class VisualStub(nn.Module):
    """Frozen per-patch embedding; each patch maps through the same affine + tanh."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        g = torch.Generator().manual_seed(cfg.seed + 7919)
        pdim = cfg.patch_size ** 2
        self.patch_size = cfg.patch_size
        self.weight = nn.Parameter(torch.randn(pdim, cfg.d_vis, generator=g, dtype=nk.DTYPE)
                                   / math.sqrt(pdim), requires_grad=False)
        self.bias = nn.Parameter(0.1 * torch.randn(cfg.d_vis, generator=g, dtype=nk.DTYPE),
                                 requires_grad=False)

    def forward(self, raster: torch.Tensor) -> torch.Tensor:
        return encode_image(raster, self)


def encode_image(raster, stub: VisualStub) -> torch.Tensor:
    """(H, W) or (B, H, W) raster -> (P, d_vis) or (B, P, d_vis) patch features."""
    x = torch.as_tensor(raster, dtype=nk.DTYPE)
    squeeze = x.dim() == 2
    if squeeze:
        x = x.unsqueeze(0)
    if x.dim() != 3:
        raise nk.ShapeError(f"encode_image: expected a 2-D raster, got shape {tuple(x.shape)}")
    b, h, w = x.shape
    p = stub.patch_size
    if h % p or w % p:
        raise nk.ShapeError(f"encode_image: raster {h}x{w} not divisible by patch size {p}")
    patches = x.reshape(b, h // p, p, w // p, p).permute(0, 1, 3, 2, 4).reshape(b, -1, p * p)
    feats = torch.tanh(patches @ stub.weight + stub.bias)
    return feats[0] if squeeze else feats


def pool_patches(features: torch.Tensor, k: int) -> torch.Tensor:
    """Average P row-major patch features into K contiguous bins.

    The first ``P mod K`` bins take one extra patch.
    """
    p = features.shape[-2]
    if k <= 0 or p < k:
        raise nk.ShapeError(f"pool_patches: need 0 < K <= P, got P={p}, K={k}")
    base, extra = divmod(p, k)
    rows = []
    i = 0
    for j in range(k):
        size = base + (1 if j < extra else 0)
        rows.append(features[..., i:i + size, :].mean(dim=-2))
        i += size
    return torch.stack(rows, dim=-2)


class Projector(nn.Module):
    def __init__(self, d_in: int, d_out: int):
        super().__init__()
        self.fc1 = nn.Linear(d_in, d_out, dtype=nk.DTYPE)
        self.fc2 = nn.Linear(d_out, d_out, dtype=nk.DTYPE)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(torch.nn.functional.gelu(self.fc1(x)))


class Block(nn.Module):
    def __init__(self, d: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.ln1_w = nn.Parameter(torch.ones(d, dtype=nk.DTYPE))
        self.ln1_b = nn.Parameter(torch.zeros(d, dtype=nk.DTYPE))
        self.qkv = nn.Linear(d, 3 * d, dtype=nk.DTYPE)
        self.proj = nn.Linear(d, d, dtype=nk.DTYPE)
        self.ln2_w = nn.Parameter(torch.ones(d, dtype=nk.DTYPE))
        self.ln2_b = nn.Parameter(torch.zeros(d, dtype=nk.DTYPE))
        self.fc = nn.Linear(d, 4 * d, dtype=nk.DTYPE)
        self.out = nn.Linear(4 * d, d, dtype=nk.DTYPE)

    def forward(self, x, mask, cache=None):
        b, t, d = x.shape
        h = self.n_heads
        q, k, v = self.qkv(nk.layer_norm(x, self.ln1_w, self.ln1_b)).split(d, dim=-1)
        q, k, v = (z.reshape(b, t, h, d // h).transpose(1, 2) for z in (q, k, v))
        if cache is not None:
            if "k" in cache:
                k = torch.cat([cache["k"], k], dim=2)
                v = torch.cat([cache["v"], v], dim=2)
            cache["k"], cache["v"] = k, v
        att = (q @ k.transpose(-1, -2)) / math.sqrt(d // h)
        att = nk.softmax(att.masked_fill(~mask[:, None], -1e30))
        y = (att @ v).transpose(1, 2).reshape(b, t, d)
        x = x + self.proj(y)
        x = x + self.out(torch.nn.functional.gelu(self.fc(nk.layer_norm(x, self.ln2_w, self.ln2_b))))
        return x


class LatentTransformer(nn.Module):
    """Decoder-only LM over ``[image prefix] + text``.

    ``forward`` takes left-padded ``ids`` (B, T) and an optional batch of
    question rasters. Text positions always start at ``n_patches`` so the
    image-conditioned and plan-only streams see the same position ids.
    """

    def __init__(self, cfg: ModelConfig, vocab: Vocabulary | None = None):
        super().__init__()
        self.vocab = vocab or Vocabulary()
        if cfg.vocab_size == 0:
            cfg.vocab_size = len(self.vocab)
        elif cfg.vocab_size != len(self.vocab):
            raise ValueError("vocab_size does not match the vocabulary")
        self.cfg = cfg
        self.completed_stage = 0
        torch.manual_seed(cfg.seed)
        d = cfg.d_model
        self.stub = VisualStub(cfg)
        self.projector = Projector(cfg.d_vis, d)
        self.prefix_proj = nn.Linear(cfg.d_vis, d, dtype=nk.DTYPE)
        self.tok_emb = nn.Parameter(0.02 * torch.randn(cfg.vocab_size, d, dtype=nk.DTYPE))
        self.pos_emb = nn.Parameter(0.02 * torch.randn(cfg.max_seq_len, d, dtype=nk.DTYPE))
        self.blocks = nn.ModuleList(Block(d, cfg.n_heads) for _ in range(cfg.n_layers))
        self.lnf_w = nn.Parameter(torch.ones(d, dtype=nk.DTYPE))
        self.lnf_b = nn.Parameter(torch.zeros(d, dtype=nk.DTYPE))
        self.head = nn.Linear(d, cfg.vocab_size, dtype=nk.DTYPE)

    # -- visual side ---------------------------------------------------------

    def project_target(self, aux_raster) -> torch.Tensor:
        """Target latent states: projector(pool(frozen encoder(aux raster))), (..., K, D)."""
        feats = encode_image(aux_raster, self.stub)
        return self.projector(pool_patches(feats, self.cfg.latent_size))

    def _prefix(self, images) -> torch.Tensor:
        feats = encode_image(images, self.stub)
        if feats.dim() == 2:
            feats = feats.unsqueeze(0)
        return self.prefix_proj(feats) + self.pos_emb[: self.cfg.n_patches]

    # -- language side -------------------------------------------------------

    def forward(self, ids: torch.Tensor, images=None, attn_mask: torch.Tensor | None = None,
                cache: dict | None = None):
        """Return ``(logits, hidden)`` for text positions only.

        ``attn_mask`` (B, T) marks real tokens; padding sits on the left.
        With ``cache`` (a dict) the key/value states are kept for
        :meth:`step`.
        """
        ids = torch.as_tensor(ids, dtype=torch.long)
        if ids.dim() == 1:
            ids = ids.unsqueeze(0)
        b, t = ids.shape
        p = self.cfg.n_patches
        if p + t > self.cfg.max_seq_len:
            raise ValueError(f"sequence of {p + t} positions exceeds max_seq_len={self.cfg.max_seq_len}")
        if attn_mask is None:
            attn_mask = torch.ones(b, t, dtype=torch.bool)
        attn_mask = torch.as_tensor(attn_mask, dtype=torch.bool)
        pos = (attn_mask.long().cumsum(dim=1) - 1).clamp(min=0) + p
        x = nk.embedding(self.tok_emb, ids) + self.pos_emb[pos]
        if images is not None:
            prefix = self._prefix(images)
            if prefix.shape[0] != b:
                raise nk.ShapeError(f"forward: {prefix.shape[0]} images for {b} sequences")
            x = torch.cat([prefix, x], dim=1)
            key_valid = torch.cat([torch.ones(b, p, dtype=torch.bool), attn_mask], dim=1)
        else:
            key_valid = attn_mask
        n = x.shape[1]
        causal = torch.tril(torch.ones(n, n, dtype=torch.bool))
        mask = (causal[None] & key_valid[:, None, :]) | torch.eye(n, dtype=torch.bool)[None]
        if cache is not None:
            cache.clear()
            cache["layers"] = [dict() for _ in self.blocks]
            cache["key_valid"] = key_valid
            cache["next_pos"] = pos[:, -1] + 1
        for i, blk in enumerate(self.blocks):
            x = blk(x, mask, None if cache is None else cache["layers"][i])
        hidden = nk.layer_norm(x, self.lnf_w, self.lnf_b)
        if images is not None:
            hidden = hidden[:, p:]
        return self.head(hidden), hidden

    def step(self, ids: torch.Tensor, cache: dict):
        """Advance a cached forward pass by one token per row; ``ids`` is (B,)."""
        ids = torch.as_tensor(ids, dtype=torch.long).reshape(-1, 1)
        pos = cache["next_pos"]
        if int(pos.max()) >= self.cfg.max_seq_len:
            raise ValueError("generation exceeded max_seq_len")
        x = nk.embedding(self.tok_emb, ids) + self.pos_emb[pos][:, None]
        kv = torch.cat([cache["key_valid"], torch.ones(ids.shape[0], 1, dtype=torch.bool)], dim=1)
        mask = kv[:, None, :]
        for i, blk in enumerate(self.blocks):
            x = blk(x, mask, cache["layers"][i])
        cache["key_valid"] = kv
        cache["next_pos"] = pos + 1
        hidden = nk.layer_norm(x, self.lnf_w, self.lnf_b)
        return self.head(hidden)[:, 0], hidden[:, 0]

    def trainable(self) -> nk.ParamStore:
        return nk.ParamStore.from_module(self, trainable_only=True)

    def params(self) -> nk.ParamStore:
        return nk.ParamStore.from_module(self)

    def clone(self) -> "LatentTransformer":
        other = LatentTransformer(ModelConfig(**asdict(self.cfg)), self.vocab)
        other.load_state_dict(self.state_dict())
        other.completed_stage = self.completed_stage
        return other


def latent_hidden(hidden: torch.Tensor, layouts: Sequence[SequenceLayout | None],
                  offsets: Sequence[int] | None = None) -> torch.Tensor | None:
    """Gather the K pad-position hidden rows for each sequence, (B, K, D).

    Returns ``None`` (the absent marker) if any layout has no latent block.
    ``offsets`` shifts positions for left-padded batches.
    """
    rows = []
    for i, lay in enumerate(layouts):
        pads = None if lay is None else lay.pad_positions()
        if not pads:
            return None
        off = offsets[i] if offsets is not None else 0
        rows.append(hidden[i, [q + off for q in pads]])
    return torch.stack(rows)


def left_pad(seqs: Sequence[Sequence[int]], pad_id: int):
    """Left-pad id lists; returns (ids, mask, offsets)."""
    t = max(len(s) for s in seqs)
    ids = torch.full((len(seqs), t), pad_id, dtype=torch.long)
    mask = torch.zeros(len(seqs), t, dtype=torch.bool)
    offsets = []
    for i, s in enumerate(seqs):
        off = t - len(s)
        offsets.append(off)
        if s:
            ids[i, off:] = torch.as_tensor(list(s), dtype=torch.long)
        mask[i, off:] = True
    return ids, mask, offsets


# ---- decoding ---------------------------------------------------------------

@dataclass
class Rollout:
    prompt_id: str
    sample_idx: int
    prompt_ids: list[int]
    tokens: list[int]
    logp_actor: list[float]
    text: str = ""
    truncated: bool = False
    seed: int = 0
    logp_ref: list[float] | None = None
    reward: object = None

    def layout(self, vocab: Vocabulary, latent_size: int) -> SequenceLayout:
        return SequenceLayout.from_ids(self.prompt_ids + self.tokens, len(self.prompt_ids),
                                       vocab, latent_size)


def nucleus_probs(logits: np.ndarray, temperature: float, top_p: float) -> np.ndarray:
    """Temperature-scaled distribution restricted to the top-p nucleus."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if not 0 < top_p <= 1:
        raise ValueError("top_p must lie in (0, 1]")
    z = logits / temperature
    z = z - z[np.isfinite(z)].max()
    probs = np.exp(z)
    probs /= probs.sum()
    order = np.argsort(-probs, kind="stable")
    csum = np.cumsum(probs[order])
    # smallest prefix whose mass reaches top_p
    keep = int(np.searchsorted(csum, top_p - 1e-12) + 1)
    out = np.zeros_like(probs)
    out[order[:keep]] = probs[order[:keep]]
    return out / out.sum()


def sample_token(logits: np.ndarray, temperature: float, top_p: float, rng: np.random.Generator) -> int:
    probs = nucleus_probs(logits, temperature, top_p)
    u = rng.random()
    idx = int(np.searchsorted(np.cumsum(probs), u, side="right"))
    if idx >= len(probs):
        idx = int(np.flatnonzero(probs)[-1])
    return idx


@torch.no_grad()
def generate(model: LatentTransformer, prompts: Sequence[Sequence[int]], images=None, *,
             max_new_tokens: int = 2048, greedy: bool = True, temperature: float = 1.0,
             top_p: float = 1.0, bias: float = 0.0, seeds: Sequence[int] | None = None,
             prompt_ids: Sequence[str] | None = None) -> list[Rollout]:
    """Batched autoregressive decoding with forced latent blocks.

    Free positions get ``bias`` added to the latent_start and latent_end logits
    before temperature and top-p. Once latent_start is emitted the next K tokens
    are forced pads and then latent_end. Pad/end and prompt-only tokens are
    masked at free positions. Recorded log-probs are the unbiased, untempered
    model log-probs of the emitted tokens.
    """
    vocab = model.vocab
    k = model.cfg.latent_size
    n = len(prompts)
    seeds = list(seeds) if seeds is not None else [0] * n
    rngs = [np.random.default_rng(s) for s in seeds]
    ids, mask, _ = left_pad(prompts, vocab.pad_id)
    # text positions start at n_patches in both streams
    room = model.cfg.max_seq_len - model.cfg.n_patches - ids.shape[1]
    max_new_tokens = max(0, min(max_new_tokens, room))
    cache: dict = {}
    logits, _ = model(ids, images, mask, cache=cache)
    cur = logits[:, -1]
    banned = [vocab.latent_pad_id, vocab.latent_end_id, vocab.pad_id, vocab.bos_id, vocab.ans_id]
    if k == 0:
        banned.append(vocab.latent_start_id)
    out = [[] for _ in range(n)]
    logps = [[] for _ in range(n)]
    forced = [0] * n
    done = [False] * n
    for _ in range(max_new_tokens):
        logp_all = nk.log_softmax(cur).numpy()
        raw = cur.numpy()
        nxt = []
        for i in range(n):
            if done[i]:
                nxt.append(vocab.eos_id)
                continue
            if forced[i] > 0:
                tok = vocab.latent_pad_id if forced[i] > 1 else vocab.latent_end_id
                forced[i] -= 1
            else:
                z = raw[i].copy()
                z[vocab.latent_start_id] += bias
                z[vocab.latent_end_id] += bias
                z[banned] = -np.inf
                if greedy:
                    tok = int(np.argmax(z))
                else:
                    tok = sample_token(z, temperature, top_p, rngs[i])
                if tok == vocab.latent_start_id:
                    forced[i] = k + 1
            out[i].append(tok)
            logps[i].append(float(logp_all[i, tok]))
            if tok == vocab.eos_id:
                done[i] = True
            nxt.append(tok)
        if all(done):
            break
        cur, _ = model.step(torch.tensor(nxt), cache)
    pids = list(prompt_ids) if prompt_ids is not None else [""] * n
    return [
        Rollout(prompt_id=pids[i], sample_idx=i, prompt_ids=list(prompts[i]), tokens=out[i],
                logp_actor=logps[i], text=vocab.decode(out[i]),
                truncated=not done[i], seed=seeds[i])
        for i in range(n)
    ]


def sequence_logprobs(model: LatentTransformer, rollouts: Sequence[Rollout], images=None):
    """Per-token log-probs of each rollout's response under ``model``.

    Returns a list of 1-D tensors (differentiable if grad is enabled).
    """
    seqs = [r.prompt_ids + r.tokens for r in rollouts]
    ids, mask, offsets = left_pad(seqs, model.vocab.pad_id)
    logits, _ = model(ids, images, mask)
    logp = nk.log_softmax(logits)
    out = []
    for i, r in enumerate(rollouts):
        start = offsets[i] + len(r.prompt_ids)
        tgt = torch.as_tensor(r.tokens, dtype=torch.long)
        rows = logp[i, start - 1:start - 1 + len(r.tokens)]
        out.append(rows.gather(1, tgt[:, None])[:, 0])
    return out
