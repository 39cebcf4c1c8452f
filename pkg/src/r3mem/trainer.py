"""Training objective, optimizer and the two training loops.

The fine-tuning objective per pair is

    total = forward + backward_weight * backward + lambda_cycle * cycle

where ``forward`` is the query NLL given the context, ``backward`` the
context NLL given the query under flipped execution, and ``cycle`` the
backward NLL of the context given the model's own greedy compression of it.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numcore as nc
from .hierpair import BOS, EOS, LEVEL_TAGS, SEP, ContextQueryPair, encode_pair, prompt_ids, tokenize
from .numcore import Tensor
from .revformer import (
    ModelConfig,
    RevformerParams,
    attach_adapters,
    base_forward,
    flipped_forward,
    forward_segmented,
    generate,
    init_base,
)

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "lr", "loss_fwd", "loss_bwd", "loss_cycle", "loss_total")
CYCLE_BUDGET_CAP = 64


@dataclass(frozen=True)
class LossWeights:
    lambda_cycle: float = 0.5
    backward_weight: float = 1.0

    def __post_init__(self):
        if self.lambda_cycle < 0 or self.backward_weight < 0:
            raise ValueError("loss weights must be >= 0")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def sequence_nll(logits: Tensor, tokens: Sequence[int], start: int) -> Tensor:
    """Mean NLL of ``tokens[start:]`` where row ``t`` of ``logits`` predicts ``t + 1``."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if start < 1 or start >= tokens.size:
        raise nc.UsageError("sequence has no target tokens")
    return nc.cross_entropy(logits[start - 1 : tokens.size - 1], tokens[start:])


def forward_loss(p: RevformerParams, pair: ContextQueryPair, rng=None, segment_len: int | None = None) -> Tensor:
    tokens, start = encode_pair(pair.context, pair.query, pair.level, "fwd")
    logits, _ = forward_segmented(tokens, p, segment_len=segment_len, rng=rng)
    return sequence_nll(logits, tokens, start)


def backward_ids(query_ids: Sequence[int], context_ids: Sequence[int], level: str) -> tuple[list[int], int]:
    head = [BOS, LEVEL_TAGS[level], *query_ids, SEP]
    return head + list(context_ids) + [EOS], len(head)


def backward_loss(p: RevformerParams, pair: ContextQueryPair) -> Tensor:
    tokens, start = encode_pair(pair.context, pair.query, pair.level, "bwd")
    return sequence_nll(flipped_forward(tokens, p), tokens, start)


def cycle_budget(query: str, context: str, cfg: ModelConfig) -> int:
    budget = min(math.ceil(1.25 * len(tokenize(query))), CYCLE_BUDGET_CAP)
    return max(0, min(budget, cfg.window - len(tokenize(context)) - 4))


def compress(p: RevformerParams, context: str, level: str, budget: int) -> list[int]:
    """Greedy forward compression of ``context``; gradients never reach it."""
    return generate(p, "fwd", prompt_ids(context, level), budget)


def cycle_loss(p: RevformerParams, context: str, level: str, budget: int) -> Tensor:
    """Backward NLL of ``context`` given the model's own compression of it."""
    if not context:
        raise nc.UsageError("cycle_loss needs a non-empty context")
    q_bar = compress(p, context, level, budget)
    if not q_bar:
        log.info("cycle decode produced no tokens; using a lone EOS as the query")
        q_bar = [EOS]
    tokens, start = backward_ids(q_bar, tokenize(context), level)
    return sequence_nll(flipped_forward(tokens, p), tokens, start)


def weighted_total(parts: dict[str, float], weights: LossWeights) -> float:
    return parts["fwd"] + weights.backward_weight * parts["bwd"] + weights.lambda_cycle * parts["cycle"]


def total_loss(
    p: RevformerParams, pair: ContextQueryPair, weights: LossWeights, rng=None
) -> tuple[Tensor, dict[str, float]]:
    """Weighted objective and its unweighted components (cycle is 0 when skipped)."""
    fwd = forward_loss(p, pair, rng)
    parts = {"fwd": fwd.item(), "bwd": 0.0, "cycle": 0.0}
    total = fwd
    if weights.backward_weight > 0:
        bwd = backward_loss(p, pair)
        parts["bwd"] = bwd.item()
        total = nc.add(total, nc.scale(bwd, weights.backward_weight))
    if weights.lambda_cycle > 0:
        cyc = cycle_loss(p, pair.context, pair.level, cycle_budget(pair.query, pair.context, p.cfg))
        parts["cycle"] = cyc.item()
        total = nc.add(total, nc.scale(cyc, weights.lambda_cycle))
    return total, parts


# ---------------------------------------------------------------------------
# schedule and optimizer
# ---------------------------------------------------------------------------


def warmup_steps(total_steps: int, warmup_frac: float = 0.06) -> int:
    return max(1, math.ceil(warmup_frac * total_steps))


def lr_at(step: int, total_steps: int, max_lr: float, warmup_frac: float = 0.06) -> float:
    """Linear warmup to ``max_lr`` then linear decay to 0 at ``total_steps``."""
    warm = warmup_steps(total_steps, warmup_frac)
    if step < warm:
        return max_lr * step / warm
    if total_steps <= warm:
        return max_lr
    return max_lr * max(0.0, (total_steps - step) / (total_steps - warm))


class AdamW:
    """Adam moments with decoupled weight decay."""

    def __init__(self, params: Sequence[Tensor], betas=(0.9, 0.99), eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = list(params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(t.data) for t in self.params]
        self.v = [np.zeros_like(t.data) for t in self.params]
        self.t = 0

    def step(self, grads: dict[Tensor, np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for t, m, v in zip(self.params, self.m, self.v):
            g = grads.get(t)
            if g is None:
                continue
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
            t.data = (t.data * (1.0 - lr * self.weight_decay) - lr * upd).astype(t.dtype)


# ---------------------------------------------------------------------------
# base pretraining
# ---------------------------------------------------------------------------


def corpus_stream(text: str) -> np.ndarray:
    """Paragraphs as ``BOS bytes EOS`` concatenated into one id stream."""
    from .hierpair import split_paragraphs

    ids: list[int] = []
    for para in split_paragraphs(text):
        ids.append(BOS)
        ids.extend(tokenize(para))
        ids.append(EOS)
    return np.asarray(ids, dtype=np.int64)


def _windows(stream: np.ndarray, rng: np.random.Generator, batch: int, seq_len: int) -> np.ndarray:
    starts = rng.integers(0, stream.size - seq_len - 1, size=batch)
    return np.stack([stream[s : s + seq_len + 1] for s in starts])


def lm_loss(p: RevformerParams, windows: np.ndarray) -> Tensor:
    logits = base_forward(windows[:, :-1], p)
    b, t, v = logits.shape
    return nc.cross_entropy(nc.reshape(logits, (b * t, v)), windows[:, 1:].reshape(-1))


def heldout_nll(p: RevformerParams, text: str, seq_len: int = 128) -> float:
    """Mean next-token NLL of the base decoder over consecutive windows of ``text``."""
    stream = corpus_stream(text)
    n = (stream.size - 1) // seq_len
    if n < 1:
        raise nc.UsageError("held-out text too short")
    total = 0.0
    with nc.no_grad():
        for i in range(n):
            w = stream[i * seq_len : (i + 1) * seq_len + 1][None, :]
            total += lm_loss(p, w).item()
    return total / n


@dataclass(frozen=True)
class PretrainSettings:
    batch_size: int = 8
    seq_len: int = 128
    max_lr: float = 3e-3
    weight_decay: float = 0.01


def pretrain_base(
    corpus: str, cfg: ModelConfig, steps: int = 2000, seed: int = 0, settings: PretrainSettings | None = None
) -> tuple[RevformerParams, list[float]]:
    """Train a plain decoder on ``corpus`` then freeze it and attach adapters.

    Returns the adapted parameters and the per-step training loss.
    """
    settings = settings or PretrainSettings()
    stream = corpus_stream(corpus)
    if stream.size < settings.seq_len + 2:
        raise nc.UsageError("pretraining corpus is empty or too short")
    if settings.seq_len > cfg.window:
        raise ValueError("seq_len exceeds the positional window")
    rng = np.random.default_rng(seed)
    params = init_base(cfg, rng)
    names = params.base_names()
    opt = AdamW([params[k] for k in names], weight_decay=settings.weight_decay)
    losses = []
    for step in range(steps):
        loss = lm_loss(params, _windows(stream, rng, settings.batch_size, settings.seq_len))
        grads = nc.grad(loss)
        opt.step(grads, lr_at(step, steps, settings.max_lr))
        losses.append(loss.item())
    return attach_adapters(params, rng), losses


# ---------------------------------------------------------------------------
# fine-tuning
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainSettings:
    max_lr: float = 2e-3
    batch_size: int = 2
    weight_decay: float = 0.01
    warmup_frac: float = 0.06


def train(
    pairs: Sequence[ContextQueryPair],
    params: RevformerParams,
    epochs: int,
    weights: LossWeights = LossWeights(),
    seed: int = 0,
    settings: TrainSettings = TrainSettings(),
    log_path: str | Path | None = None,
) -> tuple[RevformerParams, list[dict]]:
    """Optimize memory tokens and adapters; the base is left untouched.

    Pairs are reshuffled every epoch with ``seed``.  Returns the updated
    parameters (a copy) and one log row per step.
    """
    if not pairs:
        raise nc.UsageError("no training pairs")
    if not params.has_adapters:
        raise nc.UsageError("parameters carry no adapters")
    p = params.copy()
    trainable = p.trainable()
    opt = AdamW(trainable, weight_decay=settings.weight_decay)
    rng = np.random.default_rng(seed)
    drop_rng = np.random.default_rng([seed, 1])
    bs = settings.batch_size
    per_epoch = math.ceil(len(pairs) / bs)
    total_steps = epochs * per_epoch
    rows: list[dict] = []
    step = 0
    for _ in range(epochs):
        order = rng.permutation(len(pairs))
        for b in range(per_epoch):
            batch = [pairs[i] for i in order[b * bs : (b + 1) * bs]]
            lr = lr_at(step, total_steps, settings.max_lr, settings.warmup_frac)
            acc = {"fwd": 0.0, "bwd": 0.0, "cycle": 0.0}
            loss_sum = None
            for pair in batch:
                loss, parts = total_loss(p, pair, weights, drop_rng)
                loss_sum = loss if loss_sum is None else nc.add(loss_sum, loss)
                for k in acc:
                    acc[k] += parts[k] / len(batch)
            loss_mean = nc.scale(loss_sum, 1.0 / len(batch))
            opt.step(nc.grad(loss_mean, trainable), lr)
            rows.append(
                {
                    "step": step,
                    "lr": lr,
                    "loss_fwd": acc["fwd"],
                    "loss_bwd": acc["bwd"],
                    "loss_cycle": acc["cycle"],
                    "loss_total": loss_mean.item(),
                }
            )
            step += 1
    if log_path is not None:
        write_loss_log(log_path, rows)
    return p, rows


def format_loss_log(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_COLUMNS)
    for r in rows:
        w.writerow([r["step"]] + [f"{r[k]:.8g}" for k in LOG_COLUMNS[1:]])
    return buf.getvalue()


def write_loss_log(path: str | Path, rows: Sequence[dict]) -> None:
    Path(path).write_text(format_loss_log(rows), encoding="utf-8")
