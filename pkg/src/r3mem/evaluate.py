"""Perplexity, reconstruction metrics, the invertibility audit and CSV output."""

from __future__ import annotations

import csv
import hashlib
import io
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numcore as nc
from .hierpair import BOS, EOS, LEVEL_TAGS, SEP, ContextQueryPair, encode_pair, tokenize
from .revformer import RevformerParams, coupling_forward, coupling_inverse, flipped_forward, forward_segmented, generate
from .revformer import stack_forward, stack_inverse

METRIC_COLUMNS = ("task", "metric", "value", "n_samples", "config")
DEFAULT_TOL = {32: 1e-4, 64: 1e-9}


@dataclass(frozen=True)
class MetricsRow:
    task: str
    metric: str
    value: float
    n_samples: int
    config: str

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise ValueError(f"{self.task}/{self.metric} is not finite: {self.value}")


def config_fingerprint(p: RevformerParams) -> str:
    return hashlib.sha256(p.cfg.to_text().encode()).hexdigest()[:16]


def format_metrics(rows: Sequence[MetricsRow]) -> str:
    seen = set()
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in rows:
        if (r.task, r.metric) in seen:
            raise ValueError(f"duplicate metric row {(r.task, r.metric)}")
        seen.add((r.task, r.metric))
        w.writerow([r.task, r.metric, repr(float(r.value)), r.n_samples, r.config])
    return buf.getvalue()


def write_metrics(path: str | Path, rows: Sequence[MetricsRow]) -> None:
    Path(path).write_text(format_metrics(rows), encoding="utf-8")


# ---------------------------------------------------------------------------
# perplexity
# ---------------------------------------------------------------------------


def document_ids(doc: str) -> np.ndarray:
    return np.asarray([BOS, *tokenize(doc), EOS], dtype=np.int64)


def token_nlls(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Per-row NLL in float64 from raw logits."""
    z = logits.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    return lse - z[np.arange(len(targets)), targets]


def eval_perplexity(p: RevformerParams, docs: Sequence[str], segment_len: int | None = None) -> MetricsRow:
    """exp of the mean NLL over every predicted token of every document.

    Each document is ``BOS text EOS`` and runs through the segmented forward
    pass with memory carried across segments; memory slots are never scored.
    The total uses exactly rounded summation so document order does not matter.
    """
    docs = [d for d in docs if d]
    if not docs:
        raise nc.UsageError("empty corpus")
    parts: list[float] = []
    n = 0
    with nc.no_grad():
        for doc in docs:
            ids = document_ids(doc)
            logits, _ = forward_segmented(ids, p, segment_len=segment_len)
            nll = token_nlls(logits.data[:-1], ids[1:])
            parts.extend(nll.tolist())
            n += nll.size
    return MetricsRow("eval-ppl", "perplexity", math.exp(math.fsum(parts) / n), n, config_fingerprint(p))


def pair_nlls(p: RevformerParams, pair: ContextQueryPair, direction: str) -> np.ndarray:
    """Per-token NLL of the generated side of a pair (query for fwd, context for bwd), EOS included."""
    tokens, start = encode_pair(pair.context, pair.query, pair.level, direction)
    tokens = np.asarray(tokens, dtype=np.int64)
    with nc.no_grad():
        if direction == "fwd":
            logits = forward_segmented(tokens, p)[0].data
        else:
            logits = flipped_forward(tokens, p).data
    return token_nlls(logits[start - 1 : -1], tokens[start:])


def eval_query_perplexity(p: RevformerParams, pairs: Sequence[ContextQueryPair]) -> MetricsRow:
    """Forward perplexity of the queries given their contexts, pooled over tokens."""
    if not pairs:
        raise nc.UsageError("no pairs")
    parts = [x for pair in pairs for x in pair_nlls(p, pair, "fwd").tolist()]
    return MetricsRow("query-ppl", "perplexity", math.exp(math.fsum(parts) / len(parts)), len(parts), config_fingerprint(p))


def split_documents(text: str) -> list[str]:
    """Documents in a corpus file are separated by two or more blank lines."""
    docs = [d.strip("\n") for d in text.replace("\r\n", "\n").split("\n\n\n")]
    return [d for d in docs if d.strip()]


# ---------------------------------------------------------------------------
# reconstruction
# ---------------------------------------------------------------------------


def token_f1(pred: Sequence[int], ref: Sequence[int]) -> float:
    """Harmonic mean of multiset precision and recall; 1.0 when both are empty."""
    if not pred and not ref:
        return 1.0
    overlap = sum((Counter(pred) & Counter(ref)).values())
    if overlap == 0:
        return 0.0
    prec, rec = overlap / len(pred), overlap / len(ref)
    return 2 * prec * rec / (prec + rec)


def reconstruct(p: RevformerParams, pair: ContextQueryPair) -> list[int]:
    """Greedy backward decode of the context from the query alone."""
    ref = tokenize(pair.context)
    prompt = [BOS, LEVEL_TAGS[pair.level], *tokenize(pair.query), SEP]
    return generate(p, "bwd", prompt, math.ceil(1.25 * len(ref)))


@dataclass
class ReconstructionResult:
    rows: list[MetricsRow]
    f1: list[float] = field(default_factory=list)
    exact: list[bool] = field(default_factory=list)


def eval_reconstruction(p: RevformerParams, pairs: Sequence[ContextQueryPair]) -> ReconstructionResult:
    f1s, exact = [], []
    for pair in pairs:
        ref = tokenize(pair.context)
        hyp = reconstruct(p, pair)
        f1s.append(token_f1(hyp, ref))
        exact.append(hyp == ref)
    n = len(f1s)
    fp = config_fingerprint(p)
    mean_f1 = math.fsum(f1s) / n if n else 0.0
    em = sum(exact) / n if n else 0.0
    rows = [MetricsRow("eval-recon", "token_f1", mean_f1, n, fp), MetricsRow("eval-recon", "exact_match", em, n, fp)]
    return ReconstructionResult(rows, f1s, exact)


# ---------------------------------------------------------------------------
# invertibility audit
# ---------------------------------------------------------------------------


@dataclass
class AuditReport:
    trials: int
    block_errors: list[float]
    stack_error: float
    tolerance: float

    @property
    def max_error(self) -> float:
        return max([self.stack_error, *self.block_errors])

    @property
    def passed(self) -> bool:
        return all(e <= self.tolerance for e in [self.stack_error, *self.block_errors])

    def summary(self) -> str:
        blocks = " ".join(f"{e:.3e}" for e in self.block_errors)
        verdict = "PASS" if self.passed else "FAIL"
        return (
            f"{verdict} trials={self.trials} tol={self.tolerance:g} "
            f"stack_max_abs={self.stack_error:.3e} block_max_abs=[{blocks}]"
        )


def check_invert(
    p: RevformerParams,
    trials: int = 100,
    tol: float | None = None,
    precision: int = 64,
    seed: int = 0,
    max_len: int = 64,
    perturb: float = 0.0,
) -> AuditReport:
    """Round-trip random streams through every block and the whole stack.

    ``perturb`` is added to one element of ``y2`` before inverting; it exists
    to show the audit notices a broken inverse.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    q = p.astype(precision)
    tol = DEFAULT_TOL[precision] if tol is None else tol
    rng = np.random.default_rng(seed)
    d, L = q.cfg.d_model, q.cfg.n_layers
    block_err = [0.0] * L
    stack_err = 0.0

    def err(a, b, x1, x2):
        return max(float(np.max(np.abs(a.data - x1.data))), float(np.max(np.abs(b.data - x2.data))))

    def bump(y):
        if not perturb:
            return y
        arr = y.data.copy()
        arr[0, 0, 0] += perturb
        return nc.tensor(arr, dtype=arr.dtype)

    with nc.no_grad():
        for _ in range(trials):
            t = int(rng.integers(1, min(max_len, q.cfg.window) + 1))
            x1 = nc.tensor(rng.standard_normal((1, t, d)), dtype=q.cfg.dtype)
            x2 = nc.tensor(rng.standard_normal((1, t, d)), dtype=q.cfg.dtype)
            for i in range(L):
                y1, y2 = coupling_forward(x1, x2, q, i)
                a, b = coupling_inverse(y1, bump(y2), q, i)
                block_err[i] = max(block_err[i], err(a, b, x1, x2))
            y1, y2 = stack_forward(x1, x2, q)
            a, b = stack_inverse(y1, bump(y2), q)
            stack_err = max(stack_err, err(a, b, x1, x2))
    return AuditReport(trials, block_err, stack_err, tol)
