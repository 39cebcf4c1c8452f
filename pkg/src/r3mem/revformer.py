"""Reversible memory-augmented decoder.

Each coupling block holds two streams::

    y1 = x1 + F(x2)      F = frozen transformer block delta + low-rank adapter
    y2 = x2 + G(y1)      G = adapter-only bottleneck

and is undone by ``x2 = y2 - G(y1); x1 = y1 - F(x2)``.  Forward execution
reads segments of a long sequence with ``m`` write memory slots appended
(and, from the second segment on, ``m`` read slots prepended that carry the
previous segment's write states).  Flipped execution embeds a sequence and
runs the inverse map through the blocks in reverse order.

Activations are laid out ``[batch, time, d_model]``.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, fields, replace
from typing import Callable

import numpy as np

from . import numcore as nc
from .hierpair import EOS, VOCAB_SIZE
from .numcore import Tensor

MASK_VALUE = -1e9


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = VOCAB_SIZE
    d_model: int = 128
    n_heads: int = 4
    n_layers: int = 4
    ffn_dim: int = 512
    window: int = 256
    mem_tokens: int = 8
    adapter_rank: int = 8
    adapter_scale: float = 32.0
    dropout: float = 0.1
    precision: int = 32

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.mem_tokens < 1:
            raise ValueError("mem_tokens must be >= 1")
        if self.window <= 2 * self.mem_tokens + 2:
            raise ValueError("window must exceed 2 * mem_tokens + 2")
        if self.adapter_rank < 1:
            raise ValueError("adapter_rank must be >= 1")
        if self.precision not in (32, 64):
            raise ValueError("precision is 32 or 64")

    @property
    def dtype(self):
        return np.float64 if self.precision == 64 else np.float32

    @property
    def segment_len(self) -> int:
        return self.window - 2 * self.mem_tokens

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        kw = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, val = line.partition("=")
            key = key.strip().replace("-", "_")
            if key not in kinds:
                continue
            kw[key] = float(val) if kinds[key] in ("float", float) else int(val)
        return cls(**kw)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def _base_names(cfg: ModelConfig) -> list[str]:
    names = ["base.tok_emb", "base.pos_emb", "base.final_norm"]
    for i in range(cfg.n_layers):
        names += [f"base.l{i}.{k}" for k in ("attn_norm", "wqkv", "wo", "ffn_norm", "w1", "w2")]
    return names


class RevformerParams:
    """Named tensors: frozen ``base.*``, trainable ``mem.theta`` and ``adapter.*``."""

    def __init__(self, cfg: ModelConfig, tensors: dict[str, Tensor]):
        self.cfg = cfg
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    @property
    def has_adapters(self) -> bool:
        return "mem.theta" in self.tensors

    def base_names(self) -> list[str]:
        return sorted(k for k in self.tensors if k.startswith("base."))

    def trainable_names(self) -> list[str]:
        return sorted(k for k in self.tensors if not k.startswith("base."))

    def trainable(self) -> list[Tensor]:
        return [self.tensors[k] for k in self.trainable_names()]

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def base_hash(self) -> str:
        h = hashlib.sha256()
        for k in self.base_names():
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.tensors[k].data).tobytes())
        return h.hexdigest()

    def astype(self, precision: int) -> "RevformerParams":
        cfg = replace(self.cfg, precision=precision)
        return RevformerParams(
            cfg,
            {k: Tensor(t.data.astype(cfg.dtype), requires_grad=t.requires_grad, name=k) for k, t in self.tensors.items()},
        )

    def with_window(self, window: int) -> "RevformerParams":
        """Same weights viewed with a smaller window (the position table is cut)."""
        if window > self.cfg.window:
            raise ValueError(f"cannot grow the window from {self.cfg.window} to {window}")
        cfg = replace(self.cfg, window=window)
        tensors = dict(self.tensors)
        pos = self.tensors["base.pos_emb"]
        tensors["base.pos_emb"] = Tensor(pos.data[:window], requires_grad=pos.requires_grad, name="base.pos_emb")
        return RevformerParams(cfg, tensors)

    def copy(self) -> "RevformerParams":
        return RevformerParams(
            self.cfg, {k: Tensor(t.data.copy(), requires_grad=t.requires_grad, name=k) for k, t in self.tensors.items()}
        )


def init_base(cfg: ModelConfig, rng: np.random.Generator) -> RevformerParams:
    """Random plain-decoder weights, all trainable (used before pretraining)."""
    d, f, dt = cfg.d_model, cfg.ffn_dim, cfg.dtype
    out_std = 0.02 / math.sqrt(2 * cfg.n_layers)

    def normal(shape, std):
        return (rng.standard_normal(shape) * std).astype(dt)

    arrays = {
        "base.tok_emb": normal((cfg.vocab_size, d), 0.02),
        "base.pos_emb": normal((cfg.window, d), 0.01),
        "base.final_norm": np.ones(d, dt),
    }
    for i in range(cfg.n_layers):
        p = f"base.l{i}."
        arrays[p + "attn_norm"] = np.ones(d, dt)
        arrays[p + "wqkv"] = normal((d, 3 * d), 0.02)
        arrays[p + "wo"] = normal((d, d), out_std)
        arrays[p + "ffn_norm"] = np.ones(d, dt)
        arrays[p + "w1"] = normal((d, f), 0.02)
        arrays[p + "w2"] = normal((f, d), out_std)
    return RevformerParams(cfg, {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()})


def attach_adapters(params: RevformerParams, rng: np.random.Generator) -> RevformerParams:
    """Freeze the base and add memory tokens (N(0, 0.02)) and zero-up adapters."""
    cfg = params.cfg
    d, r, dt = cfg.d_model, cfg.adapter_rank, cfg.dtype
    tensors = {k: Tensor(t.data, requires_grad=False, name=k) for k, t in params.tensors.items() if k.startswith("base.")}
    extra = {"mem.theta": (rng.standard_normal((cfg.mem_tokens, d)) * 0.02).astype(dt)}
    bound = 1.0 / math.sqrt(d)
    for i in range(cfg.n_layers):
        for s in ("f", "g"):
            extra[f"adapter.l{i}.{s}_down"] = rng.uniform(-bound, bound, (d, r)).astype(dt)
            extra[f"adapter.l{i}.{s}_up"] = np.zeros((r, d), dt)
    for k, v in extra.items():
        tensors[k] = Tensor(v, requires_grad=True, name=k)
    return RevformerParams(cfg, tensors)


# ---------------------------------------------------------------------------
# block functions
# ---------------------------------------------------------------------------


def _causal_mask(t: int, offset: int = 0) -> np.ndarray:
    """True where query row ``a`` (absolute position ``offset + a``) must not look."""
    return np.arange(offset + t)[None, :] > (offset + np.arange(t))[:, None]


def attention(x: Tensor, p: RevformerParams, i: int) -> Tensor:
    cfg = p.cfg
    b, t, d = x.shape
    h, dk = cfg.n_heads, d // cfg.n_heads
    qkv = nc.matmul(nc.rms_norm(x, p[f"base.l{i}.attn_norm"]), p[f"base.l{i}.wqkv"])
    qkv = nc.transpose(nc.reshape(qkv, (b, t, 3, h, dk)), (2, 0, 3, 1, 4))  # [3, b, h, t, dk]
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = nc.scale(nc.matmul(q, nc.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dk))
    probs = nc.softmax_rows(nc.masked_fill(scores, _causal_mask(t), MASK_VALUE))
    ctx = nc.reshape(nc.transpose(nc.matmul(probs, v), (0, 2, 1, 3)), (b, t, d))
    return nc.matmul(ctx, p[f"base.l{i}.wo"])


def block_delta(x: Tensor, p: RevformerParams, i: int) -> Tensor:
    """Residual update of a frozen pre-norm block: attention then FFN."""
    a = attention(x, p, i)
    hidden = nc.silu(nc.matmul(nc.rms_norm(nc.add(x, a), p[f"base.l{i}.ffn_norm"]), p[f"base.l{i}.w1"]))
    return nc.add(a, nc.matmul(hidden, p[f"base.l{i}.w2"]))


def adapter_delta(
    x: Tensor,
    down: Tensor,
    up: Tensor,
    scale: float,
    nonlinear: bool = False,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """``scale * (x @ down) @ up`` with optional SiLU and dropout in the bottleneck."""
    z = nc.matmul(x, down)
    if nonlinear:
        z = nc.silu(z)
    z = nc.dropout(z, dropout, rng)
    return nc.scale(nc.matmul(z, up), scale)


def _adapter_scale(cfg: ModelConfig) -> float:
    return cfg.adapter_scale / cfg.adapter_rank


def make_f(p: RevformerParams, i: int, rng: np.random.Generator | None = None) -> Callable[[Tensor], Tensor]:
    def f(x2: Tensor) -> Tensor:
        out = block_delta(x2, p, i)
        if p.has_adapters:
            delta = adapter_delta(
                x2, p[f"adapter.l{i}.f_down"], p[f"adapter.l{i}.f_up"], _adapter_scale(p.cfg), False, p.cfg.dropout, rng
            )
            out = nc.add(out, delta)
        return out

    return f


def make_g(p: RevformerParams, i: int, rng: np.random.Generator | None = None) -> Callable[[Tensor], Tensor] | None:
    if not p.has_adapters:
        return None

    def g(y1: Tensor) -> Tensor:
        return adapter_delta(
            y1, p[f"adapter.l{i}.g_down"], p[f"adapter.l{i}.g_up"], _adapter_scale(p.cfg), True, p.cfg.dropout, rng
        )

    return g


def couple(x1: Tensor, x2: Tensor, f, g) -> tuple[Tensor, Tensor]:
    """``y1 = x1 + f(x2); y2 = x2 + g(y1)``; ``g=None`` means the zero function."""
    if x1.shape != x2.shape:
        raise nc.ShapeError(f"stream shapes differ: {x1.shape} vs {x2.shape}")
    y1 = nc.add(x1, f(x2))
    y2 = x2 if g is None else nc.add(x2, g(y1))
    return y1, y2


def uncouple(y1: Tensor, y2: Tensor, f, g) -> tuple[Tensor, Tensor]:
    """Inverse of :func:`couple`; ``x2`` first since ``g`` only needs ``y1``."""
    if y1.shape != y2.shape:
        raise nc.ShapeError(f"stream shapes differ: {y1.shape} vs {y2.shape}")
    x2 = y2 if g is None else nc.sub(y2, g(y1))
    x1 = nc.sub(y1, f(x2))
    return x1, x2


def _check_stream(x: Tensor, cfg: ModelConfig) -> None:
    if x.ndim != 3 or x.shape[-1] != cfg.d_model:
        raise nc.ShapeError(f"stream must be [batch, time, {cfg.d_model}], got {x.shape}")


def coupling_forward(x1: Tensor, x2: Tensor, p: RevformerParams, block: int, rng=None) -> tuple[Tensor, Tensor]:
    _check_stream(x1, p.cfg)
    return couple(x1, x2, make_f(p, block, rng), make_g(p, block, rng))


def coupling_inverse(y1: Tensor, y2: Tensor, p: RevformerParams, block: int) -> tuple[Tensor, Tensor]:
    _check_stream(y1, p.cfg)
    return uncouple(y1, y2, make_f(p, block), make_g(p, block))


def stack_forward(x1: Tensor, x2: Tensor, p: RevformerParams, rng=None) -> tuple[Tensor, Tensor]:
    for i in range(p.cfg.n_layers):
        x1, x2 = coupling_forward(x1, x2, p, i, rng)
    return x1, x2


def stack_inverse(y1: Tensor, y2: Tensor, p: RevformerParams) -> tuple[Tensor, Tensor]:
    for i in reversed(range(p.cfg.n_layers)):
        y1, y2 = coupling_inverse(y1, y2, p, i)
    return y1, y2


# ---------------------------------------------------------------------------
# embedding / readout
# ---------------------------------------------------------------------------


def embed(ids: np.ndarray, p: RevformerParams) -> Tensor:
    """Token plus absolute position embeddings for ``ids`` of shape [batch, time]."""
    t = ids.shape[-1]
    if t > p["base.pos_emb"].shape[0]:
        raise nc.UsageError(f"sequence of {t} exceeds the {p['base.pos_emb'].shape[0]} trained positions")
    tok = nc.embedding(p["base.tok_emb"], ids)
    pos = nc.embedding(p["base.pos_emb"], np.broadcast_to(np.arange(t), ids.shape))
    return nc.add(tok, pos)


def readout(h: Tensor, p: RevformerParams) -> Tensor:
    return nc.matmul(nc.rms_norm(h, p["base.final_norm"]), nc.transpose(p["base.tok_emb"], None))


def _average(a: Tensor, b: Tensor) -> Tensor:
    return nc.scale(nc.add(a, b), 0.5)


def base_forward(ids, p: RevformerParams) -> Tensor:
    """Plain decoder: the coupling stack without adapters, logits [batch, time, V]."""
    ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
    if p.has_adapters:
        p = RevformerParams(p.cfg, {k: t for k, t in p.tensors.items() if k.startswith("base.")})
    x = embed(ids, p)
    y1, y2 = stack_forward(x, x, p)
    return readout(_average(y1, y2), p)


# ---------------------------------------------------------------------------
# segmented forward execution
# ---------------------------------------------------------------------------


@dataclass
class SegmentPlan:
    segments: list[slice]
    read_slots: list[range]
    write_slots: list[range]

    @property
    def n_segments(self) -> int:
        return len(self.segments)


def plan_segments(n_tokens: int, segment_len: int, mem_tokens: int) -> SegmentPlan:
    """Split ``n_tokens`` into segments of at most ``segment_len`` content tokens.

    Slot ranges are positions inside each segment's window: reads first
    (none for the first segment), then content, then writes.
    """
    if n_tokens < 1:
        raise nc.UsageError("cannot segment an empty sequence")
    if segment_len < 1:
        raise ValueError("segment_len must be >= 1")
    segs, reads, writes = [], [], []
    for s, start in enumerate(range(0, n_tokens, segment_len)):
        stop = min(start + segment_len, n_tokens)
        r = 0 if s == 0 else mem_tokens
        segs.append(slice(start, stop))
        reads.append(range(0, r))
        writes.append(range(r + stop - start, r + stop - start + mem_tokens))
    return SegmentPlan(segs, reads, writes)


def _segment_pass(ids: np.ndarray, read: Tensor | None, p: RevformerParams, rng):
    """One window; returns (content logits [n, V], write states [m, d])."""
    theta = p["mem.theta"]
    tok = nc.embedding(p["base.tok_emb"], ids)
    parts = ([read] if read is not None else []) + [tok, theta]
    x = nc.concat(parts, axis=0)
    t = x.shape[0]
    x = nc.add(x, nc.embedding(p["base.pos_emb"], np.arange(t)))
    x = nc.reshape(x, (1, t, p.cfg.d_model))
    y1, y2 = stack_forward(x, x, p, rng)
    h = nc.reshape(_average(y1, y2), (t, p.cfg.d_model))
    r, n, m = (0 if read is None else read.shape[0]), len(ids), p.cfg.mem_tokens
    return readout(h[r : r + n], p), h[r + n : r + n + m]


def forward_segmented(
    tokens,
    p: RevformerParams,
    segment_len: int | None = None,
    rng: np.random.Generator | None = None,
    trace: list | None = None,
) -> tuple[Tensor, Tensor]:
    """Logits [len, V] for every content token plus the last write states.

    ``rng`` enables adapter dropout (training).  Write states flow into the
    next segment with gradients attached.  ``trace`` collects per-segment
    read inputs and write outputs as arrays.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or tokens.size == 0:
        raise nc.UsageError("forward_segmented needs a non-empty 1-D token sequence")
    if not p.has_adapters:
        raise nc.UsageError("forward_segmented needs memory tokens; call attach_adapters first")
    seg = segment_len or p.cfg.segment_len
    if seg > p.cfg.segment_len:
        raise nc.UsageError(f"segment_len {seg} exceeds window capacity {p.cfg.segment_len}")
    plan = plan_segments(tokens.size, seg, p.cfg.mem_tokens)
    read, logits = None, []
    for sl in plan.segments:
        lg, write = _segment_pass(tokens[sl], read, p, rng)
        if trace is not None:
            trace.append({"read": None if read is None else read.data.copy(), "write": write.data.copy()})
        logits.append(lg)
        read = write
    return nc.concat(logits, axis=0), read


# ---------------------------------------------------------------------------
# flipped (inverse) execution
# ---------------------------------------------------------------------------


def flipped_forward(tokens, p: RevformerParams) -> Tensor:
    """Logits [len, V] from the inverse stack run in reverse block order."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or tokens.size == 0:
        raise nc.UsageError("flipped_forward needs a non-empty 1-D token sequence")
    if tokens.size > p.cfg.window:
        raise nc.UsageError(f"sequence of {tokens.size} tokens exceeds the {p.cfg.window}-token window")
    y = embed(tokens[None, :], p)
    x1, x2 = stack_inverse(y, y, p)
    return nc.reshape(readout(_average(x1, x2), p), (tokens.size, p.cfg.vocab_size))


# ---------------------------------------------------------------------------
# inference path: plain numpy, same arithmetic as the Tensor ops above
# ---------------------------------------------------------------------------


def _np_rms(x: np.ndarray, gain: np.ndarray) -> np.ndarray:
    inv = 1.0 / np.sqrt((x * x).mean(axis=-1, keepdims=True) + x.dtype.type(nc.RMS_EPS))
    return x * inv * gain


def _np_silu(x: np.ndarray) -> np.ndarray:
    return x * (0.5 * (1.0 + np.tanh(0.5 * x)))


def _np_softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / np.cumsum(e, axis=-1)[..., -1:]


class _NpBlocks:
    """Per-block weights as arrays plus key/value caches for one window."""

    def __init__(self, p: RevformerParams):
        cfg = p.cfg
        self.h, self.dk = cfg.n_heads, cfg.d_model // cfg.n_heads
        self.w = {k: t.data for k, t in p.tensors.items()}
        self.adapted = p.has_adapters
        self.sc = _adapter_scale(cfg)
        self.k: list[np.ndarray | None] = [None] * cfg.n_layers
        self.v: list[np.ndarray | None] = [None] * cfg.n_layers

    def f(self, x: np.ndarray, i: int) -> np.ndarray:
        w, h, dk = self.w, self.h, self.dk
        t, d = x.shape
        qkv = (_np_rms(x, w[f"base.l{i}.attn_norm"]) @ w[f"base.l{i}.wqkv"]).reshape(t, 3, h, dk).transpose(1, 2, 0, 3)
        q, k, v = qkv[0], qkv[1], qkv[2]
        offset = 0
        if self.k[i] is not None:
            offset = self.k[i].shape[1]
            k = np.concatenate([self.k[i], k], axis=1)
            v = np.concatenate([self.v[i], v], axis=1)
        self.k[i], self.v[i] = k, v
        scores = (q @ k.transpose(0, 2, 1)) * x.dtype.type(1.0 / math.sqrt(dk))
        scores = np.where(_causal_mask(t, offset), x.dtype.type(MASK_VALUE), scores)
        a = (_np_softmax(scores) @ v).transpose(1, 0, 2).reshape(t, d) @ w[f"base.l{i}.wo"]
        hidden = _np_silu(_np_rms(x + a, w[f"base.l{i}.ffn_norm"]) @ w[f"base.l{i}.w1"])
        out = a + hidden @ w[f"base.l{i}.w2"]
        if self.adapted:
            out = out + ((x @ w[f"adapter.l{i}.f_down"]) @ w[f"adapter.l{i}.f_up"]) * x.dtype.type(self.sc)
        return out

    def g(self, y: np.ndarray, i: int) -> np.ndarray:
        w = self.w
        z = _np_silu(y @ w[f"adapter.l{i}.g_down"])
        return (z @ w[f"adapter.l{i}.g_up"]) * y.dtype.type(self.sc)


class _WindowStepper:
    """Feeds one window a few positions at a time, reusing per-block keys/values.

    Causal attention makes earlier positions independent of later ones, so
    the hidden states match a full pass over the same window.
    """

    def __init__(self, p: RevformerParams, inverse: bool):
        self.p = p
        self.inverse = inverse
        self.blocks = _NpBlocks(p)
        self.pos = 0

    def feed(self, vectors: np.ndarray) -> np.ndarray:
        """Readout-level hidden states [n, d] for ``vectors`` (no positions added yet)."""
        n = vectors.shape[0]
        x = vectors + self.p["base.pos_emb"].data[self.pos : self.pos + n]
        self.pos += n
        bl, layers = self.blocks, range(self.p.cfg.n_layers)
        a, b = x, x
        if self.inverse:
            for i in reversed(layers):
                if bl.adapted:
                    b = b - bl.g(a, i)
                a = a - bl.f(b, i)
        else:
            for i in layers:
                a = a + bl.f(b, i)
                if bl.adapted:
                    b = b + bl.g(a, i)
        return (a + b) * x.dtype.type(0.5)

    def feed_ids(self, ids) -> np.ndarray:
        return self.feed(self.p["base.tok_emb"].data[np.asarray(ids, dtype=np.int64)])



def _np_logits(h: np.ndarray, p: RevformerParams) -> np.ndarray:
    return _np_rms(h, p["base.final_norm"].data) @ p["base.tok_emb"].data.T


class _ForwardDecoder:
    """Segmented forward execution one token at a time (inference only)."""

    def __init__(self, p: RevformerParams, seg: int):
        self.p, self.seg = p, seg
        self.step = _WindowStepper(p, inverse=False)
        self.n = 0  # content tokens in the current segment

    def _close_segment(self):
        write = self.step.feed(self.p["mem.theta"].data)
        self.step = _WindowStepper(self.p, inverse=False)
        self.step.feed(write)
        self.n = 0

    def feed(self, ids: list[int]) -> np.ndarray:
        """Hidden state of the last of ``ids``."""
        last = None
        while ids:
            if self.n == self.seg:
                self._close_segment()
            take = ids[: self.seg - self.n]
            ids = ids[len(take) :]
            last = self.step.feed_ids(take)[-1]
            self.n += len(take)
        return last


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


def generate(
    p: RevformerParams,
    direction: str,
    prompt,
    max_len: int,
    mode: str = "greedy",
    segment_len: int | None = None,
) -> list[int]:
    """Greedy continuation of ``prompt``; EOS stops and is not returned.

    Backward generation also stops when the window is full.  Earlier
    positions are never recomputed (their keys and values are cached).
    """
    if mode != "greedy":
        raise ValueError(f"unsupported decoding mode {mode!r}")
    if direction not in ("fwd", "bwd"):
        raise ValueError(f"direction must be 'fwd' or 'bwd', got {direction!r}")
    seq = [int(t) for t in prompt]
    if not seq:
        raise nc.UsageError("prompt must be non-empty")
    out: list[int] = []
    with nc.no_grad():
        if direction == "bwd":
            if len(seq) > p.cfg.window:
                raise nc.UsageError(f"prompt of {len(seq)} tokens exceeds the {p.cfg.window}-token window")
            stepper = _WindowStepper(p, inverse=True)
            feed = stepper.feed_ids
        else:
            seg = segment_len or p.cfg.segment_len
            if seg > p.cfg.segment_len:
                raise nc.UsageError(f"segment_len {seg} exceeds window capacity {p.cfg.segment_len}")
            if not p.has_adapters:
                raise nc.UsageError("forward generation needs memory tokens; call attach_adapters first")
            feed = _ForwardDecoder(p, seg).feed
        h = np.atleast_2d(feed(seq))[-1:]
        while len(out) < max_len:
            if direction == "bwd" and len(seq) >= p.cfg.window:
                break
            nxt = int(np.argmax(_np_logits(h, p)[-1]))
            if nxt == EOS:
                break
            out.append(nxt)
            seq.append(nxt)
            h = np.atleast_2d(feed([nxt]))[-1:]
    return out
