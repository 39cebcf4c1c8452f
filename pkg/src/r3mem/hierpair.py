"""Hierarchical context/query pairs and the byte-level tokenizer.

A document is decomposed with fixed rules into paragraphs, sentences and
per-sentence entity lists, then turned into document->paragraph,
paragraph->sentence and sentence->entity pairs.  Paragraphs and sentences
shorter than a fraction of the whole document (in tokens) are dropped.
"""

from __future__ import annotations

import hashlib
import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, BOS, EOS, SEP = 256, 257, 258, 259
D2P, P2S, S2E = 260, 261, 262
VOCAB_SIZE = 263

LEVELS = ("d2p", "p2s", "s2e")
LEVEL_TAGS = {"d2p": D2P, "p2s": P2S, "s2e": S2E}

ABBREVIATIONS = frozenset(
    {"Dr.", "Mr.", "Mrs.", "Ms.", "St.", "Jr.", "Sr.", "Prof.", "Mt.", "No.", "vs.", "etc.", "e.g.", "i.e.", "cf."}
)
# not treated as entities even when capitalised mid-sentence
ENTITY_STOPWORDS = frozenset({"I", "O"})

_PARA_SPLIT = re.compile(r"\n[ \t]*\n")
_SENT_BOUNDARY = re.compile(r"[.?!][\"')\]]*(?=\s+[\"'(\[]*[A-Z])")
_WORD = re.compile(r"[A-Za-z][A-Za-z'\-]*")


class PairFormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# tokenizer
# ---------------------------------------------------------------------------


def tokenize(text: str) -> list[int]:
    return list(text.encode("utf-8"))


def detokenize(ids: Iterable[int]) -> str:
    """Decode byte ids; special ids are dropped, bad UTF-8 becomes U+FFFD."""
    return bytes(i for i in ids if 0 <= i < 256).decode("utf-8", errors="replace")


def token_len(text: str) -> int:
    return len(text.encode("utf-8"))


def encode_pair(context: str, query: str, level: str, direction: str = "fwd") -> tuple[list[int], int]:
    """Training sequence for one pair plus the index of its first target token.

    Forward is ``BOS tag c SEP q EOS`` with targets ``q EOS``; backward swaps
    the roles of ``c`` and ``q``.
    """
    if level not in LEVEL_TAGS:
        raise ValueError(f"unknown level {level!r}")
    src, tgt = (context, query) if direction == "fwd" else (query, context)
    head = [BOS, LEVEL_TAGS[level], *tokenize(src), SEP]
    return head + tokenize(tgt) + [EOS], len(head)


def prompt_ids(source: str, level: str) -> list[int]:
    return [BOS, LEVEL_TAGS[level], *tokenize(source), SEP]


# ---------------------------------------------------------------------------
# decomposition
# ---------------------------------------------------------------------------


@dataclass
class Decomposition:
    paragraphs: list[str]
    sentences: list[tuple[int, str]]  # (paragraph index, sentence)
    entities: list[list[str]]  # aligned with ``sentences``


def split_paragraphs(text: str) -> list[str]:
    return [p.strip() for p in _PARA_SPLIT.split(text) if p.strip()]


def split_sentences(paragraph: str) -> list[str]:
    out, start = [], 0
    for m in _SENT_BOUNDARY.finditer(paragraph):
        end = m.end()
        words = paragraph[start:end].split()
        if words and words[-1] in ABBREVIATIONS:
            continue
        out.append(paragraph[start:end].strip())
        start = end
    tail = paragraph[start:].strip()
    if tail:
        out.append(tail)
    return out


def extract_entities(sentence: str) -> list[str]:
    """Capitalised word runs, minus the sentence-initial word, deduplicated."""
    runs: list[list[str]] = []
    prev_end = None
    for k, m in enumerate(_WORD.finditer(sentence)):
        w = m.group()
        capital = w[0].isupper() and w not in ENTITY_STOPWORDS and k > 0
        if capital:
            joined = prev_end is not None and sentence[prev_end : m.start()].isspace()
            if joined and runs:
                runs[-1].append(w)
            else:
                runs.append([w])
            prev_end = m.end()
        else:
            prev_end = None
    found: list[str] = []
    for run in runs:
        ent = " ".join(run)
        if ent not in found:
            found.append(ent)
    return found


def decompose(text: str) -> Decomposition:
    paragraphs = split_paragraphs(text)
    sentences = [(i, s) for i, p in enumerate(paragraphs) for s in split_sentences(p)]
    return Decomposition(paragraphs, sentences, [extract_entities(s) for _, s in sentences])


# ---------------------------------------------------------------------------
# pairs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ContextQueryPair:
    id: str
    level: str
    context: str
    query: str

    def __post_init__(self):
        if self.level not in LEVEL_TAGS:
            raise PairFormatError(f"invalid level {self.level!r}")
        if not self.context or not self.query:
            raise PairFormatError("context and query must be non-empty")


def build_pairs(
    doc: str, min_para_frac: float = 0.20, min_sent_frac: float = 0.04, doc_id: str = "doc"
) -> list[ContextQueryPair]:
    """Emit d2p, p2s and s2e pairs for one document.

    A paragraph is kept iff ``token_len(p) >= min_para_frac * token_len(doc)``
    and a sentence iff ``token_len(s) >= min_sent_frac * token_len(doc)``.
    Sentences belonging to a dropped paragraph are dropped with it.
    """
    for frac in (min_para_frac, min_sent_frac):
        if not 0.0 <= frac <= 1.0:
            raise ValueError(f"threshold {frac} outside [0, 1]")
    dec = decompose(doc)
    if not dec.paragraphs:
        return []
    doc_text = "\n\n".join(dec.paragraphs)
    n_doc = token_len(doc_text)

    kept_paras = {i for i, p in enumerate(dec.paragraphs) if token_len(p) >= min_para_frac * n_doc}
    d2p = [
        ContextQueryPair(f"{doc_id}:d2p:{i}", "d2p", doc_text, p)
        for i, p in enumerate(dec.paragraphs)
        if i in kept_paras
    ]
    p2s, s2e = [], []
    for j, ((pi, sent), ents) in enumerate(zip(dec.sentences, dec.entities)):
        if pi not in kept_paras or token_len(sent) < min_sent_frac * n_doc:
            continue
        p2s.append(ContextQueryPair(f"{doc_id}:p2s:{j}", "p2s", dec.paragraphs[pi], sent))
        if ents:
            s2e.append(ContextQueryPair(f"{doc_id}:s2e:{j}", "s2e", sent, ", ".join(ents)))
    return d2p + p2s + s2e


def corpus_fingerprint(docs: Sequence[str]) -> str:
    h = hashlib.sha256()
    for d in docs:
        b = d.encode("utf-8")
        h.update(len(b).to_bytes(8, "little"))
        h.update(b)
    return h.hexdigest()


@dataclass
class PairDataset:
    pairs: list[ContextQueryPair]
    fingerprint: str = field(default="", compare=False)
    seed: int = field(default=0, compare=False)
    min_para_frac: float = field(default=0.20, compare=False)
    min_sent_frac: float = field(default=0.04, compare=False)

    def by_level(self, level: str) -> list[ContextQueryPair]:
        return [p for p in self.pairs if p.level == level]

    @property
    def counts(self) -> dict[str, int]:
        c = Counter(p.level for p in self.pairs)
        return {lvl: c.get(lvl, 0) for lvl in LEVELS}

    def __len__(self) -> int:
        return len(self.pairs)


def build_dataset(
    docs: Sequence[tuple[str, str]],
    min_para_frac: float = 0.20,
    min_sent_frac: float = 0.04,
    seed: int = 0,
) -> PairDataset:
    """Pairs for ``(doc_id, text)`` documents, grouped d2p, p2s, s2e."""
    per_level: dict[str, list[ContextQueryPair]] = {lvl: [] for lvl in LEVELS}
    for doc_id, text in docs:
        for p in build_pairs(text, min_para_frac, min_sent_frac, doc_id=doc_id):
            per_level[p.level].append(p)
    pairs = [p for lvl in LEVELS for p in per_level[lvl]]
    return PairDataset(pairs, corpus_fingerprint([t for _, t in docs]), seed, min_para_frac, min_sent_frac)


def load_corpus_dir(path: str | Path) -> list[tuple[str, str]]:
    files = sorted(Path(path).glob("*.txt"))
    return [(f.stem, f.read_text(encoding="utf-8")) for f in files]


def select_pairs(
    pairs: Sequence[ContextQueryPair], n: int, seed: int = 0, max_len: int | None = None
) -> list[ContextQueryPair]:
    """Level-balanced subsample with distinct queries.

    ``max_len`` bounds ``token_len(context) + token_len(query)`` so a pair
    fits one window in either direction.
    """
    rng = np.random.default_rng(seed)
    pools = {}
    for lvl in LEVELS:
        pool = [p for p in pairs if p.level == lvl]
        if max_len is not None:
            pool = [p for p in pool if token_len(p.context) + token_len(p.query) <= max_len]
        pools[lvl] = [pool[i] for i in rng.permutation(len(pool))]
    out: list[ContextQueryPair] = []
    seen: set[str] = set()
    while len(out) < n and any(pools.values()):
        for lvl in LEVELS:
            while pools[lvl]:
                p = pools[lvl].pop(0)
                if p.query not in seen:
                    seen.add(p.query)
                    out.append(p)
                    break
            if len(out) == n:
                break
    return out


def write_pairs(path: str | Path, dataset: PairDataset | Sequence[ContextQueryPair]) -> None:
    pairs = dataset.pairs if isinstance(dataset, PairDataset) else dataset
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for p in pairs:
            fh.write(json.dumps({"id": p.id, "level": p.level, "context": p.context, "query": p.query}, ensure_ascii=False))
            fh.write("\n")


def read_pairs(path: str | Path) -> PairDataset:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                pairs.append(ContextQueryPair(str(obj["id"]), obj["level"], obj["context"], obj["query"]))
            except (json.JSONDecodeError, KeyError, TypeError, PairFormatError) as exc:
                raise PairFormatError(f"{path}:{lineno}: {exc}") from None
    return PairDataset(pairs)
