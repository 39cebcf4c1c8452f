import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import FIXTURES, MEMO_DOCS
from oracles import filter_violations
from r3mem import hierpair as hp


def _para(n, ch="a"):
    """A paragraph of exactly n bytes with no sentence boundaries inside."""
    return (ch * (n - 1)) + "."


# ---------------------------------------------------------------------------
# tokenizer
# ---------------------------------------------------------------------------


def test_tokenize_examples():
    assert hp.tokenize("A") == [65]
    assert hp.tokenize("") == []
    assert hp.detokenize([]) == ""


@given(st.text())
def test_tokenizer_roundtrip(s):
    ids = hp.tokenize(s)
    assert hp.detokenize(ids) == s
    assert all(0 <= i < 256 for i in ids)


def test_detokenize_strips_specials_and_replaces_bad_bytes():
    assert hp.detokenize([hp.BOS, 104, 105, hp.EOS]) == "hi"
    assert hp.detokenize([0xFF, 65]) == "�A"


def test_encode_pair_layout():
    fwd, start = hp.encode_pair("ab", "c", "p2s", "fwd")
    assert fwd == [hp.BOS, hp.P2S, 97, 98, hp.SEP, 99, hp.EOS]
    assert start == 5
    bwd, start = hp.encode_pair("ab", "c", "p2s", "bwd")
    assert bwd == [hp.BOS, hp.P2S, 99, hp.SEP, 97, 98, hp.EOS]
    assert start == 4


# ---------------------------------------------------------------------------
# decomposition
# ---------------------------------------------------------------------------


def test_two_paragraphs():
    assert hp.split_paragraphs("One block.\n\nTwo block.") == ["One block.", "Two block."]


def test_abbreviation_kept_inside_sentence():
    assert hp.split_sentences("Dr. Smith went home. He slept.") == ["Dr. Smith went home.", "He slept."]


def test_entities_skip_sentence_initial():
    assert hp.extract_entities("Alice met Bob in Paris.") == ["Bob", "Paris"]


def test_entities_runs_and_dedup():
    assert hp.extract_entities("Then New York met New York and I left.") == ["New York"]


def test_empty_document():
    d = hp.decompose("")
    assert d.paragraphs == [] and d.sentences == [] and d.entities == []
    assert hp.build_pairs("") == []


# ---------------------------------------------------------------------------
# pair building
# ---------------------------------------------------------------------------


def test_paragraph_threshold_inclusive():
    # 20 + 2 ("\n\n") + 78 = 100 tokens
    doc = _para(20) + "\n\n" + _para(78, "b")
    pairs = hp.build_pairs(doc)
    assert hp.token_len("\n\n".join(hp.split_paragraphs(doc))) == 100
    assert [p.query for p in pairs if p.level == "d2p"] == [_para(20), _para(78, "b")]


def test_paragraph_threshold_excludes_below():
    doc = _para(19) + "\n\n" + _para(79, "b")
    d2p = [p.query for p in hp.build_pairs(doc) if p.level == "d2p"]
    assert d2p == [_para(79, "b")]


def test_sentences_of_dropped_paragraph_are_dropped():
    doc = _para(19) + "\n\n" + _para(79, "b")
    p2s = [p for p in hp.build_pairs(doc) if p.level == "p2s"]
    assert [p.query for p in p2s] == [_para(79, "b")]


def test_s2e_query_format():
    doc = "Then Alice met Bob in Paris."
    s2e = [p for p in hp.build_pairs(doc) if p.level == "s2e"]
    assert len(s2e) == 1
    assert s2e[0].query == "Alice, Bob, Paris"
    assert s2e[0].context == doc


def test_threshold_range_checked():
    with pytest.raises(ValueError):
        hp.build_pairs("x.", min_para_frac=1.5)


def test_counts_match_groups():
    ds = hp.build_dataset(hp.load_corpus_dir(FIXTURES / "corpus50"))
    for lvl in hp.LEVELS:
        assert ds.counts[lvl] == len(ds.by_level(lvl)) > 0
    assert sum(ds.counts.values()) == len(ds)


def test_fixture_corpus_has_no_filter_violations():
    ds = hp.build_dataset(hp.load_corpus_dir(FIXTURES / "corpus50"))
    assert filter_violations(ds) == []


def test_every_retained_sentence_in_exactly_one_p2s():
    doc = "Alpha beta gamma. Delta epsilon zeta.\n\nEta theta iota kappa. Lambda mu nu."
    pairs = hp.build_pairs(doc)
    sents = [s for _, s in hp.decompose(doc).sentences]
    p2s = [p.query for p in pairs if p.level == "p2s"]
    assert sorted(p2s) == sorted(sents)


def test_build_is_byte_deterministic(tmp_path):
    docs = hp.load_corpus_dir(FIXTURES / "corpus50")
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    hp.write_pairs(a, hp.build_dataset(docs))
    hp.write_pairs(b, hp.build_dataset(docs))
    assert a.read_bytes() == b.read_bytes()


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def test_jsonl_roundtrip(tmp_path):
    ds = hp.build_dataset(hp.load_corpus_dir(FIXTURES / "corpus50"))
    path = tmp_path / "pairs.jsonl"
    hp.write_pairs(path, ds)
    assert hp.read_pairs(path) == ds


def test_newline_in_context_survives(tmp_path):
    pair = hp.ContextQueryPair("x:d2p:0", "d2p", "first.\n\nsecond é.", "second é.")
    path = tmp_path / "p.jsonl"
    hp.write_pairs(path, [pair])
    raw = path.read_text(encoding="utf-8")
    assert raw.count("\n") == 1 and "\\n\\n" in raw
    assert hp.read_pairs(path).pairs == [pair]


def test_bad_level_names_line(tmp_path):
    path = tmp_path / "p.jsonl"
    good = {"id": "a", "level": "d2p", "context": "c", "query": "q"}
    path.write_text(json.dumps(good) + "\n" + json.dumps({**good, "level": "x2y"}) + "\n", encoding="utf-8")
    with pytest.raises(hp.PairFormatError, match=r":2:"):
        hp.read_pairs(path)


def test_empty_field_rejected(tmp_path):
    path = tmp_path / "p.jsonl"
    path.write_text(json.dumps({"id": "a", "level": "d2p", "context": "", "query": "q"}) + "\n", encoding="utf-8")
    with pytest.raises(hp.PairFormatError, match=r":1:"):
        hp.read_pairs(path)


def test_select_pairs_balanced_and_fits():
    ds = hp.build_dataset(hp.load_corpus_dir(MEMO_DOCS))
    sel = hp.select_pairs(ds.pairs, 32, seed=0, max_len=252)
    assert len(sel) == 32
    assert {lvl: sum(p.level == lvl for p in sel) for lvl in hp.LEVELS} == {"d2p": 11, "p2s": 11, "s2e": 10}
    assert len({p.query for p in sel}) == 32
    assert all(hp.token_len(p.context) + hp.token_len(p.query) <= 252 for p in sel)
    assert sel == hp.select_pairs(ds.pairs, 32, seed=0, max_len=252)


def test_select_pairs_respects_max_len():
    ds = hp.build_dataset(hp.load_corpus_dir(FIXTURES / "corpus50"))
    sel = hp.select_pairs(ds.pairs, 30, seed=0, max_len=252)
    assert all(hp.token_len(p.context) + hp.token_len(p.query) <= 252 for p in sel)
