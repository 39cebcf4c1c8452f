"""
Hierarchical context/query pairs
================================

Each document yields pairs at three granularities: document -> paragraph,
paragraph -> sentence and sentence -> entities.  Short paragraphs and
sentences are filtered by length relative to their document.  This
script builds the pairs for the bundled memo documents and shows what a
model actually sees for one of them.
"""

from importlib import resources

from r3mem import hierpair as hp

memo = resources.files("r3mem") / "data" / "memo_docs"
docs = hp.load_corpus_dir(str(memo))
ds = hp.build_dataset(docs)
print(f"{len(docs)} documents -> {len(ds)} pairs", ds.counts)

# one example per level
for level in hp.LEVELS:
    pair = ds.by_level(level)[0]
    print(f"\n[{level}] {pair.id}")
    print("  context:", pair.context[:90].replace("\n", " / "), "..." if len(pair.context) > 90 else "")
    print("  query:  ", pair.query[:90])

# the forward sequence is BOS tag context SEP query EOS; the backward one swaps them
pair = ds.by_level("s2e")[0]
fwd, start = hp.encode_pair(pair.context, pair.query, pair.level, "fwd")
bwd, bstart = hp.encode_pair(pair.context, pair.query, pair.level, "bwd")
print("\nforward ids :", fwd[:12], "... targets start at", start)
print("backward ids:", bwd[:12], "... targets start at", bstart)
print("decoded back:", hp.detokenize(fwd[start:-1]))

# the training subset used by the memorization run: level-balanced, window-sized
subset = hp.select_pairs(ds.pairs, 32, seed=0, max_len=252)
print("\nselected", len(subset), "pairs;", {lv: sum(p.level == lv for p in subset) for lv in hp.LEVELS})
