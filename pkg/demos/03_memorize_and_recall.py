"""
Memorize forward, recall backward
=================================

The full loop at desk scale: pretrain a small byte-level base on public
domain text, freeze it, then fine-tune only the memory tokens and the
adapters on 32 context/query pairs.  Afterwards the forward model
compresses a context into its query, and the flipped model (the same
weights run as the inverse stack) rebuilds the context from the query.

    python demos/03_memorize_and_recall.py                # full run, roughly 10-15 min
    python demos/03_memorize_and_recall.py --quick        # a few minutes, weak recall
    python demos/03_memorize_and_recall.py --base b.ckpt  # reuse a pretrained base
"""

import sys
import time
from importlib import resources

import numpy as np

from r3mem import checkpoint
from r3mem import evaluate as ev
from r3mem import hierpair as hp
from r3mem import trainer as tr
from r3mem.cli import read_config

quick = "--quick" in sys.argv
base_path = sys.argv[sys.argv.index("--base") + 1] if "--base" in sys.argv else None
data = resources.files("r3mem") / "data"

cfg, pre_kw = read_config(str(data / "toy.cfg"))
print("model:", cfg.to_text().replace("\n", " "))

# 1. a frozen base; pretraining is a plain decoder, adapters are attached afterwards
t0 = time.perf_counter()
if base_path:
    base, _ = checkpoint.load(base_path)
else:
    steps = 300 if quick else 2000
    corpus = (data / "kjv_train.txt").read_text(encoding="utf-8")
    base, losses = tr.pretrain_base(corpus, cfg, steps, seed=0, settings=tr.PretrainSettings(**pre_kw))
    print(f"pretrained {steps} steps in {time.perf_counter() - t0:.0f}s, loss {losses[0]:.2f} -> {np.mean(losses[-20:]):.2f}")
    checkpoint.save("demo_base.ckpt", base, {"stage": "pretrain"})
held = (data / "kjv_heldout.txt").read_text(encoding="utf-8")
print("held-out NLL per byte:", round(tr.heldout_nll(base, held), 3))

# 2. 32 pairs across the three levels
ds = hp.build_dataset(hp.load_corpus_dir(str(data / "memo_docs")))
pairs = hp.select_pairs(ds.pairs, 32, seed=0, max_len=cfg.window - 4)

# 3. fine-tune: forward NLL + backward NLL + 0.5 * cycle loss, 16 steps per epoch
epochs = 20 if quick else 125
t0 = time.perf_counter()
model, rows = tr.train(pairs, base, epochs, tr.LossWeights(0.5), seed=0, settings=tr.TrainSettings(max_lr=1e-2))
print(f"fine-tuned {len(rows)} steps in {time.perf_counter() - t0:.0f}s")
for r in rows[:: max(1, len(rows) // 5)] + rows[-1:]:
    print(f"  step {r['step']:5d}  fwd {r['loss_fwd']:.3f}  bwd {r['loss_bwd']:.3f}  cycle {r['loss_cycle']:.3f}")

# 4. retention: how well does the forward model predict each query?
print("query perplexity:", round(ev.eval_query_perplexity(model, pairs).value, 3))

# 5. retrieval: rebuild contexts from queries alone
res = ev.eval_reconstruction(model, pairs)
print(f"reconstruction: mean F1 {np.mean(res.f1):.3f}, exact {np.mean(res.exact):.0%}, F1>=0.9 on {np.mean(np.array(res.f1) >= 0.9):.0%}")
for pair in pairs[:: len(pairs) // 4]:
    print(f"\n[{pair.level}] query: {pair.query!r}")
    print("  rebuilt:", repr(hp.detokenize(ev.reconstruct(model, pair))))
    print("  truth:  ", repr(pair.context))
