"""``r3mem`` command line.

Exit codes: 0 success, 1 task failure (failed audit, unreadable input),
2 usage error.  ``R3MEM_SEED`` replaces the default seed of 0 when no
``--seed`` flag is given.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

from . import checkpoint, hierpair
from . import numcore as nc
from .evaluate import MetricsRow, check_invert, config_fingerprint, eval_perplexity, eval_reconstruction
from .evaluate import split_documents, write_metrics
from .hierpair import LEVELS, detokenize, prompt_ids, tokenize
from .revformer import ModelConfig, generate
from .trainer import LossWeights, PretrainSettings, TrainSettings, pretrain_base, train

log = logging.getLogger("r3mem")


class CliUsageError(Exception):
    pass


def default_seed() -> int:
    raw = os.environ.get("R3MEM_SEED")
    if raw is None or raw == "":
        return 0
    try:
        return int(raw)
    except ValueError:
        raise CliUsageError(f"R3MEM_SEED must be an integer, got {raw!r}") from None


def read_config(path: str | Path) -> tuple[ModelConfig, dict]:
    """``key=value`` lines; model fields plus batch_size/seq_len/max_lr/weight_decay for pretraining."""
    model_keys = {f.name: f.type for f in fields(ModelConfig)}
    pre_keys = {f.name: f.type for f in fields(PretrainSettings)}
    model_kw, pre_kw = {}, {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep:
            raise CliUsageError(f"{path}:{n}: expected key=value")
        kinds, dest = (model_keys, model_kw) if key in model_keys else (pre_keys, pre_kw)
        if key not in kinds:
            raise CliUsageError(f"{path}:{n}: unknown config key {key!r}")
        try:
            dest[key] = float(val) if kinds[key] in ("float", float) else int(val)
        except ValueError:
            raise CliUsageError(f"{path}:{n}: bad value for {key}: {val.strip()!r}") from None
    try:
        return ModelConfig(**model_kw), pre_kw
    except ValueError as e:
        raise CliUsageError(f"{path}: {e}") from None


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_build_pairs(a) -> int:
    docs = hierpair.load_corpus_dir(a.input)
    if not docs:
        raise CliUsageError(f"no *.txt documents in {a.input}")
    ds = hierpair.build_dataset(docs, min_para_frac=a.min_para_frac, min_sent_frac=a.min_sent_frac)
    out = ds
    if a.select:
        out = hierpair.select_pairs(ds.pairs, a.select, seed=a.seed, max_len=a.max_len)
    hierpair.write_pairs(a.output, out)
    counts = ds.counts
    print(f"wrote {len(out)} pairs to {a.output} (built d2p={counts['d2p']} p2s={counts['p2s']} s2e={counts['s2e']})")
    return 0


def cmd_pretrain(a) -> int:
    cfg, pre_kw = read_config(a.config) if a.config else (ModelConfig(), {})
    corpus = Path(a.corpus).read_text(encoding="utf-8")
    settings = PretrainSettings(**pre_kw)
    params, losses = pretrain_base(corpus, cfg, steps=a.steps, seed=a.seed, settings=settings)
    checkpoint.save(a.out, params, {"stage": "pretrain", "seed": str(a.seed), "steps": str(a.steps)})
    if losses:
        print(f"pretrained {a.steps} steps: loss {losses[0]:.4f} -> {losses[-1]:.4f}; saved {a.out}")
    return 0


def cmd_train(a) -> int:
    params, meta = checkpoint.load(a.base)
    pairs = hierpair.read_pairs(a.pairs).pairs
    if not pairs:
        raise CliUsageError(f"{a.pairs} holds no pairs")
    weights = LossWeights(lambda_cycle=a.lam, backward_weight=a.backward_weight)
    settings = TrainSettings(max_lr=a.lr, batch_size=a.batch_size)
    out, rows = train(pairs, params, a.epochs, weights, seed=a.seed, settings=settings, log_path=a.log)
    meta = dict(meta)
    meta.update({"stage": "train", "train_seed": str(a.seed), "lambda": repr(a.lam), "epochs": str(a.epochs)})
    checkpoint.save(a.out, out, meta)
    last = rows[-1]
    print(f"trained {len(rows)} steps: final loss_total {last['loss_total']:.4f}; saved {a.out}")
    return 0


def cmd_eval_ppl(a) -> int:
    params, _ = checkpoint.load(a.model)
    docs = split_documents(Path(a.corpus).read_text(encoding="utf-8"))
    row = eval_perplexity(params, docs, segment_len=a.segment_len)
    rows = [row, MetricsRow("eval-ppl", "documents", float(len(docs)), len(docs), row.config)]
    write_metrics(a.out, rows)
    print(f"perplexity {row.value:.4f} over {row.n_samples} tokens in {len(docs)} documents")
    return 0


def cmd_eval_recon(a) -> int:
    params, _ = checkpoint.load(a.model)
    pairs = hierpair.read_pairs(a.pairs).pairs
    res = eval_reconstruction(params, pairs)
    write_metrics(a.out, res.rows)
    for r in res.rows:
        print(f"{r.metric} {r.value:.4f} (n={r.n_samples})")
    return 0


def cmd_check_invert(a) -> int:
    params, _ = checkpoint.load(a.model)
    rep = check_invert(params, trials=a.trials, tol=a.tol, precision=a.precision, seed=a.seed)
    print(rep.summary())
    if a.out:
        fp = config_fingerprint(params.astype(a.precision))
        rows = [MetricsRow("check-invert", "stack_max_abs_error", rep.stack_error, rep.trials, fp)]
        rows += [
            MetricsRow("check-invert", f"block{i}_max_abs_error", e, rep.trials, fp) for i, e in enumerate(rep.block_errors)
        ]
        rows.append(MetricsRow("check-invert", "passed", float(rep.passed), rep.trials, fp))
        write_metrics(a.out, rows)
    return 0 if rep.passed else 1


def cmd_generate(a) -> int:
    params, _ = checkpoint.load(a.model)
    if a.direction == "fwd":
        prompt = prompt_ids(a.prompt, a.level)
    else:
        prompt = [hierpair.BOS, hierpair.LEVEL_TAGS[a.level], *tokenize(a.prompt), hierpair.SEP]
    print(detokenize(generate(params, a.direction, prompt, a.max_len)))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="r3mem", description="Reversible memory-augmented byte-level decoder.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", metavar="COMMAND", required=True)

    p = sub.add_parser("build-pairs", help="decompose a directory of documents into context/query pairs")
    p.add_argument("--input", required=True, help="directory of *.txt documents")
    p.add_argument("--output", required=True, help="JSONL file to write")
    p.add_argument("--min-para-frac", type=float, default=0.2)
    p.add_argument("--min-sent-frac", type=float, default=0.04)
    p.add_argument("--select", type=int, default=0, help="keep N level-balanced pairs (0 keeps all)")
    p.add_argument("--max-len", type=int, default=252, help="token limit used by --select")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_build_pairs)

    p = sub.add_parser("pretrain", help="train the plain decoder, then attach memory and adapters")
    p.add_argument("--corpus", required=True)
    p.add_argument("--config", help="key=value model config")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("train", help="fine-tune memory tokens and adapters on pairs")
    p.add_argument("--pairs", required=True)
    p.add_argument("--base", required=True)
    p.add_argument("--epochs", type=int, default=2)
    p.add_argument("--lambda", dest="lam", type=float, default=0.5, help="cycle loss weight")
    p.add_argument("--backward-weight", type=float, default=1.0, help="0 drops the backward loss")
    p.add_argument("--lr", type=float, default=TrainSettings.max_lr)
    p.add_argument("--batch-size", type=int, default=TrainSettings.batch_size)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--log", help="per-step loss CSV")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval-ppl", help="segmented perplexity over a corpus file")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True, help="documents separated by two blank lines")
    p.add_argument("--segment-len", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_eval_ppl)

    p = sub.add_parser("eval-recon", help="reconstruct contexts from queries; token F1 and exact match")
    p.add_argument("--model", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_eval_recon)

    p = sub.add_parser("check-invert", help="audit that every coupling block inverts")
    p.add_argument("--model", required=True)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--tol", type=float, default=None, help="default 1e-9 at 64-bit, 1e-4 at 32-bit")
    p.add_argument("--precision", type=int, choices=(32, 64), default=64)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", help="optional metrics CSV")
    p.set_defaults(fn=cmd_check_invert)

    p = sub.add_parser("generate", help="greedy decoding in either direction")
    p.add_argument("--model", required=True)
    p.add_argument("--direction", choices=("fwd", "bwd"), required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--level", choices=LEVELS, default="p2s")
    p.add_argument("--max-len", type=int, default=64)
    p.set_defaults(fn=cmd_generate)
    return ap


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        if getattr(args, "seed", 0) is None:
            args.seed = default_seed()
        return args.fn(args)
    except (CliUsageError, nc.UsageError) as e:
        print(f"r3mem {args.command}: {e}", file=sys.stderr)
        return 2
    except (OSError, ValueError, checkpoint.CheckpointFormatError, hierpair.PairFormatError) as e:
        print(f"r3mem {args.command}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
