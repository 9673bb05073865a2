"""Command-line entry point: corpus | tokenizer | batch | train | eval | chat.

Exit status is 0 on success, 1 on usage errors and 2 on runtime errors.
Set UNIDIAL_LOG_LEVEL (e.g. DEBUG) for more verbose logging.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys

import numpy as np

from . import batching, corpus, inference, tokenizer, training
from .config import AppConfig
from .model import load_checkpoint

logger = logging.getLogger("unidial")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _corpus_build(args):
    rules = AppConfig.load(args.config, {"min_len": args.min_len, "role_cap": args.role_cap})
    blocklist = corpus.CleaningConfig.load_blocklist(args.blocklist) if args.blocklist else frozenset()
    samples, report = corpus.build_corpus(corpus.read_comments(args.inp), rules.cleaning(blocklist), rules.role_cap)
    _ensure_parent(args.out)
    corpus.write_samples(samples, args.out)
    if args.stats:
        training.write_json(args.stats, report)
    print(f"{report['samples_kept']} samples from {report['trees']} trees -> {args.out}")


def _iter_training_text(path):
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("{"):
                try:
                    obj = json.loads(line)
                except ValueError:
                    obj = None
                if isinstance(obj, dict) and "context" in obj:
                    s = corpus.DialogueSample.from_json(obj)
                    for text, _ in s.context + [s.response]:
                        yield text
                    continue
            yield line


def _tokenizer(args):
    if args.action == "train":
        vocab = tokenizer.train_bpe(_iter_training_text(args.inp), args.size)
        _ensure_parent(args.out)
        vocab.save(args.out)
        print(f"{len(vocab)} tokens, {len(vocab.merges)} merges -> {args.out}")
        return
    vocab = tokenizer.Vocabulary.load(args.vocab)
    if args.action == "encode":
        text = args.text if args.text is not None else sys.stdin.read().rstrip("\n")
        print(" ".join(str(i) for i in vocab.encode(text)))
    else:
        raw = args.ids if args.ids is not None else sys.stdin.read()
        print(vocab.decode([int(x) for x in raw.replace(",", " ").split()]))


def _batch(args):
    if args.action == "dump":
        cfg = AppConfig.load(args.config, {})
        vocab = tokenizer.Vocabulary.load(args.vocab)
        samples = corpus.read_samples(args.corpus)
        packed = [batching.pack(s, vocab, cfg.limits) for s in samples]
        batches = batching.group_by_length(packed, args.token_budget or cfg.token_budget)
        os.makedirs(args.out, exist_ok=True)
        for i, b in enumerate(batches):
            batching.dump_batch(b, os.path.join(args.out, f"batch_{i:05d}.bin"))
        print(f"{len(batches)} batches, padding ratio {batching.padding_ratio(batches):.4f} -> {args.out}")
        return
    b = batching.load_batch(args.path)
    B, L = b.shape
    print(f"batch {B}x{L}, pad_count {b.pad_count}, targets {b.n_targets}")
    rows = range(B) if args.row is None else [args.row]
    for r in rows:
        c, n = b.lengths[r]
        print(f"\nrow {r}: context {c}, response {n}")
        print("tokens  " + " ".join(str(x) for x in b.token_ids[r]))
        print("types   " + " ".join(str(x) for x in b.type_ids[r]))
        print("roles   " + " ".join(str(x) for x in b.role_ids[r]))
        print("loss    " + " ".join(str(x) for x in b.loss_mask[r]))
        print(batching.format_mask(b.attention_mask[r]))


def _ensure_parent(path):
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


def _train(args):
    overrides = {"steps": args.steps, "seed": args.seed, "peak_lr": args.lr, "warmup_steps": args.warmup}
    cfg = AppConfig.load(args.config, overrides)
    vocab = tokenizer.Vocabulary.load(args.vocab)
    cfg.validate(len(vocab))
    samples = corpus.read_samples(args.corpus)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "config.json"), "w", encoding="utf-8") as fh:
        fh.write(cfg.to_json())
    vocab_copy = os.path.join(args.out, "vocab.txt")
    if os.path.abspath(vocab_copy) != os.path.abspath(args.vocab):
        shutil.copyfile(args.vocab, vocab_copy)
    run = cfg.run(os.path.join(args.out, "checkpoints"))
    result = training.train(run, samples, vocab, cfg.model(len(vocab)), resume_from=args.resume,
                            metrics_path=os.path.join(args.out, "metrics.csv"))
    final = os.path.join(args.out, "model.ckpt")
    training.save_training_state(final, result.params, result.state, run)
    last = result.metrics[-1]["loss"] if result.metrics else float("nan")
    print(f"step {result.state.step}, last loss {last:.4f} nats/token -> {final}")


def _load_model(path, vocab_path):
    params, header, _ = load_checkpoint(path)
    vocab_path = vocab_path or os.path.join(os.path.dirname(os.path.abspath(path)), "vocab.txt")
    if not os.path.exists(vocab_path):
        raise UsageError(f"no vocabulary found at {vocab_path}; pass --vocab")
    limits = tuple(header.get("run", {}).get("limits", batching.DEFAULT_LIMITS))
    return params, tokenizer.Vocabulary.load(vocab_path), limits


def _eval(args):
    params, vocab, limits = _load_model(args.model, args.vocab)
    samples = corpus.read_samples(args.corpus)
    nats, ppl = inference.perplexity(samples, params, vocab, limits)
    print(json.dumps({"nats_per_token": nats, "perplexity": ppl, "samples": len(samples)}))


def _chat(args):
    params, vocab, limits = _load_model(args.model, args.vocab)
    cfg = AppConfig.load(args.config, {"strategy": args.strategy, "p": args.p, "k": args.k,
                                       "temperature": args.temperature, "seed": args.seed,
                                       "max_resp": limits[1], "max_ctx": limits[0],
                                       "max_positions": params.config.max_positions})
    if args.topic is None and args.topics is None:
        raise UsageError("one of --topic or --topics is required")
    topic = args.topic
    if topic is None:
        topic = inference.topic_for_seed(inference.load_topics(args.topics), cfg.seed)
    dcfg = cfg.decode()
    state = inference.self_chat(topic, args.rounds, params, vocab, dcfg, limits)
    if args.out:
        _ensure_parent(args.out)
        state.write_jsonl(args.out, dcfg)
    for rec in state.records(dcfg):
        print(json.dumps(rec, ensure_ascii=False))


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="unidial", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", metavar="{corpus,tokenizer,batch,train,eval,chat}", parser_class=_Parser)

    p = sub.add_parser("corpus", help="build dialogue samples from a comment dump")
    csub = p.add_subparsers(dest="action", required=True, parser_class=_Parser)
    b = csub.add_parser("build", help="comments JSONL -> samples JSONL")
    b.add_argument("--in", dest="inp", required=True, help="comment records (id, parent_id, user_id, text, ts)")
    b.add_argument("--out", required=True, help="output samples JSONL")
    b.add_argument("--min-len", type=int, help="minimum response length in words (default 2)")
    b.add_argument("--blocklist", help="file with one blocked word per line")
    b.add_argument("--role-cap", type=int, help="largest role id; later speakers share it (default 8)")
    b.add_argument("--stats", help="write build/cleaning counters as JSON")
    b.add_argument("--config", help="flat JSON config")
    b.set_defaults(func=_corpus_build)

    p = sub.add_parser("tokenizer", help="train or apply the BPE vocabulary")
    tsub = p.add_subparsers(dest="action", required=True, parser_class=_Parser)
    t = tsub.add_parser("train")
    t.add_argument("--in", dest="inp", required=True, help="samples JSONL or plain text, one line per string")
    t.add_argument("--size", type=int, default=512, help="target vocabulary size (default 512)")
    t.add_argument("--out", required=True, help="vocabulary file to write")
    t.set_defaults(func=_tokenizer)
    t = tsub.add_parser("encode")
    t.add_argument("--vocab", required=True)
    t.add_argument("--text", help="text to encode (default: stdin)")
    t.set_defaults(func=_tokenizer)
    t = tsub.add_parser("decode")
    t.add_argument("--vocab", required=True)
    t.add_argument("--ids", help="space- or comma-separated ids (default: stdin)")
    t.set_defaults(func=_tokenizer)

    p = sub.add_parser("batch", help="dump or inspect packed batches")
    bsub = p.add_subparsers(dest="action", required=True, parser_class=_Parser)
    d = bsub.add_parser("dump", help="pack a corpus into length-grouped batch files")
    d.add_argument("--corpus", required=True)
    d.add_argument("--vocab", required=True)
    d.add_argument("--token-budget", type=int)
    d.add_argument("--config")
    d.add_argument("--out", required=True, help="output directory")
    d.set_defaults(func=_batch)
    i = bsub.add_parser("inspect", help="print ids and attention masks of a batch file")
    i.add_argument("path")
    i.add_argument("--row", type=int)
    i.set_defaults(func=_batch)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--corpus", required=True, help="samples JSONL")
    p.add_argument("--vocab", required=True, help="vocabulary file")
    p.add_argument("--config", help="flat JSON config; flags below override it")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float, help="peak learning rate")
    p.add_argument("--warmup", type=int, help="warmup steps")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--out", required=True, help="run directory")
    p.set_defaults(func=_train)

    p = sub.add_parser("eval", help="perplexity of a model on a corpus")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", help="default: vocab.txt next to the model")
    p.set_defaults(func=_eval)

    p = sub.add_parser("chat", help="self-chat from a seed topic")
    p.add_argument("--model", required=True)
    p.add_argument("--vocab", help="default: vocab.txt next to the model")
    p.add_argument("--topic", help="opening turn")
    p.add_argument("--topics", help="file of openers; one is picked from --seed")
    p.add_argument("--rounds", type=int, default=5)
    p.add_argument("--strategy", choices=inference.STRATEGIES)
    p.add_argument("--p", type=float)
    p.add_argument("--k", type=int)
    p.add_argument("--temperature", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.add_argument("--out", help="transcript JSONL")
    p.set_defaults(func=_chat)
    return ap


def dispatch(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("UNIDIAL_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if not getattr(args, "func", None):
        parser.print_help(sys.stderr)
        return 1
    np.seterr(over="ignore", under="ignore")
    try:
        args.func(args)
    except UsageError as exc:
        print(f"unidial: error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"unidial: error: file not found: {exc.filename}", file=sys.stderr)
        return 2
    except (ValueError, OSError, RuntimeError, FloatingPointError) as exc:
        print(f"unidial: error: {exc}", file=sys.stderr)
        return 2
    return 0


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
