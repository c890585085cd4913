"""Command-line entry point.

Every command writes ``run_config.json`` (the fully resolved options,
including the seed) into its output directory. Options can come from a JSON
file given with ``--config``::

    {"seed": 7, "overrides": {"peak_lr": 0.01, "total_steps": 200}}

Top-level keys name command flags; ``overrides`` holds tuning fields for the
command's training config. Flags given on the command line win.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

from . import finetune as F
from . import model as M
from . import odqa
from . import synthetic
from .checkpoint import CheckpointError, read_manifest
from .data import DataError, read_conll, read_passages, read_qa
from .metrics import entity_f1
from .pretraining import Pretrainer, append_metrics, backbone_from_checkpoint, pretrain_preset
from .retrieval import InvertedIndex, build_index
from .tensor import NonFiniteError
from .tokenizer import Vocabulary, train_bpe

logger = logging.getLogger("deskbert")

OUTPUT_ENV = "DESKBERT_OUTPUT_DIR"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def default_output_dir():
    return os.environ.get(OUTPUT_ENV, "runs")


# -- helpers --------------------------------------------------------------------


def _read_lines(path):
    with open(path, encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines:
        raise DataError(f"{path}: no text lines")
    return lines


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, ensure_ascii=False)
        fh.write("\n")


def _apply_overrides(base, overrides, what):
    fields = {f.name for f in dataclasses.fields(base)}
    unknown = sorted(set(overrides) - fields)
    if unknown:
        raise UsageError(f"unknown {what} override(s): {', '.join(unknown)}")
    return dataclasses.replace(base, **overrides)


def _outdir(args):
    out = args.out or default_output_dir()
    os.makedirs(out, exist_ok=True)
    return out


def _record(out, args, **resolved):
    cfg = {k: v for k, v in vars(args).items() if k not in ("func", "config")}
    cfg.update(resolved)
    _write_json(os.path.join(out, "run_config.json"), cfg)


def _backbone(args, vocab):
    if args.checkpoint:
        cfg, params = backbone_from_checkpoint(args.checkpoint)
        if cfg.vocab_size != len(vocab):
            raise DataError(f"vocabulary has {len(vocab)} tokens but the checkpoint expects {cfg.vocab_size}")
        return cfg, params
    logger.warning("no --checkpoint given; fine-tuning a randomly initialized %s encoder", args.preset)
    cfg = M.preset(args.preset, vocab_size=len(vocab))
    return cfg, M.init_params(cfg, args.seed, with_mlm_head=False, label="backbone")


# -- commands -------------------------------------------------------------------


def cmd_train_tokenizer(args):
    out = _outdir(args)
    texts = _read_lines(args.corpus)
    vocab = train_bpe(texts, args.vocab_size, lowercase=args.lowercase)
    path = os.path.join(out, "vocab.txt")
    vocab.save(path)
    _record(out, args)
    print(f"vocabulary of {len(vocab)} tokens ({len(vocab.merges)} merges) -> {path}")


def cmd_pretrain(args):
    out = _outdir(args)
    if args.corpus:
        texts = _read_lines(args.corpus)
    else:
        logger.info("no --corpus given; using the built-in synthetic corpus")
        texts = synthetic.pretraining_corpus(args.synthetic_sentences, seed=args.seed)
    vocab = Vocabulary.load(args.vocab) if args.vocab else train_bpe(texts, M.preset(args.preset).vocab_size)
    vocab.save(os.path.join(out, "vocab.txt"))
    overrides = dict(args.overrides)
    if args.steps is not None:
        overrides["total_steps"] = args.steps
    overrides["seed"] = args.seed
    cfg = _apply_overrides(pretrain_preset(args.preset), overrides, "pre-training")
    model_cfg = M.preset(args.preset, vocab_size=len(vocab))
    log_path = os.path.join(out, "metrics.csv")
    ckpt = os.path.join(out, "checkpoint")
    if args.resume:
        probe = Pretrainer.from_texts(texts, vocab, model_cfg, cfg)
        trainer = Pretrainer.load(args.resume, probe.ids, probe.mask)
        cfg = trainer.cfg
    else:
        trainer = Pretrainer.from_texts(texts, vocab, model_cfg, cfg)
        if os.path.exists(log_path):
            os.remove(log_path)
    stop = cfg.total_steps if args.stop_after is None else min(args.stop_after, cfg.total_steps)
    remaining = stop - trainer.step
    _record(out, args, pretrain_config=cfg.to_dict(), model_config=trainer.dual.disc_cfg.to_dict())
    results = []
    for _ in range(max(0, remaining)):
        r = trainer.train_step()
        append_metrics(log_path, r)
        results.append(r)
        if args.save_every and trainer.step % args.save_every == 0:
            trainer.save(ckpt)
    trainer.save(ckpt)
    if results:
        print(f"step {trainer.step}: L_MLM {results[-1].mlm:.4f}  L_RTD {results[-1].rtd:.4f}  (first L_MLM {results[0].mlm:.4f})")
    print(f"checkpoint -> {ckpt}")


def _finetune_config(args, defaults):
    overrides = dict(args.overrides)
    for flag in ("lr", "epochs", "batch_size"):
        if getattr(args, flag) is not None:
            overrides[flag] = getattr(args, flag)
    overrides["seed"] = args.seed
    return _apply_overrides(defaults, overrides, "fine-tuning")


def _tagging_report(model, data, entity_level):
    acc, preds = F.evaluate_tagging(model, data)
    report = {"accuracy": acc, "n": len(data)}
    if entity_level:
        report.update(entity_f1(preds, [list(t) for _, t in data]))
    return report


def _cmd_tagging(args, entity_level):
    out = _outdir(args)
    vocab = Vocabulary.load(args.vocab)
    train = read_conll(args.train)
    if not train:
        raise DataError(f"{args.train}: no sentences")
    labels = sorted({t for _, tags in train for t in tags})
    if entity_level and "O" in labels:
        labels.remove("O")
        labels.insert(0, "O")
    ft = _finetune_config(args, F.TAGGING_DEFAULTS)
    cfg, backbone = _backbone(args, vocab)
    model = F.finetune_token_classification(backbone, cfg, vocab, train, labels, ft)
    F.save_model(os.path.join(out, "model"), model)
    report = {"train": _tagging_report(model, train, entity_level)}
    if args.eval:
        report["eval"] = _tagging_report(model, read_conll(args.eval), entity_level)
    _record(out, args, finetune_config=dataclasses.asdict(ft))
    _write_json(os.path.join(out, "report.json"), report)
    print(json.dumps(report, sort_keys=True))


def cmd_finetune_pos(args):
    _cmd_tagging(args, entity_level=False)


def cmd_finetune_ner(args):
    _cmd_tagging(args, entity_level=True)


def cmd_finetune_mrc(args):
    out = _outdir(args)
    vocab = Vocabulary.load(args.vocab)
    train, dropped = read_qa(args.train)
    if not train:
        raise DataError(f"{args.train}: no usable QA examples")
    ft = _finetune_config(args, F.MRC_DEFAULTS)
    cfg, backbone = _backbone(args, vocab)
    reader, stats = F.finetune_mrc(backbone, cfg, vocab, train, ft)
    F.save_model(os.path.join(out, "model"), reader)
    report = {"train": F.evaluate_mrc(reader, train), "dropped": dropped, **stats}
    if args.eval:
        report["eval"] = F.evaluate_mrc(reader, read_qa(args.eval)[0])
    _record(out, args, finetune_config=dataclasses.asdict(ft))
    _write_json(os.path.join(out, "report.json"), report)
    print(json.dumps(report, sort_keys=True))


def cmd_build_index(args):
    passages = read_passages(args.passages)
    if not passages:
        raise DataError(f"{args.passages}: no passages")
    index = build_index(passages, k1=args.k1, b=args.b)
    parent = os.path.dirname(os.path.abspath(args.output))
    os.makedirs(parent, exist_ok=True)
    index.save(args.output)
    print(f"indexed {index.N} passages, {len(index.postings)} terms, avgdl {index.avgdl:.2f} -> {args.output}")


def cmd_odqa_eval(args):
    data = odqa.load_viquad(args.questions)
    index = InvertedIndex.load(args.index)
    if args.oracle_reader:
        reader = odqa.OracleReader(data.examples)
    elif args.reader:
        reader = F.load_model(args.reader)
        if not isinstance(reader, F.SpanReader):
            raise DataError(f"{args.reader} is not a span reader")
    else:
        raise UsageError("odqa-eval needs --reader or --oracle-reader")
    missing = [pid for pid in index.passage_ids if pid not in data.corpus.by_id]
    if missing:
        raise DataError(f"index holds {len(missing)} passage(s) not in {args.questions}, e.g. {missing[0]}")
    report = odqa.evaluate_odqa(data.examples, args.grid, index, reader, data.corpus, mu=args.mu)
    print(report.table())
    if args.report:
        report.write(args.report)


def cmd_corpus_stats(args):
    data = odqa.load_viquad(args.data)
    c = data.counts
    print(f"articles {c['articles']}  passages {c['passages']}  questions {c['questions']}")
    if data.dropped:
        print(f"dropped {data.dropped} question(s) with mismatched answer offsets")
    if args.split:
        problems = odqa.check_viquad_counts(args.split, c)
        for p in problems:
            print(p, file=sys.stderr)
        if problems:
            return EXIT_DATA
    return EXIT_OK


def cmd_checkpoint_inspect(args):
    meta, entries = read_manifest(args.path)
    for k in sorted(meta):
        print(f"{k}: {json.dumps(meta[k], sort_keys=True)}")
    total = 0
    for name, tag, shape, _, _ in entries:
        size = 1
        for d in shape:
            size *= d
        total += size
        print(f"  {name:40s} {tag} {shape}")
    print(f"{len(entries)} tensors, {total} values")


# -- parser ---------------------------------------------------------------------


def _grid(text):
    try:
        ks = tuple(int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of integers: {text!r}") from None
    if not ks or min(ks) < 1:
        raise argparse.ArgumentTypeError("grid values must be positive")
    return ks


def build_parser():
    p = _Parser(prog="deskbert", description="Desk-scale encoder pre-training, fine-tuning and open-domain QA.")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seed=True, out=True):
        sp.add_argument("--config", help="JSON file of option values and an 'overrides' section")
        if seed:
            sp.add_argument("--seed", type=int, default=0)
        if out:
            sp.add_argument("--out", help=f"output directory (default ${OUTPUT_ENV} or ./runs)")

    sp = sub.add_parser("train-tokenizer", help="learn a BPE vocabulary from a text file")
    common(sp)
    sp.add_argument("--corpus", required=True, help="one text per line")
    sp.add_argument("--vocab-size", type=int, default=8192)
    sp.add_argument("--lowercase", action="store_true")
    sp.set_defaults(func=cmd_train_tokenizer)

    sp = sub.add_parser("pretrain", help="MLM + replaced-token-detection pre-training")
    common(sp)
    sp.add_argument("--preset", default="desk", choices=sorted(M.PRESETS))
    sp.add_argument("--corpus", help="one sentence per line (default: built-in synthetic corpus)")
    sp.add_argument("--synthetic-sentences", type=int, default=50)
    sp.add_argument("--vocab", help="vocabulary file (default: train one on the corpus)")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--save-every", type=int, default=0)
    sp.add_argument("--stop-after", type=int, help="stop at this step without shortening the LR schedule")
    sp.add_argument("--resume", help="checkpoint directory to continue from")
    sp.set_defaults(func=cmd_pretrain)

    for name, func, what in (("finetune-pos", cmd_finetune_pos, "POS tagging"),
                             ("finetune-ner", cmd_finetune_ner, "BIO entity tagging"),
                             ("finetune-mrc", cmd_finetune_mrc, "extractive QA")):
        sp = sub.add_parser(name, help=f"fine-tune for {what}")
        common(sp)
        sp.add_argument("--vocab", required=True)
        sp.add_argument("--train", required=True)
        sp.add_argument("--eval")
        sp.add_argument("--checkpoint", help="pre-training checkpoint directory")
        sp.add_argument("--preset", default="desk", choices=sorted(M.PRESETS), help="used without --checkpoint")
        sp.add_argument("--lr", type=float)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--batch-size", type=int)
        sp.set_defaults(func=func)

    sp = sub.add_parser("build-index", help="BM25 index over a passages JSON-lines file")
    common(sp, seed=False, out=False)
    sp.add_argument("--passages", required=True)
    sp.add_argument("--output", required=True)
    sp.add_argument("--k1", type=float, default=1.2)
    sp.add_argument("--b", type=float, default=0.75)
    sp.set_defaults(func=cmd_build_index)

    sp = sub.add_parser("odqa-eval", help="retriever-reader F1 for several top-k values")
    common(sp, seed=False, out=False)
    sp.add_argument("--questions", required=True, help="QA JSON-lines (passages in <stem>.passages.jsonl) or SQuAD .json")
    sp.add_argument("--index", required=True)
    sp.add_argument("--reader", help="fine-tuned span reader directory")
    sp.add_argument("--oracle-reader", action="store_true", help="use gold answers on gold passages")
    sp.add_argument("--grid", type=_grid, default=odqa.DEFAULT_GRID)
    sp.add_argument("--mu", type=float, default=0.0, help="weight of the retriever score in answer selection")
    sp.add_argument("--report", help="write the JSON report here")
    sp.set_defaults(func=cmd_odqa_eval)

    sp = sub.add_parser("corpus-stats", help="count articles, passages and questions")
    common(sp, seed=False, out=False)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", choices=("train", "dev", "test"), help="check against the published split sizes")
    sp.set_defaults(func=cmd_corpus_stats)

    sp = sub.add_parser("checkpoint-inspect", help="print a checkpoint manifest")
    common(sp, seed=False, out=False)
    sp.add_argument("path")
    sp.set_defaults(func=cmd_checkpoint_inspect)
    return p


def _merge_config(parser, args, argv):
    """Fill options from ``--config`` unless they were given as flags."""
    args.overrides = {}
    if not getattr(args, "config", None):
        return args
    try:
        with open(args.config, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"{args.config}:{exc.lineno}: invalid JSON ({exc.msg})") from None
    if not isinstance(doc, dict):
        raise DataError(f"{args.config}: expected a JSON object")
    overrides = doc.pop("overrides", {})
    if not isinstance(overrides, dict):
        raise UsageError(f"{args.config}: 'overrides' must be an object")
    known = set(vars(args)) - {"func", "config", "overrides", "command"}
    unknown = sorted(k for k in doc if k.replace("-", "_") not in known)
    if unknown:
        raise UsageError(f"{args.config}: unknown key(s) {', '.join(unknown)}")
    given = {a.split("=")[0][2:].replace("-", "_") for a in argv if a.startswith("--")}
    for k, v in doc.items():
        k = k.replace("-", "_")
        if k not in given:
            setattr(args, k, v)
    args.overrides = overrides
    return args


def run(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                            format="%(levelname)s %(name)s: %(message)s")
        args = _merge_config(parser, args, argv)
        code = args.func(args)
        return EXIT_OK if code is None else code
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        # --help exits 0; anything else argparse raises is a usage problem
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    except NonFiniteError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, CheckpointError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main():
    sys.exit(run())
