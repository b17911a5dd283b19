"""Command-line entry point: ``structflow <subcommand> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import metrics
from .data_io import (
    UNK_ERROR,
    UNK_MEAN,
    DataError,
    export_latent,
    filter_by_length,
    load_corpus,
    load_embeddings,
    save_embeddings,
    write_lines,
)
from .joint import DMV, MARKOV, sample_corpus
from .optim import (
    CheckpointError,
    TrainConfig,
    induce_tags,
    load_checkpoint,
    parse_corpus,
    pretrain_pipeline,
    save_checkpoint,
    train,
)
from .synthetic import planted_model

log = logging.getLogger("structflow")

# flag dest -> TrainConfig field
TRAIN_FIELDS = {
    "structure": "structure", "k": "K", "depth": "depth", "epochs": "epochs", "restarts": "restarts",
    "batch_size": "batch_size", "seed": "seed", "learning_rate": "learning_rate",
    "fixed_variance": "fixed_variance", "mean_noise": "mean_noise", "flow_init_scale": "flow_init_scale",
    "max_len": "max_len", "strip_punct": "strip_punct", "convergence_tol": "convergence_tol",
    "viterbi_em_iterations": "viterbi_em_iterations", "viterbi_em_smoothing": "viterbi_em_smoothing",
    "workers": "workers",
}
# non-model options accepted in a config file
RUN_KEYS = {"embeddings", "corpus", "pretrain", "out", "unk"}


class UsageError(Exception):
    pass


def _bool(text):
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _add_data_args(p):
    p.add_argument("--embeddings", help="embedding file (token followed by values per line)")
    p.add_argument("--corpus", help="tokens file, one sentence per line")
    p.add_argument("--unk", choices=[UNK_MEAN, UNK_ERROR], default=None, help="unknown-token policy")


def build_parser():
    parser = argparse.ArgumentParser(prog="structflow", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model with multiple restarts")
    _add_data_args(p)
    p.add_argument("--config", help="JSON file of option values; command-line flags take precedence")
    p.add_argument("--structure", choices=[MARKOV, DMV])
    p.add_argument("--k", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--restarts", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--fixed-variance", type=_bool, metavar="BOOL")
    p.add_argument("--mean-noise", type=float)
    p.add_argument("--flow-init-scale", type=float)
    p.add_argument("--max-len", type=int)
    p.add_argument("--strip-punct", type=_bool, metavar="BOOL")
    p.add_argument("--convergence-tol", type=float)
    p.add_argument("--viterbi-em-iterations", type=int)
    p.add_argument("--viterbi-em-smoothing", type=float)
    p.add_argument("--workers", type=int)
    p.add_argument("--pretrain", help="none, auto, or a checkpoint path to start from")
    p.add_argument("--out", help="output directory")

    for name, helptext in (("induce-tags", "Viterbi tags from a Markov checkpoint"),
                           ("parse", "Viterbi parses from a DMV checkpoint"),
                           ("export-latent", "write latent embeddings of every token type")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--checkpoint", required=True)
        _add_data_args(p)
        p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="score predictions against gold annotations")
    p.add_argument("--task", choices=["pos", "parse"], required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--gold", required=True)
    p.add_argument("--json", help="also write the metrics as JSON here")
    p.add_argument("--confusion", help="pos task: write the one-to-one confusion matrix CSV here")
    p.add_argument("--confusion-tags", help="comma-separated gold tags to keep in the confusion matrix")

    p = sub.add_parser("generate", help="sample a synthetic corpus")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--spec", help="JSON planted-model description")
    src.add_argument("--checkpoint")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--min-len", type=int, default=3)
    p.add_argument("--max-len", type=int, default=10)
    p.add_argument("--out", required=True)
    return parser


def _load_data(args, need_corpus=True):
    if not args.embeddings:
        raise UsageError("--embeddings is required")
    if need_corpus and not args.corpus:
        raise UsageError("--corpus is required")
    table = load_embeddings(args.embeddings, unk_policy=args.unk or UNK_MEAN)
    return load_corpus(args.corpus, table)


def resolve_train_options(args):
    """Merge defaults, the optional config file and explicit flags."""
    opts = {}
    if args.config:
        with open(args.config, encoding="utf-8") as f:
            from_file = json.load(f)
        unknown = set(from_file) - set(TRAIN_FIELDS) - RUN_KEYS
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        opts.update(from_file)
    for key in list(TRAIN_FIELDS) + sorted(RUN_KEYS):
        value = getattr(args, key, None)
        if value is not None:
            opts[key] = value
    return opts


def cmd_train(args):
    opts = resolve_train_options(args)
    for key in ("embeddings", "corpus"):
        if not opts.get(key):
            raise UsageError(f"--{key} is required")
    config = TrainConfig(**{TRAIN_FIELDS[k]: v for k, v in opts.items() if k in TRAIN_FIELDS})
    out = Path(opts.get("out") or "structflow-run")
    out.mkdir(parents=True, exist_ok=True)
    pretrain = opts.get("pretrain") or "none"

    resolved = {"train_config": asdict(config), "embeddings": opts["embeddings"], "corpus": opts["corpus"],
                "unk": opts.get("unk") or UNK_MEAN, "pretrain": pretrain, "out": str(out)}
    (out / "config.json").write_text(json.dumps(resolved, indent=2), encoding="utf-8")
    log.info("resolved config: %s", json.dumps(resolved))

    table = load_embeddings(opts["embeddings"], unk_policy=opts.get("unk") or UNK_MEAN)
    corpus = load_corpus(opts["corpus"], table)
    if config.max_len is not None or config.strip_punct:
        corpus = filter_by_length(corpus, config.max_len or max(len(s) for s in corpus), config.strip_punct)
    log.info("corpus: %d sentences, %d tokens, dim %d", len(corpus), corpus.n_tokens, corpus.dim)

    with open(out / "train.log.jsonl", "w", encoding="utf-8") as log_file:
        if pretrain == "auto":
            best, stages = pretrain_pipeline(corpus, config, log_file=log_file)
        else:
            init = None
            if pretrain != "none":
                init = load_checkpoint(pretrain, expected_structure=config.structure).model
            best, trace = train(corpus, config, init=init, log_file=log_file)
            stages = {"train": trace}

    save_checkpoint(best, out / "best.ckpt.json")
    final_stage = list(stages)[-1]
    with open(out / "restarts.tsv", "w", encoding="utf-8", newline="\n") as f:
        f.write("stage\trestart\tseed\tstatus\tinit_ll\tfinal_ll\tselected\n")
        for stage, trace in stages.items():
            if stage == "viterbi_em":
                continue
            for e in trace:
                selected = stage == final_stage and e["status"] == "ok" and e["final_ll"] == best.log_likelihood
                f.write(f"{stage}\t{e['restart']}\t{e['seed']}\t{e['status']}\t{e.get('init_ll')!r}\t"
                        f"{e['final_ll']!r}\t{int(selected)}\n")
    print(f"best_ll={best.log_likelihood!r}")
    print(f"checkpoint={out / 'best.ckpt.json'}")
    return 0


def cmd_induce_tags(args):
    ckpt = load_checkpoint(args.checkpoint, expected_structure=MARKOV)
    corpus = _load_data(args)
    write_lines(args.out, induce_tags(ckpt.model, corpus))
    return 0


def cmd_parse(args):
    ckpt = load_checkpoint(args.checkpoint, expected_structure=DMV)
    corpus = _load_data(args)
    write_lines(args.out, [p.heads for p in parse_corpus(ckpt.model, corpus)])
    return 0


def cmd_export_latent(args):
    ckpt = load_checkpoint(args.checkpoint)
    corpus = _load_data(args)
    export_latent(corpus, ckpt.model.flow, args.out)
    return 0


def _read_rows(path):
    with open(path, encoding="utf-8") as f:
        return [line.split() for line in f.read().split("\n") if line.strip()]


def evaluate(task, pred_rows, gold_rows, confusion_tags=None):
    """Metrics dict (and confusion data for the pos task) from aligned rows."""
    if len(pred_rows) != len(gold_rows):
        raise DataError(f"{len(pred_rows)} predicted sentences but {len(gold_rows)} gold sentences")
    for s, (p, g) in enumerate(zip(pred_rows, gold_rows)):
        if len(p) != len(g):
            raise DataError(f"sentence {s + 1}: {len(p)} predicted vs {len(g)} gold tokens")
    if task == "pos":
        table = metrics.contingency([t for r in pred_rows for t in r], [t for r in gold_rows for t in r])
        vm, hom, com = metrics.v_measure(table)
        mapping = metrics.one_to_one_map(table)
        result = {
            "m1": metrics.many_to_one(table),
            "vm": vm,
            "homogeneity": hom,
            "completeness": com,
            "one_to_one": metrics.one_to_one_accuracy(table, mapping),
            "tokens": int(table.total),
        }
        return result, metrics.confusion_matrix(table, mapping, confusion_tags)
    pred = [[int(h) for h in r] for r in pred_rows]
    gold = [[int(h) for h in r] for r in gold_rows]
    short = [i for i, g in enumerate(gold) if len(g) <= 10]
    result = {"dda_all": metrics.directed_accuracy(pred, gold), "tokens": sum(len(g) for g in gold)}
    result["dda_le10"] = (
        metrics.directed_accuracy([pred[i] for i in short], [gold[i] for i in short]) if short else None
    )
    return result, None


def cmd_eval(args):
    subset = args.confusion_tags.split(",") if args.confusion_tags else None
    result, confusion = evaluate(args.task, _read_rows(args.pred), _read_rows(args.gold), subset)
    for k, v in result.items():
        print(f"{k}={v}")
    if args.json:
        Path(args.json).write_text(json.dumps(result, indent=2), encoding="utf-8")
    if args.confusion and confusion is not None:
        labels, matrix = confusion
        with open(args.confusion, "w", encoding="utf-8", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["gold"] + list(labels))
            for label, row in zip(labels, matrix):
                w.writerow([label] + [repr(float(v)) for v in row])
    return 0


def cmd_generate(args):
    if args.n < 1:
        raise UsageError("--n must be positive")
    if args.spec:
        with open(args.spec, encoding="utf-8") as f:
            model = planted_model(json.load(f))
    else:
        model = load_checkpoint(args.checkpoint).model
    corpus = sample_corpus(model, args.n, (args.min_len, args.max_len), seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tokens = [t for s in corpus for t in s.tokens]
    save_embeddings(out / "embeddings.txt", tokens, np.concatenate([s.embeddings for s in corpus]))
    write_lines(out / "tokens.txt", [s.tokens for s in corpus])
    write_lines(out / "tags.txt", [s.gold_tags for s in corpus])
    if model.structure == DMV:
        write_lines(out / "heads.txt", [s.gold_heads for s in corpus])
    return 0


COMMANDS = {
    "train": cmd_train,
    "induce-tags": cmd_induce_tags,
    "parse": cmd_parse,
    "eval": cmd_eval,
    "generate": cmd_generate,
    "export-latent": cmd_export_latent,
}


def _setup_logging(verbose):
    # a private handler, so training progress reaches stdout whatever the host configured
    for h in list(log.handlers):
        if getattr(h, "_structflow", False):
            log.removeHandler(h)
    handler = logging.StreamHandler(sys.stdout)
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    handler._structflow = True
    log.addHandler(handler)
    log.setLevel(logging.DEBUG if verbose else logging.INFO)
    log.propagate = False


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.verbose)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.error(str(exc))
    except (DataError, CheckpointError, ValueError, OSError, RuntimeError) as exc:
        print(f"structflow: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
