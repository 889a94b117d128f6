"""Command-line entry point.

Every subcommand accepts ``--config FILE`` plus ``--section.key VALUE``
overrides for any configuration key; dedicated flags take precedence.
Failures exit nonzero with the failing stage in brackets.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import sys
import warnings

from . import corpus as C
from .config import ConfigError, PipelineConfig, load_config, parse_config, set_value
from .metrics import CorpusScore, NormalizeConfig
from .pipeline import (
    StageError,
    StageTrace,
    back_translate,
    decode_prompts,
    fit_filter_classifier,
    fit_model,
    model_filter_blocks,
    records_as_prompts,
    run_pipeline,
    score_blocks,
    sweep_threshold,
    threshold_blocks,
)

log = logging.getLogger("polytrans")


def _parse_overrides(extra):
    out = []
    i = 0
    while i < len(extra):
        arg = extra[i]
        if not arg.startswith("--"):
            raise ConfigError(f"unexpected argument {arg!r}")
        key = arg[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"missing value for {arg}")
            value = extra[i + 1]
            i += 2
        out.append((key, value))
    return out


def _config(args, extra) -> PipelineConfig:
    overrides = _parse_overrides(extra)
    if getattr(args, "config", None):
        return load_config(args.config, overrides)
    cfg = parse_config("")
    for key, value in overrides:
        set_value(cfg, key, value)
    return cfg.validate()


def _read_prompts(path):
    """Prompts from a corpus file or a prediction-format file."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        return records_as_prompts(C.parse_corpus(text))
    except C.CorpusFormatError:
        return [(b.prompt_id, b.source_text) for b in C.parse_predictions(text)]


def _make_output_dirs(args):
    for name in ("out", "last", "save_model", "log"):
        path = getattr(args, name, None)
        if path and os.path.dirname(path):
            os.makedirs(os.path.dirname(path), exist_ok=True)


def _normalizer(args, cfg):
    return NormalizeConfig(lowercase=bool(getattr(args, "lowercase", False) or cfg.metrics.lowercase))


# -- subcommands ---------------------------------------------------------------------

def cmd_fixture(args, cfg):
    corpus = C.synth_fixture(args.seed, args.n_prompts, args.max_refs)
    C.write_corpus(corpus, args.out)
    print(f"wrote {len(corpus)} prompts / {corpus.pair_count} pairs to {args.out}")


def cmd_prepare(args, cfg):
    corpus = C.read_corpus(args.corpus)
    fraction = args.validation_fraction if args.validation_fraction is not None else cfg.data.validation_fraction
    factor = args.factor if args.factor is not None else cfg.data.factor
    seed = args.seed if args.seed is not None else cfg.seeds.data
    max_pairs = args.max_pairs if args.max_pairs is not None else cfg.data.max_pairs
    train, val = C.split_by_prompt(corpus, fraction, seed)
    pairs = C.oversample(train, factor, max_pairs)
    os.makedirs(args.out_dir, exist_ok=True)
    with open(os.path.join(args.out_dir, "train_pairs.txt"), "w", encoding="utf-8") as fh:
        fh.write(C.serialize_pairs(pairs))
    C.write_corpus(train, os.path.join(args.out_dir, "train.txt"))
    C.write_corpus(val, os.path.join(args.out_dir, "validation.txt"))
    print(f"train_prompts={len(train)} validation_prompts={len(val)} "
          f"train_pairs_in={train.pair_count} train_pairs_out={len(pairs)}")


def cmd_train_bpe(args, cfg):
    from .subword import BpeTokenizer

    texts = []
    for path in args.input:
        corpus = C.read_corpus(path)
        texts += [r.source_text for r in corpus.records]
        texts += [t.target_text for r in corpus.records for t in r.translations]
    vocab_size = args.vocab_size or cfg.bpe.vocab_size
    tok = BpeTokenizer(vocab_size=vocab_size).fit(texts)
    tok.save(args.out)
    print(f"vocab={tok.n_tokens} merges={len(tok.merges_)}")


def cmd_train(args, cfg):
    from .model import init_model, load_checkpoint, save_checkpoint
    from .pipeline import model_config, train_config
    from .subword import BpeTokenizer
    from .training import AdamState, train_loop

    tok = BpeTokenizer.load(args.bpe)
    with open(args.pairs, encoding="utf-8") as fh:
        pairs = C.parse_pairs(fh.read())
    val_pairs = C.all_pairs(C.read_corpus(args.validation)) if args.validation else None
    state, start = None, 0
    if args.init_checkpoint:
        model, step, opt, _ = load_checkpoint(args.init_checkpoint)
        if model.config.vocab_size != tok.n_tokens:
            raise ValueError("checkpoint vocabulary does not match the BPE model")
        if args.resume and opt is not None:
            state = AdamState(opt["m"], opt["v"], opt["t"])
            start = step
    else:
        model = init_model(model_config(cfg, tok.n_tokens), cfg.seeds.model)
    log_stream = open(args.log, "w", encoding="utf-8") if args.log else sys.stdout
    try:
        best, report, state = train_loop(model, pairs, tok, train_config(cfg), val_pairs,
                                         state=state, start_step=start, log_stream=log_stream)
    finally:
        if args.log:
            log_stream.close()
    save_checkpoint(args.out, best, report.steps, state.as_dict())
    if args.last:
        save_checkpoint(args.last, model, report.steps, state.as_dict())
    print(f"steps={report.steps} best_step={report.best_step} "
          f"stopped_early={report.stopped_early} final_train_loss={report.final_train_loss:.6f}",
          file=sys.stderr)


def cmd_decode(args, cfg):
    from .model import load_checkpoint
    from .subword import BpeTokenizer

    tok = BpeTokenizer.load(args.bpe)
    model, _, _, _ = load_checkpoint(args.checkpoint)
    dcfg = cfg.effective_decode()
    prompts = _read_prompts(args.input)
    blocks = decode_prompts(model, tok, prompts, dcfg, method=args.method,
                            seed=cfg.seeds.decode, multi_output=args.multi_output)
    C.write_predictions(blocks, args.out, emit_scores=args.emit_scores)


def cmd_filter(args, cfg):
    blocks = C.read_predictions(args.input)
    threshold = args.threshold if args.threshold is not None else cfg.threshold.value
    C.write_predictions(threshold_blocks(blocks, threshold), args.out, emit_scores=True)


def cmd_filter_model(args, cfg):
    from .gbdt import GbdtClassifier

    blocks = C.read_predictions(args.input)
    if args.gold:
        gold = C.read_corpus(args.gold)
        clf, cv, (X, y) = fit_filter_classifier(blocks, gold, cfg, _normalizer(args, cfg))
        print(f"labelled={len(y)} accept={int(sum(y))}", file=sys.stderr)
        if cv is not None:
            print("cv " + cv.summary(), file=sys.stderr)
        if args.save_model:
            clf.save(args.save_model)
    elif args.model:
        clf = GbdtClassifier.load(args.model)
    else:
        raise ValueError("filter-model needs --model, or --gold to train one")
    if args.out:
        kept = model_filter_blocks(blocks, clf, cfg.filter.decision_threshold,
                                   cfg.filter.n_features, cfg.filter.pad_value)
        C.write_predictions(kept, args.out, emit_scores=True)


def cmd_score(args, cfg):
    gold = C.read_corpus(args.gold)
    blocks = C.read_predictions(args.predictions)
    micro = args.micro or cfg.metrics.micro
    s = score_blocks(blocks, gold, _normalizer(args, cfg), micro)
    if args.header:
        print(CorpusScore.header())
    print(s.report_line())


def _parse_grid(text):
    values = []
    for part in text.split(","):
        part = part.strip()
        if ":" in part:
            start, stop, step = (float(x) for x in part.split(":"))
            n = int(math.floor((stop - start) / step + 1e-9)) + 1
            values += [start + i * step for i in range(n)]
        elif part:
            values.append(float(part))
    return sorted(values)


def cmd_sweep_threshold(args, cfg):
    gold = C.read_corpus(args.gold)
    blocks = C.read_predictions(args.decoded)
    rows = sweep_threshold(blocks, gold, _parse_grid(args.grid), _normalizer(args, cfg),
                           cfg.metrics.micro)
    out = open(args.out, "w", newline="", encoding="utf-8") if args.out else sys.stdout
    try:
        w = csv.writer(out)
        w.writerow(["threshold", "kept", "P", "WR", "WMaF"])
        for t, kept, p, wr, wmaf in rows:
            w.writerow([t, kept, f"{p:.6f}", f"{wr:.6f}", f"{wmaf:.6f}"])
    finally:
        if args.out:
            out.close()


def cmd_back_translate(args, cfg):
    from .model import load_checkpoint
    from .subword import BpeTokenizer

    tok = BpeTokenizer.load(args.bpe)
    model, _, _, _ = load_checkpoint(args.checkpoint)
    refs = C.read_predictions(args.references)
    beam = args.beam or cfg.backtranslate.beam_size
    top = args.top or cfg.backtranslate.top_k
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        out = back_translate(model, tok, refs, beam, top, cfg.decode.max_len)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    C.write_predictions(out, args.out)


def cmd_pipeline(args, cfg):
    if args.output_dir:
        cfg.paths.output_dir = args.output_dir
    res = run_pipeline(cfg)
    print(CorpusScore.header())
    print(res.score.report_line())
    print("stages: " + " ".join(res.trace), file=sys.stderr)


# -- argument parsing ------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="polytrans", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="key = value config file")
        sp.set_defaults(func=func)
        return sp

    sp = add("fixture", cmd_fixture, "write a synthetic corpus")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--n-prompts", type=int, default=100)
    sp.add_argument("--max-refs", type=int, default=4)
    sp.add_argument("--out", required=True)

    sp = add("prepare", cmd_prepare, "split by prompt and oversample the train side")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--factor", type=float)
    sp.add_argument("--validation-fraction", type=float)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--max-pairs", type=int)
    sp.add_argument("--out-dir", required=True)

    sp = add("train-bpe", cmd_train_bpe, "train the shared BPE model")
    sp.add_argument("--input", nargs="+", required=True)
    sp.add_argument("--vocab-size", type=int)
    sp.add_argument("--out", required=True)

    sp = add("train", cmd_train, "train or fine-tune a translation model")
    sp.add_argument("--pairs", required=True)
    sp.add_argument("--bpe", required=True)
    sp.add_argument("--validation")
    sp.add_argument("--init-checkpoint")
    sp.add_argument("--resume", action="store_true",
                    help="also restore optimizer state and step counter")
    sp.add_argument("--log")
    sp.add_argument("--out", required=True, help="best checkpoint")
    sp.add_argument("--last", help="also save the last-step checkpoint here")

    sp = add("decode", cmd_decode, "beam-search or nucleus decode prompts")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--bpe", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--method", choices=("beam", "nucleus"), default="beam")
    sp.add_argument("--multi-output", action="store_true")
    sp.add_argument("--emit-scores", action="store_true")

    sp = add("filter", cmd_filter, "max-token-score thresholding of a decoded file")
    sp.add_argument("--input", required=True)
    sp.add_argument("--threshold", type=float)
    sp.add_argument("--out", required=True)

    sp = add("filter-model", cmd_filter_model, "train/apply the accept-reject classifier")
    sp.add_argument("--input", required=True)
    sp.add_argument("--gold", help="label --input against this corpus and train a classifier")
    sp.add_argument("--model", help="saved classifier to apply")
    sp.add_argument("--save-model")
    sp.add_argument("--lowercase", action="store_true")
    sp.add_argument("--out")

    sp = add("score", cmd_score, "seven-column score report")
    sp.add_argument("--gold", required=True)
    sp.add_argument("--predictions", required=True)
    sp.add_argument("--lowercase", action="store_true")
    sp.add_argument("--micro", choices=("macro_pr", "pooled"))
    sp.add_argument("--header", action="store_true")

    sp = add("sweep-threshold", cmd_sweep_threshold, "re-filter and re-score over a grid")
    sp.add_argument("--decoded", required=True)
    sp.add_argument("--gold", required=True)
    sp.add_argument("--grid", default="-inf,-8:-1:0.5")
    sp.add_argument("--lowercase", action="store_true")
    sp.add_argument("--out")

    sp = add("back-translate", cmd_back_translate, "paraphrase sources via a reverse model")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--bpe", required=True)
    sp.add_argument("--references", required=True)
    sp.add_argument("--beam", type=int)
    sp.add_argument("--top", type=int)
    sp.add_argument("--out", required=True)

    sp = add("pipeline", cmd_pipeline, "run one pipeline variant end to end")
    sp.add_argument("--output-dir")
    return p


def main(argv=None):
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args, extra)
        _make_output_dirs(args)
        if args.command == "pipeline":
            args.func(args, cfg)
        else:
            with StageTrace().stage(args.command):
                args.func(args, cfg)
    except StageError as exc:
        print(f"error {exc}", file=sys.stderr)
        return 2
    except (ConfigError, OSError) as exc:
        print(f"error [{args.command}] {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
