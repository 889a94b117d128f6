"""End-to-end stages shared by every pipeline variant.

Variants differ only in configuration: which training set is built, whether
training runs, which decoder is used and which filters apply. Every stage
that runs is recorded in the trace, so two runs can be compared stage by
stage.
"""

from __future__ import annotations

import contextlib
import dataclasses
import logging
import math
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import corpus as C
from .config import PipelineConfig, dump_config
from .decoding import (
    DecodeConfig,
    Hypothesis,
    beam_search,
    make_multi_output_target,
    nucleus_sample,
    split_multi_output,
)
from .filtering import ThresholdConfig, label_predictions, model_filter, threshold_filter
from .gbdt import GbdtClassifier, GbdtParams, randomized_search
from .metrics import CorpusScore, NormalizeConfig, score_corpus
from .model import ModelConfig, TransformerModel, init_model, load_checkpoint, save_checkpoint
from .subword import BpeTokenizer
from .training import train_loop

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class StageTrace:
    stages: list = field(default_factory=list)

    @contextlib.contextmanager
    def stage(self, name):
        self.stages.append(name)
        log.info("stage %s", name)
        try:
            yield
        except StageError:
            raise
        except Exception as exc:
            raise StageError(name, exc) from exc


# -- decoded-output plumbing -------------------------------------------------------

def block_hypotheses(block: C.PredictionBlock) -> list[Hypothesis]:
    if block.scores is None:
        if block.candidates:
            raise ValueError(f"prompt {block.prompt_id!r} carries no token scores")
        return []
    return [Hypothesis((), tuple(tok), total) for total, tok in block.scores]


def select_candidates(block: C.PredictionBlock, keep) -> C.PredictionBlock:
    keep = list(keep)
    return C.PredictionBlock(
        block.prompt_id,
        block.source_text,
        [c for c, k in zip(block.candidates, keep) if k],
        None if block.scores is None else [s for s, k in zip(block.scores, keep) if k],
    )


def threshold_blocks(blocks, threshold):
    cfg = ThresholdConfig(float(threshold))
    out = []
    for b in blocks:
        hyps = block_hypotheses(b)
        kept = {id(h) for h in threshold_filter(hyps, cfg)}
        out.append(select_candidates(b, [id(h) in kept for h in hyps]))
    return out


def model_filter_blocks(blocks, classifier, decision_threshold=0.5, n_features=None,
                        pad_value=0.0):
    out = []
    for b in blocks:
        hyps = block_hypotheses(b)
        kept = {id(h) for h in model_filter(hyps, classifier, decision_threshold, n_features,
                                            pad_value)}
        out.append(select_candidates(b, [id(h) in kept for h in hyps]))
    return out


def predictions_dict(blocks) -> dict:
    return {b.prompt_id: list(b.candidates) for b in blocks}


def union_blocks(groups):
    """Merge blocks with the same prompt id, dropping repeated candidate texts."""
    merged: dict[str, C.PredictionBlock] = {}
    for blocks in groups:
        for b in blocks:
            m = merged.setdefault(b.prompt_id, C.PredictionBlock(b.prompt_id, b.source_text, [], []))
            for i, cand in enumerate(b.candidates):
                if cand not in m.candidates:
                    m.candidates.append(cand)
                    m.scores.append(None if b.scores is None else b.scores[i])
    out = list(merged.values())
    for m in out:
        if any(s is None for s in m.scores):
            m.scores = None
    return out


def check_prompt_ids(gold: C.ParallelCorpus, blocks):
    gold_ids = set(gold.prompt_ids)
    pred_ids = {b.prompt_id for b in blocks}
    missing = sorted(gold_ids - pred_ids)
    extra = sorted(pred_ids - gold_ids)
    if missing or extra:
        parts = []
        if missing:
            parts.append(f"missing from predictions: {', '.join(missing)}")
        if extra:
            parts.append(f"not in gold: {', '.join(extra)}")
        raise ValueError("prompt id mismatch; " + "; ".join(parts))


def score_blocks(blocks, gold: C.ParallelCorpus, normalizer=None, micro="macro_pr",
                 strict=True) -> CorpusScore:
    if strict:
        check_prompt_ids(gold, blocks)
    return score_corpus(predictions_dict(blocks), gold, normalizer, micro)


def sweep_threshold(blocks, gold, grid, normalizer=None, micro="macro_pr"):
    """Rows of ``(threshold, kept, P, WR, WMaF)`` for each grid value."""
    for b in blocks:
        if b.candidates and b.scores is None:
            raise ValueError("decoded file carries no token scores; decode with --emit-scores")
    rows = []
    for t in grid:
        filtered = threshold_blocks(blocks, t)
        s = score_blocks(filtered, gold, normalizer, micro)
        kept = sum(len(b.candidates) for b in filtered)
        rows.append((float(t), kept, s.P, s.WR, s.WMaF))
    return rows


# -- decoding ------------------------------------------------------------------------

def decode_prompts(model, tokenizer, prompts, dcfg: DecodeConfig, *, method="beam", seed=0,
                   multi_output=False):
    """Decode ``(prompt_id, source_text)`` pairs into scored prediction blocks.

    With ``multi_output`` each hypothesis is split on the separator token and
    every piece inherits that hypothesis' scores.
    """
    blocks = []
    for j, (pid, source) in enumerate(prompts):
        src_ids = tokenizer.encode(source)
        if method == "beam":
            hyps = beam_search(model, src_ids, dcfg)
        elif method == "nucleus":
            hyps = nucleus_sample(model, src_ids, dcfg, seed=[seed, j])
        else:
            raise ValueError(f"unknown decode method {method!r}")
        block = C.PredictionBlock(pid, source, [], [])
        for h in hyps:
            text = tokenizer.decode(h.content_ids, keep_sep=multi_output)
            pieces = split_multi_output(text) if multi_output else [text]
            for piece in pieces:
                if not piece:
                    continue
                block.candidates.append(piece)
                block.scores.append((h.total_logprob, list(h.token_logprobs)))
        blocks.append(block)
    return blocks


def records_as_prompts(corpus: C.ParallelCorpus):
    return [(r.prompt_id, r.source_text) for r in corpus.records]


# -- training-set builders -----------------------------------------------------------

def multi_output_pairs(corpus: C.ParallelCorpus, top_n=5):
    return [
        C.SampledPair(r.prompt_id, r.source_text, make_multi_output_target(r.translations, top_n))
        for r in corpus.records
    ]


def build_training_pairs(cfg: PipelineConfig, corpus: C.ParallelCorpus):
    if cfg.variant in ("multi_output", "nucleus", "back_translate"):
        return multi_output_pairs(corpus, cfg.data.multi_output_top_n)
    if cfg.variant == "no_oversample":
        return C.all_pairs(corpus)
    return C.oversample(corpus, cfg.data.factor, cfg.data.max_pairs)


def model_config(cfg: PipelineConfig, vocab_size: int) -> ModelConfig:
    return ModelConfig(vocab_size=vocab_size, **dataclasses.asdict(cfg.model))


def train_config(cfg: PipelineConfig):
    from .training import TrainConfig

    values = {f.name: getattr(cfg.train, f.name) for f in dataclasses.fields(TrainConfig)}
    return TrainConfig(**values)


def fit_tokenizer(cfg: PipelineConfig, corpus: C.ParallelCorpus) -> BpeTokenizer:
    texts = [r.source_text for r in corpus.records]
    texts += [t.target_text for r in corpus.records for t in r.translations]
    return BpeTokenizer(vocab_size=cfg.bpe.vocab_size, seed=cfg.seeds.data).fit(texts)


def fit_model(cfg, tokenizer, pairs, val_pairs=None, init=None, log_path=None, evaluate_wf=None):
    model = init.copy() if init is not None else init_model(
        model_config(cfg, tokenizer.n_tokens), cfg.seeds.model)
    tcfg = train_config(cfg)
    stream = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        best, report, state = train_loop(model, pairs, tokenizer, tcfg, val_pairs,
                                         evaluate_wf=evaluate_wf, log_stream=stream)
    finally:
        if stream:
            stream.close()
    return best, report, state


def fit_filter_classifier(blocks, gold: C.ParallelCorpus, cfg: PipelineConfig, normalizer=None):
    """Train the accept/reject classifier on decoded blocks labelled against gold.

    Returns ``(classifier, cv_result_or_None, (X, y))``.
    """
    by_id = gold.by_id()
    X, y = [], []
    for b in blocks:
        if b.prompt_id not in by_id:
            continue
        hyps = block_hypotheses(b)
        preds = [(text, h.token_logprobs) for text, h in zip(b.candidates, hyps)]
        for vec, label in label_predictions(preds, by_id[b.prompt_id], normalizer,
                                            cfg.filter.n_features, cfg.filter.pad_value):
            X.append(vec)
            y.append(label)
    X = np.asarray(X, dtype=np.float64).reshape(-1, cfg.filter.n_features)
    y = np.asarray(y, dtype=int)
    base = GbdtParams(**{f.name: getattr(cfg.gbdt, f.name) for f in dataclasses.fields(GbdtParams)})
    cv = None
    counts = np.bincount(y, minlength=2) if y.size else np.zeros(2, int)
    if y.size >= cfg.gbdt.k and counts.min() >= 1:
        params, cv = randomized_search(X, y, n_iter=cfg.gbdt.n_iter, k=cfg.gbdt.k,
                                       seed=cfg.seeds.gbdt, base=base)
    else:
        params = base
    if y.size < 2:
        # too few decoded candidates to fit anything: accept-all prior
        X = np.zeros((2, cfg.filter.n_features))
        y = np.array([1, 1])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        clf = GbdtClassifier.from_params(params, random_state=cfg.seeds.gbdt).fit(X, y)
    return clf, cv, (X, y)


def back_translate(reverse_model, tokenizer, references, beam_size=15, top_k=5, max_len=64):
    """Paraphrase sources by decoding reference target sentences backwards.

    ``references`` are PredictionBlocks whose candidates are reference
    target-language sentences; prompts without one are skipped with a
    warning. Returns blocks whose candidates are the source paraphrases.
    """
    dcfg = DecodeConfig(beam_size=beam_size, top_k=min(top_k, beam_size), max_len=max_len)
    out = []
    for b in references:
        if not b.candidates:
            warnings.warn(f"no reference translation for prompt {b.prompt_id!r}; skipped")
            continue
        paraphrases = []
        for ref in b.candidates:
            for h in beam_search(reverse_model, tokenizer.encode(ref), dcfg):
                text = tokenizer.decode(h.content_ids)
                if text and text not in paraphrases:
                    paraphrases.append(text)
        out.append(C.PredictionBlock(b.prompt_id, b.source_text, paraphrases, None))
    return out


# -- the pipeline --------------------------------------------------------------------

@dataclass
class PipelineResult:
    score: CorpusScore
    predictions: list
    trace: list
    gold: C.ParallelCorpus
    train_report: object = None
    cv: object = None
    output_dir: str | None = None


def _normalizer(cfg):
    return NormalizeConfig(lowercase=cfg.metrics.lowercase)


def run_pipeline(cfg: PipelineConfig, corpus: C.ParallelCorpus | None = None,
                 write_outputs=True) -> PipelineResult:
    cfg.validate()
    trace = StageTrace()
    out_dir = cfg.paths.output_dir if write_outputs else None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)

    def out_path(name):
        return os.path.join(out_dir, name) if out_dir else None

    norm = _normalizer(cfg)
    dcfg = cfg.effective_decode()
    variant = cfg.variant

    with trace.stage("load"):
        if corpus is None:
            if not cfg.paths.corpus:
                raise ValueError("paths.corpus is not set")
            corpus = C.read_corpus(cfg.paths.corpus)
    with trace.stage("split"):
        train_c, val_c = C.split_by_prompt(corpus, cfg.data.validation_fraction, cfg.seeds.data)
        eval_c = val_c if cfg.data.eval_split == "validation" else train_c

    init = None
    with trace.stage("tokenizer"):
        if cfg.paths.bpe_model:
            tokenizer = BpeTokenizer.load(cfg.paths.bpe_model)
        else:
            tokenizer = fit_tokenizer(cfg, train_c)
        if out_dir:
            tokenizer.save(out_path("bpe.txt"))
    if cfg.paths.init_checkpoint:
        with trace.stage("load_checkpoint"):
            init, _, _, _ = load_checkpoint(cfg.paths.init_checkpoint)
            if init.config.vocab_size != tokenizer.n_tokens:
                raise ValueError(
                    f"checkpoint vocab {init.config.vocab_size} != tokenizer vocab "
                    f"{tokenizer.n_tokens}; pass the matching paths.bpe_model")

    multi = variant in ("multi_output", "nucleus", "back_translate")
    do_train = cfg.train.enabled and variant != "no_finetune"

    def predict(model, prompts):
        blocks = decode_prompts(model, tokenizer, prompts, dcfg, multi_output=multi)
        if variant != "no_postprocess":
            blocks = threshold_blocks(blocks, cfg.threshold.value)
        return blocks

    def evaluate_wf(model):
        return score_blocks(predict(model, records_as_prompts(val_c)), val_c, norm,
                            cfg.metrics.micro).WMaF

    report = None
    if do_train:
        with trace.stage("build_training_set"):
            pairs = build_training_pairs(cfg, train_c)
            val_pairs = (multi_output_pairs(val_c, cfg.data.multi_output_top_n) if multi
                         else C.all_pairs(val_c))
        with trace.stage("train"):
            model, report, state = fit_model(cfg, tokenizer, pairs, val_pairs, init,
                                             out_path("train.log"), evaluate_wf)
            if out_dir:
                save_checkpoint(out_path("model.ckpt"), model, report.steps, state.as_dict(),
                                meta={"variant": variant})
    else:
        with trace.stage("init_model"):
            model = init if init is not None else init_model(
                model_config(cfg, tokenizer.n_tokens), cfg.seeds.model)

    cv = None
    with trace.stage("decode"):
        prompts = records_as_prompts(eval_c)
        blocks = decode_prompts(model, tokenizer, prompts, dcfg, multi_output=multi)
    if variant == "nucleus":
        with trace.stage("nucleus"):
            sampled = decode_prompts(model, tokenizer, prompts, dcfg, method="nucleus",
                                     seed=cfg.seeds.decode, multi_output=True)
            blocks = union_blocks([blocks, sampled])
    if variant == "back_translate":
        with trace.stage("back_translate"):
            blocks = _back_translate_stage(cfg, tokenizer, train_c, eval_c, model, dcfg, blocks,
                                           out_path)
    if variant != "no_postprocess":
        with trace.stage("threshold"):
            blocks = threshold_blocks(blocks, cfg.threshold.value)
    if variant == "model_filter":
        with trace.stage("fit_filter"):
            val_blocks = blocks if eval_c is val_c else threshold_blocks(
                decode_prompts(model, tokenizer, records_as_prompts(val_c), dcfg),
                cfg.threshold.value)
            clf, cv, _ = fit_filter_classifier(val_blocks, val_c, cfg, norm)
            if out_dir:
                clf.save(out_path("filter_gbdt.txt"))
        with trace.stage("model_filter"):
            if clf.degenerate_:
                # one label class only: the classifier carries no information
                warnings.warn("filter training labels have a single class; model filter skipped")
            else:
                blocks = model_filter_blocks(blocks, clf, cfg.filter.decision_threshold,
                                             cfg.filter.n_features, cfg.filter.pad_value)
    with trace.stage("score"):
        score = score_blocks(blocks, eval_c, norm, cfg.metrics.micro)
    if out_dir:
        has_scores = all(b.scores is not None or not b.candidates for b in blocks)
        C.write_predictions(blocks, out_path("predictions.txt"), emit_scores=has_scores)
        C.write_corpus(eval_c, out_path("gold.txt"))
        with open(out_path("score.txt"), "w", encoding="utf-8") as fh:
            fh.write(CorpusScore.header() + "\n" + score.report_line() + "\n")
        with open(out_path("stages.log"), "w", encoding="utf-8") as fh:
            fh.write("\n".join(trace.stages) + "\n")
        with open(out_path("config.txt"), "w", encoding="utf-8") as fh:
            fh.write(dump_config(cfg, explicit_only=True))
    return PipelineResult(score, blocks, list(trace.stages), eval_c, report, cv, out_dir)


def _back_translate_stage(cfg, tokenizer, train_c, eval_c, forward_model, dcfg, forward_blocks,
                          out_path):
    if cfg.paths.reference_file:
        references = C.read_predictions(cfg.paths.reference_file)
    else:
        # the forward model's first translation stands in for an external MT reference
        references = [
            C.PredictionBlock(b.prompt_id, b.source_text, b.candidates[:1], None)
            for b in forward_blocks
        ]
    reverse_train = C.reverse_pairs(train_c)
    rev_pairs = C.oversample(reverse_train, cfg.data.factor, cfg.data.max_pairs)
    reverse_model, _, _ = fit_model(cfg, tokenizer, rev_pairs, None, None,
                                    out_path("train_reverse.log"))
    paraphrases = back_translate(reverse_model, tokenizer, references,
                                 cfg.backtranslate.beam_size, cfg.backtranslate.top_k,
                                 dcfg.max_len)
    groups = []
    for b in paraphrases:
        prompts = [(b.prompt_id, p) for p in b.candidates]
        decoded = decode_prompts(forward_model, tokenizer, prompts, dcfg, multi_output=True)
        for d in decoded:
            d.source_text = b.source_text
        groups.append(decoded)
    merged = union_blocks(groups)
    present = {b.prompt_id for b in merged}
    merged += [C.PredictionBlock(r.prompt_id, r.source_text, [], []) for r in eval_c.records
               if r.prompt_id not in present]
    order = {pid: i for i, pid in enumerate(eval_c.prompt_ids)}
    return sorted(merged, key=lambda b: order.get(b.prompt_id, math.inf))
