"""Command-line entry point: synth, train, eval, index, retrieve, heatmap.

All state flows through the config file and flags (no environment
variables). Every run logs the config hash and seed to stderr. Exit codes:
0 success, 1 user error, 2 internal assertion failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import corpus as corpus_mod
from . import evaluation, retriever, trainer
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, config_hash, load_config, save_config
from .errors import ConfigError, SpeechSeekError, TrainingAbort
from .trainer import Stage

__all__ = ["main", "run"]

_STAGE_ORDER = ["pretrain_asr", "pretrain_text", "joint", "post_train"]


class UsageError(SpeechSeekError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="speechseek", description=__doc__)
    sub = parser.add_subparsers(dest="command")

    def common(p, out_default=None):
        p.add_argument("--config", required=True, help="path to the run config file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=out_default, help="output path")

    p_synth = sub.add_parser("synth", help="generate the synthetic corpus")
    common(p_synth)

    p_train = sub.add_parser("train", help="train one stage (or 'all')")
    common(p_train)
    p_train.add_argument("--stage", default=None,
                         help="pretrain_asr | pretrain_text | joint | post_train | all")

    p_eval = sub.add_parser("eval", help="evaluate retrieval and write the report")
    common(p_eval)

    p_index = sub.add_parser("index", help="build the long-form segment index")
    common(p_index)
    p_index.add_argument("--window", type=int, default=None)
    p_index.add_argument("--hop", type=int, default=None)

    p_ret = sub.add_parser("retrieve", help="query an index")
    common(p_ret)
    p_ret.add_argument("--index", required=True, help="index file")
    p_ret.add_argument("--query", required=True, help="space-separated query tokens")
    p_ret.add_argument("--k", type=int, default=None)
    p_ret.add_argument("--window", type=int, default=None)
    p_ret.add_argument("--hop", type=int, default=None)

    p_heat = sub.add_parser("heatmap", help="export a frame-by-token similarity grid")
    common(p_heat)
    p_heat.add_argument("--query", default=None,
                        help="evaluation pair id to visualize (default: first pair)")
    return parser


def _load(args) -> tuple[RunConfig, str]:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    base = os.path.dirname(os.path.abspath(args.config))
    return cfg, base


def _resolve(base: str, path: str) -> str:
    return path if os.path.isabs(path) else os.path.join(base, path)


def _log_run(command: str, cfg: RunConfig) -> None:
    print(f"[speechseek] {command}: config_hash={config_hash(cfg)} seed={cfg.seed}",
          file=sys.stderr)


def _corpus_paths(cfg: RunConfig, base: str) -> dict[str, str]:
    root = _resolve(base, cfg.corpus_dir)
    return {
        "root": root,
        "vocab": os.path.join(root, "vocab.json"),
        "train": os.path.join(root, "train.jsonl"),
        "eval": os.path.join(root, "eval.jsonl"),
        "longform": os.path.join(root, "longform.jsonl"),
        "config": os.path.join(root, "config.snapshot.cfg"),
    }


def _find_checkpoint(cfg: RunConfig, base: str) -> str:
    if cfg.checkpoint:
        return _resolve(base, cfg.checkpoint)
    run_dir = _resolve(base, cfg.run_dir)
    for stage in reversed(_STAGE_ORDER):
        candidate = os.path.join(run_dir, f"{stage}.ckpt")
        if os.path.exists(candidate):
            return candidate
    raise ConfigError(f"no checkpoint configured and none found under {run_dir}")


def cmd_synth(args) -> int:
    cfg, base = _load(args)
    _log_run("synth", cfg)
    paths = _corpus_paths(cfg, base)
    if args.out:
        root = _resolve(base, args.out)
        paths = {k: v.replace(paths["root"], root, 1) for k, v in paths.items()}
        paths["root"] = root
    os.makedirs(paths["root"], exist_ok=True)

    ccfg = cfg.corpus_config()
    vocab = corpus_mod.build_vocabulary(ccfg.vocab_size, ccfg.seed)
    bank = corpus_mod.build_prototype_bank(vocab, ccfg.feat_dim, ccfg.seed, ccfg.prototype_len)
    pairs = corpus_mod.generate_corpus(ccfg, vocab, bank)
    if cfg.eval_pairs >= len(pairs):
        raise ConfigError(f"eval_pairs={cfg.eval_pairs} leaves no training data")
    train_pairs = pairs[: len(pairs) - cfg.eval_pairs]
    eval_pairs = pairs[len(pairs) - cfg.eval_pairs:]
    docs_src = [eval_pairs[i % len(eval_pairs)] for i in range(cfg.longform_docs)]
    docs = corpus_mod.compose_longform(docs_src, cfg.longform_fillers, cfg.window,
                                       cfg.seed, bank=bank, vocab=vocab,
                                       noise_sigma=cfg.noise_sigma)
    for d_id, d in enumerate(docs):
        d.doc_id = d_id

    corpus_mod.write_vocabulary(paths["vocab"], vocab)
    corpus_mod.write_corpus(paths["train"], train_pairs)
    corpus_mod.write_corpus(paths["eval"], eval_pairs)
    corpus_mod.write_longform(paths["longform"], docs)
    save_config(paths["config"], cfg)
    print(f"wrote {len(train_pairs)} train / {len(eval_pairs)} eval pairs and "
          f"{len(docs)} long-form documents to {paths['root']}")
    return 0


def _run_one_stage(cfg: RunConfig, base: str, stage: str, run_dir: str) -> None:
    cfg = cfg.for_stage(stage)
    paths = _corpus_paths(cfg, base)
    train_pairs = corpus_mod.read_corpus(paths["train"])
    eval_pairs = corpus_mod.read_corpus(paths["eval"])
    init = None
    if cfg.init_checkpoint:
        init = load_checkpoint(_resolve(base, cfg.init_checkpoint))
    else:
        for prev in reversed(_STAGE_ORDER[:_STAGE_ORDER.index(stage)]):
            candidate = os.path.join(run_dir, f"{prev}.ckpt")
            if os.path.exists(candidate):
                init = load_checkpoint(candidate)
                break
    ckpt, history = trainer.train_stage(cfg, train_pairs, eval_pairs, init=init)
    os.makedirs(run_dir, exist_ok=True)
    ckpt_path = os.path.join(run_dir, f"{stage}.ckpt")
    save_checkpoint(ckpt_path, ckpt)
    metrics_path = os.path.join(run_dir, f"metrics_{stage}.jsonl")
    with open(metrics_path, "w", encoding="utf-8") as fh:
        for rec in history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    last = history[-1] if history else {}
    print(f"stage {stage}: {len(history)} epochs, final wer={last.get('wer'):.4f} "
          f"r@1={last.get('r_at_1'):.4f} -> {ckpt_path}")


def cmd_train(args) -> int:
    cfg, base = _load(args)
    stage = args.stage or cfg.stage
    _log_run("train", cfg)
    run_dir = _resolve(base, args.out or cfg.run_dir)
    if stage == "all":
        for s in ("pretrain_asr", "pretrain_text", "joint"):
            _run_one_stage(cfg, base, s, run_dir)
    else:
        Stage.parse(stage)
        _run_one_stage(cfg, base, stage, run_dir)
    return 0


def cmd_eval(args) -> int:
    cfg, base = _load(args)
    _log_run("eval", cfg)
    paths = _corpus_paths(cfg, base)
    run_dir = _resolve(base, cfg.run_dir)
    out_dir = _resolve(base, args.out or os.path.join(run_dir, "report"))
    ckpt_path = _find_checkpoint(cfg, base)
    ckpt = load_checkpoint(ckpt_path)
    model = trainer.model_from_checkpoint(ckpt, cfg)
    eval_pairs = corpus_mod.read_corpus(paths["eval"])
    _, metrics = evaluation.evaluate_retrieval(model, eval_pairs)

    stage_name = os.path.splitext(os.path.basename(ckpt_path))[0]
    histories = {}
    for stage in _STAGE_ORDER:
        mpath = os.path.join(run_dir, f"metrics_{stage}.jsonl")
        if os.path.exists(mpath):
            with open(mpath, "r", encoding="utf-8") as fh:
                histories[stage] = [json.loads(line) for line in fh if line.strip()]
    retrieval = {stage_name if stage_name in evaluation.STAGES else "joint": metrics}
    written = evaluation.emit_report(histories, retrieval, out_dir)
    for key in ("txt", "jsonl"):
        print(f"wrote {written[key]}")
    return 0


def cmd_index(args) -> int:
    cfg, base = _load(args)
    _log_run("index", cfg)
    paths = _corpus_paths(cfg, base)
    window = args.window or cfg.window
    hop = args.hop or cfg.hop
    docs = corpus_mod.read_longform(paths["longform"])
    model = trainer.model_from_checkpoint(load_checkpoint(_find_checkpoint(cfg, base)), cfg)
    segments = []
    for doc in docs:
        segments.extend(retriever.segment(doc.speech, window, hop, doc_id=doc.doc_id))
    index = retriever.build_index(segments, model, window, hop)
    out_path = _resolve(base, args.out or os.path.join(_resolve(base, cfg.run_dir), "index.bin"))
    os.makedirs(os.path.dirname(out_path) or ".", exist_ok=True)
    retriever.save_index(out_path, index)
    print(f"indexed {len(index)} segments from {len(docs)} documents -> {out_path}")
    return 0


def cmd_retrieve(args) -> int:
    cfg, base = _load(args)
    _log_run("retrieve", cfg)
    paths = _corpus_paths(cfg, base)
    vocab = corpus_mod.read_vocabulary(paths["vocab"])
    model = trainer.model_from_checkpoint(load_checkpoint(_find_checkpoint(cfg, base)), cfg)
    index = retriever.load_index(_resolve(base, args.index),
                                 expect_window=args.window or cfg.window,
                                 expect_hop=args.hop or cfg.hop)
    tokens = [vocab.id_of(tok) for tok in args.query.replace(",", " ").split()]
    if not tokens:
        raise ConfigError("query is empty")
    query_vec = retriever.embed_query(tokens, model)
    k = args.k or cfg.top_k
    for doc_id, seg_idx, score in retriever.search_topk(index, query_vec, k):
        print(f"{doc_id},{seg_idx},{score:.6f}")
    return 0


def cmd_heatmap(args) -> int:
    cfg, base = _load(args)
    _log_run("heatmap", cfg)
    paths = _corpus_paths(cfg, base)
    vocab = corpus_mod.read_vocabulary(paths["vocab"])
    eval_pairs = corpus_mod.read_corpus(paths["eval"])
    pair_id = int(args.query) if args.query is not None else eval_pairs[0].pair_id
    matching = [p for p in eval_pairs if p.pair_id == pair_id]
    if not matching:
        raise ConfigError(f"no evaluation pair with id {pair_id}")
    pair = matching[0]
    model = trainer.model_from_checkpoint(load_checkpoint(_find_checkpoint(cfg, base)), cfg)
    out_dir = _resolve(base, args.out or os.path.join(_resolve(base, cfg.run_dir), "heatmap"))
    os.makedirs(out_dir, exist_ok=True)
    labels = [vocab.token_of(t) for t in pair.question_tokens]
    csv_path = os.path.join(out_dir, f"heatmap_pair{pair_id}.csv")
    matrix = retriever.export_heatmap(pair.question_tokens, pair.context_speech, model,
                                      csv_path, token_labels=labels)
    from . import plots

    png_path = os.path.join(out_dir, f"heatmap_pair{pair_id}.png")
    plots.render_heatmap(matrix, labels, png_path)
    print(f"wrote {csv_path}")
    print(f"wrote {png_path}")
    return 0


_COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "index": cmd_index,
    "retrieve": cmd_retrieve,
    "heatmap": cmd_heatmap,
}


def run(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except (AssertionError, TrainingAbort) as e:
        print(f"internal error: {e}", file=sys.stderr)
        return 2
    except (SpeechSeekError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())
