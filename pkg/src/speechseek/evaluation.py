"""Retrieval metrics and experiment reports.

Reports carry a human-readable table, machine-readable line-delimited
records, and rendered figures side by side; regeneration from the same
inputs is byte-identical for the delimited outputs.
"""

from __future__ import annotations

import json
import os
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, MetricError
from .model import SpeechTextRetriever
from .retriever import segment

__all__ = ["RetrievalRun", "recall_at_k", "evaluate_retrieval", "longform_gold_accuracy",
           "emit_report", "STAGES", "DIRECTIONS", "RECALL_KS"]

STAGES = ("pretrain_asr", "pretrain_text", "joint", "post_train")
DIRECTIONS = ("q2c", "c2q")
RECALL_KS = (1, 5, 10)


@dataclass
class RetrievalRun:
    direction: str
    rankings: list[list[int]]
    golds: list[int]


def recall_at_k(run: RetrievalRun, k: int) -> float:
    """Fraction of queries whose gold id appears in the top k."""
    if k < 1:
        raise ConfigError("k must be at least 1")
    if not run.rankings:
        raise MetricError("retrieval run has no queries")
    universe = len(run.rankings[0])
    if k > universe:
        warnings.warn(f"recall_at_k: k={k} exceeds candidate universe {universe}; clamping")
        k = universe
    hits = sum(1 for ranking, gold in zip(run.rankings, run.golds) if gold in ranking[:k])
    return hits / len(run.rankings)


def _rank_rows(scores: np.ndarray) -> list[list[int]]:
    b = scores.shape[1]
    ranked = []
    for row in scores:
        order = np.lexsort((np.arange(b), -row))
        ranked.append([int(i) for i in order])
    return ranked


def evaluate_retrieval(model: SpeechTextRetriever, pairs, directions=DIRECTIONS,
                       questions_as: str = "text") -> tuple[dict[str, RetrievalRun], dict]:
    """Embed a split and rank the full cross set in both directions.

    Returns per-direction runs plus an R@{1,5,10} metric dict keyed
    ``(direction, k)``.
    """
    if not pairs:
        raise MetricError("evaluation split is empty")
    if model.trained_steps == 0:
        raise ConfigError("refusing to evaluate an untrained model "
                          "(checkpoint has zero training steps)")
    if questions_as not in ("text", "speech"):
        raise ConfigError(f"questions_as must be text or speech, got {questions_as!r}")

    q_vecs, c_vecs = [], []
    for p in pairs:
        if questions_as == "speech":
            if p.question_speech is None:
                raise MetricError(f"pair {p.pair_id} has no question speech")
            q_vecs.append(model.embed_speech(p.question_speech))
        else:
            q_vecs.append(model.embed_text(p.question_tokens))
        c_vecs.append(model.embed_speech(p.context_speech))

    b = len(pairs)
    dim = next(len(v) for v in q_vecs if v is not None)
    q_mat = np.stack([v if v is not None else np.zeros(dim) for v in q_vecs])
    c_mat = np.stack([v if v is not None else np.zeros(dim) for v in c_vecs])
    scores = q_mat @ c_mat.T
    # degenerate embeddings can never be retrieved or retrieve anything
    for i, v in enumerate(c_vecs):
        if v is None:
            scores[:, i] = -np.inf
    for i, v in enumerate(q_vecs):
        if v is None:
            scores[i, :] = -np.inf

    runs: dict[str, RetrievalRun] = {}
    metrics: dict[tuple[str, int], float] = {}
    golds = list(range(b))
    for direction in directions:
        mat = scores if direction == "q2c" else scores.T
        run = RetrievalRun(direction=direction, rankings=_rank_rows(mat), golds=golds)
        runs[direction] = run
        for k in RECALL_KS:
            if k <= b:
                metrics[(direction, k)] = recall_at_k(run, k)
    return runs, metrics


def longform_gold_accuracy(model: SpeechTextRetriever, docs, window: int, hop: int) -> float:
    """Fraction of long-form documents whose top-1 segment is the planted one."""
    if not docs:
        raise MetricError("no long-form documents to evaluate")
    hits = 0
    for doc in docs:
        segs = segment(doc.speech, window, hop, doc_id=doc.doc_id)
        q = model.embed_text(doc.question_tokens)
        best_idx, best_score = None, -np.inf
        for seg in segs:
            vec = model.embed_speech(seg.features)
            if vec is None:
                continue
            score = float(q @ vec)
            if score > best_score:
                best_idx, best_score = seg.segment_index, score
        if best_idx == doc.gold_segment:
            hits += 1
    return hits / len(docs)


def _final_wer(history: list[dict] | None) -> float | None:
    if not history:
        return None
    return history[-1].get("wer")


def _fmt(value) -> str:
    return "n/a" if value is None else f"{value:.4f}"


def emit_report(histories: dict[str, list[dict]], retrieval: dict[str, dict],
                out_dir, render_figures: bool = True) -> dict[str, str]:
    """Write report.txt, report.jsonl, and figures for the staged pipeline.

    ``histories`` maps stage name to its per-epoch metric records;
    ``retrieval`` maps stage name to ``{(direction, k): recall}``. Stages
    without data get explicit "n/a" cells. Returns the written paths.
    """
    os.makedirs(out_dir, exist_ok=True)
    txt_path = os.path.join(out_dir, "report.txt")
    jsonl_path = os.path.join(out_dir, "report.jsonl")

    rows = []
    for stage in STAGES:
        wer = _final_wer(histories.get(stage))
        stage_metrics = retrieval.get(stage) or {}
        for direction in DIRECTIONS:
            row = {"stage": stage, "direction": direction, "final_wer": wer}
            for k in RECALL_KS:
                row[f"r_at_{k}"] = stage_metrics.get((direction, k))
            rows.append(row)

    header = f"{'stage':<14}{'direction':<11}" + "".join(f"{'R@' + str(k):<9}" for k in RECALL_KS) + "final_wer"
    lines = [header, "-" * len(header)]
    for row in rows:
        lines.append(f"{row['stage']:<14}{row['direction']:<11}"
                     + "".join(f"{_fmt(row[f'r_at_{k}']):<9}" for k in RECALL_KS)
                     + _fmt(row["final_wer"]))
    with open(txt_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")

    with open(jsonl_path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
        for stage in STAGES:
            for rec in histories.get(stage) or []:
                fh.write(json.dumps({"record": "epoch", **rec}, sort_keys=True) + "\n")

    paths = {"txt": txt_path, "jsonl": jsonl_path}
    if render_figures:
        from . import plots

        fig_dir = os.path.join(out_dir, "figures")
        os.makedirs(fig_dir, exist_ok=True)
        for stage in STAGES:
            history = histories.get(stage)
            if history:
                paths[f"fig_{stage}"] = plots.render_training_curves(
                    history, os.path.join(fig_dir, f"training_{stage}.png"))
        if any(retrieval.values()):
            paths["fig_recall"] = plots.render_recall_bars(
                retrieval, os.path.join(fig_dir, "recall.png"))
    return paths
