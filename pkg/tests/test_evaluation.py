import numpy as np
import pytest

from speechseek.errors import ConfigError, MetricError
from speechseek.evaluation import (RetrievalRun, emit_report, evaluate_retrieval,
                                   recall_at_k)
from speechseek.model import build_model

from conftest import tiny_model_config


def run_from_rankings(rankings, golds=None, direction="q2c"):
    golds = golds if golds is not None else list(range(len(rankings)))
    return RetrievalRun(direction=direction, rankings=rankings, golds=golds)


def test_recall_perfect_run():
    run = run_from_rankings([[0, 1, 2], [1, 0, 2], [2, 1, 0]])
    assert recall_at_k(run, 1) == 1.0


def test_recall_counts_topk_membership():
    run = run_from_rankings([[1, 0, 2], [0, 1, 2], [2, 0, 1]])
    assert recall_at_k(run, 1) == pytest.approx(1 / 3)  # only query 2 hits at k=1
    assert recall_at_k(run, 2) == 1.0


def test_recall_monotone_in_k(rng):
    universe = 20
    rankings = [list(rng.permutation(universe)) for _ in range(40)]
    run = run_from_rankings(rankings, golds=list(rng.integers(0, universe, size=40)))
    values = [recall_at_k(run, k) for k in range(1, universe + 1)]
    assert all(b >= a for a, b in zip(values, values[1:]))
    assert values[-1] == 1.0


def test_recall_clamps_oversized_k_with_warning():
    run = run_from_rankings([[0, 1], [1, 0]])
    with pytest.warns(UserWarning, match="clamp"):
        assert recall_at_k(run, 10) == 1.0


def test_recall_rejects_bad_k():
    run = run_from_rankings([[0]])
    with pytest.raises(ConfigError):
        recall_at_k(run, 0)


def test_recall_matches_chance_on_random_rankings(rng):
    universe, queries = 64, 10000
    golds = rng.integers(0, universe, size=queries)
    hits = 0
    for gold in golds:
        ranking_head = rng.integers(0, universe)
        hits += ranking_head == gold
    # direct Monte Carlo of R@1 under random ranking
    p = 1 / universe
    sigma = np.sqrt(p * (1 - p) / queries)
    assert abs(hits / queries - p) < 3 * sigma


def test_evaluate_retrieval_refuses_untrained_model(rng):
    model = build_model(tiny_model_config(), seed=3)
    from speechseek.corpus import CorpusConfig, generate_corpus

    pairs = generate_corpus(CorpusConfig(pairs=4, context_len=(4, 6), question_len=(2, 3),
                                         vocab_size=12, feat_dim=6, seed=5))
    with pytest.raises(ConfigError, match="untrained"):
        evaluate_retrieval(model, pairs)


def test_evaluate_retrieval_empty_split(rng):
    model = build_model(tiny_model_config(), seed=3)
    with pytest.raises(MetricError):
        evaluate_retrieval(model, [])


def test_evaluate_retrieval_shapes_and_directions(rng):
    model = build_model(tiny_model_config(), seed=3)
    model.trained_steps = 1
    from speechseek.corpus import CorpusConfig, generate_corpus

    pairs = generate_corpus(CorpusConfig(pairs=6, context_len=(4, 6), question_len=(2, 3),
                                         vocab_size=12, feat_dim=6, seed=5))
    runs, metrics = evaluate_retrieval(model, pairs)
    assert set(runs) == {"q2c", "c2q"}
    for run in runs.values():
        assert len(run.rankings) == 6
        assert all(sorted(r) == list(range(6)) for r in run.rankings)
    assert ("q2c", 1) in metrics and ("c2q", 5) in metrics


# -- report --------------------------------------------------------------------


def sample_report_inputs():
    histories = {
        "pretrain_asr": [
            {"stage": "pretrain_asr", "epoch": 0, "loss_total": 5.0, "loss_asr": 4.0,
             "loss_ce": 4.0, "loss_mwer": 0.0, "loss_mae": 1.0, "loss_nll": None,
             "wer": 0.9, "r_at_1": 0.1, "r_at_1_batch": None},
            {"stage": "pretrain_asr", "epoch": 1, "loss_total": 3.0, "loss_asr": 2.5,
             "loss_ce": 2.5, "loss_mwer": 0.0, "loss_mae": 0.5, "loss_nll": None,
             "wer": 0.4, "r_at_1": 0.2, "r_at_1_batch": None},
        ],
        "joint": [
            {"stage": "joint", "epoch": 0, "loss_total": 2.0, "loss_asr": 1.5,
             "loss_ce": 1.2, "loss_mwer": 0.0, "loss_mae": 0.4, "loss_nll": 2.0,
             "wer": 0.2, "r_at_1": 0.7, "r_at_1_batch": 0.6},
        ],
    }
    retrieval = {"joint": {("q2c", 1): 0.85, ("q2c", 5): 0.95, ("q2c", 10): 1.0,
                           ("c2q", 1): 0.82, ("c2q", 5): 0.94, ("c2q", 10): 0.99}}
    return histories, retrieval


def test_emit_report_rows_and_na_cells(tmp_path):
    histories, retrieval = sample_report_inputs()
    paths = emit_report(histories, retrieval, tmp_path, render_figures=False)
    text = open(paths["txt"]).read()
    # one row per (stage, direction): 4 stages x 2 directions
    body = [l for l in text.splitlines()[2:] if l.strip()]
    assert len(body) == 8
    assert "n/a" in text            # stages without retrieval metrics
    assert "0.8500" in text
    jsonl = open(paths["jsonl"]).read().splitlines()
    assert len([l for l in jsonl if '"direction"' in l]) == 8


def test_emit_report_regeneration_is_byte_identical(tmp_path):
    histories, retrieval = sample_report_inputs()
    a = emit_report(histories, retrieval, tmp_path / "a", render_figures=False)
    b = emit_report(histories, retrieval, tmp_path / "b", render_figures=False)
    assert open(a["txt"], "rb").read() == open(b["txt"], "rb").read()
    assert open(a["jsonl"], "rb").read() == open(b["jsonl"], "rb").read()


def test_emit_report_renders_figures(tmp_path):
    histories, retrieval = sample_report_inputs()
    paths = emit_report(histories, retrieval, tmp_path, render_figures=True)
    import os

    assert os.path.exists(paths["fig_pretrain_asr"])
    assert os.path.exists(paths["fig_joint"])
    assert os.path.exists(paths["fig_recall"])
    assert os.path.getsize(paths["fig_recall"]) > 1000
