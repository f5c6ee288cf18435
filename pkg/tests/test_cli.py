import json
import os

import numpy as np
import pytest

from speechseek.cli import run
from speechseek.config import RunConfig, save_config


@pytest.fixture
def workspace(tmp_path):
    """Config + tiny corpus sized so CLI round trips run in seconds."""
    cfg = RunConfig(pairs=14, eval_pairs=6, vocab_size=16, feat_dim=6, d_model=16,
                    n_heads=2, ff_dim=24, speech_layers=1, text_layers=1, decoder_layers=1,
                    context_len_min=4, context_len_max=6, question_len_min=2,
                    question_len_max=3, epochs=2, batch_size=4, learning_rate=1e-3,
                    seed=11, window=30, hop=30, longform_docs=3, longform_fillers=2,
                    dtype="float64",
                    # inherit the tiny shared budget in every stage
                    pretrain_asr_epochs=0, pretrain_asr_batch_size=0,
                    pretrain_asr_learning_rate=0.0,
                    pretrain_text_epochs=0, pretrain_text_batch_size=0,
                    pretrain_text_learning_rate=0.0,
                    joint_epochs=0, joint_batch_size=0, joint_learning_rate=0.0,
                    post_train_epochs=0, post_train_batch_size=0,
                    post_train_learning_rate=0.0)
    path = tmp_path / "run.cfg"
    save_config(path, cfg)
    return tmp_path, str(path), cfg


def test_no_subcommand_is_usage_error(capsys):
    assert run([]) == 1


def test_unknown_subcommand_exits_one(capsys):
    assert run(["transcode", "--config", "x"]) == 1
    assert "error" in capsys.readouterr().err


def test_unknown_flag_rejected(workspace, capsys):
    _, cfg_path, _ = workspace
    assert run(["synth", "--config", cfg_path, "--shard", "3"]) == 1


def test_missing_config_file_exits_one(tmp_path, capsys):
    assert run(["synth", "--config", str(tmp_path / "nope.cfg")]) == 1


def test_synth_train_eval_workflow(workspace, capsys):
    root, cfg_path, cfg = workspace

    assert run(["synth", "--config", cfg_path]) == 0
    corpus_dir = root / "corpus"
    assert (corpus_dir / "train.jsonl").exists()
    assert (corpus_dir / "eval.jsonl").exists()
    assert (corpus_dir / "longform.jsonl").exists()
    assert (corpus_dir / "vocab.json").exists()

    assert run(["train", "--config", cfg_path, "--stage", "pretrain_asr"]) == 0
    assert run(["train", "--config", cfg_path, "--stage", "joint"]) == 0
    run_dir = root / "runs"
    assert (run_dir / "pretrain_asr.ckpt").exists()
    assert (run_dir / "joint.ckpt").exists()
    history = [json.loads(l) for l in open(run_dir / "metrics_joint.jsonl")]
    assert len(history) == cfg.epochs

    assert run(["eval", "--config", cfg_path]) == 0
    report_dir = run_dir / "report"
    assert (report_dir / "report.txt").exists()
    assert (report_dir / "report.jsonl").exists()

    assert run(["index", "--config", cfg_path]) == 0
    index_path = run_dir / "index.bin"
    assert index_path.exists()

    assert run(["retrieve", "--config", cfg_path, "--index", str(index_path),
                "--query", "not-a-token", "--k", "2"]) == 0
    out = capsys.readouterr().out
    lines = [l for l in out.splitlines() if "," in l][-2:]
    for line in lines:
        doc, seg, score = line.split(",")
        int(doc), int(seg)
        assert len(score.split(".")[1]) == 6

    assert run(["heatmap", "--config", cfg_path]) == 0
    heat_dir = run_dir / "heatmap"
    files = sorted(os.listdir(heat_dir))
    assert any(f.endswith(".csv") for f in files)
    assert any(f.endswith(".png") for f in files)


def test_synth_deterministic_across_runs(workspace):
    root, cfg_path, _ = workspace
    assert run(["synth", "--config", cfg_path, "--out", str(root / "c1")]) == 0
    assert run(["synth", "--config", cfg_path, "--out", str(root / "c2")]) == 0
    a = (root / "c1" / "train.jsonl").read_bytes()
    b = (root / "c2" / "train.jsonl").read_bytes()
    assert a == b


def test_seed_flag_overrides_config(workspace):
    root, cfg_path, _ = workspace
    assert run(["synth", "--config", cfg_path, "--out", str(root / "s1"), "--seed", "99"]) == 0
    assert run(["synth", "--config", cfg_path, "--out", str(root / "s2")]) == 0
    assert (root / "s1" / "train.jsonl").read_bytes() != (root / "s2" / "train.jsonl").read_bytes()


def test_train_bad_stage_exits_one(workspace, capsys):
    _, cfg_path, _ = workspace
    assert run(["synth", "--config", cfg_path]) == 0
    assert run(["train", "--config", cfg_path, "--stage", "finetune"]) == 1


def test_eval_without_checkpoint_exits_one(workspace, capsys):
    _, cfg_path, _ = workspace
    assert run(["synth", "--config", cfg_path]) == 0
    assert run(["eval", "--config", cfg_path]) == 1
    assert "no checkpoint" in capsys.readouterr().err
