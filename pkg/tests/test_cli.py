"""End-to-end command-line pipeline on a miniature corpus."""

import hashlib
import json
from pathlib import Path

import pytest

from hotelsearch.cli import main

TINY = {
    "n_docs": 30,
    "queries_train": 6,
    "queries_val": 3,
    "queries_test": 3,
    "gallery_mean": 2.0,
    "gallery_max": 4,
    "filler_vocab": 60,
    "desc_body_len": 8,
    "dim_vision": 8,
    "vision_layers": 1,
    "vision_heads": 2,
    "slm_dim": 8,
    "slm_layers": 1,
    "slm_heads": 2,
    "llm_dim": 16,
    "llm_layers": 1,
    "llm_heads": 2,
    "optimizer": "adam",
    "lr_slm": 3.0e-3,
    "lr_llm": 1.0e-3,
    "max_steps": 4,
    "validation_interval": 2,
    "val_pool_size": 20,
    "batch_size": 4,
    "ivf_clusters": 4,
    "ivf_nprobe": 2,
    "bench_reps": 30,
    "bench_warmup": 2,
    "seed": 5,
}


def write_config(path: Path) -> str:
    import yaml
    path.write_text(yaml.safe_dump(TINY), encoding="utf-8")
    return str(path)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root / "cfg.yaml")
    assert main(["gen-data", "--config", cfg, "--out", str(root / "data")]) == 0
    assert main(["train", "--config", cfg, "--data", str(root / "data"),
                 "--out", str(root / "run")]) == 0
    assert main(["embed", "--config", cfg, "--data", str(root / "data"),
                 "--checkpoint", str(root / "run" / "checkpoint.bin"),
                 "--out", str(root / "emb")]) == 0
    return root, cfg


def test_gen_data_outputs(workspace):
    root, _ = workspace
    data = root / "data"
    for name in ("corpus.jsonl", "queries.jsonl", "vocab.txt", "config.yaml",
                 "seed.txt", "qrels.train.txt", "qrels.val.txt",
                 "qrels.test.txt"):
        assert (data / name).exists(), name
    assert (data / "galleries").is_dir()
    assert data.joinpath("seed.txt").read_text().strip() == "5"


def test_gen_data_is_hash_deterministic(workspace, tmp_path):
    root, cfg = workspace
    assert main(["gen-data", "--config", cfg, "--out", str(tmp_path / "again")]) == 0
    for name in ("corpus.jsonl", "queries.jsonl", "vocab.txt"):
        h1 = hashlib.sha256((root / "data" / name).read_bytes()).hexdigest()
        h2 = hashlib.sha256((tmp_path / "again" / name).read_bytes()).hexdigest()
        assert h1 == h2, name


def test_train_outputs(workspace):
    root, _ = workspace
    assert (root / "run" / "checkpoint.bin").exists()
    history = json.loads((root / "run" / "history.json").read_text())
    assert len(history["steps"]) == TINY["max_steps"]
    assert history["validations"]


def test_embed_index_search_eval_chain(workspace):
    root, cfg = workspace
    data, store = str(root / "data"), str(root / "emb" / "store.bin")
    ckpt = str(root / "run" / "checkpoint.bin")
    assert main(["index", "--config", cfg, "--store", store,
                 "--out", str(root / "idx")]) == 0
    assert main(["search", "--config", cfg, "--data", data,
                 "--checkpoint", ckpt, "--store", store,
                 "--out", str(root / "sr")]) == 0
    assert main(["search", "--config", cfg, "--data", data,
                 "--checkpoint", ckpt, "--store", store,
                 "--ivf", str(root / "idx" / "ivf.bin"),
                 "--out", str(root / "sr-ivf")]) == 0
    assert main(["eval", "--config", cfg,
                 "--run", str(root / "sr" / "run.txt"),
                 "--qrels", str(root / "data" / "qrels.test.txt"),
                 "--out", str(root / "ev")]) == 0
    metrics = json.loads((root / "ev" / "metrics.json").read_text())
    assert 0.0 <= metrics["mrr_at_10"] <= 1.0
    assert 0.0 <= metrics["ndcg_at_10"] <= 1.0


def test_bm25_and_rerank(workspace):
    root, cfg = workspace
    data, store = str(root / "data"), str(root / "emb" / "store.bin")
    ckpt = str(root / "run" / "checkpoint.bin")
    assert main(["search", "--config", cfg, "--data", data,
                 "--checkpoint", ckpt, "--store", store, "--bm25",
                 "--out", str(root / "sr-bm25")]) == 0
    assert main(["rerank", "--config", cfg, "--data", data,
                 "--checkpoint", ckpt, "--store", store,
                 "--candidates", str(root / "sr-bm25" / "run.txt"),
                 "--out", str(root / "rr")]) == 0
    assert (root / "rr" / "run.txt").exists()


def test_eval_perfect_run_scores_one(workspace, tmp_path):
    root, cfg = workspace
    qrels = tmp_path / "qrels.txt"
    qrels.write_text("q1 d1 1\nq2 d2 1\n")
    run = tmp_path / "run.txt"
    run.write_text("q1 d1 1 0.9\nq2 d2 1 0.8\n")
    assert main(["eval", "--config", cfg, "--run", str(run),
                 "--qrels", str(qrels), "--out", str(tmp_path / "ev")]) == 0
    metrics = json.loads((tmp_path / "ev" / "metrics.json").read_text())
    assert metrics["mrr_at_10"] == 1.0
    assert metrics["ndcg_at_10"] == 1.0


def test_every_command_echoes_config_and_seed(workspace):
    root, _ = workspace
    for d in ("data", "run", "emb"):
        assert (root / d / "config.yaml").exists()
        assert (root / d / "seed.txt").exists()


def test_usage_error_exit_code():
    assert main(["no-such-command"]) == 1


def test_input_error_exit_code(workspace):
    root, cfg = workspace
    code = main(["eval", "--config", cfg,
                 "--run", str(root / "data" / "vocab.txt"),  # not a run file
                 "--qrels", str(root / "data" / "qrels.test.txt"),
                 "--out", str(root / "bad")])
    assert code == 2


def test_missing_file_exit_code(workspace, tmp_path):
    _, cfg = workspace
    code = main(["index", "--config", cfg, "--store",
                 str(tmp_path / "definitely_missing.bin"),
                 "--out", str(tmp_path / "idx")])
    assert code in (1, 2)  # click reports the missing path as a usage error
