"""Optimizer grouping, training dynamics, early stopping, and checkpoints."""

import numpy as np
import pytest

from hotelsearch.config import RunConfig
from hotelsearch.corpus import (CorpusConfig, build_catalogs, build_vocabulary,
                                generate_corpus, generate_queries)
from hotelsearch.errors import ConfigError, InputError, ParseError
from hotelsearch.fusion import RetrievalModel
from hotelsearch.objectives import LossWeights
from hotelsearch.trainer import (DEFAULT_RATES, Optimizer, OptimizerConfig,
                                 TrainHistory, TrainItem, fit,
                                 load_checkpoint, make_param_groups,
                                 save_checkpoint, simplex_grid, train_step)


@pytest.fixture(scope="module")
def tiny_world():
    ccfg = CorpusConfig(n_docs=30, queries_train=6, queries_val=3,
                        queries_test=3, gallery_mean=2.0, gallery_max=4,
                        filler_vocab=60, desc_body_len=8, seed=7)
    catalogs = build_catalogs(ccfg)
    docs = generate_corpus(ccfg, catalogs)
    queries = generate_queries(docs, ccfg, catalogs)
    vocab = build_vocabulary(catalogs)
    return ccfg, docs, queries, vocab


def tiny_model(tiny_world, seed=0, visual_mode="pooled", freeze_vision=False):
    _, _, _, vocab = tiny_world
    cfg = RunConfig(dim_vision=8, vision_layers=1, vision_heads=2,
                    slm_dim=8, slm_layers=1, slm_heads=2,
                    llm_dim=16, llm_layers=1, llm_heads=2,
                    visual_mode=visual_mode, freeze_vision=freeze_vision,
                    seed=seed)
    return RetrievalModel(cfg.model_config(), vocab)


def items_of(tiny_world, n=4):
    _, docs, queries, _ = tiny_world
    by_id = {d.id: d for d in docs}
    train = [q for q in queries if q.split == "train"][:n]
    return [TrainItem(q.text, by_id[q.relevant_ids[0]]) for q in train]


# ---------------------------------------------------------------------------
# configuration and grouping


def test_optimizer_config_requires_positive_rates():
    with pytest.raises(ConfigError):
        OptimizerConfig(lr_by_group={"SLM": 0.0, "LLM": 1e-6})
    with pytest.raises(ConfigError):
        OptimizerConfig(lr_by_group={"SLM": 1e-4})


def test_default_rates_are_asymmetric():
    cfg = OptimizerConfig()
    assert cfg.rate("SLM") == DEFAULT_RATES["SLM"] == 5e-4
    assert cfg.rate("LLM") == DEFAULT_RATES["LLM"] == 5e-6
    # unlisted groups fall back to the large-tower rate
    assert cfg.rate("projection") == cfg.rate("LLM")


def test_param_groups_partition_model(tiny_world):
    model = tiny_model(tiny_world)
    groups = make_param_groups(model, OptimizerConfig())
    names = [p.name for params in groups.values() for p in params]
    assert sorted(names) == sorted(p.name for p in model.parameters())
    assert set(groups) == {"SLM", "LLM", "projection", "heads", "vision"}


def test_freeze_vision_excludes_vision_group(tiny_world):
    _, _, _, vocab = tiny_world
    cfg = RunConfig(dim_vision=8, vision_layers=1, vision_heads=2, slm_dim=8,
                    slm_layers=1, slm_heads=2, llm_dim=16, llm_layers=1,
                    llm_heads=2, freeze_vision=True)
    model = RetrievalModel(cfg.model_config(), vocab)
    groups = make_param_groups(model, OptimizerConfig())
    assert "vision" not in groups


def test_update_magnitude_ratio_tracks_learning_rates(tiny_world):
    """SGD with rates 5e-4 / 5e-6: updates differ ~100x at equal gradient."""
    model = tiny_model(tiny_world)
    oc = OptimizerConfig(lr_by_group=dict(DEFAULT_RATES), momentum=0.0,
                         clip_norm=0.0)
    opt = Optimizer(make_param_groups(model, oc), oc)
    slm = next(p for p in model.parameters() if p.group == "SLM")
    llm = next(p for p in model.parameters() if p.group == "LLM")
    g = np.ones_like(slm.data)
    slm.tensor.grad = g.copy()
    llm.tensor.grad = np.ones_like(llm.data)
    before_slm, before_llm = slm.data.copy(), llm.data.copy()
    opt.step()
    upd_slm = np.abs(slm.data - before_slm).mean()
    upd_llm = np.abs(llm.data - before_llm).mean()
    assert upd_slm / upd_llm == pytest.approx(100.0, rel=1e-9)


def test_gradient_clipping_bounds_global_norm(tiny_world):
    model = tiny_model(tiny_world)
    oc = OptimizerConfig(clip_norm=1.0)
    opt = Optimizer(make_param_groups(model, oc), oc)
    for p in model.parameters():
        p.tensor.grad = np.full_like(p.data, 10.0)
    opt.clip_gradients()
    total = sum(float((p.tensor.grad ** 2).sum()) for p in model.parameters())
    assert np.sqrt(total) == pytest.approx(1.0, rel=1e-9)


# ---------------------------------------------------------------------------
# train_step


def test_train_step_requires_pairs(tiny_world):
    model = tiny_model(tiny_world)
    oc = OptimizerConfig()
    opt = Optimizer(make_param_groups(model, oc), oc)
    with pytest.raises(InputError):
        train_step(items_of(tiny_world, 1), model, opt, LossWeights())


def test_train_step_reports_components(tiny_world):
    model = tiny_model(tiny_world)
    oc = OptimizerConfig()
    opt = Optimizer(make_param_groups(model, oc), oc)
    losses = train_step(items_of(tiny_world), model, opt, LossWeights())
    assert set(losses) == {"l_ret", "l_mlm", "l_visf", "l_final"}
    assert all(np.isfinite(v) for v in losses.values())


def test_pure_retrieval_weights_skip_other_heads(tiny_world):
    model = tiny_model(tiny_world)
    oc = OptimizerConfig()
    opt = Optimizer(make_param_groups(model, oc), oc)
    losses = train_step(items_of(tiny_world), model, opt,
                        LossWeights(1.0, 0.0, 0.0))
    assert losses["l_mlm"] == 0.0 and losses["l_visf"] == 0.0
    assert losses["l_final"] == losses["l_ret"]
    mlm_w = next(p for p in model.parameters() if p.name == "heads.mlm_w")
    assert mlm_w.tensor.grad is None


def test_overfit_one_batch_decreases_loss(tiny_world):
    model = tiny_model(tiny_world)
    oc = OptimizerConfig(lr_by_group={"SLM": 3e-3, "LLM": 1e-3},
                         optimizer="adam")
    opt = Optimizer(make_param_groups(model, oc), oc)
    items = items_of(tiny_world)
    first = train_step(items, model, opt, LossWeights(), temperature=0.05)
    last = None
    for _ in range(25):
        last = train_step(items, model, opt, LossWeights(), temperature=0.05)
    assert last["l_final"] < first["l_final"]
    assert last["l_ret"] < first["l_ret"]


def test_training_is_deterministic_bit_identical(tiny_world):
    results = []
    for _ in range(2):
        model = tiny_model(tiny_world, seed=3)
        oc = OptimizerConfig(seed=3)
        opt = Optimizer(make_param_groups(model, oc), oc)
        items = items_of(tiny_world)
        for _ in range(3):
            train_step(items, model, opt, LossWeights())
        results.append({p.name: p.data.copy() for p in model.parameters()})
    for name in results[0]:
        assert np.array_equal(results[0][name], results[1][name]), name


# ---------------------------------------------------------------------------
# fit loop


def run_fit(tiny_world, max_steps=4, patience=5, interval=2, seed=0):
    ccfg, docs, queries, _ = tiny_world
    model = tiny_model(tiny_world, seed=seed)
    oc = OptimizerConfig(lr_by_group={"SLM": 3e-3, "LLM": 1e-3},
                         optimizer="adam", batch_size=4, max_epochs=50,
                         max_steps=max_steps, patience=patience,
                         validation_interval=interval, seed=seed)
    history = fit(model,
                  [q for q in queries if q.split == "train"],
                  [q for q in queries if q.split == "val"],
                  docs, oc, LossWeights(), val_pool_size=20,
                  temperature=0.05)
    return model, history


def test_fit_respects_max_steps(tiny_world):
    _, history = run_fit(tiny_world, max_steps=4)
    assert len(history.steps) == 4


def test_fit_records_validations(tiny_world):
    _, history = run_fit(tiny_world, max_steps=6, interval=2)
    assert [v["step"] for v in history.validations] == [2, 4, 6]


def test_early_stopping_triggers_on_stale_validations(tiny_world):
    ccfg, docs, queries, _ = tiny_world
    model = tiny_model(tiny_world)
    # learning rate so small that validation MRR never improves
    oc = OptimizerConfig(lr_by_group={"SLM": 1e-12, "LLM": 1e-12},
                         batch_size=4, max_epochs=1000, max_steps=None,
                         patience=3, validation_interval=1, seed=0)
    history = fit(model, [q for q in queries if q.split == "train"],
                  [q for q in queries if q.split == "val"], docs, oc,
                  LossWeights(), val_pool_size=20)
    # first validation sets the best; the next `patience` are stale
    assert len(history.validations) == 4


def test_fit_is_seed_deterministic(tiny_world):
    m1, h1 = run_fit(tiny_world, max_steps=4, seed=11)
    m2, h2 = run_fit(tiny_world, max_steps=4, seed=11)
    def strip_wall(steps):
        return [{k: v for k, v in s.items() if k != "wall_clock"} for s in steps]

    assert strip_wall(h1.steps) == strip_wall(h2.steps)
    for p1, p2 in zip(m1.parameters(), m2.parameters()):
        assert np.array_equal(p1.data, p2.data), p1.name


def test_history_save_load(tmp_path, tiny_world):
    _, history = run_fit(tiny_world, max_steps=2)
    path = tmp_path / "history.json"
    history.save(path)
    loaded = TrainHistory.load(path)
    assert loaded.steps == history.steps
    assert loaded.validations == history.validations


# ---------------------------------------------------------------------------
# lambda grid


def test_simplex_grid_sums_to_one_and_contains_defaults():
    grid = simplex_grid(0.1)
    assert len(grid) == 66
    for w in grid:
        assert sum(w.as_tuple()) == pytest.approx(1.0)
    assert (0.7, 0.2, 0.1) in {w.as_tuple() for w in grid}


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip_is_bit_exact(tmp_path, tiny_world):
    model, _ = run_fit(tiny_world, max_steps=2)
    path = tmp_path / "ckpt.bin"
    save_checkpoint(model, path)
    fresh = tiny_model(tiny_world, seed=99)
    load_checkpoint(fresh, path)
    for a, b in zip(model.parameters(), fresh.parameters()):
        assert np.array_equal(a.data, b.data), a.name


def test_checkpoint_save_is_byte_identical(tmp_path, tiny_world):
    model = tiny_model(tiny_world, seed=5)
    save_checkpoint(model, tmp_path / "a.bin")
    save_checkpoint(tiny_model(tiny_world, seed=5), tmp_path / "b.bin")
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()


def test_checkpoint_rejects_mismatched_model(tmp_path, tiny_world):
    model = tiny_model(tiny_world)
    save_checkpoint(model, tmp_path / "ckpt.bin")
    _, _, _, vocab = tiny_world
    other_cfg = RunConfig(dim_vision=8, vision_layers=1, vision_heads=2,
                          slm_dim=8, slm_layers=1, slm_heads=2,
                          llm_dim=32, llm_layers=1, llm_heads=2)
    other = RetrievalModel(other_cfg.model_config(), vocab)
    with pytest.raises(ParseError):
        load_checkpoint(other, tmp_path / "ckpt.bin")


def test_checkpoint_rejects_bad_magic(tmp_path, tiny_world):
    path = tmp_path / "ckpt.bin"
    path.write_bytes(b"BADMAGIC" + b"\x00" * 16)
    with pytest.raises(ParseError):
        load_checkpoint(tiny_model(tiny_world), path)
