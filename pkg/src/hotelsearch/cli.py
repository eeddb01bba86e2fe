"""Command-line entry point for the full pipeline.

Exit codes: 0 success, 1 usage error, 2 invalid input or configuration,
3 numeric failure (NaN abort).
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from .config import RunConfig
from .errors import (ConfigError, ContractError, InputError, LengthError,
                     NumericError, ParseError, ShapeError)
from .evaluation import load_qrels, load_run, save_run
from .objectives import LossWeights
from .pipeline import (Dataset, bm25_index, bm25_runs, embed_corpus,
                       evaluate_runs, generate_data, latency_comparison,
                       load_model, metrics_by_type, render_table,
                       rerank_queries, search_queries, train_model)
from .retrieval import EmbeddingStore, build_ivf, load_ivf, save_ivf
from .trainer import save_checkpoint


def _load_config(config_path: str | None, seed: int | None, **overrides) -> RunConfig:
    cfg = RunConfig.load(config_path) if config_path else RunConfig()
    if seed is not None:
        overrides["seed"] = seed
    return cfg.with_overrides(**overrides)


def _dataset(cfg: RunConfig, data_dir: str) -> Dataset:
    return Dataset(data_dir, n_facilities=cfg.n_facilities)


@click.group()
def cli():
    """Multimodal hotel retrieval: data generation, training, indexing, evaluation."""


config_opt = click.option("--config", "config_path", type=click.Path(exists=True),
                          default=None, help="YAML configuration file.")
seed_opt = click.option("--seed", type=int, default=None, help="Override the seed.")
out_opt = click.option("--out", "out_dir", required=True, type=click.Path(),
                       help="Output directory.")
data_opt = click.option("--data", "data_dir", required=True,
                        type=click.Path(exists=True), help="Corpus directory.")


@cli.command("gen-data")
@config_opt
@seed_opt
@out_opt
def gen_data_cmd(config_path, seed, out_dir):
    """Generate the synthetic corpus, queries, vocabulary, and qrels."""
    cfg = _load_config(config_path, seed)
    generate_data(cfg, out_dir)
    click.echo(f"wrote corpus to {out_dir}")


@cli.command("train")
@config_opt
@seed_opt
@data_opt
@out_opt
@click.option("--visual-mode", type=click.Choice(["pooled", "1tpi-cls",
                                                  "1tpi-patch", "none"]),
              default=None, help="Override the gallery representation mode.")
@click.option("--lambda-ret", type=float, default=None)
@click.option("--lambda-mlm", type=float, default=None)
@click.option("--lambda-visf", type=float, default=None)
@click.option("--shared-lr", type=float, default=None,
              help="Use one learning rate for every parameter group.")
@click.option("--max-steps", type=int, default=None)
@click.option("--verbose", is_flag=True)
def train_cmd(config_path, seed, data_dir, out_dir, visual_mode,
              lambda_ret, lambda_mlm, lambda_visf, shared_lr, max_steps, verbose):
    """Train the retriever; writes checkpoint.bin and history.json."""
    cfg = _load_config(config_path, seed,
                       lambda_ret=lambda_ret, lambda_mlm=lambda_mlm,
                       lambda_visf=lambda_visf, max_steps=max_steps,
                       visual_mode=visual_mode)
    data = _dataset(cfg, data_dir)
    _, history = train_model(cfg, data, out_dir, shared_lr=shared_lr,
                             verbose=verbose)
    best = max((v["val_mrr_at_10"] for v in history.validations), default=0.0)
    click.echo(f"trained; best validation MRR@10 = {best:.4f}")


@cli.command("embed")
@config_opt
@seed_opt
@data_opt
@out_opt
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--visual-mode", type=click.Choice(["pooled", "1tpi-cls",
                                                  "1tpi-patch", "none"]),
              default=None)
def embed_cmd(config_path, seed, data_dir, out_dir, checkpoint, visual_mode):
    """Embed every document into a binary vector store."""
    cfg = _load_config(config_path, seed, visual_mode=visual_mode)
    data = _dataset(cfg, data_dir)
    model = load_model(cfg, data, checkpoint)
    store = embed_corpus(model, data.docs)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.yaml")
    (out / "seed.txt").write_text(f"{cfg.seed}\n", encoding="utf-8")
    store.save(out / "store.bin")
    click.echo(f"embedded {len(store)} documents into {out / 'store.bin'}")


@cli.command("index")
@config_opt
@seed_opt
@out_opt
@click.option("--store", "store_path", required=True, type=click.Path(exists=True))
@click.option("--clusters", type=int, default=None)
def index_cmd(config_path, seed, out_dir, store_path, clusters):
    """Build the IVF approximate index over an embedding store."""
    cfg = _load_config(config_path, seed, ivf_clusters=clusters)
    store = EmbeddingStore.load(store_path)
    index = build_ivf(store, min(cfg.ivf_clusters, len(store)), seed=cfg.seed,
                      iterations=cfg.ivf_iterations)
    index.default_nprobe = cfg.ivf_nprobe
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.yaml")
    (out / "seed.txt").write_text(f"{cfg.seed}\n", encoding="utf-8")
    save_ivf(index, out / "ivf.bin")
    click.echo(f"built IVF index with {len(index.lists)} lists")


@cli.command("search")
@config_opt
@seed_opt
@data_opt
@out_opt
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--store", "store_path", required=True, type=click.Path(exists=True))
@click.option("--ivf", "ivf_path", type=click.Path(exists=True), default=None,
              help="Use this IVF index instead of the exact scan.")
@click.option("--split", type=click.Choice(["train", "val", "test"]), default="test")
@click.option("--qtype", default=None)
@click.option("--k", type=int, default=None)
@click.option("--bm25", "use_bm25", is_flag=True, help="Text-only BM25 baseline.")
def search_cmd(config_path, seed, data_dir, out_dir, checkpoint, store_path,
               ivf_path, split, qtype, k, use_bm25):
    """Full-rank queries of a split; writes a run file."""
    cfg = _load_config(config_path, seed)
    data = _dataset(cfg, data_dir)
    queries = data.split(split, qtype)
    k = k if k is not None else cfg.top_k
    if use_bm25:
        runs = bm25_runs(bm25_index(data), data.vocab, queries, k)
    else:
        store = EmbeddingStore.load(store_path)
        index = load_ivf(ivf_path, store) if ivf_path else None
        model = load_model(cfg, data, checkpoint)
        runs = search_queries(model, queries, store, k, index=index)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.yaml")
    (out / "seed.txt").write_text(f"{cfg.seed}\n", encoding="utf-8")
    save_run(runs, out / "run.txt")
    click.echo(f"ranked {len(runs)} queries into {out / 'run.txt'}")


@cli.command("rerank")
@config_opt
@seed_opt
@data_opt
@out_opt
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--store", "store_path", required=True, type=click.Path(exists=True))
@click.option("--candidates", "candidates_path", required=True,
              type=click.Path(exists=True),
              help="First-stage run file supplying candidate lists.")
@click.option("--depth", type=int, default=None,
              help="How many first-stage candidates to re-score.")
def rerank_cmd(config_path, seed, data_dir, out_dir, checkpoint, store_path,
               candidates_path, depth):
    """Re-rank first-stage candidates with the trained model."""
    cfg = _load_config(config_path, seed)
    data = _dataset(cfg, data_dir)
    depth = depth if depth is not None else cfg.rerank_depth
    first_stage = load_run(candidates_path)
    candidates = {r.query_id: [d for d, _ in r.results[:depth]] for r in first_stage}
    queries = [q for q in data.queries if q.id in candidates]
    store = EmbeddingStore.load(store_path)
    model = load_model(cfg, data, checkpoint)
    runs = rerank_queries(model, queries, candidates, store)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.yaml")
    (out / "seed.txt").write_text(f"{cfg.seed}\n", encoding="utf-8")
    save_run(runs, out / "run.txt")
    click.echo(f"re-ranked {len(runs)} queries into {out / 'run.txt'}")


@cli.command("eval")
@config_opt
@seed_opt
@out_opt
@click.option("--run", "run_path", required=True, type=click.Path(exists=True))
@click.option("--qrels", "qrels_path", required=True, type=click.Path(exists=True))
def eval_cmd(config_path, seed, out_dir, run_path, qrels_path):
    """Score a run file: MRR@10 and nDCG@10."""
    cfg = _load_config(config_path, seed)
    runs = load_run(run_path)
    qrels = load_qrels(qrels_path)
    reports = evaluate_runs(runs, qrels)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.yaml")
    (out / "seed.txt").write_text(f"{cfg.seed}\n", encoding="utf-8")
    table = render_table(
        [{"run": Path(run_path).name,
          "MRR@10": f"{reports['mrr_at_10'].mean:.4f}",
          "nDCG@10": f"{reports['ndcg_at_10'].mean:.4f}",
          "queries": reports["mrr_at_10"].query_count}],
        ["run", "MRR@10", "nDCG@10", "queries"])
    (out / "metrics.txt").write_text(table + "\n", encoding="utf-8")
    (out / "metrics.json").write_text(json.dumps({
        "mrr_at_10": reports["mrr_at_10"].mean,
        "ndcg_at_10": reports["ndcg_at_10"].mean,
        "per_query_mrr_at_10": reports["mrr_at_10"].per_query,
        "per_query_ndcg_at_10": reports["ndcg_at_10"].per_query,
    }, sort_keys=True, indent=1), encoding="utf-8")
    click.echo(table)


@cli.command("ablate")
@config_opt
@seed_opt
@data_opt
@out_opt
@click.option("--suite", type=click.Choice(["gallery", "losses", "vision", "lr"]),
              required=True)
@click.option("--max-steps", type=int, default=None)
@click.option("--verbose", is_flag=True)
def ablate_cmd(config_path, seed, data_dir, out_dir, suite, max_steps, verbose):
    """Run an ablation study suite and emit a comparison table."""
    cfg = _load_config(config_path, seed, max_steps=max_steps)
    data = _dataset(cfg, data_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.yaml")
    (out / "seed.txt").write_text(f"{cfg.seed}\n", encoding="utf-8")

    rows = []
    if suite == "gallery":
        for mode in ("pooled", "1tpi-patch", "1tpi-cls"):
            model, _ = train_model(cfg, data, out / mode, visual_mode=mode,
                                   verbose=verbose)
            store = embed_corpus(model, data.docs)
            metrics = metrics_by_type(model, data, store)
            rows.append(_suite_row(mode, metrics))
    elif suite == "losses":
        variants = [
            ("full", cfg.loss_weights()),
            ("wo-visf", LossWeights(cfg.lambda_ret, cfg.lambda_mlm, 0.0)),
            ("wo-mlm", LossWeights(cfg.lambda_ret, 0.0, cfg.lambda_visf)),
            ("wo-visf-and-mlm", LossWeights(1.0, 0.0, 0.0)),
        ]
        for name, weights in variants:
            model, _ = train_model(cfg, data, out / name, weights=weights,
                                   verbose=verbose)
            store = embed_corpus(model, data.docs)
            rows.append(_suite_row(name, metrics_by_type(model, data, store)))
    elif suite == "vision":
        for name, mode in (("full", None), ("wo-vision", "none")):
            model, _ = train_model(cfg, data, out / name, visual_mode=mode,
                                   verbose=verbose)
            store = embed_corpus(model, data.docs)
            rows.append(_suite_row(name, metrics_by_type(model, data, store)))
    else:  # lr
        candidates = sorted({cfg.lr_slm, cfg.lr_llm,
                             round((cfg.lr_slm * cfg.lr_llm) ** 0.5, 10)})
        for rate in candidates:
            _, history = train_model(cfg, data, out / f"shared-{rate}",
                                     shared_lr=rate, verbose=verbose)
            rows.append({"configuration": f"shared-lr-{rate}",
                         **_val_curve_row(history)})
        _, history = train_model(cfg, data, out / "separate", verbose=verbose)
        rows.append({"configuration": "separate-lr", **_val_curve_row(history)})

    columns = sorted({c for r in rows for c in r},
                     key=lambda c: (c not in ("configuration", "mode"), c))
    table = render_table(rows, columns)
    (out / "ablation.txt").write_text(table + "\n", encoding="utf-8")
    (out / "ablation.json").write_text(
        json.dumps(rows, sort_keys=True, indent=1), encoding="utf-8")
    click.echo(table)


def _suite_row(name: str, metrics: dict) -> dict:
    row = {"configuration": name}
    for qtype, m in metrics.items():
        row[f"{qtype}-MRR@10"] = f"{m['mrr_at_10']:.4f}"
        row[f"{qtype}-nDCG@10"] = f"{m['ndcg_at_10']:.4f}"
    return row


def _val_curve_row(history) -> dict:
    best = max((v["val_mrr_at_10"] for v in history.validations), default=0.0)
    last = history.validations[-1]["val_mrr_at_10"] if history.validations else 0.0
    return {"best-val-MRR@10": f"{best:.4f}", "final-val-MRR@10": f"{last:.4f}"}


@cli.command("bench")
@config_opt
@seed_opt
@data_opt
@out_opt
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--store", "store_path", required=True, type=click.Path(exists=True))
@click.option("--reps", type=int, default=None)
def bench_cmd(config_path, seed, data_dir, out_dir, checkpoint, store_path, reps):
    """Measure online query latency: small-tower vs large-tower paths."""
    cfg = _load_config(config_path, seed)
    data = _dataset(cfg, data_dir)
    model = load_model(cfg, data, checkpoint)
    store = EmbeddingStore.load(store_path)
    queries = data.split("test")
    reports = latency_comparison(cfg, data, model, store, queries,
                                 reps=reps if reps is not None else cfg.bench_reps)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.yaml")
    (out / "seed.txt").write_text(f"{cfg.seed}\n", encoding="utf-8")
    lines = [str(r) for r in reports]
    (out / "latency.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    (out / "latency.json").write_text(json.dumps(
        [{"name": r.name, "mean_ms": r.mean_ms, "stdev_ms": r.stdev_ms,
          "samples": r.samples} for r in reports],
        sort_keys=True, indent=1), encoding="utf-8")
    for line in lines:
        click.echo(line)


def main(argv=None):
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.UsageError as exc:
        exc.show()
        return 1
    except click.ClickException as exc:
        exc.show()
        return 1
    except (InputError, ConfigError, ParseError, LengthError, ShapeError,
            ContractError, FileNotFoundError) as exc:
        click.echo(f"error: {exc}", err=True)
        return 2
    except NumericError as exc:
        click.echo(f"numeric failure: {exc}", err=True)
        return 3


if __name__ == "__main__":
    sys.exit(main())
