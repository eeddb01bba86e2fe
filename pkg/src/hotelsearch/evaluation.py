"""Ranking metrics at cutoff 10, paired significance testing, latency timing.

Gains are binary, matching the corpus labeling. The t-distribution CDF is
evaluated through a continued-fraction regularized incomplete beta, so the
core package needs no statistics dependency.
"""

from __future__ import annotations

import math
import statistics
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ContractError, InputError, ParseError
from .retrieval import RankedList

CUTOFF = 10


@dataclass
class MetricReport:
    per_query: dict[str, float]
    metric: str

    @property
    def mean(self) -> float:
        if not self.per_query:
            return 0.0
        return sum(self.per_query.values()) / len(self.per_query)

    @property
    def query_count(self) -> int:
        return len(self.per_query)


def _check_qrels(runs: list[RankedList], qrels: dict[str, set[str]]) -> list[RankedList]:
    kept = []
    for run in runs:
        if run.query_id not in qrels:
            raise InputError(f"query {run.query_id!r} missing from qrels")
        if not qrels[run.query_id]:
            warnings.warn(f"excluding query {run.query_id} with empty qrels")
            continue
        kept.append(run)
    return kept


def mrr_at_10(runs: list[RankedList], qrels: dict[str, set[str]],
              cutoff: int = CUTOFF) -> MetricReport:
    """Reciprocal rank of the first relevant document within the cutoff, else 0."""
    per_query = {}
    for run in _check_qrels(runs, qrels):
        relevant = qrels[run.query_id]
        score = 0.0
        for rank, (doc_id, _) in enumerate(run.results[:cutoff], start=1):
            if doc_id in relevant:
                score = 1.0 / rank
                break
        per_query[run.query_id] = score
    return MetricReport(per_query, f"MRR@{cutoff}")


def ndcg_at_10(runs: list[RankedList], qrels: dict[str, set[str]],
               cutoff: int = CUTOFF) -> MetricReport:
    """Binary-gain DCG with log2 discounts, normalized by the ideal ranking."""
    per_query = {}
    for run in _check_qrels(runs, qrels):
        relevant = qrels[run.query_id]
        dcg = sum(1.0 / math.log2(rank + 1)
                  for rank, (doc_id, _) in enumerate(run.results[:cutoff], start=1)
                  if doc_id in relevant)
        ideal = sum(1.0 / math.log2(rank + 1)
                    for rank in range(1, min(cutoff, len(relevant)) + 1))
        per_query[run.query_id] = dcg / ideal
    return MetricReport(per_query, f"nDCG@{cutoff}")


# ---------------------------------------------------------------------------
# paired significance


def _betacf(a: float, b: float, x: float) -> float:
    """Lentz continued fraction for the incomplete beta function."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 400):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-15:
            break
    return h


def _incbeta(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b), accurate to ~1e-10."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log(1.0 - x))
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_sf_two_sided(t: float, df: float) -> float:
    """Two-sided p-value for a t statistic with df degrees of freedom."""
    x = df / (df + t * t)
    return _incbeta(df / 2.0, 0.5, x)


@dataclass
class SignificanceResult:
    t_statistic: float
    p_value: float
    significant: bool
    threshold: float


def paired_significance(a: dict[str, float], b: dict[str, float],
                        n_comparisons: int = 1,
                        alpha: float = 0.05) -> SignificanceResult:
    """Paired two-sided t-test with Bonferroni-corrected threshold."""
    if set(a) != set(b):
        raise InputError("per-query score sets are not aligned")
    keys = sorted(a)
    if len(keys) < 2:
        raise InputError("need at least 2 paired observations")
    diffs = [a[k] - b[k] for k in keys]
    n = len(diffs)
    mean = sum(diffs) / n
    var = sum((d - mean) ** 2 for d in diffs) / (n - 1)
    threshold = alpha / n_comparisons
    if var == 0.0:
        # exact ties (or a constant shift) have no sampling variance
        if mean == 0.0:
            return SignificanceResult(0.0, 1.0, False, threshold)
        return SignificanceResult(math.inf if mean > 0 else -math.inf,
                                  0.0, True, threshold)
    t = mean / math.sqrt(var / n)
    p = t_sf_two_sided(t, n - 1)
    return SignificanceResult(t, p, p < threshold, threshold)


# ---------------------------------------------------------------------------
# latency


@dataclass
class LatencyReport:
    name: str
    mean_ms: float
    stdev_ms: float
    samples: int

    def __str__(self):
        return (f"{self.name}: {self.mean_ms:.2f} ms +/- {self.stdev_ms:.2f} "
                f"(n={self.samples})")


def latency_bench(configurations: dict[str, callable], queries: list,
                  warmup: int = 5, reps: int = 30) -> list[LatencyReport]:
    """Time the online path per configuration over the query list.

    Each configuration is a callable taking one query; per-query wall times
    are measured with a monotonic clock after `warmup` untimed calls.
    """
    if reps < 30:
        raise InputError(f"reps must be >= 30, got {reps}")
    reports = []
    for name, fn in configurations.items():
        for q in queries[:warmup]:
            fn(q)
        times = []
        i = 0
        while len(times) < reps:
            q = queries[i % len(queries)]
            i += 1
            start = time.perf_counter()
            fn(q)
            times.append((time.perf_counter() - start) * 1000.0)
        reports.append(LatencyReport(
            name, statistics.fmean(times),
            statistics.stdev(times), len(times)))
    return reports


# ---------------------------------------------------------------------------
# run and qrels files (classic IR layout)


def save_run(runs: list[RankedList], path: str | Path) -> None:
    lines = []
    for run in runs:
        for rank, (doc_id, score) in enumerate(run.results, start=1):
            lines.append(f"{run.query_id} {doc_id} {rank} {score:.12g}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_run(path: str | Path) -> list[RankedList]:
    runs: dict[str, RankedList] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(),
                                  start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ParseError(f"expected 'query_id doc_id rank score', got {line!r}",
                             line=lineno)
        qid, doc_id, rank_s, score_s = parts
        try:
            rank, score = int(rank_s), float(score_s)
        except ValueError as exc:
            raise ParseError(str(exc), line=lineno) from exc
        run = runs.setdefault(qid, RankedList(qid, []))
        if rank != len(run.results) + 1:
            raise ParseError(f"rank {rank} out of order for query {qid}", line=lineno)
        run.results.append((doc_id, score))
    return list(runs.values())


def save_qrels(qrels: dict[str, set[str]], path: str | Path) -> None:
    lines = []
    for qid in sorted(qrels):
        for doc_id in sorted(qrels[qid]):
            lines.append(f"{qid} {doc_id} 1")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_qrels(path: str | Path) -> dict[str, set[str]]:
    qrels: dict[str, set[str]] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(),
                                  start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ParseError(f"expected 'query_id doc_id relevance', got {line!r}",
                             line=lineno)
        qid, doc_id, rel = parts
        if rel not in ("0", "1"):
            raise ParseError(f"binary relevance only, got {rel!r}", line=lineno)
        qrels.setdefault(qid, set())
        if rel == "1":
            qrels[qid].add(doc_id)
    return qrels
