"""Recall, ordering accuracy, and efficiency measurement.

Recall@N asks how much of the teacher's top N survives the model's
top-keep_k cut, macro-averaged per query and reported per corpus slice
(random, longtail, all). The latency benchmark is kept separate from the
deterministic metrics: multiply counts never vary, wall time always
does.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field as dc_field

import numpy as np
from numpy.typing import NDArray

from .artifacts import prepare_output, read_json
from .baseline import LinearModel
from .dataset import DiscretizedCorpus
from .errors import ArtifactError, ValidationError
from .model import DeepFmModel
from .pairs import PairSet

SLICES = ("random", "longtail", "all")


@dataclass
class EvalConfig:
    keep_k: int = 100
    recall_ns: tuple[int, ...] = (10, 50)
    role: str = "eval"

    def validate(self) -> None:
        if self.keep_k < 1:
            raise ValidationError("keep_k must be at least 1")
        if not self.recall_ns:
            raise ValidationError("recall_ns must not be empty")
        if any(n < 1 for n in self.recall_ns):
            raise ValidationError("every recall N must be at least 1")

    def to_dict(self) -> dict:
        return {
            "keep_k": self.keep_k,
            "recall_ns": list(self.recall_ns),
            "role": self.role,
        }

    @classmethod
    def from_dict(cls, rec: dict) -> "EvalConfig":
        cfg = cls(
            keep_k=int(rec.get("keep_k", 100)),
            recall_ns=tuple(int(n) for n in rec.get("recall_ns", (10, 50))),
            role=rec.get("role", "eval"),
        )
        cfg.validate()
        return cfg


@dataclass
class EvalReport:
    corpus_slice: str
    keep_k: int
    recall_at: dict[int, float]
    pairwise_accuracy: float | None
    mean_latency_us: float | None
    multiply_count: int
    num_queries: int

    def to_dict(self) -> dict:
        return {
            "corpus_slice": self.corpus_slice,
            "keep_k": self.keep_k,
            "recall_at": {str(n): v for n, v in self.recall_at.items()},
            "pairwise_accuracy": self.pairwise_accuracy,
            "mean_latency_us": self.mean_latency_us,
            "multiply_count": self.multiply_count,
            "num_queries": self.num_queries,
        }


@dataclass
class BenchmarkResult:
    mean_latency_us: float
    multiply_count: int
    per_run_us: list[float] = dc_field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "mean_latency_us": self.mean_latency_us,
            "multiply_count": self.multiply_count,
            "per_run_us": self.per_run_us,
        }


def rank_items(
    item_ids: NDArray, scores: NDArray
) -> NDArray[np.int64]:
    """Item ids ordered by descending score; ties broken by ascending
    id so rankings are total and deterministic."""
    ids = np.asarray(item_ids, dtype=np.int64)
    s = np.asarray(scores, dtype=np.float64)
    if ids.shape != s.shape:
        raise ValidationError("ids and scores must align")
    order = np.lexsort((ids, -s))
    return ids[order]


def recall_at_n(
    model_ranking, teacher_ranking, keep_k: int, n: int
) -> float:
    """|top-keep_k(model) intersect top-n(teacher)| / n."""
    model_ids = np.asarray(model_ranking, dtype=np.int64)
    teacher_ids = np.asarray(teacher_ranking, dtype=np.int64)
    if not np.array_equal(np.sort(model_ids), np.sort(teacher_ids)):
        raise ValidationError(
            "model and teacher rankings cover different item sets"
        )
    size = len(model_ids)
    if not 1 <= n <= size:
        raise ValidationError(f"n={n} outside [1, {size}]")
    if not 1 <= keep_k <= size:
        raise ValidationError(f"keep_k={keep_k} outside [1, {size}]")
    kept = set(model_ids[:keep_k].tolist())
    wanted = teacher_ids[:n].tolist()
    hits = sum(1 for i in wanted if i in kept)
    return hits / n


def pairwise_accuracy(
    model, pair_set: PairSet, table: DiscretizedCorpus
) -> float:
    """Fraction of ordered pairs scored in the teacher's order; ties
    count as failures."""
    if len(pair_set) == 0:
        raise ValidationError("no pairs to measure accuracy on")
    rows_p = table.lookup_rows(pair_set.query_ids, pair_set.pos_ids)
    rows_n = table.lookup_rows(pair_set.query_ids, pair_set.neg_ids)
    s_p = model.score_batch(table.buckets[rows_p])
    s_n = model.score_batch(table.buckets[rows_n])
    return float((s_p > s_n).mean())


def benchmark(model, items, repetitions: int = 5) -> BenchmarkResult:
    """Median-of-means single-threaded wall time per scored item, plus
    the analytic multiply count. A warm-up pass runs first."""
    if repetitions < 3:
        raise ValidationError("benchmark needs at least 3 repetitions")
    items = np.asarray(items, dtype=np.int64)
    if len(items) == 0:
        raise ValidationError("benchmark needs at least one item")
    model.score_batch(items)  # warm-up
    per_run = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        model.score_batch(items)
        dt = time.perf_counter() - t0
        per_run.append(dt / len(items) * 1e6)
    return BenchmarkResult(
        mean_latency_us=float(np.median(per_run)),
        multiply_count=model.multiply_count(),
        per_run_us=[float(v) for v in per_run],
    )


def _slice_query_rows(
    table: DiscretizedCorpus, corpus_slice: str, role: str
) -> list[tuple[int, slice]]:
    out = []
    for qid, _, qclass, rows in table.iter_queries(role=role):
        if corpus_slice != "all" and qclass != corpus_slice:
            continue
        out.append((qid, rows))
    return out


def evaluate(
    model,
    table: DiscretizedCorpus,
    config: EvalConfig,
    eval_pairs: PairSet | None = None,
) -> list[EvalReport]:
    """One EvalReport per corpus slice, macro-averaged over queries."""
    config.validate()
    if model.schema_hash != table.schema_hash:
        raise ValidationError(
            "model and discretized corpus were built from different "
            "feature schemas"
        )
    reports = []
    for corpus_slice in SLICES:
        queries = _slice_query_rows(table, corpus_slice, config.role)
        if not queries:
            raise ValidationError(
                f"corpus slice {corpus_slice!r} has no "
                f"{config.role}-role queries"
            )
        recall_sums = {n: 0.0 for n in config.recall_ns}
        for _, rows in queries:
            ids = table.item_ids[rows]
            scores = model.score_batch(table.buckets[rows])
            model_ranking = rank_items(ids, scores)
            teacher_ranking = rank_items(ids, table.teacher[rows])
            for n in config.recall_ns:
                recall_sums[n] += recall_at_n(
                    model_ranking, teacher_ranking, config.keep_k, n
                )
        accuracy = None
        if eval_pairs is not None and len(eval_pairs):
            slice_qids = {qid for qid, _ in queries}
            keep = np.asarray(
                [q in slice_qids for q in eval_pairs.query_ids]
            )
            if keep.any():
                subset = PairSet(
                    config=eval_pairs.config,
                    source_corpus_hash=eval_pairs.source_corpus_hash,
                    query_ids=eval_pairs.query_ids[keep],
                    pos_ids=eval_pairs.pos_ids[keep],
                    neg_ids=eval_pairs.neg_ids[keep],
                    r_p=eval_pairs.r_p[keep],
                    r_n=eval_pairs.r_n[keep],
                )
                accuracy = pairwise_accuracy(model, subset, table)
        reports.append(
            EvalReport(
                corpus_slice=corpus_slice,
                keep_k=config.keep_k,
                recall_at={
                    n: recall_sums[n] / len(queries)
                    for n in config.recall_ns
                },
                pairwise_accuracy=accuracy,
                mean_latency_us=None,
                multiply_count=model.multiply_count(),
                num_queries=len(queries),
            )
        )
    return reports


def write_eval_table(reports: list[EvalReport], path: str, force=False):
    """Flat delimited table, one row per slice and N."""
    prepare_output(path, force)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [
                "slice",
                "keep_k",
                "n",
                "recall",
                "pairwise_accuracy",
                "multiply_count",
                "num_queries",
            ]
        )
        for rep in reports:
            for n in sorted(rep.recall_at):
                writer.writerow(
                    [
                        rep.corpus_slice,
                        rep.keep_k,
                        n,
                        f"{rep.recall_at[n]:.6f}",
                        ""
                        if rep.pairwise_accuracy is None
                        else f"{rep.pairwise_accuracy:.6f}",
                        rep.multiply_count,
                        rep.num_queries,
                    ]
                )


def load_scorer(path: str):
    """Load either scorer kind off its serialized model_kind tag."""
    rec = read_json(path, expected_kind="model")
    kind = rec.get("model_kind")
    if kind == "deepfm":
        return DeepFmModel.from_dict(rec)
    if kind == "linear":
        return LinearModel.from_dict(rec)
    raise ArtifactError(f"unknown model kind {kind!r} in {path}")
