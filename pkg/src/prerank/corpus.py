"""Synthetic cascade corpus generation.

A corpus simulates the data a pre-ranking stage trains on: queries arrive,
a matching layer returns a candidate set per query, and a heavyweight
ranking teacher scores every candidate. Queries and items carry hidden
latent vectors; observable raw features are noisy, distribution-shaped
views of those latents, so the teacher ordering is learnable from features
but not perfectly recoverable.

Determinism: everything derives from (config, seed) through named
SeedSequence substreams, one per query, so generation is reproducible and
could be parallelized across queries without changing output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray
from scipy.special import expit, ndtr, ndtri

from .artifacts import read_jsonl, write_jsonl
from .errors import ValidationError

# substream tags (first entropy word after the seed)
_SS_ITEMS = 1
_SS_QUERY = 3

_OUTLIER_FACTOR = 10.0
_VALUE_DECIMALS = 8
_SCORE_DECIMALS = 12

GROUPS = ("item", "query", "cross")


@dataclass(frozen=True)
class FieldGenSpec:
    """Recipe for one raw feature field.

    ``fidelity`` is the correlation between the field's underlying signal
    and its driving latent quantity; 0 makes the field pure noise.
    ``signal`` selects the latent source: an int coordinate for item/query
    fields, a (query_coord, item_coord) pair for cross fields, None for
    noise fields.
    """

    name: str
    group: str
    kind: str
    scale: float = 1.0
    fidelity: float = 0.9
    signal: int | tuple[int, int] | None = None
    sigma: float = 0.8

    def __post_init__(self):
        if self.group not in GROUPS:
            raise ValidationError(f"field {self.name!r}: bad group {self.group!r}")
        if self.kind not in ("uniform", "longtail"):
            raise ValidationError(f"field {self.name!r}: bad kind {self.kind!r}")
        if not 0.0 <= self.fidelity < 1.0:
            raise ValidationError(
                f"field {self.name!r}: fidelity must lie in [0,1)"
            )
        if self.scale <= 0 or self.sigma <= 0:
            raise ValidationError(
                f"field {self.name!r}: scale and sigma must be positive"
            )
        if self.fidelity > 0 and self.signal is None:
            raise ValidationError(
                f"field {self.name!r}: informative field needs a signal source"
            )

    @property
    def nominal_max(self) -> float:
        """Reference upper edge used for outlier injection: the declared
        scale for uniform fields, the ~99.9th percentile for long-tail."""
        if self.kind == "uniform":
            return self.scale
        return self.scale * math.exp(3.0 * self.sigma)

    def to_dict(self) -> dict:
        signal = list(self.signal) if isinstance(self.signal, tuple) else self.signal
        return {
            "name": self.name,
            "group": self.group,
            "kind": self.kind,
            "scale": self.scale,
            "fidelity": self.fidelity,
            "signal": signal,
            "sigma": self.sigma,
        }

    @classmethod
    def from_dict(cls, rec: dict) -> "FieldGenSpec":
        signal = rec.get("signal")
        if isinstance(signal, list):
            signal = tuple(signal)
        return cls(
            name=rec["name"],
            group=rec["group"],
            kind=rec["kind"],
            scale=float(rec["scale"]),
            fidelity=float(rec["fidelity"]),
            signal=signal,
            sigma=float(rec["sigma"]),
        )


@dataclass(frozen=True)
class TeacherParams:
    """Deterministic ranking-teacher weights over latent coordinates.

    score = sigmoid(bias + wq.u + wi.v + sum c*u_j*v_k + c3*u_j*v_k*v_l).
    The cross and triple terms make the score depend multiplicatively on
    query and item latents, so interaction-free models cannot fit it.
    """

    bias: float = 0.0
    query_weights: tuple[float, ...] = (0.5, 0.4, 0.3, 0.2)
    item_weights: tuple[float, ...] = (0.5, 0.4, 0.3, 0.2)
    cross_terms: tuple[tuple[int, int, float], ...] = (
        (0, 0, 1.3),
        (1, 1, 1.1),
        (2, 2, 0.9),
    )
    triple_term: tuple[int, int, int, float] | None = (0, 0, 1, 0.5)

    def logits(self, u: NDArray, item_latents: NDArray) -> NDArray:
        """Teacher logit of one query latent against (n, d) item latents."""
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(item_latents, dtype=np.float64)
        out = np.full(v.shape[0], self.bias, dtype=np.float64)
        out += float(np.dot(self.query_weights, u))
        out += v @ np.asarray(self.item_weights, dtype=np.float64)
        for j, k, c in self.cross_terms:
            out += c * u[j] * v[:, k]
        if self.triple_term is not None:
            j, k, l, c = self.triple_term
            out += c * u[j] * v[:, k] * v[:, l]
        return out

    def scores(self, u: NDArray, item_latents: NDArray) -> NDArray:
        return np.round(expit(self.logits(u, item_latents)), _SCORE_DECIMALS)

    def to_dict(self) -> dict:
        return {
            "bias": self.bias,
            "query_weights": list(self.query_weights),
            "item_weights": list(self.item_weights),
            "cross_terms": [list(t) for t in self.cross_terms],
            "triple_term": list(self.triple_term) if self.triple_term else None,
        }

    @classmethod
    def from_dict(cls, rec: dict) -> "TeacherParams":
        triple = rec.get("triple_term")
        return cls(
            bias=float(rec["bias"]),
            query_weights=tuple(float(x) for x in rec["query_weights"]),
            item_weights=tuple(float(x) for x in rec["item_weights"]),
            cross_terms=tuple(
                (int(j), int(k), float(c)) for j, k, c in rec["cross_terms"]
            ),
            triple_term=tuple(triple) if triple else None,
        )


def default_fields() -> tuple[FieldGenSpec, ...]:
    """Reference field table: 18 fields, three groups, a mix of informative
    and pure-noise fields so that pruning has real dead weight to remove."""
    f = FieldGenSpec
    return (
        f("item_f0", "item", "uniform", scale=1.0, fidelity=0.98, signal=0),
        f("item_f1", "item", "uniform", scale=5.0, fidelity=0.98, signal=1),
        f("item_f2", "item", "longtail", scale=2.0, fidelity=0.95, signal=2),
        f("item_f3", "item", "uniform", scale=1.0, fidelity=0.95, signal=3),
        f("item_f4", "item", "uniform", scale=1.0, fidelity=0.0),
        f("item_f5", "item", "longtail", scale=1.0, fidelity=0.0),
        f("item_f6", "item", "uniform", scale=3.0, fidelity=0.0),
        f("query_f0", "query", "uniform", scale=1.0, fidelity=0.98, signal=0),
        f("query_f1", "query", "uniform", scale=2.0, fidelity=0.98, signal=1),
        f("query_f2", "query", "longtail", scale=1.5, fidelity=0.95, signal=2),
        f("query_f3", "query", "uniform", scale=1.0, fidelity=0.95, signal=3),
        f("query_f4", "query", "uniform", scale=1.0, fidelity=0.0),
        f("query_f5", "query", "longtail", scale=1.0, fidelity=0.0),
        f("query_f6", "query", "uniform", scale=2.0, fidelity=0.0),
        f("cross_f0", "cross", "uniform", scale=1.0, fidelity=0.35, signal=(0, 0)),
        f("cross_f1", "cross", "longtail", scale=1.0, fidelity=0.30, signal=(1, 1)),
        f("cross_f2", "cross", "uniform", scale=1.0, fidelity=0.0),
        f("cross_f3", "cross", "longtail", scale=1.0, fidelity=0.0),
    )


@dataclass(frozen=True)
class GenConfig:
    num_train_queries: int = 200
    num_eval_queries: int = 50
    candidates_per_query: int = 1000
    longtail_query_fraction: float = 0.5
    num_random_items: int = 12000
    num_longtail_items: int = 3000
    latent_dim: int = 4
    match_noise: float = 1.0
    missing_rate: float = 0.03
    outlier_rate: float = 0.002
    fields: tuple[FieldGenSpec, ...] = field(default_factory=default_fields)
    teacher: TeacherParams = field(default_factory=TeacherParams)

    def validate(self) -> None:
        if self.candidates_per_query < 2:
            raise ValidationError("candidate-set size must be at least 2")
        if self.num_train_queries < 0 or self.num_eval_queries < 0:
            raise ValidationError("query counts must be non-negative")
        if self.num_train_queries + self.num_eval_queries < 1:
            raise ValidationError("corpus needs at least one query")
        for rate, label in (
            (self.missing_rate, "missing_rate"),
            (self.outlier_rate, "outlier_rate"),
        ):
            if not 0.0 <= rate < 1.0:
                raise ValidationError(f"{label} must lie in [0,1), got {rate}")
        if self.missing_rate + self.outlier_rate >= 1.0:
            raise ValidationError("missing_rate + outlier_rate must be < 1")
        if not 0.0 <= self.longtail_query_fraction <= 1.0:
            raise ValidationError("longtail_query_fraction must lie in [0,1]")
        if min(self.num_random_items, self.num_longtail_items) < (
            self.candidates_per_query
        ):
            raise ValidationError(
                "each item pool must hold at least candidates_per_query items"
            )
        if not self.fields:
            raise ValidationError("field table is empty")
        names = [f.name for f in self.fields]
        if len(set(names)) != len(names):
            raise ValidationError("field names must be unique")
        for spec in self.fields:
            coords = (
                spec.signal
                if isinstance(spec.signal, tuple)
                else (spec.signal,)
            )
            for c in coords:
                if c is not None and not 0 <= c < self.latent_dim:
                    raise ValidationError(
                        f"field {spec.name!r}: signal coordinate {c} outside "
                        f"latent_dim {self.latent_dim}"
                    )

    @property
    def num_queries(self) -> int:
        return self.num_train_queries + self.num_eval_queries

    def group_fields(self, group: str) -> list[tuple[int, FieldGenSpec]]:
        """(canonical column index, spec) for one group."""
        return [(i, s) for i, s in enumerate(self.fields) if s.group == group]

    def to_dict(self) -> dict:
        return {
            "num_train_queries": self.num_train_queries,
            "num_eval_queries": self.num_eval_queries,
            "candidates_per_query": self.candidates_per_query,
            "longtail_query_fraction": self.longtail_query_fraction,
            "num_random_items": self.num_random_items,
            "num_longtail_items": self.num_longtail_items,
            "latent_dim": self.latent_dim,
            "match_noise": self.match_noise,
            "missing_rate": self.missing_rate,
            "outlier_rate": self.outlier_rate,
            "fields": [s.to_dict() for s in self.fields],
            "teacher": self.teacher.to_dict(),
        }

    @classmethod
    def from_dict(cls, rec: dict) -> "GenConfig":
        return cls(
            num_train_queries=int(rec["num_train_queries"]),
            num_eval_queries=int(rec["num_eval_queries"]),
            candidates_per_query=int(rec["candidates_per_query"]),
            longtail_query_fraction=float(rec["longtail_query_fraction"]),
            num_random_items=int(rec["num_random_items"]),
            num_longtail_items=int(rec["num_longtail_items"]),
            latent_dim=int(rec["latent_dim"]),
            match_noise=float(rec["match_noise"]),
            missing_rate=float(rec["missing_rate"]),
            outlier_rate=float(rec["outlier_rate"]),
            fields=tuple(FieldGenSpec.from_dict(f) for f in rec["fields"]),
            teacher=TeacherParams.from_dict(rec["teacher"]),
        )


@dataclass(frozen=True)
class Query:
    id: int
    popularity_class: str
    latent: NDArray[np.float64]


@dataclass(frozen=True)
class Item:
    id: int
    latent: NDArray[np.float64]


@dataclass(frozen=True)
class CandidateSet:
    query_id: int
    item_ids: tuple[int, ...]

    def __post_init__(self):
        if len(self.item_ids) < 1:
            raise ValidationError("candidate set must not be empty")
        if len(set(self.item_ids)) != len(self.item_ids):
            raise ValidationError("candidate set contains duplicate item ids")


@dataclass(frozen=True)
class TeacherScoredSet:
    query_id: int
    entries: tuple[tuple[int, float], ...]


@dataclass
class QueryBlock:
    """One query with its candidate set, raw feature values, and teacher
    scores. Feature matrices use NaN for MISSING."""

    query_id: int
    popularity_class: str
    role: str
    query_latent: NDArray[np.float64]
    item_ids: NDArray[np.int64]
    query_values: NDArray[np.float64]
    item_values: NDArray[np.float64]
    cross_values: NDArray[np.float64]
    teacher_scores: NDArray[np.float64]

    @property
    def size(self) -> int:
        return len(self.item_ids)


@dataclass
class Corpus:
    config: GenConfig
    seed: int
    blocks: list[QueryBlock]
    item_latents: NDArray[np.float64] | None = None

    @property
    def num_fields(self) -> int:
        return len(self.config.fields)

    def field_names(self) -> list[str]:
        return [s.name for s in self.config.fields]

    def field_groups(self) -> list[str]:
        return [s.group for s in self.config.fields]

    def field_kinds(self) -> list[str]:
        return [s.kind for s in self.config.fields]

    def block_matrix(self, block: QueryBlock) -> NDArray[np.float64]:
        """Assemble the (n_items, num_fields) raw-value matrix in canonical
        field order, broadcasting query-level values across items."""
        n = block.size
        out = np.empty((n, self.num_fields), dtype=np.float64)
        item_cols = [i for i, _ in self.config.group_fields("item")]
        query_cols = [i for i, _ in self.config.group_fields("query")]
        cross_cols = [i for i, _ in self.config.group_fields("cross")]
        out[:, item_cols] = block.item_values
        out[:, query_cols] = block.query_values[None, :]
        out[:, cross_cols] = block.cross_values
        return out

    def candidate_set(self, block: QueryBlock) -> CandidateSet:
        return CandidateSet(
            query_id=block.query_id, item_ids=tuple(int(i) for i in block.item_ids)
        )

    def scored_set(self, block: QueryBlock) -> TeacherScoredSet:
        return TeacherScoredSet(
            query_id=block.query_id,
            entries=tuple(
                (int(i), float(s))
                for i, s in zip(block.item_ids, block.teacher_scores)
            ),
        )

    def save(self, path: str) -> None:
        header = {
            "kind": "corpus",
            "version": 1,
            "seed": self.seed,
            "num_queries": len(self.blocks),
            "field_names": self.field_names(),
            "field_groups": self.field_groups(),
            "field_kinds": self.field_kinds(),
            "config": self.config.to_dict(),
        }

        def records():
            yield header
            for b in self.blocks:
                yield {
                    "query_id": b.query_id,
                    "popularity_class": b.popularity_class,
                    "role": b.role,
                    "query_latent": [float(x) for x in b.query_latent],
                    "item_ids": [int(i) for i in b.item_ids],
                    "query_values": _encode_row(b.query_values),
                    "item_values": [_encode_row(r) for r in b.item_values],
                    "cross_values": [_encode_row(r) for r in b.cross_values],
                    "teacher_scores": [float(s) for s in b.teacher_scores],
                }

        write_jsonl(path, records())

    @classmethod
    def load(cls, path: str) -> "Corpus":
        records = read_jsonl(path, expected_kind="corpus")
        header = records[0]
        config = GenConfig.from_dict(header["config"])
        blocks = []
        for rec in records[1:]:
            blocks.append(
                QueryBlock(
                    query_id=int(rec["query_id"]),
                    popularity_class=rec["popularity_class"],
                    role=rec["role"],
                    query_latent=np.asarray(rec["query_latent"], dtype=np.float64),
                    item_ids=np.asarray(rec["item_ids"], dtype=np.int64),
                    query_values=_decode_row(rec["query_values"]),
                    item_values=_decode_rows(rec["item_values"]),
                    cross_values=_decode_rows(rec["cross_values"]),
                    teacher_scores=np.asarray(
                        rec["teacher_scores"], dtype=np.float64
                    ),
                )
            )
        return cls(config=config, seed=int(header["seed"]), blocks=blocks)


def _encode_row(row: NDArray[np.float64]) -> list:
    out = np.round(np.asarray(row, dtype=np.float64), _VALUE_DECIMALS).astype(object)
    mask = np.asarray([isinstance(v, float) and math.isnan(v) for v in out])
    if mask.any():
        out[mask] = None
    return out.tolist()


def _decode_row(row: list) -> NDArray[np.float64]:
    obj = np.asarray(row, dtype=object)
    mask = np.asarray([v is None for v in obj])
    if mask.any():
        obj = obj.copy()
        obj[mask] = math.nan
    return obj.astype(np.float64)


def _decode_rows(rows: list) -> NDArray[np.float64]:
    return np.vstack([_decode_row(r) for r in rows]) if rows else np.empty((0, 0))


def _rng(seed: int, *tail: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *tail]))


def _shape_values(z: NDArray, spec: FieldGenSpec) -> NDArray:
    """Map standard-normal draws onto the field's declared distribution:
    exact uniform [0, scale] via the normal CDF, exact lognormal for
    long-tail."""
    if spec.kind == "uniform":
        return spec.scale * ndtr(z)
    return spec.scale * np.exp(spec.sigma * z)


def _mix(signal: NDArray, noise: NDArray, fidelity: float) -> NDArray:
    """Correlated blend of unit-variance signal with unit normal noise;
    result is standard normal when the signal is."""
    return fidelity * signal + math.sqrt(1.0 - fidelity * fidelity) * noise


def _rank_uniform(z: NDArray) -> NDArray:
    """Within-candidate-set rank transform onto (0, 1).

    Cross signals are biased by similarity-driven candidate selection, so a
    fixed global transform cannot give them a clean marginal shape. Ranking
    within the candidate set keeps exactly the within-query ordering (which
    is what a ranker learns from) while making the pooled marginal
    uniform."""
    n = len(z)
    order = np.argsort(z, kind="stable")
    ranks = np.empty(n, dtype=np.float64)
    ranks[order] = np.arange(n, dtype=np.float64)
    return (ranks + 0.5) / n


def _inject(
    values: NDArray[np.float64],
    specs: list[FieldGenSpec],
    draws: NDArray[np.float64],
    missing_rate: float,
    outlier_rate: float,
) -> None:
    """Overwrite a configured fraction of entries with MISSING (NaN) or an
    out-of-range outlier at 10x the field's nominal max. In place."""
    missing = draws < missing_rate
    outlier = (~missing) & (draws < missing_rate + outlier_rate)
    values[missing] = math.nan
    for col, spec in enumerate(specs):
        col_outlier = outlier[..., col]
        if col_outlier.any():
            values[..., col][col_outlier] = _OUTLIER_FACTOR * spec.nominal_max


def _popularity_classes(config: GenConfig) -> list[str]:
    """Deterministic interleaved class assignment hitting the configured
    longtail fraction."""
    frac = config.longtail_query_fraction
    n = config.num_queries
    marks = np.floor((np.arange(n) + 1) * frac) - np.floor(np.arange(n) * frac)
    return ["longtail" if m > 0 else "random" for m in marks]


def generate_corpus(config: GenConfig, seed: int) -> Corpus:
    """Generate a full corpus: item pools, per-query candidate sets, raw
    features, and teacher scores. Bit-identical across runs for a given
    (config, seed)."""
    config.validate()
    d = config.latent_dim
    teacher = config.teacher

    item_fields = config.group_fields("item")
    query_fields = config.group_fields("query")
    cross_fields = config.group_fields("cross")

    # item pools: one common pool, one rarer pool for long-tail queries
    items_rng = _rng(seed, _SS_ITEMS)
    num_items = config.num_random_items + config.num_longtail_items
    item_latents = items_rng.standard_normal((num_items, d))
    random_ids = np.arange(config.num_random_items)
    longtail_ids = np.arange(config.num_random_items, num_items)

    # item-group feature values are item properties: generated once per item
    item_eta = items_rng.standard_normal((num_items, len(item_fields)))
    item_base = np.empty((num_items, len(item_fields)), dtype=np.float64)
    for j, (_, spec) in enumerate(item_fields):
        sig = (
            item_latents[:, spec.signal]
            if spec.fidelity > 0
            else np.zeros(num_items)
        )
        item_base[:, j] = _shape_values(_mix(sig, item_eta[:, j], spec.fidelity), spec)

    classes = _popularity_classes(config)
    n_cand = config.candidates_per_query
    blocks = []
    for qid in range(config.num_queries):
        rng = _rng(seed, _SS_QUERY, qid)
        u = rng.standard_normal(d)
        role = "train" if qid < config.num_train_queries else "eval"
        pclass = classes[qid]

        # query-group features
        q_eta = rng.standard_normal(len(query_fields))
        q_vals = np.empty(len(query_fields), dtype=np.float64)
        for j, (_, spec) in enumerate(query_fields):
            sig = u[spec.signal] if spec.fidelity > 0 else 0.0
            q_vals[j] = _shape_values(
                np.asarray(_mix(np.float64(sig), q_eta[j], spec.fidelity)), spec
            )

        # matching layer: latent similarity plus noise, top fan-out
        pool = longtail_ids if pclass == "longtail" else random_ids
        sim = item_latents[pool] @ u
        sim = sim + config.match_noise * rng.gumbel(size=len(pool))
        top = np.argpartition(-sim, n_cand - 1)[:n_cand]
        top = top[np.argsort(-sim[top], kind="stable")]
        chosen = pool[top]
        v = item_latents[chosen]

        # cross-group features depend on the (query, item) pair
        x_eta = rng.standard_normal((n_cand, len(cross_fields)))
        x_vals = np.empty((n_cand, len(cross_fields)), dtype=np.float64)
        for j, (_, spec) in enumerate(cross_fields):
            if spec.fidelity > 0:
                qc, ic = spec.signal
                z = _mix(u[qc] * v[:, ic], x_eta[:, j], spec.fidelity)
                uniform = _rank_uniform(z)
            else:
                uniform = ndtr(x_eta[:, j])
            if spec.kind == "uniform":
                x_vals[:, j] = spec.scale * uniform
            else:
                x_vals[:, j] = spec.scale * np.exp(spec.sigma * ndtri(uniform))

        scores = teacher.scores(u, v)

        i_vals = item_base[chosen].copy()
        draws = rng.random((n_cand, len(item_fields) + len(cross_fields)))
        _inject(
            i_vals,
            [s for _, s in item_fields],
            draws[:, : len(item_fields)],
            config.missing_rate,
            config.outlier_rate,
        )
        _inject(
            x_vals,
            [s for _, s in cross_fields],
            draws[:, len(item_fields):],
            config.missing_rate,
            config.outlier_rate,
        )
        q_draws = rng.random(len(query_fields))
        _inject(
            q_vals,
            [s for _, s in query_fields],
            q_draws,
            config.missing_rate,
            config.outlier_rate,
        )

        blocks.append(
            QueryBlock(
                query_id=qid,
                popularity_class=pclass,
                role=role,
                query_latent=u,
                item_ids=chosen.astype(np.int64),
                query_values=np.round(q_vals, _VALUE_DECIMALS),
                item_values=np.round(i_vals, _VALUE_DECIMALS),
                cross_values=np.round(x_vals, _VALUE_DECIMALS),
                teacher_scores=scores,
            )
        )

    return Corpus(config=config, seed=seed, blocks=blocks, item_latents=item_latents)


def teacher_score(teacher: TeacherParams, query: Query, item: Item) -> float:
    """Score one (query, item) pair; deterministic, output in [0, 1]."""
    return float(teacher.scores(query.latent, item.latent[None, :])[0])


def score_candidates(corpus: Corpus, cset: CandidateSet) -> TeacherScoredSet:
    """Teacher-score a candidate set, preserving order. Requires the
    generated corpus (item latents in memory)."""
    if corpus.item_latents is None:
        raise ValidationError(
            "corpus was loaded without item latents; re-generate to score"
        )
    block = next(
        (b for b in corpus.blocks if b.query_id == cset.query_id), None
    )
    if block is None:
        raise ValidationError(f"unknown query id {cset.query_id}")
    ids = np.asarray(cset.item_ids, dtype=np.int64)
    if ids.min() < 0 or ids.max() >= corpus.item_latents.shape[0]:
        raise ValidationError("candidate set references unknown item ids")
    scores = corpus.config.teacher.scores(
        block.query_latent, corpus.item_latents[ids]
    )
    return TeacherScoredSet(
        query_id=cset.query_id,
        entries=tuple(
            (int(i), float(s)) for i, s in zip(cset.item_ids, scores)
        ),
    )
