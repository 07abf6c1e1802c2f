"""Training-pair construction from teacher-scored candidate sets.

Three schemes turn a scored candidate set into partially ordered pairs:
level-based sampling with counterparts drawn only from other score levels
(between_levels), level-based sampling that also allows hard same-level
counterparts (all_levels), and uniform sampling among items whose score
differs from the anchor's by more than a threshold (random, the default).
Every emitted pair is oriented by teacher score: r_p > r_n always holds,
and equal-score pairs are dropped since a hinge loss cannot orient them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .artifacts import read_jsonl, write_jsonl
from .corpus import Corpus, TeacherScoredSet
from .errors import ValidationError

SCHEMES = ("between_levels", "all_levels", "random")

_SS_PAIRS = 4


@dataclass(frozen=True)
class OrderedPair:
    query_id: int
    pos_item_id: int
    neg_item_id: int
    r_p: float
    r_n: float

    def __post_init__(self):
        if not self.r_p > self.r_n:
            raise ValidationError(
                f"pair ({self.pos_item_id}, {self.neg_item_id}): "
                f"r_p must exceed r_n, got {self.r_p} <= {self.r_n}"
            )
        if self.pos_item_id == self.neg_item_id:
            raise ValidationError("pair must join two distinct items")


@dataclass(frozen=True)
class PairConfig:
    scheme: str = "random"
    pairs_per_anchor: int = 4
    epsilon: float = 0.05
    level_boundaries: tuple[float, float, float] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValidationError(
                f"unknown pair scheme {self.scheme!r}; choose from {SCHEMES}"
            )
        if self.pairs_per_anchor < 1:
            raise ValidationError("pairs_per_anchor must be at least 1")
        if self.epsilon < 0:
            raise ValidationError("epsilon must be non-negative")
        if self.level_boundaries is not None:
            b = self.level_boundaries
            if len(b) != 3 or not (b[0] < b[1] < b[2]):
                raise ValidationError(
                    "level_boundaries must be three strictly increasing values"
                )

    def to_dict(self) -> dict:
        return {
            "scheme": self.scheme,
            "pairs_per_anchor": self.pairs_per_anchor,
            "epsilon": self.epsilon,
            "level_boundaries": (
                list(self.level_boundaries) if self.level_boundaries else None
            ),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, rec: dict) -> "PairConfig":
        b = rec.get("level_boundaries")
        return cls(
            scheme=rec["scheme"],
            pairs_per_anchor=int(rec["pairs_per_anchor"]),
            epsilon=float(rec["epsilon"]),
            level_boundaries=tuple(float(x) for x in b) if b else None,
            seed=int(rec["seed"]),
        )


@dataclass
class PairSet:
    """Column-oriented pair store: fast to batch during training."""

    config: PairConfig
    source_corpus_hash: str | None
    query_ids: NDArray[np.int64]
    pos_ids: NDArray[np.int64]
    neg_ids: NDArray[np.int64]
    r_p: NDArray[np.float64]
    r_n: NDArray[np.float64]

    def __len__(self) -> int:
        return len(self.query_ids)

    def save(self, path: str) -> None:
        header = {
            "kind": "pairs",
            "version": 1,
            "num_pairs": len(self),
            "config": self.config.to_dict(),
            "source_corpus_hash": self.source_corpus_hash,
        }

        def records():
            yield header
            for q, p, n, rp, rn in zip(
                self.query_ids, self.pos_ids, self.neg_ids, self.r_p, self.r_n
            ):
                yield {
                    "query_id": int(q),
                    "pos_id": int(p),
                    "neg_id": int(n),
                    "r_p": float(rp),
                    "r_n": float(rn),
                }

        write_jsonl(path, records())

    @classmethod
    def load(cls, path: str) -> "PairSet":
        records = read_jsonl(path, expected_kind="pairs")
        header = records[0]
        rows = records[1:]
        pairs = cls(
            config=PairConfig.from_dict(header["config"]),
            source_corpus_hash=header.get("source_corpus_hash"),
            query_ids=np.asarray([r["query_id"] for r in rows], dtype=np.int64),
            pos_ids=np.asarray([r["pos_id"] for r in rows], dtype=np.int64),
            neg_ids=np.asarray([r["neg_id"] for r in rows], dtype=np.int64),
            r_p=np.asarray([r["r_p"] for r in rows], dtype=np.float64),
            r_n=np.asarray([r["r_n"] for r in rows], dtype=np.float64),
        )
        if int(header["num_pairs"]) != len(pairs):
            raise ValidationError(
                f"pair artifact {path} declares {header['num_pairs']} pairs "
                f"but holds {len(pairs)}"
            )
        return pairs


def _level_vector(
    scores: NDArray[np.float64], boundaries: tuple[float, float, float]
) -> NDArray[np.int64]:
    """Level per item: 1 = highest score band, 4 = lowest. Bands are
    [b3, inf), [b2, b3), [b1, b2), (-inf, b1)."""
    edges = np.asarray(boundaries, dtype=np.float64)
    return 4 - np.searchsorted(edges, scores, side="right")


def assign_levels(
    scored: TeacherScoredSet, boundaries: tuple[float, float, float]
) -> dict[int, int]:
    if not (boundaries[0] < boundaries[1] < boundaries[2]):
        raise ValidationError("level boundaries must be strictly increasing")
    ids = np.asarray([i for i, _ in scored.entries], dtype=np.int64)
    scores = np.asarray([s for _, s in scored.entries], dtype=np.float64)
    levels = _level_vector(scores, boundaries)
    return {int(i): int(l) for i, l in zip(ids, levels)}


def _quartile_boundaries(
    scores: NDArray[np.float64],
) -> tuple[float, float, float]:
    q1, q2, q3 = np.percentile(scores, [25.0, 50.0, 75.0])
    if not (q1 < q2 < q3):
        raise ValidationError(
            "score quartiles are degenerate; pass explicit level_boundaries"
        )
    return (float(q1), float(q2), float(q3))


def _sample_from_pools(
    rng: np.random.Generator,
    pool_sizes: NDArray[np.int64],
    k: int,
) -> tuple[NDArray[np.int64], NDArray[np.int64], NDArray[np.int64]]:
    """For each anchor draw up to k distinct positions from its pool of
    pool_sizes[a] options, uniformly without replacement.

    Returns flat (anchor_index, position, count_per_anchor). Anchors whose
    pool holds at most k options take the whole pool; large pools use
    vectorized rejection sampling on a fixed draw schedule, so the result
    is deterministic for a given generator state.
    """
    n = len(pool_sizes)
    take_all = pool_sizes <= k
    out_anchor: list[NDArray] = []
    out_pos: list[NDArray] = []
    counts = np.zeros(n, dtype=np.int64)

    for a in np.flatnonzero(take_all):
        c = int(pool_sizes[a])
        if c == 0:
            continue
        out_anchor.append(np.full(c, a, dtype=np.int64))
        out_pos.append(np.arange(c, dtype=np.int64))
        counts[a] = c

    big = np.flatnonzero(~take_all)
    if len(big):
        sizes = pool_sizes[big]
        draws = np.floor(rng.random((len(big), k)) * sizes[:, None]).astype(
            np.int64
        )
        np.clip(draws, 0, (sizes - 1)[:, None], out=draws)
        for _ in range(64):
            s = np.sort(draws, axis=1)
            bad = (s[:, 1:] == s[:, :-1]).any(axis=1)
            if not bad.any():
                break
            redo = np.flatnonzero(bad)
            fresh = np.floor(
                rng.random((len(redo), k)) * sizes[redo, None]
            ).astype(np.int64)
            np.clip(fresh, 0, (sizes[redo] - 1)[:, None], out=fresh)
            draws[redo] = fresh
        else:
            # tiny pools that kept colliding: draw exactly per anchor
            for row in np.flatnonzero(bad):
                draws[row] = rng.choice(sizes[row], size=k, replace=False)
        out_anchor.append(np.repeat(big, k))
        out_pos.append(draws.reshape(-1))
        counts[big] = k

    if not out_anchor:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty, counts
    return np.concatenate(out_anchor), np.concatenate(out_pos), counts


def _emit(
    scored: TeacherScoredSet,
    anchors: NDArray[np.int64],
    counterparts: NDArray[np.int64],
) -> list[OrderedPair]:
    ids = np.asarray([i for i, _ in scored.entries], dtype=np.int64)
    scores = np.asarray([s for _, s in scored.entries], dtype=np.float64)
    a_s, c_s = scores[anchors], scores[counterparts]
    keep = a_s != c_s
    anchors, counterparts = anchors[keep], counterparts[keep]
    a_s, c_s = a_s[keep], c_s[keep]
    pos = np.where(a_s > c_s, anchors, counterparts)
    neg = np.where(a_s > c_s, counterparts, anchors)
    return [
        OrderedPair(
            query_id=scored.query_id,
            pos_item_id=int(ids[p]),
            neg_item_id=int(ids[n]),
            r_p=float(scores[p]),
            r_n=float(scores[n]),
        )
        for p, n in zip(pos, neg)
    ]


def _set_rng(config: PairConfig, query_id: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence([config.seed, _SS_PAIRS, query_id])
    )


def make_pairs_random(
    scored: TeacherScoredSet, config: PairConfig
) -> list[OrderedPair]:
    """Counterparts drawn uniformly among items whose teacher score differs
    from the anchor's by strictly more than epsilon."""
    if config.scheme != "random":
        raise ValidationError(f"scheme is {config.scheme!r}, expected 'random'")
    scores = np.asarray([s for _, s in scored.entries], dtype=np.float64)
    n = len(scores)
    order = np.argsort(scores, kind="stable")
    sorted_scores = scores[order]

    lo = np.searchsorted(sorted_scores, scores - config.epsilon, side="left")
    hi = np.searchsorted(sorted_scores, scores + config.epsilon, side="right")
    pool_sizes = lo + (n - hi)

    rng = _set_rng(config, scored.query_id)
    anchors, positions, _ = _sample_from_pools(
        rng, pool_sizes, config.pairs_per_anchor
    )
    # position p means: p-th eligible item in score order, where the
    # eligible items are the sorted prefix [0, lo) and suffix [hi, n)
    below = positions < lo[anchors]
    sorted_pos = np.where(
        below, positions, positions - lo[anchors] + hi[anchors]
    )
    counterparts = order[sorted_pos]
    return _emit(scored, anchors, counterparts)


def _boundaries_for(
    scores: NDArray[np.float64], config: PairConfig
) -> tuple[float, float, float]:
    if config.level_boundaries is not None:
        return config.level_boundaries
    return _quartile_boundaries(scores)


def make_pairs_between_levels(
    scored: TeacherScoredSet, config: PairConfig
) -> list[OrderedPair]:
    """Counterparts drawn only from the three levels the anchor is not in."""
    if config.scheme != "between_levels":
        raise ValidationError(
            f"scheme is {config.scheme!r}, expected 'between_levels'"
        )
    scores = np.asarray([s for _, s in scored.entries], dtype=np.float64)
    levels = _level_vector(scores, _boundaries_for(scores, config))

    members = {l: np.flatnonzero(levels == l) for l in (1, 2, 3, 4)}
    other = {
        l: np.concatenate([members[m] for m in (1, 2, 3, 4) if m != l])
        for l in (1, 2, 3, 4)
    }
    pool_sizes = np.asarray([len(other[l]) for l in levels], dtype=np.int64)

    rng = _set_rng(config, scored.query_id)
    anchors, positions, _ = _sample_from_pools(
        rng, pool_sizes, config.pairs_per_anchor
    )
    counterparts = np.asarray(
        [other[levels[a]][p] for a, p in zip(anchors, positions)],
        dtype=np.int64,
    )
    return _emit(scored, anchors, counterparts)


def make_pairs_all_levels(
    scored: TeacherScoredSet, config: PairConfig
) -> list[OrderedPair]:
    """Up to pairs_per_anchor counterparts from each of the four levels,
    the anchor's own included (its equal-score items excluded)."""
    if config.scheme != "all_levels":
        raise ValidationError(
            f"scheme is {config.scheme!r}, expected 'all_levels'"
        )
    scores = np.asarray([s for _, s in scored.entries], dtype=np.float64)
    levels = _level_vector(scores, _boundaries_for(scores, config))
    rng = _set_rng(config, scored.query_id)

    all_anchors: list[NDArray] = []
    all_counterparts: list[NDArray] = []
    for l in (1, 2, 3, 4):
        pool = np.flatnonzero(levels == l)
        if len(pool) == 0:
            continue
        pool_scores = scores[pool]
        pool_order = np.argsort(pool_scores, kind="stable")
        pool_sorted = pool_scores[pool_order]
        same = levels == l
        # same-level anchors exclude their own tie band; others take the
        # whole level
        lo = np.where(
            same, np.searchsorted(pool_sorted, scores, side="left"), 0
        )
        hi = np.where(
            same,
            np.searchsorted(pool_sorted, scores, side="right"),
            0,
        )
        pool_sizes = lo + (len(pool) - hi)
        anchors, positions, _ = _sample_from_pools(
            rng, pool_sizes, config.pairs_per_anchor
        )
        below = positions < lo[anchors]
        sorted_pos = np.where(
            below, positions, positions - lo[anchors] + hi[anchors]
        )
        all_anchors.append(anchors)
        all_counterparts.append(pool[pool_order[sorted_pos]])

    if not all_anchors:
        return []
    return _emit(
        scored,
        np.concatenate(all_anchors),
        np.concatenate(all_counterparts),
    )


_SCHEME_FNS = {
    "random": make_pairs_random,
    "between_levels": make_pairs_between_levels,
    "all_levels": make_pairs_all_levels,
}


def make_pairs(scored: TeacherScoredSet, config: PairConfig) -> list[OrderedPair]:
    return _SCHEME_FNS[config.scheme](scored, config)


def build_pairs(
    corpus: Corpus,
    config: PairConfig,
    role: str = "train",
    source_corpus_hash: str | None = None,
) -> PairSet:
    """Construct pairs for every block with the given role."""
    q, p, n, rp, rn = [], [], [], [], []
    for block in corpus.blocks:
        if role is not None and block.role != role:
            continue
        for pair in make_pairs(corpus.scored_set(block), config):
            q.append(pair.query_id)
            p.append(pair.pos_item_id)
            n.append(pair.neg_item_id)
            rp.append(pair.r_p)
            rn.append(pair.r_n)
    return PairSet(
        config=config,
        source_corpus_hash=source_corpus_hash,
        query_ids=np.asarray(q, dtype=np.int64),
        pos_ids=np.asarray(p, dtype=np.int64),
        neg_ids=np.asarray(n, dtype=np.int64),
        r_p=np.asarray(rp, dtype=np.float64),
        r_n=np.asarray(rn, dtype=np.float64),
    )
