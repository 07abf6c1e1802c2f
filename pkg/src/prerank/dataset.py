"""Bucketized corpus ready for scoring.

Bridges raw query blocks and the model: every candidate row is pushed
through a fitted schema once, giving one flat bucket matrix plus parallel
id/score columns. Pair batches resolve (query, item) references against
it with a vectorized sorted-key lookup instead of per-row dict probes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .artifacts import read_jsonl, write_jsonl
from .corpus import Corpus
from .errors import ValidationError
from .features import (
    DEFAULT_BUCKET_WIDTH,
    DEFAULT_OUTLIER_MARGIN,
    FeatureSchema,
    discretize_block,
    fit_schema,
)

# item ids stay far below this; packing (query, item) into one integer
# key keeps row lookup a single searchsorted
_KEY_STRIDE = 1 << 32


@dataclass
class DiscretizedCorpus:
    """Flat bucket rows for every (query, candidate) in generation order."""

    schema_hash: str
    num_fields: int
    query_ids: NDArray[np.int64]
    roles: tuple[str, ...]
    classes: tuple[str, ...]
    offsets: NDArray[np.int64]
    item_ids: NDArray[np.int64]
    buckets: NDArray[np.int64]
    teacher: NDArray[np.float64]

    def __post_init__(self):
        if len(self.offsets) != len(self.query_ids) + 1:
            raise ValidationError("offsets do not bracket the query list")
        if self.buckets.shape != (len(self.item_ids), self.num_fields):
            raise ValidationError("bucket matrix shape mismatch")
        keys = self._keys(
            np.repeat(self.query_ids, np.diff(self.offsets)), self.item_ids
        )
        order = np.argsort(keys, kind="stable")
        self._sorted_keys = keys[order]
        self._sorted_rows = order.astype(np.int64)
        if len(self._sorted_keys) and (
            np.diff(self._sorted_keys) == 0
        ).any():
            raise ValidationError("duplicate (query, item) row")

    @staticmethod
    def _keys(query_ids, item_ids) -> NDArray[np.int64]:
        return np.asarray(query_ids, dtype=np.int64) * _KEY_STRIDE + np.asarray(
            item_ids, dtype=np.int64
        )

    @property
    def num_queries(self) -> int:
        return len(self.query_ids)

    def query_slice(self, index: int) -> slice:
        return slice(int(self.offsets[index]), int(self.offsets[index + 1]))

    def iter_queries(self, role: str | None = None):
        """Yield (query_id, role, popularity class, row slice)."""
        for i, qid in enumerate(self.query_ids):
            if role is not None and self.roles[i] != role:
                continue
            yield int(qid), self.roles[i], self.classes[i], self.query_slice(i)

    def lookup_rows(self, query_ids, item_ids) -> NDArray[np.int64]:
        """Row index for each (query, item) reference; unknown pairs fail."""
        keys = self._keys(query_ids, item_ids)
        pos = np.searchsorted(self._sorted_keys, keys)
        pos = np.minimum(pos, len(self._sorted_keys) - 1)
        hit = self._sorted_keys[pos] == keys
        if not hit.all():
            miss = int(np.flatnonzero(~hit)[0])
            raise ValidationError(
                f"(query {int(np.asarray(query_ids)[miss])}, item "
                f"{int(np.asarray(item_ids)[miss])}) is not in the "
                "discretized corpus"
            )
        return self._sorted_rows[pos]

    def save(self, path: str) -> None:
        header = {
            "kind": "buckets",
            "version": 1,
            "schema_hash": self.schema_hash,
            "num_fields": self.num_fields,
            "num_queries": self.num_queries,
        }

        def records():
            yield header
            for i, qid in enumerate(self.query_ids):
                rows = self.query_slice(i)
                yield {
                    "query_id": int(qid),
                    "role": self.roles[i],
                    "popularity_class": self.classes[i],
                    "item_ids": [int(v) for v in self.item_ids[rows]],
                    "buckets": self.buckets[rows].tolist(),
                    "teacher_scores": [
                        float(s) for s in self.teacher[rows]
                    ],
                }

        write_jsonl(path, records())

    @classmethod
    def load(cls, path: str) -> "DiscretizedCorpus":
        records = read_jsonl(path, expected_kind="buckets")
        header = records[0]
        qids, roles, classes, offsets = [], [], [], [0]
        item_ids, buckets, teacher = [], [], []
        for rec in records[1:]:
            qids.append(rec["query_id"])
            roles.append(rec["role"])
            classes.append(rec["popularity_class"])
            item_ids.append(np.asarray(rec["item_ids"], dtype=np.int64))
            buckets.append(np.asarray(rec["buckets"], dtype=np.int64))
            teacher.append(
                np.asarray(rec["teacher_scores"], dtype=np.float64)
            )
            offsets.append(offsets[-1] + len(item_ids[-1]))
        return cls(
            schema_hash=header["schema_hash"],
            num_fields=int(header["num_fields"]),
            query_ids=np.asarray(qids, dtype=np.int64),
            roles=tuple(roles),
            classes=tuple(classes),
            offsets=np.asarray(offsets, dtype=np.int64),
            item_ids=np.concatenate(item_ids)
            if item_ids
            else np.empty(0, dtype=np.int64),
            buckets=np.concatenate(buckets)
            if buckets
            else np.empty((0, int(header["num_fields"])), dtype=np.int64),
            teacher=np.concatenate(teacher)
            if teacher
            else np.empty(0, dtype=np.float64),
        )


def fit_corpus_schema(
    corpus: Corpus,
    bucket_width: float = DEFAULT_BUCKET_WIDTH,
    outlier_margin: float = DEFAULT_OUTLIER_MARGIN,
    role: str | None = "train",
) -> FeatureSchema:
    """Fit normalization ranges on the corpus, by default on training
    blocks only so evaluation rows cannot steer the ranges."""
    blocks = [
        b for b in corpus.blocks if role is None or b.role == role
    ] or corpus.blocks
    sample = np.concatenate([corpus.block_matrix(b) for b in blocks])
    return fit_schema(
        sample,
        kinds=[f.kind for f in corpus.config.fields],
        bucket_width=bucket_width,
        names=corpus.field_names(),
        groups=corpus.field_groups(),
        outlier_margin=outlier_margin,
    )


def discretize_corpus(
    corpus: Corpus, schema: FeatureSchema
) -> DiscretizedCorpus:
    """Push every block through the schema. Field order and names must
    match what the schema was fitted on."""
    names = [f.name for f in schema.fields]
    if names != corpus.field_names():
        raise ValidationError(
            "schema fields do not match corpus fields; refit the schema "
            "on this corpus"
        )
    qids, roles, classes, offsets = [], [], [], [0]
    item_ids, buckets, teacher = [], [], []
    for block in corpus.blocks:
        values = corpus.block_matrix(block)
        buckets.append(
            discretize_block(values, schema).astype(np.int64)
        )
        qids.append(block.query_id)
        roles.append(block.role)
        classes.append(block.popularity_class)
        item_ids.append(block.item_ids)
        teacher.append(block.teacher_scores)
        offsets.append(offsets[-1] + block.size)
    return DiscretizedCorpus(
        schema_hash=schema.content_hash(),
        num_fields=schema.num_fields,
        query_ids=np.asarray(qids, dtype=np.int64),
        roles=tuple(roles),
        classes=tuple(classes),
        offsets=np.asarray(offsets, dtype=np.int64),
        item_ids=np.concatenate(item_ids),
        buckets=np.concatenate(buckets),
        teacher=np.concatenate(teacher),
    )
