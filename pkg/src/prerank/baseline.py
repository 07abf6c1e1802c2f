"""Interaction-free pointwise baseline.

One weight per (field, bucket) plus a bias, regressed onto teacher
scores with mini-batch SGD. No second-order terms and no MLP: the gap
between this model and the gated scorer measures what interactions buy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .artifacts import read_json, write_json
from .dataset import DiscretizedCorpus
from .errors import ArtifactError, NumericError, ValidationError
from .features import FeatureSchema
from .model import _tree_sum

_SS_BASELINE = 43


@dataclass
class BaselineConfig:
    learning_rate: float = 0.05
    epochs: int = 3
    batch_size: int = 512
    seed: int = 0

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be positive")
        if self.epochs < 0:
            raise ValidationError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be at least 1")

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, rec: dict) -> "BaselineConfig":
        cfg = cls(**rec)
        cfg.validate()
        return cfg


@dataclass
class LinearModel:
    """Per-bucket linear scorer sharing the bucket-matrix interface of
    the deep model."""

    schema_hash: str
    num_fields: int
    buckets_per_field: int
    params: dict[str, NDArray[np.float64]]

    def _check_buckets(self, buckets) -> NDArray[np.int64]:
        b = np.asarray(buckets, dtype=np.int64)
        if b.ndim != 2 or b.shape[1] != self.num_fields:
            raise ValidationError(
                f"bucket matrix shape {b.shape} does not match "
                f"{self.num_fields} fields"
            )
        if b.size and (b.min() < 0 or b.max() >= self.buckets_per_field):
            raise ValidationError(
                "bucket index outside weight table: model and schema "
                "do not match"
            )
        return b

    def score_batch(self, buckets) -> NDArray[np.float64]:
        """Bias plus one weight per field; batch-size invariant like the
        deep scorer (table gather plus fixed-order row sum)."""
        b = self._check_buckets(buckets)
        fidx = np.arange(self.num_fields)[None, :]
        vals = self.params["weights"][fidx, b]
        return self.params["bias"][0] + _tree_sum(vals)

    def score(self, bucket_vector) -> float:
        row = np.asarray(bucket_vector, dtype=np.int64)[None, :]
        return float(self.score_batch(row)[0])

    def multiply_count(self) -> int:
        # pure gathers and adds; no multiplies anywhere on the path
        return 0

    def copy(self) -> "LinearModel":
        return LinearModel(
            schema_hash=self.schema_hash,
            num_fields=self.num_fields,
            buckets_per_field=self.buckets_per_field,
            params={k: v.copy() for k, v in self.params.items()},
        )

    def to_dict(self) -> dict:
        return {
            "kind": "model",
            "version": 1,
            "model_kind": "linear",
            "schema_hash": self.schema_hash,
            "num_fields": self.num_fields,
            "buckets_per_field": self.buckets_per_field,
            "params": {k: v.tolist() for k, v in self.params.items()},
        }

    def save(self, path: str) -> None:
        write_json(path, self.to_dict())

    @classmethod
    def from_dict(cls, rec: dict) -> "LinearModel":
        if rec.get("model_kind") != "linear":
            raise ArtifactError(
                f"expected a linear model, found {rec.get('model_kind')!r}"
            )
        params = {
            k: np.asarray(v, dtype=np.float64)
            for k, v in rec["params"].items()
        }
        model = cls(
            schema_hash=rec["schema_hash"],
            num_fields=int(rec["num_fields"]),
            buckets_per_field=int(rec["buckets_per_field"]),
            params=params,
        )
        for name, arr in model.params.items():
            if not np.isfinite(arr).all():
                raise ValidationError(
                    f"model parameter {name} is not finite"
                )
        return model

    @classmethod
    def load(
        cls, path: str, expected_schema_hash: str | None = None
    ) -> "LinearModel":
        model = cls.from_dict(read_json(path, expected_kind="model"))
        if (
            expected_schema_hash is not None
            and model.schema_hash != expected_schema_hash
        ):
            raise ArtifactError(
                f"model at {path} was trained against schema "
                f"{model.schema_hash[:12]}..., expected "
                f"{expected_schema_hash[:12]}..."
            )
        return model


def init_linear(schema: FeatureSchema) -> LinearModel:
    return LinearModel(
        schema_hash=schema.content_hash(),
        num_fields=schema.num_fields,
        buckets_per_field=schema.buckets_per_field,
        params={
            "bias": np.zeros(1),
            "weights": np.zeros(
                (schema.num_fields, schema.buckets_per_field)
            ),
        },
    )


def train_linear(
    table: DiscretizedCorpus,
    config: BaselineConfig,
    schema: FeatureSchema,
    role: str | None = "train",
) -> tuple[LinearModel, list[float]]:
    """Squared-error SGD onto teacher scores over the given role's rows.
    Returns the model and the per-epoch mean squared error trace."""
    config.validate()
    if schema.content_hash() != table.schema_hash:
        raise ValidationError(
            "schema does not match the discretized corpus"
        )
    rows = [sl for _, r, _, sl in table.iter_queries(role=role)]
    if not rows:
        raise ValidationError(f"no queries with role {role!r} to train on")
    idx = np.concatenate([np.arange(sl.start, sl.stop) for sl in rows])
    buckets = table.buckets[idx]
    target = table.teacher[idx]

    model = init_linear(schema)
    weights = model.params["weights"]
    bias = model.params["bias"]
    table_size = model.num_fields * model.buckets_per_field
    fidx = np.arange(model.num_fields)[None, :]
    rng = np.random.default_rng(
        np.random.SeedSequence([config.seed, _SS_BASELINE])
    )
    trace: list[float] = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(idx))
        sq_sum = 0.0
        count = 0
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            b = buckets[batch]
            r = target[batch]
            pred = bias[0] + (weights[fidx, b]).sum(axis=1)
            err = pred - r
            if not np.isfinite(err).all():
                raise NumericError(
                    f"non-finite baseline loss at epoch {epoch}, batch "
                    f"{count}"
                )
            n = len(batch)
            d = 2.0 * err / n
            bias[0] -= config.learning_rate * d.sum()
            flat = (
                fidx * model.buckets_per_field + b
            ).ravel()
            grad = np.bincount(
                flat,
                weights=np.broadcast_to(d[:, None], b.shape).ravel(),
                minlength=table_size,
            ).reshape(weights.shape)
            weights -= config.learning_rate * grad
            sq_sum += float((err * err).sum())
            count += n
        trace.append(sq_sum / count)
    return model, trace
