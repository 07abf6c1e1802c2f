"""Feature normalization and equal-width discretization.

Raw feature values are normalized to [0,1] per field (min/max scaling for
uniform fields, log-based scaling for long-tail fields), then discretized
into ``B = ceil(1/w)`` equal-width buckets. Two extra buckets per field hold
outliers (index B) and missing values (index B+1), so every representable
input lands in exactly one of B+2 buckets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .artifacts import dumps, read_json, sha256_text, write_json
from .errors import ValidationError

DEFAULT_BUCKET_WIDTH = 0.02
DEFAULT_OUTLIER_MARGIN = 0.5
DEFAULT_TRIM_PERCENTILES = (0.5, 99.5)

# flag codes used by the vectorized path
FLAG_NORMAL = 0
FLAG_OUTLIER = 1
FLAG_MISSING = 2


class _Marker:
    """Distinguished non-numeric feature states. Singletons; compare by
    identity."""

    __slots__ = ("_name",)

    def __init__(self, name: str):
        self._name = name

    def __repr__(self) -> str:
        return self._name


MISSING = _Marker("MISSING")
OUTLIER = _Marker("OUTLIER")

VALID_KINDS = ("uniform", "longtail")


def _is_missing(value) -> bool:
    if value is None or value is MISSING:
        return True
    return isinstance(value, float) and math.isnan(value)


@dataclass(frozen=True)
class FieldDef:
    """One fitted field: identity plus the normalization constants."""

    name: str
    group: str
    kind: str
    observed_min: float
    observed_max: float

    def __post_init__(self):
        if self.kind not in VALID_KINDS:
            raise ValidationError(
                f"field {self.name!r}: unknown distribution kind {self.kind!r}"
            )
        if not self.observed_min < self.observed_max:
            raise ValidationError(
                f"field {self.name!r}: observed_min must be < observed_max "
                f"(got {self.observed_min} >= {self.observed_max})"
            )


@dataclass(frozen=True)
class FeatureSchema:
    """Fitted normalization/discretization parameters for the whole feature
    vector. Field order here is the canonical order for the entire pipeline:
    corpora, models, and featurized artifacts all align to it.
    """

    fields: tuple[FieldDef, ...]
    bucket_width: float
    outlier_margin: float = DEFAULT_OUTLIER_MARGIN

    def __post_init__(self):
        if not (0.0 < self.bucket_width < 1.0):
            raise ValidationError(
                f"bucket_width must lie in (0,1), got {self.bucket_width}"
            )
        if self.outlier_margin < 0.0:
            raise ValidationError(
                f"outlier_margin must be >= 0, got {self.outlier_margin}"
            )
        if not self.fields:
            raise ValidationError("schema must declare at least one field")

    @property
    def num_fields(self) -> int:
        return len(self.fields)

    @property
    def num_value_buckets(self) -> int:
        """B: count of normal-value buckets."""
        return math.ceil(1.0 / self.bucket_width)

    @property
    def outlier_index(self) -> int:
        return self.num_value_buckets

    @property
    def missing_index(self) -> int:
        return self.num_value_buckets + 1

    @property
    def buckets_per_field(self) -> int:
        """Total embedding rows addressed per field: B normal + outlier +
        missing."""
        return self.num_value_buckets + 2

    def field_names(self) -> list[str]:
        return [f.name for f in self.fields]

    def to_dict(self) -> dict:
        return {
            "kind": "feature_schema",
            "version": 1,
            "bucket_width": self.bucket_width,
            "outlier_margin": self.outlier_margin,
            "num_value_buckets": self.num_value_buckets,
            "fields": [
                {
                    "name": f.name,
                    "group": f.group,
                    "kind": f.kind,
                    "observed_min": f.observed_min,
                    "observed_max": f.observed_max,
                }
                for f in self.fields
            ],
        }

    @classmethod
    def from_dict(cls, record: dict) -> "FeatureSchema":
        try:
            fields = tuple(
                FieldDef(
                    name=f["name"],
                    group=f["group"],
                    kind=f["kind"],
                    observed_min=float(f["observed_min"]),
                    observed_max=float(f["observed_max"]),
                )
                for f in record["fields"]
            )
            schema = cls(
                fields=fields,
                bucket_width=float(record["bucket_width"]),
                outlier_margin=float(record["outlier_margin"]),
            )
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed feature schema: {exc}") from exc
        return schema

    def content_hash(self) -> str:
        """Hash of the normalization-relevant content. Two schemas with the
        same hash discretize identically."""
        return sha256_text(dumps(self.to_dict()))

    def save(self, path: str) -> None:
        write_json(path, self.to_dict())

    @classmethod
    def load(cls, path: str) -> "FeatureSchema":
        return cls.from_dict(read_json(path, expected_kind="feature_schema"))


def _as_matrix(sample) -> NDArray[np.float64]:
    """Coerce a list of feature vectors (values may be None/MISSING) into a
    float matrix with NaN standing in for missing."""
    if isinstance(sample, np.ndarray):
        return np.asarray(sample, dtype=np.float64)
    rows = []
    for vec in sample:
        rows.append(
            [math.nan if _is_missing(v) else float(v) for v in vec]
        )
    return np.asarray(rows, dtype=np.float64)


def fit_schema(
    sample,
    kinds: list[str],
    bucket_width: float = DEFAULT_BUCKET_WIDTH,
    names: list[str] | None = None,
    groups: list[str] | None = None,
    outlier_margin: float = DEFAULT_OUTLIER_MARGIN,
    trim_percentiles: tuple[float, float] = DEFAULT_TRIM_PERCENTILES,
) -> FeatureSchema:
    """Fit per-field normalization ranges on a sample of feature vectors.

    The min/max fit is percentile-trimmed: values beyond the 0.5th/99.5th
    percentiles of each field are excluded, so a handful of extreme outliers
    in the fitting sample cannot stretch the normalization range.
    """
    matrix = _as_matrix(sample)
    if matrix.size == 0:
        raise ValidationError("cannot fit schema on an empty sample")
    if matrix.ndim != 2 or matrix.shape[1] != len(kinds):
        raise ValidationError(
            f"sample has {matrix.shape[-1] if matrix.ndim == 2 else 0} fields, "
            f"declared kinds have {len(kinds)}"
        )
    num_fields = len(kinds)
    if names is None:
        names = [f"f{i}" for i in range(num_fields)]
    if groups is None:
        groups = ["item"] * num_fields
    if len(names) != num_fields or len(groups) != num_fields:
        raise ValidationError("names/groups length must match kinds length")

    lo_pct, hi_pct = trim_percentiles
    fields = []
    for col, (name, group, kind) in enumerate(zip(names, groups, kinds)):
        values = matrix[:, col]
        usable = values[~np.isnan(values)]
        if usable.size < 2:
            raise ValidationError(
                f"field {name!r}: fewer than 2 usable values, cannot fit"
            )
        lo = np.percentile(usable, lo_pct)
        hi = np.percentile(usable, hi_pct)
        kept = usable[(usable >= lo) & (usable <= hi)]
        if kept.size < 2:
            raise ValidationError(
                f"field {name!r}: fewer than 2 values survive percentile trim"
            )
        obs_min = float(kept.min())
        obs_max = float(kept.max())
        if not obs_min < obs_max:
            raise ValidationError(
                f"field {name!r}: constant after trim "
                f"(min == max == {obs_min}), cannot normalize"
            )
        fields.append(
            FieldDef(
                name=name,
                group=group,
                kind=kind,
                observed_min=obs_min,
                observed_max=obs_max,
            )
        )
    return FeatureSchema(
        fields=tuple(fields),
        bucket_width=bucket_width,
        outlier_margin=outlier_margin,
    )


def normalize_block(
    matrix: NDArray[np.float64], schema: FeatureSchema
) -> tuple[NDArray[np.float64], NDArray[np.uint8]]:
    """Vectorized normalization of an (n, F) raw-value matrix (NaN =
    missing).

    Returns (normalized, flags): normalized holds the clamped [0,1] value
    for normal entries and 0.0 placeholders elsewhere; flags distinguish
    normal / outlier / missing per entry.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[1] != schema.num_fields:
        raise ValidationError(
            f"value matrix shape {matrix.shape} does not match schema with "
            f"{schema.num_fields} fields"
        )
    n = matrix.shape[0]
    norm = np.zeros_like(matrix)
    flags = np.zeros((n, schema.num_fields), dtype=np.uint8)
    missing = np.isnan(matrix)
    flags[missing] = FLAG_MISSING

    for col, field in enumerate(schema.fields):
        raw = matrix[:, col]
        ok = ~missing[:, col]
        if not ok.any():
            continue
        x = raw[ok]
        lo, hi = field.observed_min, field.observed_max
        if field.kind == "uniform":
            scaled = (x - lo) / (hi - lo)
        else:
            # log-based scaling; values below the fitted min are treated as
            # the min (argument of log stays >= 1)
            shifted = np.maximum(x - lo, 0.0)
            scaled = np.log1p(shifted) / math.log1p(hi - lo)
        is_outlier = scaled > 1.0 + schema.outlier_margin
        clamped = np.clip(scaled, 0.0, 1.0)
        clamped[is_outlier] = 0.0
        col_flags = np.where(is_outlier, FLAG_OUTLIER, FLAG_NORMAL)
        norm_col = norm[:, col]
        norm_col[ok] = clamped
        flag_col = flags[:, col]
        flag_col[ok] = col_flags
    return norm, flags


def discretize_block(
    matrix: NDArray[np.float64], schema: FeatureSchema
) -> NDArray[np.int32]:
    """Vectorized discretization of an (n, F) raw-value matrix into bucket
    indices in [0, B+1]."""
    norm, flags = normalize_block(matrix, schema)
    w = schema.bucket_width
    last_normal = schema.num_value_buckets - 1
    idx = np.floor(norm / w).astype(np.int32)
    # v = 1.0 belongs to the last normal bucket, not a bucket of its own
    np.clip(idx, 0, last_normal, out=idx)
    idx[flags == FLAG_OUTLIER] = schema.outlier_index
    idx[flags == FLAG_MISSING] = schema.missing_index
    return idx


def normalize(value, field: FieldDef, schema: FeatureSchema):
    """Normalize one value for one field. Returns a float in [0,1], MISSING,
    or OUTLIER. Delegates to the vectorized path so the scalar and block
    APIs cannot drift apart."""
    if _is_missing(value):
        return MISSING
    col = schema.fields.index(field)
    row = np.full((1, schema.num_fields), np.nan)
    row[0, col] = float(value)
    norm, flags = normalize_block(row, schema)
    if flags[0, col] == FLAG_OUTLIER:
        return OUTLIER
    return float(norm[0, col])


def discretize(vector, schema: FeatureSchema) -> list[int]:
    """Discretize one feature vector (raw values, MISSING/None allowed)
    into per-field bucket indices."""
    if len(vector) != schema.num_fields:
        raise ValidationError(
            f"feature vector has {len(vector)} values, schema expects "
            f"{schema.num_fields}"
        )
    matrix = _as_matrix([vector])
    return [int(i) for i in discretize_block(matrix, schema)[0]]
