"""Structural pruning driven by polarized gates.

After gate-pressure training the gate values sit near 0 or 1. Pair gates
below the threshold leave the FM sum via the pair mask; field gates below
it lose their MLP input rows outright, shrinking the first weight matrix.
Surviving gates are hardened to exactly 1 so the gate multiplies leave
the inference path; the report quantifies how much score moved.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .dataset import DiscretizedCorpus
from .errors import ValidationError
from .model import DeepFmModel
from .pairs import PairSet
from .train import TrainConfig, TrainResult, train

_AUDIT_MIN_ITEMS = 1000
_SS_AUDIT = 37


@dataclass
class PruneReport:
    threshold: float
    pairs_total: int
    pairs_removed: int
    fields_total: int
    fields_removed: int
    multiply_count_before: int
    multiply_count_after: int
    max_score_delta: float
    audit_items: int

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "pairs_total": self.pairs_total,
            "pairs_removed": self.pairs_removed,
            "fields_total": self.fields_total,
            "fields_removed": self.fields_removed,
            "multiply_count_before": self.multiply_count_before,
            "multiply_count_after": self.multiply_count_after,
            "max_score_delta": self.max_score_delta,
            "audit_items": self.audit_items,
        }


def gate_histogram(model: DeepFmModel) -> list[tuple[int, float]]:
    """Every gate's effective value, sorted ascending. Gate ids count
    pair gates first, then field gates."""
    values = np.concatenate(
        [model.pair_gate_values(), model.deep_gate_values()]
    )
    ids = np.arange(len(values))
    order = np.lexsort((ids, values))
    return [(int(ids[i]), float(values[i])) for i in order]


def _default_audit_rows(model: DeepFmModel) -> NDArray[np.int64]:
    rng = np.random.default_rng(np.random.SeedSequence([0, _SS_AUDIT]))
    return rng.integers(
        0,
        model.buckets_per_field,
        size=(_AUDIT_MIN_ITEMS, model.num_fields),
    )


def prune(
    model: DeepFmModel,
    threshold: float,
    audit_buckets: NDArray | None = None,
) -> tuple[DeepFmModel, PruneReport]:
    """Remove every interaction whose gate sits below the threshold.

    The returned model is hardened: surviving gates read exactly 1,
    removed pair terms are masked out of the FM sum, and removed fields'
    rows are deleted from the first MLP weight matrix. max_score_delta
    is the largest absolute score change against the soft input model
    over the audit rows (>= 1000 items; synthetic rows when none given).
    """
    if not 0.0 <= threshold < 1.0:
        raise ValidationError(
            f"prune threshold must be in [0,1), got {threshold}"
        )
    pair_g = model.pair_gate_values()
    deep_g = model.deep_gate_values()
    keep_pairs = model.pair_mask & (pair_g >= threshold)
    keep_fields = model.field_mask & (deep_g >= threshold)
    if not keep_fields.any():
        raise ValidationError(
            f"threshold {threshold} prunes every field from the deep "
            "side; the result would be degenerate - lower the threshold"
        )

    pruned = model.copy()
    pruned.pair_mask = keep_pairs
    pruned.field_mask = keep_fields
    old_slots = model.field_slots
    slot_keep = keep_fields[old_slots]
    pruned.field_slots = old_slots[slot_keep]
    k = model.embedding_dim
    row_keep = np.repeat(slot_keep, k)
    pruned.params["W1"] = pruned.params["W1"][row_keep, :]
    pruned.hardened = True
    # dataclass caches built in __post_init__ depend on W1's row count
    pruned.__post_init__()

    if audit_buckets is None:
        audit_buckets = _default_audit_rows(model)
    audit_buckets = np.asarray(audit_buckets, dtype=np.int64)
    if len(audit_buckets) < _AUDIT_MIN_ITEMS:
        raise ValidationError(
            f"prune audit needs at least {_AUDIT_MIN_ITEMS} items, got "
            f"{len(audit_buckets)}"
        )
    before = model.score_batch(audit_buckets)
    after = pruned.score_batch(audit_buckets)
    max_delta = float(np.abs(after - before).max())

    report = PruneReport(
        threshold=threshold,
        pairs_total=int(len(model.pair_mask)),
        pairs_removed=int((~keep_pairs).sum()),
        fields_total=int(len(model.field_mask)),
        fields_removed=int((~keep_fields).sum()),
        multiply_count_before=model.multiply_count(),
        multiply_count_after=pruned.multiply_count(),
        max_score_delta=max_delta,
        audit_items=int(len(audit_buckets)),
    )
    return pruned, report


def finetune_after_prune(
    model: DeepFmModel,
    pair_set: PairSet,
    table: DiscretizedCorpus,
    config: TrainConfig | None = None,
) -> TrainResult:
    """One recovery pass over the pairs with gates frozen structurally.

    The model must already be pruned (hardened); gate parameters receive
    zero gradient there, so masks cannot reopen. Default is a single
    epoch.
    """
    if not model.hardened:
        raise ValidationError(
            "finetune expects a pruned (hardened) model; run prune first"
        )
    if config is None:
        config = TrainConfig(epochs=1)
    return train(model, pair_set, table, config)


def harden(model: DeepFmModel) -> DeepFmModel:
    """Copy of the model with current masks frozen as hard {0,1} gates
    and no structural change. The threshold-zero prune equals this."""
    out = model.copy()
    out.hardened = True
    return out
