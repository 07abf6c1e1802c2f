"""Siamese pairwise training with pointwise anchoring and gate pressure.

Each ordered pair is scored twice through one shared parameter set; a
hinge on the score difference teaches the ordering, a squared error to
the teacher scores anchors absolute values, and a mean-gate term pushes
polarization gates toward zero unless the task loss holds them open.
Plain SGD with optional momentum; everything is deterministic given the
seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
from numpy.typing import NDArray

from .artifacts import write_jsonl
from .dataset import DiscretizedCorpus
from .errors import NumericError, ValidationError
from .model import DeepFmModel, polarize_grad
from .pairs import PairSet

_SS_SPLIT = 23
_SS_SHUFFLE = 29

_GATE_PARAMS = ("fm_gate", "deep_gate")


@dataclass
class TrainConfig:
    alpha: float = 0.9
    margin: float = 0.05
    learning_rate: float = 1e-4
    epochs: int = 5
    batch_size: int = 256
    sparsity_weight: float = 0.01
    seed: int = 0
    momentum: float = 0.0
    # gates may move on their own schedule: the polarization pressure
    # needed to close a gate within a few epochs is far larger than what
    # the dense parameters tolerate
    gate_learning_rate: float | None = None
    sparsity_warmup_epochs: int = 1
    heldout_fraction: float = 0.1
    # L2 decay on the per-bucket tables (linear, emb) only: they are the
    # parameters wide enough to store per-query keys, which is the
    # overfitting mode that hurts unseen-query recall. Shared dense
    # layers, gates and biases are exempt.
    weight_decay: float = 0.0
    # per-epoch multiplicative factor on both learning rates; 1.0 keeps
    # them constant
    lr_decay: float = 1.0

    def validate(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValidationError(f"alpha must be in [0,1], got {self.alpha}")
        if self.margin <= 0:
            raise ValidationError(f"margin must be positive, got {self.margin}")
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be positive")
        if self.gate_learning_rate is not None and self.gate_learning_rate <= 0:
            raise ValidationError("gate_learning_rate must be positive")
        if self.epochs < 0:
            raise ValidationError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be at least 1")
        if self.sparsity_weight < 0:
            raise ValidationError("sparsity_weight must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValidationError("momentum must be in [0,1)")
        if self.sparsity_warmup_epochs < 0:
            raise ValidationError("sparsity_warmup_epochs must be >= 0")
        if not 0.0 <= self.heldout_fraction < 1.0:
            raise ValidationError("heldout_fraction must be in [0,1)")
        if self.weight_decay < 0:
            raise ValidationError("weight_decay must be non-negative")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ValidationError("lr_decay must be in (0,1]")

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "margin": self.margin,
            "learning_rate": self.learning_rate,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "sparsity_weight": self.sparsity_weight,
            "seed": self.seed,
            "momentum": self.momentum,
            "gate_learning_rate": self.gate_learning_rate,
            "sparsity_warmup_epochs": self.sparsity_warmup_epochs,
            "heldout_fraction": self.heldout_fraction,
            "weight_decay": self.weight_decay,
            "lr_decay": self.lr_decay,
        }

    @classmethod
    def from_dict(cls, rec: dict) -> "TrainConfig":
        cfg = cls(**rec)
        cfg.validate()
        return cfg


@dataclass
class LossBreakdown:
    pair_loss: float
    point_loss: float
    sparsity_loss: float
    total: float

    def to_dict(self) -> dict:
        return {
            "pair_loss": self.pair_loss,
            "point_loss": self.point_loss,
            "sparsity_loss": self.sparsity_loss,
            "total": self.total,
        }


def pair_loss(s_p: float, s_n: float, margin: float) -> float:
    """Hinge on the score difference: zero exactly when the positive
    leads by at least the margin."""
    if margin <= 0:
        raise ValidationError(f"margin must be positive, got {margin}")
    return max(s_n - s_p + margin, 0.0)


def point_loss(s_p: float, s_n: float, r_p: float, r_n: float) -> float:
    """Squared anchoring of both scores to their teacher values."""
    return (s_n - r_n) ** 2 + (s_p - r_p) ** 2


def sparsity_loss(model: DeepFmModel) -> float:
    """Mean effective gate value over every pair and field gate."""
    gates = np.concatenate(
        [model.pair_gate_values(), model.deep_gate_values()]
    )
    return float(gates.mean())


def total_loss(
    pair: float,
    point: float,
    sparsity: float,
    alpha: float,
    sparsity_weight: float,
) -> LossBreakdown:
    if not 0.0 <= alpha <= 1.0:
        raise ValidationError(f"alpha must be in [0,1], got {alpha}")
    total = alpha * pair + (1.0 - alpha) * point + sparsity_weight * sparsity
    return LossBreakdown(
        pair_loss=pair, point_loss=point, sparsity_loss=sparsity, total=total
    )


def batch_gradients(
    model: DeepFmModel,
    buckets_p: NDArray,
    buckets_n: NDArray,
    r_p: NDArray,
    r_n: NDArray,
    config: TrainConfig,
    apply_sparsity_grad: bool = True,
) -> tuple[LossBreakdown, dict[str, NDArray]]:
    """Mean loss over the batch and its gradient for every parameter.

    Both sides of every pair go through one stacked forward pass, so the
    shared-parameter property is structural rather than enforced.
    """
    n = len(r_p)
    stacked = np.concatenate([buckets_p, buckets_n])
    scores, cache = model.forward_batch(stacked)
    if not np.isfinite(scores).all():
        raise NumericError("non-finite score inside training batch")
    s_p, s_n = scores[:n], scores[n:]

    violation = s_n - s_p + config.margin
    active = violation > 0.0
    pair_mean = float(np.maximum(violation, 0.0).mean())
    point_mean = float(((s_n - r_n) ** 2 + (s_p - r_p) ** 2).mean())
    sparsity = sparsity_loss(model)
    breakdown = total_loss(
        pair_mean, point_mean, sparsity, config.alpha, config.sparsity_weight
    )

    alpha = config.alpha
    d_pair_p = np.where(active, -1.0, 0.0) / n
    d_pair_n = np.where(active, 1.0, 0.0) / n
    d_point_p = 2.0 * (s_p - r_p) / n
    d_point_n = 2.0 * (s_n - r_n) / n
    dscore = np.concatenate(
        [
            alpha * d_pair_p + (1.0 - alpha) * d_point_p,
            alpha * d_pair_n + (1.0 - alpha) * d_point_n,
        ]
    )
    grads = model.backward(cache, dscore)

    if apply_sparsity_grad and config.sparsity_weight > 0 and not model.hardened:
        scale = config.sparsity_weight / model.num_gates
        for name in _GATE_PARAMS:
            mask = model.pair_mask if name == "fm_gate" else model.field_mask
            grads[name] = grads[name] + scale * polarize_grad(
                model.params[name], model.beta
            ) * mask
    return breakdown, grads


def _gate_histogram(model: DeepFmModel) -> list[int]:
    gates = np.concatenate(
        [model.pair_gate_values(), model.deep_gate_values()]
    )
    edges = np.linspace(0.0, 1.0, 11)
    counts, _ = np.histogram(gates, bins=edges)
    counts[-1] += int((gates >= 1.0).sum())
    return [int(c) for c in counts]


def heldout_accuracy(
    model: DeepFmModel, rows_p: NDArray, rows_n: NDArray, table: DiscretizedCorpus
) -> float | None:
    """Fraction of held-out pairs the model orders correctly; ties count
    as failures."""
    if len(rows_p) == 0:
        return None
    s_p, _ = model.forward_batch(table.buckets[rows_p])
    s_n, _ = model.forward_batch(table.buckets[rows_n])
    return float((s_p > s_n).mean())


@dataclass
class TrainResult:
    model: DeepFmModel
    trace: list[LossBreakdown]
    metrics: list[dict] = dc_field(default_factory=list)


def train(
    model: DeepFmModel,
    pair_set: PairSet,
    table: DiscretizedCorpus,
    config: TrainConfig,
    metrics_path: str | None = None,
) -> TrainResult:
    """Mini-batch SGD over ordered pairs. Returns a trained copy of the
    model plus one LossBreakdown and one metrics record per epoch.

    Deterministic for a fixed config: the held-out split, every epoch
    shuffle, and all reductions are seeded and order-stable. A non-finite
    loss aborts with the offending epoch and batch named.
    """
    config.validate()
    if len(pair_set) == 0:
        raise ValidationError("pair set is empty; nothing to train on")
    if model.schema_hash != table.schema_hash:
        raise ValidationError(
            "model and discretized corpus were built from different "
            "feature schemas"
        )

    rows_p = table.lookup_rows(pair_set.query_ids, pair_set.pos_ids)
    rows_n = table.lookup_rows(pair_set.query_ids, pair_set.neg_ids)
    r_p = pair_set.r_p
    r_n = pair_set.r_n

    split_rng = np.random.default_rng(
        np.random.SeedSequence([config.seed, _SS_SPLIT])
    )
    perm = split_rng.permutation(len(pair_set))
    num_heldout = int(round(len(pair_set) * config.heldout_fraction))
    heldout = perm[:num_heldout]
    pool = perm[num_heldout:]
    if len(pool) == 0:
        raise ValidationError(
            "held-out fraction leaves no training pairs"
        )

    model = model.copy()
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    shuffle_rng = np.random.default_rng(
        np.random.SeedSequence([config.seed, _SS_SHUFFLE])
    )
    trace: list[LossBreakdown] = []
    metrics: list[dict] = []

    for epoch in range(config.epochs):
        order = pool[shuffle_rng.permutation(len(pool))]
        apply_sparsity = epoch >= config.sparsity_warmup_epochs
        pair_sum = point_sum = sparsity_sum = 0.0
        num_batches = 0
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            try:
                breakdown, grads = batch_gradients(
                    model,
                    table.buckets[rows_p[batch]],
                    table.buckets[rows_n[batch]],
                    r_p[batch],
                    r_n[batch],
                    config,
                    apply_sparsity_grad=apply_sparsity,
                )
            except NumericError as exc:
                raise NumericError(
                    f"{exc} (epoch {epoch}, batch {num_batches})"
                ) from exc
            if not np.isfinite(breakdown.total):
                raise NumericError(
                    f"non-finite loss at epoch {epoch}, batch {num_batches}: "
                    f"pair={breakdown.pair_loss}, point={breakdown.point_loss}, "
                    f"sparsity={breakdown.sparsity_loss}"
                )
            for name, grad in grads.items():
                lr = (
                    config.gate_learning_rate
                    if name in _GATE_PARAMS
                    and config.gate_learning_rate is not None
                    else config.learning_rate
                )
                if (
                    config.weight_decay > 0.0
                    and name not in _GATE_PARAMS
                    and not name.startswith("b")
                ):
                    grad = grad + config.weight_decay * model.params[name]
                if config.momentum > 0.0:
                    velocity[name] = config.momentum * velocity[name] + grad
                    step = velocity[name]
                else:
                    step = grad
                model.params[name] -= lr * np.asarray(step)
            pair_sum += breakdown.pair_loss
            point_sum += breakdown.point_loss
            sparsity_sum += breakdown.sparsity_loss
            num_batches += 1

        epoch_losses = total_loss(
            pair_sum / num_batches,
            point_sum / num_batches,
            sparsity_sum / num_batches,
            config.alpha,
            config.sparsity_weight,
        )
        trace.append(epoch_losses)
        record = {
            "epoch": epoch,
            **epoch_losses.to_dict(),
            "sparsity_active": apply_sparsity,
            "gate_histogram": _gate_histogram(model),
            "heldout_pair_accuracy": heldout_accuracy(
                model, rows_p[heldout], rows_n[heldout], table
            ),
        }
        metrics.append(record)

    if metrics_path is not None:
        header = {
            "kind": "train_metrics",
            "version": 1,
            "config": config.to_dict(),
            "num_pairs": len(pair_set),
            "num_heldout": int(num_heldout),
        }
        write_jsonl(metrics_path, [header, *metrics])
    return TrainResult(model=model, trace=trace, metrics=metrics)
