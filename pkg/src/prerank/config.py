"""Single-file pipeline configuration.

One JSON document with a section per stage; every value has a default,
so the empty document is a valid full configuration. Errors name the
offending section and field.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field as dc_field

from .baseline import BaselineConfig
from .corpus import GenConfig
from .errors import ArtifactError, ValidationError
from .evaluate import EvalConfig
from .pairs import PairConfig
from .train import TrainConfig

ENV_CONFIG = "PRERANK_CONFIG"

_GEN_SIMPLE_FIELDS = (
    "num_train_queries",
    "num_eval_queries",
    "candidates_per_query",
    "longtail_query_fraction",
    "num_random_items",
    "num_longtail_items",
    "latent_dim",
    "match_noise",
    "missing_rate",
    "outlier_rate",
)


@dataclass
class ModelSection:
    embedding_dim: int = 3
    hidden: tuple[int, ...] = (128, 64, 32, 16)
    beta: float = 0.01
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "embedding_dim": self.embedding_dim,
            "hidden": list(self.hidden),
            "beta": self.beta,
            "seed": self.seed,
        }


@dataclass
class FeatureSection:
    bucket_width: float = 0.02
    outlier_margin: float = 0.5

    def to_dict(self) -> dict:
        return {
            "bucket_width": self.bucket_width,
            "outlier_margin": self.outlier_margin,
        }


@dataclass
class PruneSection:
    threshold: float = 0.1
    finetune_epochs: int = 1

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "finetune_epochs": self.finetune_epochs,
        }


@dataclass
class BenchSection:
    repetitions: int = 5
    max_items: int = 5000

    def to_dict(self) -> dict:
        return {
            "repetitions": self.repetitions,
            "max_items": self.max_items,
        }


@dataclass
class PipelineConfig:
    gen: GenConfig = dc_field(default_factory=GenConfig)
    gen_seed: int = 0
    features: FeatureSection = dc_field(default_factory=FeatureSection)
    model: ModelSection = dc_field(default_factory=ModelSection)
    pairs: PairConfig = dc_field(default_factory=PairConfig)
    eval_pairs: PairConfig = dc_field(default_factory=PairConfig)
    train: TrainConfig = dc_field(default_factory=TrainConfig)
    baseline: BaselineConfig = dc_field(default_factory=BaselineConfig)
    prune: PruneSection = dc_field(default_factory=PruneSection)
    eval: EvalConfig = dc_field(default_factory=EvalConfig)
    bench: BenchSection = dc_field(default_factory=BenchSection)

    def validate(self) -> None:
        self.gen.validate()
        self.train.validate()
        self.baseline.validate()
        self.eval.validate()
        if not 0.0 <= self.prune.threshold < 1.0:
            raise ValidationError(
                "config.prune.threshold must be in [0,1)"
            )
        if self.prune.finetune_epochs < 0:
            raise ValidationError(
                "config.prune.finetune_epochs must be non-negative"
            )
        if self.bench.repetitions < 3:
            raise ValidationError(
                "config.bench.repetitions must be at least 3"
            )
        if self.bench.max_items < 1:
            raise ValidationError(
                "config.bench.max_items must be at least 1"
            )
        if not 0.0 < self.features.bucket_width < 1.0:
            raise ValidationError(
                "config.features.bucket_width must be in (0,1)"
            )
        if self.features.outlier_margin < 0:
            raise ValidationError(
                "config.features.outlier_margin must be non-negative"
            )
        if self.model.embedding_dim < 1:
            raise ValidationError(
                "config.model.embedding_dim must be at least 1"
            )
        if self.model.beta <= 0:
            raise ValidationError("config.model.beta must be positive")

    def to_dict(self) -> dict:
        return {
            "gen": {
                **{
                    k: getattr(self.gen, k) for k in _GEN_SIMPLE_FIELDS
                },
                "seed": self.gen_seed,
            },
            "features": self.features.to_dict(),
            "model": self.model.to_dict(),
            "pairs": self.pairs.to_dict(),
            "eval_pairs": self.eval_pairs.to_dict(),
            "train": self.train.to_dict(),
            "baseline": self.baseline.to_dict(),
            "prune": self.prune.to_dict(),
            "eval": self.eval.to_dict(),
            "bench": self.bench.to_dict(),
        }


def _build_section(section: str, cls, rec: dict, allowed: tuple):
    unknown = set(rec) - set(allowed)
    if unknown:
        raise ValidationError(
            f"config.{section}.{sorted(unknown)[0]}: unknown field "
            f"(allowed: {', '.join(allowed)})"
        )
    try:
        return cls(**rec)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"config.{section}: {exc}") from exc


def _tupled(rec: dict, key: str) -> dict:
    out = dict(rec)
    if key in out and isinstance(out[key], list):
        out[key] = tuple(out[key])
    return out


def load_config(path: str | None) -> PipelineConfig:
    """Build the pipeline configuration from a JSON file, the
    environment default, or pure defaults when neither is given."""
    if path is None:
        path = os.environ.get(ENV_CONFIG) or None
    if path is None:
        cfg = PipelineConfig()
        cfg.validate()
        return cfg
    if not os.path.exists(path):
        raise ArtifactError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config {path} is not valid JSON: {exc}")
    if not isinstance(doc, dict):
        raise ValidationError("config root must be a JSON object")
    known = {
        "gen",
        "features",
        "model",
        "pairs",
        "eval_pairs",
        "train",
        "baseline",
        "prune",
        "eval",
        "bench",
    }
    unknown = set(doc) - known
    if unknown:
        raise ValidationError(
            f"config.{sorted(unknown)[0]}: unknown section "
            f"(allowed: {', '.join(sorted(known))})"
        )

    cfg = PipelineConfig()
    gen_rec = dict(doc.get("gen", {}))
    cfg.gen_seed = int(gen_rec.pop("seed", 0))
    if "fields" in gen_rec or "teacher" in gen_rec:
        raise ValidationError(
            "config.gen: field and teacher definitions are fixed; only "
            "counts and rates are configurable"
        )
    unknown = set(gen_rec) - set(_GEN_SIMPLE_FIELDS)
    if unknown:
        raise ValidationError(
            f"config.gen.{sorted(unknown)[0]}: unknown field"
        )
    cfg.gen = GenConfig(**gen_rec)

    cfg.features = _build_section(
        "features",
        FeatureSection,
        doc.get("features", {}),
        ("bucket_width", "outlier_margin"),
    )
    cfg.model = _build_section(
        "model",
        ModelSection,
        _tupled(doc.get("model", {}), "hidden"),
        ("embedding_dim", "hidden", "beta", "seed"),
    )
    pair_fields = (
        "scheme",
        "pairs_per_anchor",
        "epsilon",
        "level_boundaries",
        "seed",
    )
    cfg.pairs = _build_section(
        "pairs",
        PairConfig,
        _tupled(doc.get("pairs", {}), "level_boundaries"),
        pair_fields,
    )
    cfg.eval_pairs = _build_section(
        "eval_pairs",
        PairConfig,
        _tupled(doc.get("eval_pairs", {}), "level_boundaries"),
        pair_fields,
    )
    cfg.train = _build_section(
        "train",
        TrainConfig,
        doc.get("train", {}),
        (
            "alpha",
            "margin",
            "learning_rate",
            "epochs",
            "batch_size",
            "sparsity_weight",
            "seed",
            "momentum",
            "gate_learning_rate",
            "sparsity_warmup_epochs",
            "heldout_fraction",
            "weight_decay",
        ),
    )
    cfg.baseline = _build_section(
        "baseline",
        BaselineConfig,
        doc.get("baseline", {}),
        ("learning_rate", "epochs", "batch_size", "seed"),
    )
    cfg.prune = _build_section(
        "prune",
        PruneSection,
        doc.get("prune", {}),
        ("threshold", "finetune_epochs"),
    )
    cfg.eval = _build_section(
        "eval",
        EvalConfig,
        _tupled(doc.get("eval", {}), "recall_ns"),
        ("keep_k", "recall_ns", "role"),
    )
    cfg.bench = _build_section(
        "bench",
        BenchSection,
        doc.get("bench", {}),
        ("repetitions", "max_items"),
    )
    cfg.validate()
    return cfg
