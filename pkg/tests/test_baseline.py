"""Tests for the interaction-free linear baseline."""

import numpy as np
import pytest

from prerank.baseline import (
    BaselineConfig,
    LinearModel,
    init_linear,
    train_linear,
)
from prerank.corpus import GenConfig, generate_corpus
from prerank.dataset import discretize_corpus, fit_corpus_schema
from prerank.errors import ArtifactError, ValidationError


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(
        GenConfig(
            num_train_queries=10,
            num_eval_queries=4,
            candidates_per_query=150,
            num_random_items=1000,
            num_longtail_items=500,
        ),
        seed=21,
    )


@pytest.fixture(scope="module")
def schema(corpus):
    return fit_corpus_schema(corpus)


@pytest.fixture(scope="module")
def table(corpus, schema):
    return discretize_corpus(corpus, schema)


class TestScoring:
    def test_fresh_model_scores_zero(self, schema, table):
        model = init_linear(schema)
        assert np.all(model.score_batch(table.buckets[:50]) == 0.0)

    def test_score_is_bias_plus_gathered_weights(self, schema, table):
        model = init_linear(schema)
        rng = np.random.default_rng(0)
        model.params["bias"][0] = 0.25
        model.params["weights"][:] = rng.normal(
            0.0, 1.0, model.params["weights"].shape
        )
        row = table.buckets[7]
        expected = 0.25 + sum(
            model.params["weights"][f, row[f]]
            for f in range(model.num_fields)
        )
        assert model.score(row) == pytest.approx(expected, rel=1e-12)

    def test_batch_size_invariant(self, schema, table):
        model = init_linear(schema)
        rng = np.random.default_rng(1)
        model.params["weights"][:] = rng.normal(
            0.0, 1.0, model.params["weights"].shape
        )
        full = model.score_batch(table.buckets[:400])
        singles = np.array(
            [model.score(table.buckets[i]) for i in range(0, 400, 29)]
        )
        assert np.array_equal(full[0:400:29], singles)

    def test_multiply_count_is_zero(self, schema):
        assert init_linear(schema).multiply_count() == 0

    def test_rejects_out_of_range_buckets(self, schema):
        model = init_linear(schema)
        bad = np.full((2, model.num_fields), model.buckets_per_field)
        with pytest.raises(ValidationError):
            model.score_batch(bad)

    def test_rejects_wrong_field_count(self, schema):
        model = init_linear(schema)
        with pytest.raises(ValidationError):
            model.score_batch(np.zeros((3, model.num_fields + 1), dtype=int))


class TestTraining:
    def test_fits_teacher_well_enough_to_matter(self, table, schema):
        model, trace = train_linear(
            table, BaselineConfig(epochs=4, learning_rate=0.1), schema
        )
        assert trace[-1] < trace[0]
        assert trace[-1] < 0.2

    def test_constant_teacher_learned_exactly(self, table, schema):
        flat = DiscretizedCorpus_with_constant_teacher(table, 0.75)
        model, trace = train_linear(
            flat, BaselineConfig(epochs=30, learning_rate=0.05), schema
        )
        preds = model.score_batch(flat.buckets[:200])
        # rare buckets converge slowly; the bulk must sit on the constant
        assert abs(float(preds.mean()) - 0.75) < 5e-3
        assert np.abs(preds - 0.75).max() < 0.05
        assert trace[-1] < 1e-3

    def test_deterministic(self, table, schema):
        config = BaselineConfig(epochs=2, seed=5)
        a, trace_a = train_linear(table, config, schema)
        b, trace_b = train_linear(table, config, schema)
        assert np.array_equal(
            a.params["weights"], b.params["weights"]
        )
        assert trace_a == trace_b

    def test_seed_matters(self, table, schema):
        a, _ = train_linear(table, BaselineConfig(epochs=1, seed=0), schema)
        b, _ = train_linear(table, BaselineConfig(epochs=1, seed=1), schema)
        assert not np.array_equal(
            a.params["weights"], b.params["weights"]
        )

    def test_trains_only_on_requested_role(self, table, schema):
        # eval rows differ from train rows, so the fits must differ
        a, _ = train_linear(table, BaselineConfig(epochs=1), schema, role="train")
        b, _ = train_linear(table, BaselineConfig(epochs=1), schema, role="eval")
        assert not np.array_equal(
            a.params["weights"], b.params["weights"]
        )

    def test_unknown_role_rejected(self, table, schema):
        with pytest.raises(ValidationError, match="role"):
            train_linear(table, BaselineConfig(), schema, role="nope")

    def test_schema_mismatch_rejected(self, corpus, table):
        other = fit_corpus_schema(corpus, bucket_width=0.05)
        with pytest.raises(ValidationError, match="schema"):
            train_linear(table, BaselineConfig(), other)


def DiscretizedCorpus_with_constant_teacher(table, value):
    from prerank.dataset import DiscretizedCorpus

    return DiscretizedCorpus(
        schema_hash=table.schema_hash,
        num_fields=table.num_fields,
        query_ids=table.query_ids,
        roles=table.roles,
        classes=table.classes,
        offsets=table.offsets,
        item_ids=table.item_ids,
        buckets=table.buckets,
        teacher=np.full_like(table.teacher, value),
    )


class TestSerialization:
    def test_round_trip_bitwise(self, table, schema, tmp_path):
        model, _ = train_linear(table, BaselineConfig(epochs=1), schema)
        path = str(tmp_path / "linear.json")
        model.save(path)
        back = LinearModel.load(path)
        assert back.schema_hash == model.schema_hash
        for name in model.params:
            assert np.array_equal(back.params[name], model.params[name])

    def test_load_checks_schema_hash(self, schema, tmp_path):
        model = init_linear(schema)
        path = str(tmp_path / "linear.json")
        model.save(path)
        with pytest.raises(ArtifactError, match="schema"):
            LinearModel.load(path, expected_schema_hash="f" * 64)

    def test_wrong_model_kind_rejected(self, schema):
        rec = init_linear(schema).to_dict()
        rec["model_kind"] = "deepfm"
        with pytest.raises(ArtifactError, match="linear"):
            LinearModel.from_dict(rec)

    def test_non_finite_params_rejected(self, schema):
        rec = init_linear(schema).to_dict()
        rec["params"]["bias"] = [float("nan")]
        with pytest.raises(ValidationError, match="finite"):
            LinearModel.from_dict(rec)

    def test_copy_is_independent(self, schema):
        model = init_linear(schema)
        dup = model.copy()
        dup.params["bias"][0] = 9.0
        assert model.params["bias"][0] == 0.0
