"""Tests for gate-driven structural pruning."""

import numpy as np
import pytest

from prerank.corpus import GenConfig, generate_corpus
from prerank.dataset import discretize_corpus, fit_corpus_schema
from prerank.errors import ValidationError
from prerank.model import init_model, polarize
from prerank.pairs import PairConfig, build_pairs
from prerank.prune import (
    finetune_after_prune,
    gate_histogram,
    harden,
    prune,
)
from prerank.train import TrainConfig


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(
        GenConfig(
            num_train_queries=8,
            num_eval_queries=4,
            candidates_per_query=120,
            num_random_items=800,
            num_longtail_items=400,
        ),
        seed=9,
    )


@pytest.fixture(scope="module")
def schema(corpus):
    return fit_corpus_schema(corpus)


@pytest.fixture(scope="module")
def table(corpus, schema):
    return discretize_corpus(corpus, schema)


@pytest.fixture(scope="module")
def mixed_model(schema):
    """Model with a seeded spread of open, closed, and borderline gates."""
    model = init_model(schema, seed=4)
    rng = np.random.default_rng(14)
    raw_pairs = rng.uniform(0.0, 1.2, size=model.params["fm_gate"].shape)
    raw_fields = rng.uniform(0.0, 1.2, size=model.params["deep_gate"].shape)
    model.params["fm_gate"] = raw_pairs
    model.params["deep_gate"] = np.maximum(raw_fields, 0.25)
    model.params["linear"] = rng.normal(0.0, 0.3, model.params["linear"].shape)
    return model


@pytest.fixture(scope="module")
def audit(table):
    return table.buckets[:2000]


class TestGateHistogram:
    def test_sorted_ascending_with_stable_ids(self, mixed_model):
        hist = gate_histogram(mixed_model)
        values = [v for _, v in hist]
        assert values == sorted(values)
        assert len(hist) == mixed_model.num_gates
        assert sorted(i for i, _ in hist) == list(
            range(mixed_model.num_gates)
        )

    def test_fresh_model_is_uniformly_open(self, schema):
        model = init_model(schema, seed=0)
        hist = gate_histogram(model)
        expected = 1.0 / (1.0 + model.beta)
        assert all(v == pytest.approx(expected) for _, v in hist)
        # ties broken by ascending gate id
        assert [i for i, _ in hist] == list(range(model.num_gates))

    def test_hardened_model_reads_zero_or_one(self, mixed_model):
        pruned, _ = prune(mixed_model, 0.3)
        hist = gate_histogram(pruned)
        assert set(v for _, v in hist) <= {0.0, 1.0}


class TestPrune:
    def test_report_counts_match_gates_below_threshold(
        self, mixed_model, audit
    ):
        tau = 0.3
        pruned, report = prune(mixed_model, tau, audit_buckets=audit)
        pair_g = mixed_model.pair_gate_values()
        deep_g = mixed_model.deep_gate_values()
        assert report.pairs_removed == int((pair_g < tau).sum())
        assert report.fields_removed == int((deep_g < tau).sum())
        assert report.pairs_total == len(pair_g)
        assert report.fields_total == len(deep_g)
        assert report.audit_items == len(audit)
        assert report.pairs_removed > 0
        assert np.array_equal(pruned.pair_mask, pair_g >= tau)

    def test_w1_rows_shrink_with_fields(self, mixed_model, audit):
        pruned, report = prune(mixed_model, 0.3, audit_buckets=audit)
        kept_fields = report.fields_total - report.fields_removed
        k = mixed_model.embedding_dim
        assert pruned.params["W1"].shape == (
            kept_fields * k,
            mixed_model.params["W1"].shape[1],
        )
        assert len(pruned.field_slots) == kept_fields

    def test_multiply_count_drops(self, mixed_model, audit):
        _, report = prune(mixed_model, 0.3, audit_buckets=audit)
        assert report.multiply_count_after < report.multiply_count_before

    def test_max_delta_is_observed_worst_case(self, mixed_model, audit):
        pruned, report = prune(mixed_model, 0.3, audit_buckets=audit)
        before = mixed_model.score_batch(audit)
        after = pruned.score_batch(audit)
        assert report.max_score_delta == float(
            np.abs(after - before).max()
        )

    def test_threshold_zero_equals_hardening(self, mixed_model, audit):
        pruned, report = prune(mixed_model, 0.0, audit_buckets=audit)
        hard = harden(mixed_model)
        assert report.pairs_removed == 0
        assert report.fields_removed == 0
        a = pruned.score_batch(audit)
        b = hard.score_batch(audit)
        assert np.array_equal(a, b)

    def test_idempotent(self, mixed_model, audit):
        # counts are cumulative against each call's input model, so a
        # second pass reports the same removals but changes nothing
        once, first = prune(mixed_model, 0.3, audit_buckets=audit)
        twice, report = prune(once, 0.3, audit_buckets=audit)
        assert report.pairs_removed == first.pairs_removed
        assert report.fields_removed == first.fields_removed
        assert report.multiply_count_before == first.multiply_count_after
        assert report.multiply_count_after == first.multiply_count_after
        assert report.max_score_delta == 0.0
        assert np.array_equal(
            once.score_batch(audit), twice.score_batch(audit)
        )

    def test_dropped_pair_term_accounts_for_exact_difference(
        self, schema, audit
    ):
        # prune exactly one pair gate; against the hardened original the
        # score difference must equal that pair's FM term
        model = init_model(schema, seed=6)
        rng = np.random.default_rng(20)
        model.params["emb"] = rng.normal(0.0, 0.4, model.params["emb"].shape)
        model.params["fm_gate"][0] = 0.001
        pruned, report = prune(model, 0.1, audit_buckets=audit)
        assert report.pairs_removed == 1
        hard = harden(model)
        delta = hard.score_batch(audit) - pruned.score_batch(audit)
        i, j = hard.pairs[0]
        emb = hard.params["emb"]
        term = np.array(
            [
                float(
                    emb[i, audit[r, i]] @ emb[j, audit[r, j]]
                )
                for r in range(25)
            ]
        )
        np.testing.assert_allclose(delta[:25], term, rtol=1e-10, atol=1e-12)

    def test_refuses_to_remove_every_field(self, schema):
        model = init_model(schema, seed=0)
        model.params["deep_gate"][:] = 0.0
        with pytest.raises(ValidationError, match="every field"):
            prune(model, 0.5)

    def test_threshold_range_validated(self, mixed_model):
        with pytest.raises(ValidationError):
            prune(mixed_model, 1.0)
        with pytest.raises(ValidationError):
            prune(mixed_model, -0.1)

    def test_audit_needs_enough_items(self, mixed_model, table):
        with pytest.raises(ValidationError, match="1000"):
            prune(mixed_model, 0.3, audit_buckets=table.buckets[:10])

    def test_default_audit_is_synthetic_and_deterministic(
        self, mixed_model
    ):
        _, a = prune(mixed_model, 0.3)
        _, b = prune(mixed_model, 0.3)
        assert a.audit_items >= 1000
        assert a.max_score_delta == b.max_score_delta

    def test_input_model_untouched(self, mixed_model, audit):
        before_w1 = mixed_model.params["W1"].copy()
        before_mask = mixed_model.pair_mask.copy()
        prune(mixed_model, 0.3, audit_buckets=audit)
        assert np.array_equal(mixed_model.params["W1"], before_w1)
        assert np.array_equal(mixed_model.pair_mask, before_mask)
        assert not mixed_model.hardened

    def test_soft_scores_near_pruned_when_gates_polarized(
        self, schema, audit
    ):
        # fully polarized raw gates: hardening moves nothing but the
        # 1/(1+beta) scale on surviving terms
        model = init_model(schema, seed=8)
        model.params["fm_gate"][:] = 40.0
        model.params["deep_gate"][:] = 40.0
        pruned, report = prune(model, 0.5, audit_buckets=audit)
        g = float(polarize(np.array([40.0]), model.beta)[0])
        assert g > 1.0 - 1e-3
        assert report.max_score_delta < 1e-2


class TestFinetune:
    def test_requires_hardened_model(self, mixed_model, table, corpus):
        pairs = build_pairs(
            corpus, PairConfig(scheme="random", pairs_per_anchor=1, seed=0)
        )
        with pytest.raises(ValidationError, match="hardened"):
            finetune_after_prune(mixed_model, pairs, table)

    def test_default_single_epoch_runs(self, mixed_model, table, corpus):
        pairs = build_pairs(
            corpus, PairConfig(scheme="random", pairs_per_anchor=1, seed=0)
        )
        pruned, _ = prune(mixed_model, 0.3, audit_buckets=table.buckets)
        result = finetune_after_prune(pruned, pairs, table)
        assert len(result.trace) == 1
        assert result.model.hardened

    def test_masks_cannot_reopen(self, mixed_model, table, corpus):
        pairs = build_pairs(
            corpus, PairConfig(scheme="random", pairs_per_anchor=2, seed=0)
        )
        pruned, _ = prune(mixed_model, 0.3, audit_buckets=table.buckets)
        result = finetune_after_prune(
            pruned, pairs, table, TrainConfig(epochs=2)
        )
        assert np.array_equal(result.model.pair_mask, pruned.pair_mask)
        assert np.array_equal(result.model.field_mask, pruned.field_mask)
        assert np.array_equal(
            result.model.params["fm_gate"], pruned.params["fm_gate"]
        )

    def test_zero_epochs_leaves_model_unchanged(
        self, mixed_model, table, corpus
    ):
        pairs = build_pairs(
            corpus, PairConfig(scheme="random", pairs_per_anchor=1, seed=0)
        )
        pruned, _ = prune(mixed_model, 0.3, audit_buckets=table.buckets)
        result = finetune_after_prune(
            pruned, pairs, table, TrainConfig(epochs=0)
        )
        for name in pruned.params:
            assert np.array_equal(
                result.model.params[name], pruned.params[name]
            )

    def test_recovery_reduces_hinge(self, mixed_model, table, corpus):
        pairs = build_pairs(
            corpus, PairConfig(scheme="random", pairs_per_anchor=2, seed=1)
        )
        pruned, _ = prune(mixed_model, 0.3, audit_buckets=table.buckets)
        config = TrainConfig(
            epochs=3, alpha=1.0, learning_rate=0.01, sparsity_weight=0.0
        )
        result = finetune_after_prune(pruned, pairs, table, config)
        assert result.trace[-1].pair_loss < result.trace[0].pair_loss
