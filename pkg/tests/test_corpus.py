"""Tests for synthetic corpus generation and the ranking teacher."""

import math

import numpy as np
import pytest
from scipy.stats import skew

from prerank.corpus import (
    CandidateSet,
    Corpus,
    GenConfig,
    Item,
    Query,
    TeacherParams,
    generate_corpus,
    score_candidates,
    teacher_score,
)
from prerank.errors import ValidationError


def small_config(**overrides):
    defaults = dict(
        num_train_queries=20,
        num_eval_queries=10,
        candidates_per_query=200,
        num_random_items=1500,
        num_longtail_items=1000,
    )
    defaults.update(overrides)
    return GenConfig(**defaults)


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(small_config(), seed=7)


class TestDeterminism:
    def test_regeneration_is_byte_identical(self, tmp_path, corpus):
        path_a = tmp_path / "a.jsonl"
        path_b = tmp_path / "b.jsonl"
        corpus.save(str(path_a))
        generate_corpus(small_config(), seed=7).save(str(path_b))
        assert path_a.read_bytes() == path_b.read_bytes()

    def test_different_seed_differs(self, corpus):
        other = generate_corpus(small_config(), seed=8)
        assert not np.array_equal(
            corpus.blocks[0].teacher_scores, other.blocks[0].teacher_scores
        )

    def test_query_substreams_are_isolated(self):
        # shrinking the eval tail must not disturb earlier queries
        a = generate_corpus(small_config(num_eval_queries=10), seed=3)
        b = generate_corpus(small_config(num_eval_queries=5), seed=3)
        for ba, bb in zip(a.blocks[:25], b.blocks[:25]):
            assert np.array_equal(ba.item_ids, bb.item_ids)
            assert np.array_equal(
                ba.item_values, bb.item_values, equal_nan=True
            )
            assert np.array_equal(ba.teacher_scores, bb.teacher_scores)

    def test_round_trip(self, tmp_path, corpus):
        path = tmp_path / "c.jsonl"
        corpus.save(str(path))
        loaded = Corpus.load(str(path))
        assert len(loaded.blocks) == len(corpus.blocks)
        for ba, bb in zip(corpus.blocks, loaded.blocks):
            assert ba.query_id == bb.query_id
            assert ba.role == bb.role
            assert np.array_equal(
                corpus.block_matrix(ba), loaded.block_matrix(bb), equal_nan=True
            )


class TestCorpusShape:
    def test_block_counts_and_sizes(self, corpus):
        assert len(corpus.blocks) == 30
        for b in corpus.blocks:
            assert b.size == 200
            assert len(set(b.item_ids.tolist())) == 200

    def test_roles_split_train_then_eval(self, corpus):
        roles = [b.role for b in corpus.blocks]
        assert roles[:20] == ["train"] * 20
        assert roles[20:] == ["eval"] * 10

    def test_popularity_classes_partition(self, corpus):
        classes = {b.popularity_class for b in corpus.blocks}
        assert classes == {"random", "longtail"}
        n_long = sum(b.popularity_class == "longtail" for b in corpus.blocks)
        assert n_long == 15

    def test_longtail_queries_use_rare_pool(self, corpus):
        cfg = corpus.config
        for b in corpus.blocks:
            if b.popularity_class == "longtail":
                assert b.item_ids.min() >= cfg.num_random_items
            else:
                assert b.item_ids.max() < cfg.num_random_items

    def test_block_matrix_alignment(self, corpus):
        block = corpus.blocks[0]
        m = corpus.block_matrix(block)
        assert m.shape == (200, 18)
        groups = corpus.field_groups()
        for col, g in enumerate(groups):
            if g == "query":
                column = m[:, col]
                # query value broadcast: one distinct value per block
                finite = column[~np.isnan(column)]
                if finite.size:
                    assert np.unique(finite).size == 1


class TestMissingAndOutliers:
    def test_zero_rates_mean_clean_corpus(self):
        c = generate_corpus(
            small_config(missing_rate=0.0, outlier_rate=0.0), seed=5
        )
        for b in c.blocks:
            m = c.block_matrix(b)
            assert not np.isnan(m).any()

    def test_missing_fraction_concentrates(self):
        # count over >= 1e6 stored values at missing_rate 0.1
        cfg = small_config(
            num_train_queries=90,
            num_eval_queries=10,
            candidates_per_query=1000,
            num_random_items=2000,
            num_longtail_items=1200,
            missing_rate=0.1,
        )
        c = generate_corpus(cfg, seed=11)
        total = 0
        missing = 0
        for b in c.blocks:
            for arr in (b.item_values, b.cross_values, b.query_values):
                total += arr.size
                missing += int(np.isnan(arr).sum())
        assert total >= 1_000_000
        assert 0.09 <= missing / total <= 0.11

    def test_outliers_sit_far_outside_range(self, corpus):
        cfg = corpus.config
        specs = [s for s in cfg.fields if s.group == "item"]
        hits = 0
        for b in corpus.blocks:
            for col, spec in enumerate(specs):
                vals = b.item_values[:, col]
                big = vals[~np.isnan(vals)] > 5 * spec.nominal_max
                hits += int(big.sum())
        # outlier_rate 0.002 over 30*200*7 values: expect around 8
        assert hits > 0


@pytest.fixture(scope="module")
def wide():
    cfg = GenConfig(
        num_train_queries=65,
        num_eval_queries=45,
        candidates_per_query=1000,
        num_random_items=2500,
        num_longtail_items=1500,
        missing_rate=0.02,
        outlier_rate=0.001,
    )
    return generate_corpus(cfg, seed=19)


class TestDistributionShapes:
    @staticmethod
    def column_values(corpus, name):
        idx = corpus.field_names().index(name)
        cols = []
        for b in corpus.blocks:
            cols.append(corpus.block_matrix(b)[:, idx])
        vals = np.concatenate(cols)
        return vals[~np.isnan(vals)]

    def test_uniform_fields_pass_decile_check(self, wide):
        cfg = wide.config
        for spec in cfg.fields:
            if spec.kind != "uniform" or spec.group == "query":
                continue
            vals = self.column_values(wide, spec.name)
            clean = vals[vals <= spec.scale]  # injected outliers excluded
            assert clean.size >= 100_000
            edges = np.linspace(0.0, spec.scale, 11)
            counts, _ = np.histogram(clean, bins=edges)
            frac = counts / clean.size
            assert frac.min() >= 0.08, spec.name
            assert frac.max() <= 0.12, spec.name

    def test_query_uniform_fields_decile_check(self):
        # query fields yield one stored value per query, so uniformity is
        # checked on a many-query corpus
        cfg = GenConfig(
            num_train_queries=1500,
            num_eval_queries=1500,
            candidates_per_query=2,
            num_random_items=50,
            num_longtail_items=40,
            missing_rate=0.0,
            outlier_rate=0.0,
        )
        c = generate_corpus(cfg, seed=23)
        for spec in cfg.fields:
            if spec.group != "query" or spec.kind != "uniform":
                continue
            idx = [s.name for s in cfg.fields if s.group == "query"].index(
                spec.name
            )
            vals = np.asarray([b.query_values[idx] for b in c.blocks])
            edges = np.linspace(0.0, spec.scale, 11)
            counts, _ = np.histogram(vals, bins=edges)
            frac = counts / vals.size
            assert frac.min() >= 0.08, spec.name
            assert frac.max() <= 0.12, spec.name

    def test_longtail_fields_are_skewed(self, wide):
        for spec in wide.config.fields:
            if spec.kind != "longtail" or spec.group == "query":
                continue
            vals = self.column_values(wide, spec.name)
            assert skew(vals) > 1.0, spec.name


class TestTeacher:
    def test_same_pair_scores_identically(self, corpus):
        q = Query(0, "random", corpus.blocks[0].query_latent)
        item = Item(5, corpus.item_latents[5])
        s1 = teacher_score(corpus.config.teacher, q, item)
        s2 = teacher_score(corpus.config.teacher, q, item)
        assert s1 == s2

    def test_scores_lie_in_unit_interval(self, corpus):
        for b in corpus.blocks:
            assert b.teacher_scores.min() >= 0.0
            assert b.teacher_scores.max() <= 1.0

    def test_stored_scores_match_teacher(self, corpus):
        b = corpus.blocks[3]
        recomputed = corpus.config.teacher.scores(
            b.query_latent, corpus.item_latents[b.item_ids]
        )
        assert np.array_equal(b.teacher_scores, recomputed)

    def test_latent_oracle_recovers_ordering(self, corpus):
        # regression on the teacher's own basis functions must reproduce
        # the ordering essentially perfectly
        rows = []
        logits = []
        for b in corpus.blocks:
            u = b.query_latent
            v = corpus.item_latents[b.item_ids]
            outer = (u[None, :, None] * v[:, None, :]).reshape(len(v), -1)
            triple = (u[0] * v[:, 0] * v[:, 1])[:, None]
            rows.append(
                np.hstack(
                    [
                        np.ones((len(v), 1)),
                        np.tile(u, (len(v), 1)),
                        v,
                        outer,
                        triple,
                    ]
                )
            )
            s = np.clip(b.teacher_scores, 1e-9, 1 - 1e-9)
            logits.append(np.log(s / (1 - s)))
        design = np.vstack(rows)
        target = np.concatenate(logits)
        coef, *_ = np.linalg.lstsq(design, target, rcond=None)
        pred = design @ coef
        rng = np.random.default_rng(3)
        correct = 0
        trials = 4000
        n = len(target)
        i = rng.integers(0, n, trials)
        j = rng.integers(0, n, trials)
        valid = target[i] != target[j]
        correct = np.sign(pred[i] - pred[j]) == np.sign(target[i] - target[j])
        acc = correct[valid].mean()
        assert acc > 0.99

    def test_interactions_beat_linear_features(self, corpus):
        # fit two regressions on latent features: with and without product
        # terms; the interaction model must win held-out pairwise accuracy
        train, heldout = corpus.blocks[:20], corpus.blocks[20:]

        def design(blocks, with_products):
            rows, targets = [], []
            for b in blocks:
                u = b.query_latent
                v = corpus.item_latents[b.item_ids]
                cols = [np.ones((len(v), 1)), np.tile(u, (len(v), 1)), v]
                if with_products:
                    outer = (u[None, :, None] * v[:, None, :]).reshape(
                        len(v), -1
                    )
                    cols.append(outer)
                rows.append(np.hstack(cols))
                targets.append(b.teacher_scores)
            return np.vstack(rows), np.concatenate(targets)

        def heldout_accuracy(with_products):
            X, y = design(train, with_products)
            coef, *_ = np.linalg.lstsq(X, y, rcond=None)
            Xh, yh = design(heldout, with_products)
            pred = Xh @ coef
            rng = np.random.default_rng(5)
            i = rng.integers(0, len(yh), 6000)
            j = rng.integers(0, len(yh), 6000)
            valid = yh[i] != yh[j]
            good = np.sign(pred[i] - pred[j]) == np.sign(yh[i] - yh[j])
            return good[valid].mean()

        assert heldout_accuracy(True) > heldout_accuracy(False)


class TestScoreCandidates:
    def test_order_preserved(self, corpus):
        block = corpus.blocks[0]
        ids = tuple(int(i) for i in block.item_ids[:3])
        cset = CandidateSet(query_id=block.query_id, item_ids=ids)
        scored = score_candidates(corpus, cset)
        assert tuple(i for i, _ in scored.entries) == ids

    def test_matches_single_scores(self, corpus):
        block = corpus.blocks[1]
        ids = tuple(int(i) for i in block.item_ids[:5])
        cset = CandidateSet(query_id=block.query_id, item_ids=ids)
        scored = score_candidates(corpus, cset)
        q = Query(block.query_id, block.popularity_class, block.query_latent)
        for item_id, s in scored.entries:
            item = Item(item_id, corpus.item_latents[item_id])
            assert s == teacher_score(corpus.config.teacher, q, item)

    def test_empty_set_rejected(self):
        with pytest.raises(ValidationError):
            CandidateSet(query_id=0, item_ids=())

    def test_duplicate_ids_rejected(self):
        with pytest.raises(ValidationError):
            CandidateSet(query_id=0, item_ids=(1, 1))

    def test_unknown_item_rejected(self, corpus):
        cset = CandidateSet(query_id=0, item_ids=(10**7,))
        with pytest.raises(ValidationError):
            score_candidates(corpus, cset)

    def test_unknown_query_rejected(self, corpus):
        cset = CandidateSet(query_id=10**6, item_ids=(1, 2))
        with pytest.raises(ValidationError):
            score_candidates(corpus, cset)


class TestConfigValidation:
    def test_bad_rates_rejected(self):
        for kwargs in (
            {"missing_rate": -0.1},
            {"missing_rate": 1.0},
            {"outlier_rate": 1.2},
            {"missing_rate": 0.6, "outlier_rate": 0.5},
        ):
            with pytest.raises(ValidationError):
                generate_corpus(small_config(**kwargs), seed=1)

    def test_tiny_candidate_set_rejected(self):
        with pytest.raises(ValidationError):
            generate_corpus(small_config(candidates_per_query=1), seed=1)

    def test_pool_smaller_than_fanout_rejected(self):
        with pytest.raises(ValidationError):
            generate_corpus(
                small_config(num_longtail_items=100, candidates_per_query=200),
                seed=1,
            )

    def test_config_round_trips(self):
        cfg = small_config()
        again = GenConfig.from_dict(cfg.to_dict())
        assert again == cfg
