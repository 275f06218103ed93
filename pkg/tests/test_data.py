"""Sample records, splits, expert pools, matching sets and the synthetic generator."""

import dataclasses
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import chisquare

from mmcqa import data as D
from mmcqa.data import DataError, QuestionSample, SyntheticConfig


def sample(i, ts=0, answerers=(), cats=(0,)):
    return QuestionSample(i, ("w",), i, tuple(cats), tuple(answerers), ts)


class TestRecords:
    def test_json_round_trip(self, tmp_path):
        s = QuestionSample(3, ("red", "shoe"), 9, (1, 4), (7, 8), 12345)
        D.write_samples(tmp_path / "s.jsonl", [s, sample(4)])
        back = D.read_samples(tmp_path / "s.jsonl")
        assert back[0] == s and len(back) == 2
        rec = json.loads((tmp_path / "s.jsonl").read_text().splitlines()[0])
        assert set(rec) == {"id", "tokens", "categories", "answerers", "timestamp", "feature_id"}
        assert rec["tokens"] == "red shoe"

    def test_categories_required(self):
        with pytest.raises(DataError):
            QuestionSample(0, ("a",), 0, ())

    def test_taxonomy_flatten(self, tmp_path):
        tax = D.Taxonomy([D.Category(0, "Life Sciences"), D.Category(1, "Plants & Animals", 0),
                          D.Category(2, "Cars")])
        assert tax.flatten([1]) == (0, 1)
        assert tax.flatten([2, 1]) == (0, 1, 2)
        tax.save(tmp_path / "tax.tsv")
        assert D.Taxonomy.load(tmp_path / "tax.tsv").flatten([1]) == (0, 1)
        with pytest.raises(DataError):
            tax.flatten([9])


class TestSplit:
    def test_ten(self):
        tr, va, te = D.split_dataset(list(range(10)))
        assert (len(tr), len(va), len(te)) == (8, 1, 1)

    def test_remainder_to_train(self):
        tr, va, te = D.split_dataset(list(range(1001)))
        assert (len(tr), len(va), len(te)) == (801, 100, 100)

    def test_deterministic(self):
        assert D.split_dataset(list(range(50)), seed=3) == D.split_dataset(list(range(50)), seed=3)
        assert D.split_dataset(list(range(50)), seed=3) != D.split_dataset(list(range(50)), seed=4)

    @given(st.integers(10, 500), st.integers(0, 1000))
    def test_disjoint_and_exhaustive(self, n, seed):
        parts = D.split_dataset(list(range(n)), seed=seed)
        flat = [x for p in parts for x in p]
        assert sorted(flat) == list(range(n))

    def test_too_few(self):
        with pytest.raises(DataError):
            D.split_dataset(list(range(9)))


class TestExpertPool:
    def make(self, n_answers, user=5):
        return [sample(i, ts=i, answerers=(user,)) for i in range(n_answers)]

    def test_above_threshold_included(self):
        assert D.build_expert_pool(self.make(51), (0, 1000), 50) == [5]

    def test_boundary_excluded(self):
        assert D.build_expert_pool(self.make(50), (0, 1000), 50) == []

    def test_threshold_zero(self):
        samples = [sample(0, answerers=(1, 2)), sample(1, answerers=(3,)), sample(2)]
        assert D.build_expert_pool(samples, (0, 10), 0) == [1, 2, 3]

    def test_window_respected(self):
        samples = self.make(51)
        assert D.build_expert_pool(samples, (10, 1000), 40) == [5]
        assert D.build_expert_pool(samples, (10, 1000), 41) == []

    def test_empty_window(self):
        with pytest.raises(DataError):
            D.build_expert_pool(self.make(3), (5, 5), 0)


class TestAuxDatasets:
    def test_five_samples(self):
        it, ti = D.build_aux_datasets(list(range(5)), seed=0)
        for item in it + ti:
            assert sorted(item.candidates) == [0, 1, 2, 3, 4]
            assert item.candidates[item.answer] == item.anchor

    @given(st.integers(5, 60), st.integers(0, 1000))
    def test_exactly_one_true_candidate(self, n, seed):
        it, ti = D.build_aux_datasets(list(range(n)), seed)
        assert len(it) == len(ti) == n
        for item in it + ti:
            assert len(set(item.candidates)) == 5
            assert sum(c == item.anchor for c in item.candidates) == 1
            assert item.candidates[item.answer] == item.anchor
            assert all(0 <= c < n for c in item.candidates)  # positions inside this split only

    def test_answer_position_uniform(self):
        it, ti = D.build_aux_datasets(list(range(10_000)), seed=1)
        for items in (it, ti):
            counts = np.bincount([x.answer for x in items], minlength=5)
            assert chisquare(counts).pvalue > 0.01

    def test_deterministic(self):
        assert D.build_aux_datasets(list(range(30)), 4) == D.build_aux_datasets(list(range(30)), 4)

    def test_too_small(self):
        with pytest.raises(DataError):
            D.build_aux_datasets(list(range(4)), 0)


class TestSyntheticGenerator:
    def test_bit_reproducible(self):
        cfg = SyntheticConfig(n_samples=200, seed=3)
        a, b = D.generate_synthetic(cfg), D.generate_synthetic(cfg)
        assert a.samples == b.samples
        assert a.spatial.tobytes() == b.spatial.tobytes()
        c = D.generate_synthetic(dataclasses.replace(cfg, seed=4))
        assert c.samples != a.samples

    def test_category_count_distribution(self):
        corpus = D.generate_synthetic(SyntheticConfig(n_samples=4000, seed=2))
        sizes = np.array([len(s.categories) for s in corpus.samples])
        freq = np.bincount(sizes, minlength=4)[1:] / len(sizes)
        np.testing.assert_allclose(freq, [0.15, 0.35, 0.50], atol=0.03)
        assert 2.3 <= sizes.mean() <= 2.4

    def test_mean_length(self):
        corpus = D.generate_synthetic(SyntheticConfig(n_samples=2000, seed=2))
        assert np.mean([len(s.tokens) for s in corpus.samples]) == pytest.approx(70, abs=1.0)

    def test_ambiguous_text_has_no_topic_words(self):
        corpus = D.generate_synthetic(SyntheticConfig(n_samples=300, p_text_ambiguous=1.0))
        assert not any(t.startswith("t") for s in corpus.samples for t in s.tokens)

    def test_placeholder_images_carry_no_label_information(self):
        corpus = D.generate_synthetic(SyntheticConfig(n_samples=200, p_placeholder=1.0, p_text_ambiguous=0.0))
        post = corpus.oracle.category_posterior(corpus.samples, corpus.spatial, use_text=False)
        # every row equals the prior marginal, so image-only prediction is chance
        np.testing.assert_allclose(post, np.tile(post[0], (len(post), 1)), atol=1e-12)
        np.testing.assert_allclose(post[0], 2.35 / 12, atol=1e-9)

    def test_ambiguous_text_carries_no_label_information(self):
        corpus = D.generate_synthetic(SyntheticConfig(n_samples=200, p_text_ambiguous=1.0, p_placeholder=0.0))
        post = corpus.oracle.category_posterior(corpus.samples, None, use_image=False)
        np.testing.assert_allclose(post, np.tile(post[0], (len(post), 1)), atol=1e-12)

    def test_bayes_ceiling(self):
        corpus = D.generate_synthetic(SyntheticConfig(n_samples=300, seed=7))
        full = D.bayes_top1_accuracy(corpus.oracle, corpus.samples, corpus.spatial)
        text = D.bayes_top1_accuracy(corpus.oracle, corpus.samples, None, use_image=False)
        image = D.bayes_top1_accuracy(corpus.oracle, corpus.samples, corpus.spatial, use_text=False)
        assert full >= max(text, image) - 0.02
        assert full > 0.85

    def test_posterior_marginals_valid(self):
        corpus = D.generate_synthetic(SyntheticConfig(n_samples=50, seed=1))
        post = corpus.oracle.category_posterior(corpus.samples, corpus.spatial)
        assert np.all((post >= 0) & (post <= 1 + 1e-12))
        # expected number of gold categories under the posterior stays in 1..3
        assert np.all((post.sum(axis=1) >= 1 - 1e-9) & (post.sum(axis=1) <= 3 + 1e-9))

    def test_save_and_reload(self, tmp_path):
        corpus = D.generate_synthetic(SyntheticConfig(n_samples=60, seed=1))
        paths = corpus.save(tmp_path, config_hash="abc")
        meta = json.loads(paths["meta"].read_text())
        assert meta["generator_hash"] == corpus.config.digest() and meta["seed"] == 1
        assert meta["config_hash"] == "abc"
        assert D.read_samples(paths["samples"]) == corpus.samples
        oracle = D.Oracle.load(paths["oracle"])
        np.testing.assert_array_equal(oracle.placeholder, corpus.oracle.placeholder)
        assert oracle.config == corpus.config

    @pytest.mark.parametrize("field,value", [("p_placeholder", 1.5), ("n_samples", 0), ("n_categories", 2),
                                             ("noise_std", 0.0), ("signal_regions", 49)])
    def test_invalid_config(self, field, value):
        with pytest.raises(DataError):
            D.generate_synthetic(dataclasses.replace(SyntheticConfig(n_samples=20), **{field: value}))
