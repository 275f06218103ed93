"""Shared small corpora and run settings for the unit and integration tests."""

from __future__ import annotations

import dataclasses

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mmcqa.data import SyntheticConfig, generate_synthetic
from mmcqa.encoders import ArrayFeatureStore
from mmcqa.pipeline import RunConfig, prepare_data

settings.register_profile("mmcqa", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("mmcqa")

# a corpus small enough that a full three-stage run takes a few seconds
TINY_SYNTH = SyntheticConfig(
    n_categories=6, n_samples=500, seed=11, mean_length=24, topic_pool=60, topic_words_per_category=10,
    noise_vocab=200, d_img=12, regions=6, signal_regions=2, n_objects=8, n_experts=25,
    n_casual_users=100, days=120,
)

TINY_RUN = RunConfig(
    d=12, k=8, emb_dim=8, filters=(6, 8, 8), aux_channels=6, batch_main=64, batch_aux=32, lr=3e-3,
    stage1_epochs=3, aux_epochs=2, stage2_epochs=2, stage3_epochs=2, patience=2, n_neg=10,
    pool_threshold=3, pool_window_days=120,
)


@pytest.fixture(scope="session")
def tiny_corpus():
    return generate_synthetic(TINY_SYNTH)


@pytest.fixture()
def tiny_store(tiny_corpus):
    """A fresh in-memory store per test, so read counters start at zero."""
    return ArrayFeatureStore([s.feature_id for s in tiny_corpus.samples], tiny_corpus.spatial)


@pytest.fixture()
def tiny_data(tiny_corpus, tiny_store):
    return prepare_data(tiny_corpus.samples, tiny_store, TINY_SYNTH.n_categories, TINY_RUN)


@pytest.fixture()
def tiny_run():
    return dataclasses.replace(TINY_RUN)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
