"""Stage scheduling, early stopping, checkpoints, ablation configs and determinism."""

import dataclasses
import hashlib

import numpy as np
import pytest

from mmcqa import pipeline as P
from mmcqa.models import count_params
from mmcqa.pipeline import PipelineError, RunConfig


def digest(arr):
    return hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()


def dims(data):
    return len(data.vocab), data.n_categories, int(data.store.dim), int(data.store.m)


class TestEarlyStop:
    def test_plateau_stops(self):
        d = P.early_stop([0.5, 0.6, 0.6, 0.6], 2)
        assert d.stop and d.best_epoch == 2

    def test_monotone_never_stops(self):
        hist = list(np.linspace(0.1, 0.9, 20))
        for n in range(1, 21):
            assert not P.early_stop(hist[:n], 2).stop

    def test_recovery_continues(self):
        d = P.early_stop([0.7, 0.69, 0.71], 2)
        assert not d.stop and d.best_epoch == 3

    def test_tiny_gain_is_not_improvement(self):
        d = P.early_stop([0.5, 0.50005, 0.50009], 2)
        assert d.stop and d.best_epoch == 1

    def test_empty_history(self):
        with pytest.raises(PipelineError):
            P.early_stop([], 2)

    def test_bad_patience(self):
        with pytest.raises(PipelineError):
            P.early_stop([0.1], 0)


class TestRunConfig:
    def test_unknown_variant(self):
        with pytest.raises(PipelineError, match="unknown variant"):
            RunConfig(variant="resnet")

    def test_flags_need_full_model(self):
        with pytest.raises(PipelineError, match="only apply"):
            RunConfig(variant="san-1", no_aux=True)

    def test_fusion_replacements_exclusive(self):
        with pytest.raises(PipelineError, match="at most one"):
            RunConfig(no_image_weight=True, big_fc=True)

    def test_unknown_task(self):
        with pytest.raises(PipelineError):
            RunConfig(tasks=("translation",))

    def test_digest_tracks_values(self):
        assert RunConfig().digest() == RunConfig().digest()
        assert RunConfig().digest() != RunConfig(lr=2e-3).digest()

    def test_with_seed(self):
        cfg = RunConfig().with_seed(7)
        assert cfg.seeds() == {"init_seed": 7, "data_seed": 7, "sampling_seed": 7}


class TestAblationConfigs:
    def test_nine_rows(self, tiny_run):
        rows = P.ablation_configs(dataclasses.replace(tiny_run, variant="san-1"))
        assert len(rows) == 9
        assert all(c.variant == P.FULL_MODEL for c in rows.values())
        assert rows["Full Model"].flags() == ()
        assert rows["W/O Auxiliary Tasks"].flags() == ("no_aux",)

    def test_plans(self, tiny_run, tiny_data):
        rows = P.ablation_configs(tiny_run)
        plan = {k: P.resolve(c, *dims(tiny_data)) for k, c in rows.items()}
        assert plan["Full Model"].aux_directions == ("image_to_text", "text_to_image")
        assert plan["W/O Auxiliary Tasks"].aux_directions == ()
        assert plan["W/O Image-to-Texts"].aux_directions == ("text_to_image",)
        assert plan["W/O Image Weight"].arch.fusion == "san"
        assert plan["W/O Attention"].arch.fusion == "global_weight"
        assert not plan["W/O Fine-tuning"].finetune
        assert plan["SAN Big FC"].arch.extra_fc > 0

    @pytest.mark.parametrize("label", ["SAN Big Att", "SAN Big FC"])
    def test_budget_within_two_percent(self, tiny_run, tiny_data, label):
        V, C, d_img, m = dims(tiny_data)
        cfg = P.ablation_configs(tiny_run)[label]
        full = P.resolve(tiny_run, V, C, d_img, m)
        target = count_params(full.arch, "classification", V, C, aux_text=True)
        got = count_params(P.resolve(cfg, V, C, d_img, m).arch, "classification", V, C)
        assert abs(got - target) <= 0.02 * target


class TestPrepareData:
    def test_splits_and_pool(self, tiny_data):
        assert [len(s) for s in (tiny_data.train, tiny_data.valid, tiny_data.test)] == [400, 50, 50]
        assert len(tiny_data.pool) > 0
        for split in ("train", "valid", "test"):
            n = len(tiny_data.splits[split])
            for items in tiny_data.aux[split].values():
                assert all(0 <= c < n for a in items for c in a.candidates)

    def test_vocab_from_train_only(self, tiny_corpus, tiny_store, tiny_run):
        data = P.prepare_data(tiny_corpus.samples, tiny_store, 6, tiny_run)
        train_words = {w for s in data.samples["train"] for w in s.tokens}
        specials = 3
        assert len(data.vocab) - specials <= len(train_words)


class TestRuns:
    def test_text_only_never_reads_images(self, tiny_data, tiny_store, tiny_run):
        P.run_pipeline(dataclasses.replace(tiny_run, variant="text-only"), tiny_data)
        assert tiny_store.reads == 0

    def test_deterministic(self, tiny_data, tiny_run, tmp_path):
        a = P.run_pipeline(tiny_run, tiny_data, tmp_path / "a")
        b = P.run_pipeline(tiny_run, tiny_data, tmp_path / "b")
        assert a.metrics == b.metrics
        for name in ("params.bin", "manifest.json"):
            assert (tmp_path / "a/final_classification" / name).read_bytes() == \
                (tmp_path / "b/final_classification" / name).read_bytes()

    def test_seed_changes_result(self, tiny_data, tiny_run):
        a = P.run_pipeline(dataclasses.replace(tiny_run, stage2_epochs=0, stage3_epochs=0), tiny_data)
        b = P.run_pipeline(dataclasses.replace(tiny_run, stage2_epochs=0, stage3_epochs=0, init_seed=5),
                           tiny_data)
        pa = a.models["classification"].params["cls.w"].data
        pb = b.models["classification"].params["cls.w"].data
        assert not np.array_equal(pa, pb)

    def test_stage_keys(self, tiny_data, tiny_run):
        full = P.run_pipeline(tiny_run, tiny_data)
        assert set(full.stage_metrics) == {"stage1", "stage2", "stage3"}
        assert "aux_image_to_text_acc" in full.metrics
        base = P.run_pipeline(dataclasses.replace(tiny_run, variant="san-1"), tiny_data)
        assert set(base.stage_metrics) == {"stage1"}

    def test_no_finetune_skips_stage3(self, tiny_data, tiny_run):
        res = P.run_pipeline(dataclasses.replace(tiny_run, no_finetune=True), tiny_data)
        assert "stage3" not in res.stage_metrics
        assert res.metrics["top1_hit"] == res.stage_metrics["stage2"]["top1_hit"]

    def test_zero_finetune_rate_keeps_stage2(self, tiny_data, tiny_run):
        res = P.run_pipeline(dataclasses.replace(tiny_run, finetune_lr_scale=0.0), tiny_data)
        assert res.stage_metrics["stage3"] == res.stage_metrics["stage2"]

    def test_stage3_never_below_its_start(self, tiny_data, tiny_run):
        res = P.run_pipeline(tiny_run, tiny_data)
        for s in res.stages:
            if s.stage == 3:
                assert s.best_metric >= s.history[0]


class TestStageTwoFreezing:
    def test_text_weights_unchanged(self, tiny_data, tiny_run):
        cfg = tiny_run
        plan = P.resolve(cfg, *dims(tiny_data))
        models, _ = P.train_stage1(cfg, plan, tiny_data, P.TrainLog())
        before = {t: {k: digest(v.data) for k, v in m.params.items() if k.startswith("text.")}
                  for t, m in models.items() if t != "auxiliary"}
        P.train_stage2(cfg, plan, tiny_data, models, P.TrainLog())
        for t, hashes in before.items():
            m = models[t]
            assert {k: digest(m.params[k].data) for k in hashes} == hashes
            assert all(k in m.frozen for k in m.params if k.startswith("auxtext."))
            assert m.has_aux_text

    def test_aux_text_copied_from_aux_model(self, tiny_data, tiny_run):
        plan = P.resolve(tiny_run, *dims(tiny_data))
        models, _ = P.train_stage1(tiny_run, plan, tiny_data, P.TrainLog())
        P.train_stage2(tiny_run, plan, tiny_data, models, P.TrainLog())
        aux = models["auxiliary"]
        cls = models["classification"]
        np.testing.assert_array_equal(cls.params["auxtext.emb"].data, aux.params["text.emb"].data)


class TestCheckpoint:
    @pytest.fixture()
    def run_dir(self, tiny_data, tiny_run, tmp_path):
        P.run_pipeline(dataclasses.replace(tiny_run, stage1_epochs=1, aux_epochs=1, stage2_epochs=1,
                                           stage3_epochs=1), tiny_data, tmp_path / "run", context_hash="cafe")
        return tmp_path / "run"

    def test_round_trip_byte_identical(self, run_dir, tmp_path):
        for name in ("final_classification", "final_retrieval", "stage1_auxiliary"):
            ckpt = P.load_checkpoint(run_dir / name)
            P.resave_checkpoint(ckpt, tmp_path / "again" / name)
            for f in ("params.bin", "manifest.json"):
                assert (run_dir / name / f).read_bytes() == (tmp_path / "again" / name / f).read_bytes()

    def test_hash_and_seeds_recorded(self, run_dir):
        ckpt = P.load_checkpoint(run_dir / "final_classification", expect_hash="cafe")
        assert ckpt.config_hash == "cafe" and ckpt.seeds["init_seed"] == 0
        assert ckpt.stage == 3

    def test_hash_mismatch(self, run_dir):
        with pytest.raises(PipelineError, match="expected"):
            P.load_checkpoint(run_dir / "final_classification", expect_hash="beef")

    def test_loaded_model_predicts_identically(self, run_dir, tiny_data):
        ckpt = P.load_checkpoint(run_dir / "final_classification")
        again = P.load_checkpoint(run_dir / "final_classification")
        a = P.predict_probs(ckpt.model, tiny_data.test)
        b = P.predict_probs(again.model, tiny_data.test)
        assert a.tobytes() == b.tobytes()


class TestWarmStart:
    def test_copies_matching_encoders(self, tiny_data, tiny_run):
        plan = P.resolve(tiny_run, *dims(tiny_data))
        cls = P.build_model(plan, "classification", tiny_data, tiny_run)
        aux = P.build_model(plan, "auxiliary", tiny_data, tiny_run)
        copied = P.warm_start(aux, cls)
        assert "text.emb" in copied and not any(k.startswith(("cls.", "aux.")) for k in copied)
        np.testing.assert_array_equal(aux.params["text.emb"].data, cls.params["text.emb"].data)

    @pytest.mark.parametrize("flag", [True, False])
    def test_retrieval_flag(self, tiny_data, tiny_run, monkeypatch, flag):
        calls = []
        real = P.warm_start
        monkeypatch.setattr(P, "warm_start", lambda m, s, *a: calls.append((m.task, s.task)) or real(m, s, *a))
        cfg = dataclasses.replace(tiny_run, variant="text-only", stage1_epochs=1, retrieval_warm_start=flag)
        plan = P.resolve(cfg, *dims(tiny_data))
        P.train_stage1(cfg, plan, tiny_data, P.TrainLog())
        assert (("retrieval", "classification") in calls) == flag


class TestDivergence:
    def test_non_finite_loss_raises(self, tiny_data, tiny_run):
        from mmcqa import tensor as T
        plan = P.resolve(tiny_run, *dims(tiny_data))
        model = P.build_model(plan, "classification", tiny_data, tiny_run)
        opt = T.OptimizerState(lr=1e-3)
        with pytest.raises(P.DivergenceError, match="non-finite"):
            P._step(model, lambda: T.Tensor(np.array(np.nan)), opt, 1e-3, "here")
