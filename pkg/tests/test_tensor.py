"""Tensor core: primitives, reverse-mode gradients, tape replay, clipping and AdamW."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mmcqa import encoders, fusion, heads
from mmcqa import tensor as T
from mmcqa.tensor import OptimizerState, Tape, Tensor, TensorError

finite = st.floats(-50, 50, allow_nan=False, width=32)


def grads_of(fn, *arrays_, dtype=np.float64):
    leaves = [Tensor(np.asarray(a, dtype=dtype), requires_grad=True) for a in arrays_]
    with Tape() as tape:
        out = fn(*leaves)
    g = T.backward(tape, out)
    return [g[t] for t in leaves]


class TestTensor:
    def test_integer_input_promoted_to_float(self):
        t = Tensor([1, 2, 3])
        assert t.dtype == T.DEFAULT_DTYPE

    def test_validity_check_flags_nan(self):
        assert Tensor([1.0, 2.0]).is_finite()
        assert not Tensor([1.0, np.nan]).is_finite()
        assert not Tensor([np.inf]).is_finite()

    def test_shape_and_size(self):
        t = Tensor(np.zeros((2, 3)))
        assert t.shape == (2, 3) and t.size == 6 and t.ndim == 2


class TestBackward:
    def test_sum_gives_ones(self):
        (g,) = grads_of(lambda x: T.sum_(x), [1.0, -2.0, 5.0])
        np.testing.assert_array_equal(g, [1.0, 1.0, 1.0])

    def test_sum_of_squares(self):
        (g,) = grads_of(lambda x: T.sum_(x * x), [1.0, 2.0, 3.0])
        np.testing.assert_allclose(g, [2.0, 4.0, 6.0])

    def test_non_participating_leaf_gets_zero(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = Tensor([3.0, 4.0], requires_grad=True)
        with Tape() as tape:
            out = T.sum_(x * 2.0)
        g = T.backward(tape, out, [x, y])
        np.testing.assert_array_equal(g[y], [0.0, 0.0])

    def test_broadcast_add_sums_over_rows(self):
        # a vector added to every row collects the gradient of each row
        _, gb = grads_of(lambda a, b: T.sum_(T.add(a, b)), np.ones((4, 3)), np.zeros(3))
        np.testing.assert_array_equal(gb, [4.0, 4.0, 4.0])

    def test_non_scalar_loss_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            out = x * 2.0
        with pytest.raises(TensorError, match="scalar"):
            T.backward(tape, out)

    def test_loss_not_on_tape_rejected(self):
        x = Tensor([1.0], requires_grad=True)
        with Tape():
            out = T.sum_(x)
        with Tape() as other:
            pass
        with pytest.raises(TensorError, match="tape"):
            T.backward(other, out)

    def test_padding_row_gets_no_gradient(self):
        ids = np.array([[0, 1, 0, 2]])
        (g,) = grads_of(lambda w: T.sum_(T.embedding(w, ids)), np.ones((3, 2)))
        np.testing.assert_array_equal(g[0], [0.0, 0.0])
        np.testing.assert_array_equal(g[1], [1.0, 1.0])

    def test_aux_output_bias_gradient_is_zero(self):
        # the bias shifts all five candidate scores equally, which softmax ignores
        rng = np.random.default_rng(3)
        p = heads.init_aux_head(rng, 6, 4)
        joint = Tensor(rng.normal(size=(3, 5, 6)).astype(np.float32))
        with Tape() as tape:
            loss = heads.aux_loss(joint, np.array([0, 3, 4]), p)
        g = T.backward(tape, loss, [p["aux.conv2.b"], p["aux.conv1.w"]])
        assert abs(float(g[p["aux.conv2.b"]])) < 1e-6
        assert np.abs(g[p["aux.conv1.w"]]).max() > 1e-4


class TestPrimitiveValues:
    def test_softmax_stable_for_large_logits(self):
        out = T.softmax(Tensor([1000.0, 1000.0, -1000.0], dtype=np.float64)).data
        np.testing.assert_allclose(out, [0.5, 0.5, 0.0], atol=1e-12)

    def test_sigmoid_tanh_clamped(self):
        assert np.isfinite(T.sigmoid(Tensor([-1e4, 1e4])).data).all()
        np.testing.assert_allclose(T.tanh(Tensor([1e4])).data, [1.0])

    def test_masked_softmax_zero_on_masked(self):
        mask = np.array([[True, False, True]])
        out = T.softmax(Tensor([[1.0, 5.0, 1.0]]), mask=mask).data
        np.testing.assert_allclose(out, [[0.5, 0.0, 0.5]], atol=1e-7)

    def test_log_softmax_matches_log_of_softmax(self, rng):
        x = Tensor(rng.normal(size=(4, 6)), dtype=np.float64)
        np.testing.assert_allclose(T.log_softmax(x).data, np.log(T.softmax(x).data), atol=1e-12)

    def test_conv1d_width1_is_matmul(self, rng):
        x = rng.normal(size=(2, 5, 3))
        w = rng.normal(size=(3, 4))
        b = rng.normal(size=4)
        out = T.conv1d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64), Tensor(b, dtype=np.float64), 1)
        np.testing.assert_allclose(out.data, x @ w + b, atol=1e-12)

    def test_masked_max_ignores_masked_rows(self):
        x = Tensor([[[1.0], [9.0], [2.0]]])
        out = T.max_over(x, axis=1, mask=np.array([[[True], [False], [True]]]))
        np.testing.assert_array_equal(out.data, [[2.0]])

    def test_add_shape_mismatch(self):
        with pytest.raises(TensorError):
            T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros(4)))

    @given(arrays(np.float64, (3, 4), elements=finite))
    def test_softmax_rows_sum_to_one(self, x):
        s = T.softmax(Tensor(x)).data
        assert np.all(s >= 0)
        np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-12)


class TestTapeReplay:
    def test_replay_is_bit_exact(self, rng):
        w = Tensor(rng.normal(size=(4, 3)).astype(np.float32), requires_grad=True)
        x = Tensor(rng.normal(size=(5, 4)).astype(np.float32))
        with Tape() as tape:
            out = T.sum_(T.softmax(T.tanh(x @ w), axis=-1) * 3.0)
        got = tape.replay()
        assert got[id(out)].tobytes() == out.data.tobytes()

    def test_replay_with_new_leaf_values(self, rng):
        w = Tensor(rng.normal(size=(3,)), requires_grad=True, dtype=np.float64)
        with Tape() as tape:
            out = T.sum_(w * w)
        got = tape.replay({w: np.array([1.0, 2.0, 3.0])})
        assert float(got[id(out)]) == 14.0

    def test_records_in_topological_order(self, rng):
        w = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
        with Tape() as tape:
            T.sum_(T.tanh(w @ w) + w)
        seen = set()
        for rec in tape.records:
            for x in rec.inputs:
                assert id(x) in seen or not tape.produced(x)
            seen.add(id(rec.output))


class TestGradCheck:
    def test_tanh_at_zero(self):
        rep = T.grad_check(lambda ts: T.sum_(T.tanh(ts[0])), [np.zeros(1)])
        e = rep.entries[0]
        assert e.analytic == pytest.approx(1.0)
        assert e.numeric == pytest.approx(1.0, abs=1e-9)
        assert rep.max_rel_error < 1e-9

    def test_softmax_pick_first(self):
        (g,) = grads_of(lambda x: T.sum_(T.take(T.softmax(x), np.array([0]), axis=0)), [0.0, 0.0])
        np.testing.assert_allclose(g, [0.25, -0.25])

    def test_non_scalar_rejected(self):
        with pytest.raises(TensorError):
            T.grad_check(lambda ts: ts[0] * 2.0, [np.ones(2)])

    def test_bad_epsilon(self):
        with pytest.raises(TensorError):
            T.grad_check(lambda ts: T.sum_(ts[0]), [np.ones(2)], epsilon=0.0)

    def test_detects_wrong_gradient(self):
        # a deliberately broken backward must be reported
        def bad_square(a):
            return T._op("bad", lambda x: x * x, lambda g, x, out: (g * x,), [a])

        rep = T.grad_check(lambda ts: T.sum_(bad_square(ts[0])), [np.array([1.0, 2.0])])
        assert rep.max_rel_error > 0.4

    def test_san_attend_fuse_float32(self):
        rng = np.random.default_rng(4)
        d, k, m = 4, 3, 4
        params = {n: p.data.astype(np.float64) for n, p in fusion.init_fusion(rng, "san", d, k, m).items()}
        names = list(params) + ["v_sp", "v_T"]
        inputs = list(params.values()) + [np.tanh(rng.normal(size=(2, m, d))), np.tanh(rng.normal(size=(2, d)))]

        def f(ts):
            p = dict(zip(names, ts))
            _, v = fusion.san_attend(p["v_sp"], p["v_T"], p)
            return T.sum_(fusion.joint_embed(p["v_T"], v))

        rep = T.grad_check_dtypes(f, inputs, ("float32",), epsilon=1e-3, names=names, order=4)["float32"]
        assert rep.max_rel_error < 1e-3

    def test_full_fusion_with_bce(self):
        """Text CNN -> region projection -> global-weight attention -> classifier -> BCE, 5 tokens, 4 regions."""
        rng = np.random.default_rng(8)
        d, m, d_img, C = 4, 4, 3, 3
        text = {k: v.data.astype(np.float64) for k, v in encoders.init_text_encoder(rng, 9, 3, (2, 2, 2), d).items()}
        text["text.emb"] = text["text.emb"][1:]  # the PAD row is a frozen constant, not an input
        img = {k: v.data.astype(np.float64) for k, v in encoders.init_image_projector(rng, d_img, d).items()}
        fuse = {k: v.data.astype(np.float64) + rng.normal(0, 0.2, v.shape)
                for k, v in fusion.init_fusion(rng, "global_weight_attention", d, 3, m).items()}
        cls = {k: v.data.astype(np.float64) for k, v in heads.init_classifier(rng, 2 * d, C).items()}
        ids = np.array([[3, 1, 7, 2, 5, 0]])
        lengths = np.array([5])
        spatial = rng.normal(size=(1, m, d_img))
        gold = heads.multi_hot([[0, 2]], C)
        params = text | img | fuse | cls
        names = list(params)

        def f(ts):
            p = dict(zip(names, ts))
            p["text.emb"] = T.concat([Tensor(np.zeros((1, 3), p["text.emb"].dtype)), p["text.emb"]], axis=0)
            v_T = encoders.text_cnn_encode(ids, lengths, p)
            v_sp = encoders.project_rows(spatial, p)
            out = fusion.global_weight_attention_fuse(v_sp, v_T, p)
            return heads.bce_multilabel_loss(heads.classify(out.joint, p), gold)

        reps = T.grad_check_dtypes(f, list(params.values()), epsilon=1e-3, names=names, order=4)
        assert reps["float32"].max_rel_error < 1e-3
        assert reps["float64"].max_rel_error < 1e-6


class TestClipGlobalNorm:
    def test_unchanged_below_threshold(self):
        g = {"a": np.array([3.0, 4.0])}
        np.testing.assert_array_equal(T.clip_global_norm(g, 10.0)["a"], [3.0, 4.0])

    def test_scaled_above_threshold(self):
        out = T.clip_global_norm({"a": np.array([3.0, 4.0])}, 1.0)
        np.testing.assert_allclose(out["a"], [0.6, 0.8])

    def test_joint_norm(self):
        out = T.clip_global_norm({"a": np.array([3.0, 0.0]), "b": np.array([0.0, 4.0])}, 2.5)
        np.testing.assert_allclose(out["a"], [1.5, 0.0])
        np.testing.assert_allclose(out["b"], [0.0, 2.0])

    def test_empty_map(self):
        assert T.clip_global_norm({}, 1.0) == {}

    def test_non_positive_max_norm(self):
        with pytest.raises(TensorError):
            T.clip_global_norm({"a": np.ones(2)}, 0.0)

    @given(arrays(np.float64, (2, 3), elements=finite), arrays(np.float64, (4,), elements=finite),
           st.floats(1e-3, 100.0))
    def test_idempotent_and_bounded(self, a, b, c):
        once = T.clip_global_norm({"a": a, "b": b}, c)
        twice = T.clip_global_norm(once, c)
        for k in once:
            np.testing.assert_allclose(twice[k], once[k], rtol=1e-12, atol=1e-12)
        assert T.global_norm(once) <= c + 1e-6


class TestOptimizer:
    def test_zero_grad_no_decay_is_identity(self):
        p = {"w": Tensor(np.array([1.0, -2.0], np.float32))}
        T.optimizer_step(p, {"w": np.zeros(2, np.float32)}, OptimizerState(weight_decay=0.0))
        np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])

    def test_first_step_moves_by_lr(self):
        p = {"w": Tensor(np.array(1.0), dtype=np.float64)}
        state = OptimizerState(lr=0.1, weight_decay=0.0)
        T.optimizer_step(p, {"w": np.array(1.0)}, state)
        # bias-corrected m/sqrt(v) = 1 on the first step
        assert float(p["w"].data) == pytest.approx(0.9, abs=1e-6)
        assert state.step == 1

    def test_decoupled_weight_decay(self):
        p = {"w": Tensor(np.array(1.0), dtype=np.float64)}
        T.optimizer_step(p, {"w": np.array(0.0)}, OptimizerState(lr=0.1, weight_decay=0.1))
        assert float(p["w"].data) == pytest.approx(0.99)

    def test_step_counter_increments(self):
        p = {"w": Tensor(np.ones(2))}
        state = OptimizerState()
        for i in range(3):
            T.optimizer_step(p, {"w": np.ones(2, np.float32)}, state)
            assert state.step == i + 1
        assert state.m["w"].shape == (2,)

    def test_shape_mismatch(self):
        p = {"w": Tensor(np.ones(2))}
        with pytest.raises(TensorError, match="shape"):
            T.optimizer_step(p, {"w": np.ones(3)}, OptimizerState())

    def test_deterministic(self, rng):
        g = rng.normal(size=(3, 3)).astype(np.float32)
        outs = []
        for _ in range(2):
            p = {"w": Tensor(np.eye(3))}
            state = OptimizerState()
            for _ in range(4):
                T.optimizer_step(p, {"w": g}, state)
            outs.append(p["w"].data.tobytes())
        assert outs[0] == outs[1]

    @given(arrays(np.float32, (5,), elements=finite))
    def test_zero_grad_identity_property(self, x):
        p = {"w": Tensor(x.copy())}
        T.optimizer_step(p, {"w": np.zeros(5, np.float32)}, OptimizerState(weight_decay=0.0))
        np.testing.assert_array_equal(p["w"].data, x)
