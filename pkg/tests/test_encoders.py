"""Tokenizer, text CNN, feature file format and image projection."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mmcqa import encoders as E
from mmcqa import tensor as T
from mmcqa.encoders import FeatureStore, FeatureStoreError, TokenSequence, Vocabulary
from mmcqa.tensor import Tensor


@pytest.fixture()
def vocab():
    v = Vocabulary()
    # fill ids 3..8 so "red" lands on 3 and "shoe" on 7
    for w in ("red", "a", "b", "c", "shoe", "see", "now"):
        v.add(w)
    return v


def small_encoder(seed=0, vocab_size=10, emb=4, filters=(3, 3, 3), d=5):
    return E.init_text_encoder(np.random.default_rng(seed), vocab_size, emb, filters, d)


class TestTokenize:
    def test_known_words(self, vocab):
        assert vocab.id("red") == 3 and vocab.id("shoe") == 7
        assert E.tokenize("red shoe shoe", vocab).tokens == (3, 7, 7)

    def test_url_replaced(self, vocab):
        seq = E.tokenize("see http://x.y now", vocab)
        assert seq.tokens == (vocab.id("see"), E.URL, vocab.id("now"))

    def test_empty_is_pad(self, vocab):
        assert E.tokenize("", vocab) == TokenSequence((E.PAD,), 0)

    def test_unknown_word(self, vocab):
        assert E.tokenize("zebra", vocab).tokens == (E.UNK,)

    def test_html_removed(self, vocab):
        assert E.tokenize("<b>red</b> &amp; shoe", vocab).tokens == (3, 7)

    def test_truncation(self, vocab):
        assert len(E.tokenize("red " * 300, vocab).tokens) == E.MAX_LEN

    def test_vocab_round_trip(self, vocab, tmp_path):
        vocab.save(tmp_path / "vocab.txt")
        back = Vocabulary.load(tmp_path / "vocab.txt")
        assert len(back) == len(vocab) and back.id("shoe") == 7
        assert back.id("<pad>") == E.PAD

    def test_build_reserves_special_ids(self):
        v = Vocabulary.build(["x y", "y z"])
        assert [v.id(t) for t in E.RESERVED] == [0, 1, 2]
        assert len(v) == 6


class TestTextCNN:
    def test_zero_weights_give_tanh_bias(self):
        p = small_encoder()
        for k, t in p.items():
            t.data = np.zeros_like(t.data)
        p["text.proj.b"].data = np.array([0.5, -1.0, 0.0, 2.0, 0.1], np.float32)
        out = E.encode_sequence(TokenSequence((4, 5), 2), p).data
        np.testing.assert_allclose(out, np.tanh(p["text.proj.b"].data), rtol=1e-6)

    def test_length_one_picks_embedding(self):
        # 1-gram filter reads embedding dim 0; 2/3-gram filters and projection isolate it
        p = small_encoder(emb=2, filters=(1, 1, 1), d=1)
        for t in p.values():
            t.data = np.zeros_like(t.data)
        p["text.emb"].data[4] = [0.7, -0.3]
        p["text.conv1.w"].data[:] = [[1.0], [0.0]]
        p["text.proj.w"].data[:] = [[1.0], [0.0], [0.0]]
        out = E.encode_sequence(TokenSequence((4,), 1), p).data
        assert out[0] == pytest.approx(np.tanh(np.tanh(0.7)), rel=1e-6)

    def test_trailing_pad_invariance(self):
        p = small_encoder(1)
        a = E.text_cnn_encode(*E.pad_batch([[3, 4, 5, 6]]), p).data
        ids = np.array([[3, 4, 5, 6, 0, 0, 0, 0]])
        b = E.text_cnn_encode(ids, np.array([4]), p).data
        np.testing.assert_array_equal(a, b)

    def test_short_sequence_padded_to_three(self):
        ids, lengths = E.pad_batch([[5]])
        assert ids.shape == (1, 3) and list(ids[0]) == [5, 0, 0] and lengths[0] == 1

    def test_unigram_features_permutation_invariant(self):
        p = small_encoder(2, filters=(3, 2, 2))
        seqs = [[3, 4, 5, 6, 7], [7, 5, 3, 6, 4]]
        x = T.embedding(p["text.emb"], np.array(seqs))
        h = T.conv1d(x, p["text.conv1.w"], p["text.conv1.b"], 1)
        pooled = T.max_over(h, axis=1).data
        np.testing.assert_array_equal(pooled[0], pooled[1])
        full = E.text_cnn_encode(np.array(seqs), np.array([5, 5]), p).data
        assert not np.allclose(full[0], full[1])

    def test_out_of_range_token(self):
        with pytest.raises(ValueError, match="out of range"):
            E.encode_sequence(TokenSequence((99,), 1), small_encoder())

    def test_pure_function(self):
        p = small_encoder(3)
        ids, lengths = E.pad_batch([[3, 4], [5, 6, 7, 8]])
        assert E.text_cnn_encode(ids, lengths, p).data.tobytes() == E.text_cnn_encode(ids, lengths, p).data.tobytes()

    @given(st.lists(st.integers(1, 9), min_size=1, max_size=12))
    def test_output_bounded(self, toks):
        out = E.encode_sequence(TokenSequence(tuple(toks), len(toks)), small_encoder(4)).data
        assert out.shape == (5,) and np.all(np.abs(out) <= 1.0)


class TestFeatureStore:
    def test_round_trip(self, tmp_path, rng):
        spatial = rng.normal(size=(3, 4, 2)).astype(np.float32)
        E.write_feature_file(tmp_path / "f.cqaf", [10, 11, 12], spatial)
        store = FeatureStore(tmp_path / "f.cqaf")
        assert len(store) == 3 and 11 in store
        np.testing.assert_array_equal(store.spatial([12, 10]), spatial[[2, 0]])
        assert store.reads == 2

    def test_flat_is_row_mean(self, tmp_path):
        E.write_feature_file(tmp_path / "f.cqaf", [5], np.array([[[1.0, 1.0], [3.0, 3.0]]]))
        f = E.load_image_features(FeatureStore(tmp_path / "f.cqaf"), 5)
        np.testing.assert_array_equal(f.flat, [2.0, 2.0])

    def test_missing_id(self, tmp_path):
        E.write_feature_file(tmp_path / "f.cqaf", [1], np.zeros((1, 1, 2)))
        with pytest.raises(FeatureStoreError, match="missing id"):
            E.load_image_features(FeatureStore(tmp_path / "f.cqaf"), 2)

    def test_corrupt_record(self, tmp_path):
        # header declares D_img = 64 but the record carries 60 floats
        path = tmp_path / "f.cqaf"
        body = np.uint64(1).tobytes() + np.zeros(60, "<f4").tobytes()
        path.write_bytes(E._HEADER.pack(E.MAGIC, E.VERSION, 1, 1, 64) + body)
        with pytest.raises(FeatureStoreError, match="corrupt"):
            FeatureStore(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "f.cqaf"
        path.write_bytes(E._HEADER.pack(b"XXXX", 1, 0, 1, 1))
        with pytest.raises(FeatureStoreError, match="magic"):
            FeatureStore(path)

    def test_non_finite_values(self, tmp_path):
        E.write_feature_file(tmp_path / "f.cqaf", [1], np.array([[[np.nan, 0.0]]]))
        with pytest.raises(FeatureStoreError, match="non-finite"):
            FeatureStore(tmp_path / "f.cqaf").spatial([1])

    def test_little_endian_layout(self, tmp_path):
        E.write_feature_file(tmp_path / "f.cqaf", [7], np.array([[[1.5]]]))
        raw = (tmp_path / "f.cqaf").read_bytes()
        assert raw[:4] == b"CQAF"
        assert raw[4:8] == (1).to_bytes(4, "little")
        assert raw[20:28] == (7).to_bytes(8, "little")
        assert np.frombuffer(raw[28:32], "<f4")[0] == 1.5


class TestProjectImage:
    def params(self, w, b):
        return {"img.w": Tensor(np.asarray(w, np.float32)), "img.b": Tensor(np.asarray(b, np.float32))}

    def test_zero_weight(self):
        p = self.params(np.zeros((2, 3)), [0.1, -0.2, 0.3])
        f = E.ImageFeatures(0, np.array([1.0, 2.0]), np.array([[1.0, 2.0], [4.0, 5.0]]))
        v_I, v_sp = E.project_image(f, p)
        np.testing.assert_allclose(v_I.data, np.tanh([0.1, -0.2, 0.3]), rtol=1e-6)
        np.testing.assert_allclose(v_sp.data, np.tanh([[0.1, -0.2, 0.3]] * 2), rtol=1e-6)

    def test_identity(self):
        p = self.params(np.eye(2), [0.0, 0.0])
        f = E.ImageFeatures(0, np.array([0.5, 0.0]), np.array([[0.5, 0.0]]))
        v_I, _ = E.project_image(f, p)
        np.testing.assert_allclose(v_I.data, [np.tanh(0.5), 0.0], rtol=1e-6)

    def test_identical_rows(self, rng):
        p = E.init_image_projector(rng, 3, 4)
        row = rng.normal(size=3)
        f = E.ImageFeatures(0, row, np.tile(row, (5, 1)))
        v_I, v_sp = E.project_image(f, p)
        for r in v_sp.data:
            np.testing.assert_allclose(r, v_I.data, rtol=1e-6)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ValueError):
            E.project_rows(np.zeros((2, 5)), E.init_image_projector(rng, 3, 4))
