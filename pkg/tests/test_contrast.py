import logging
import math

import numpy as np
import pytest

import numerics as nx
from contrast import (CharEmbedding, PairBatch, asr_loss, batch_asr_loss, contrastive_loss,
                      contrastive_pair_loss, embeddings_from_batch, embeddings_from_projection, mine_pairs,
                      total_loss)
from corpus import EOS, SOS, VOCAB, VOCAB_SIZE
from errors import ContractError, DimensionError
from model import forward_batch, forward_teacher_forced
from numerics import Tensor


def naive_contrastive(vectors, pairs, tau):
    z = [v / np.linalg.norm(v) for v in vectors]
    losses = []
    for a, b in pairs:
        for n, m in ((a, b), (b, a)):
            denom = 0.0
            for k in range(len(z)):
                if k != n:
                    denom += math.exp(float(z[n] @ z[k]) / tau)
            losses.append(-math.log(math.exp(float(z[n] @ z[m]) / tau) / denom))
    return sum(losses) / len(losses)


def make_batch(vectors, labels, cap=None):
    embeddings = [CharEmbedding(Tensor(v), int(l)) for v, l in zip(vectors, labels)]
    return mine_pairs(embeddings, cap_per_class=cap)


class TestContrastiveLoss:
    def test_matches_double_loop(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            m = int(rng.integers(4, 65))
            vectors = rng.standard_normal((m, 16))
            labels = rng.integers(0, 6, size=m)
            batch = make_batch(vectors, labels)
            if batch.is_empty:
                continue
            fast = contrastive_loss(batch, 0.07).item()
            assert fast == pytest.approx(naive_contrastive(vectors, batch.positive_pairs, 0.07), abs=1e-10)

    @pytest.mark.parametrize("m", [4, 8, 16])
    def test_uniform_similarity_gives_log_m_minus_one(self, m):
        batch = make_batch(np.ones((m, 16)), [0] * m)
        assert contrastive_pair_loss(0, 1, batch, 0.07).item() == pytest.approx(math.log(m - 1), abs=1e-9)

    def test_scale_invariance(self, rng):
        vectors = rng.standard_normal((10, 16))
        labels = [0, 0, 1, 1, 2, 2, 0, 1, 2, 3]
        a = contrastive_loss(make_batch(vectors, labels), 0.07).item()
        b = contrastive_loss(make_batch(3.5 * vectors, labels), 0.07).item()
        assert a == pytest.approx(b, abs=1e-12)

    def test_pair_losses_positive(self, rng):
        vectors = rng.standard_normal((6, 16))
        batch = make_batch(vectors, [0, 0, 1, 1, 2, 2])
        for a, b in batch.positive_pairs:
            assert contrastive_pair_loss(a, b, batch, 0.07).item() > 0
            assert contrastive_pair_loss(b, a, batch, 0.07).item() > 0

    def test_empty_positive_set_contributes_zero(self, rng, caplog):
        batch = make_batch(rng.standard_normal((4, 16)), [0, 1, 2, 3])
        assert batch.is_empty
        with caplog.at_level(logging.WARNING):
            assert contrastive_loss(batch, 0.07).item() == 0.0
        assert "without positive pairs" in caplog.text

    def test_temperature_must_be_positive(self, rng):
        batch = make_batch(rng.standard_normal((4, 16)), [0, 0, 1, 1])
        with pytest.raises(ContractError):
            contrastive_loss(batch, 0.0)

    def test_gradient(self, rng):
        labels = [0, 0, 1, 1, 0]

        def fn(y):
            batch = PairBatch([CharEmbedding(nx.row(y, i), l) for i, l in enumerate(labels)],
                              [(0, 1), (0, 4), (1, 4), (2, 3)])
            return contrastive_loss(batch, 0.5)

        assert nx.gradient_check(fn, [rng.standard_normal((5, 4))]) < 1e-6


class TestMining:
    def test_letters_only(self):
        labels = [VOCAB.index["a"], VOCAB.index[" "], VOCAB.index["a"], EOS, VOCAB.index[" "]]
        batch = make_batch(np.eye(5), labels)
        assert len(batch.candidates) == 2
        assert batch.positive_pairs == [(0, 1)]

    def test_cap_per_class(self):
        batch = make_batch(np.eye(8), [0] * 5 + [1] * 3, cap=3)
        by_label = {0: 0, 1: 0}
        for a, _ in batch.positive_pairs:
            by_label[batch.candidates[a].label] += 1
        assert by_label == {0: 3, 1: 3}

    def test_cross_utterance_pairs(self, tiny_params, rng):
        frames = rng.standard_normal((4, 8))
        embeddings = []
        for uid, text in (("u1", "ab"), ("u2", "ba")):
            target = VOCAB.wrap(text)
            proj = forward_teacher_forced(frames, target, tiny_params).proj
            embeddings.extend(embeddings_from_projection(proj, target, uid, "original"))
        batch = mine_pairs(embeddings)
        assert len(batch.positive_pairs) == 2
        for a, b in batch.positive_pairs:
            assert batch.candidates[a].utterance_id != batch.candidates[b].utterance_id

    def test_projection_labels(self, tiny_params, rng):
        target = VOCAB.wrap("ab")
        proj = forward_teacher_forced(rng.standard_normal((3, 8)), target, tiny_params).proj
        embeddings = embeddings_from_projection(proj, target, "u", "noise")
        assert [e.label for e in embeddings] == [VOCAB.index["a"], VOCAB.index["b"], EOS]
        assert all(e.view_tag == "noise" for e in embeddings)


class TestAsrAndTotal:
    def test_asr_loss_is_mean_nll(self, tiny_params, rng):
        target = VOCAB.wrap("abc")
        res = forward_teacher_forced(rng.standard_normal((6, 8)), target, tiny_params)
        expected = -np.mean([res.asr_logprobs.data[i, target[i + 1]] for i in range(len(target) - 1)])
        assert asr_loss(res.asr_logprobs, target).item() == pytest.approx(expected, abs=1e-12)

    def test_asr_loss_shape_mismatch(self):
        with pytest.raises(DimensionError):
            asr_loss(Tensor(np.zeros((2, 33))), [SOS, 0, 1, EOS])

    def test_alpha_zero_is_asr_and_leaves_f_head_untouched(self, tiny_params, rng):
        weights = tiny_params.bind(True)
        target = VOCAB.wrap("aa")
        res = forward_teacher_forced(rng.standard_normal((5, 8)), target, weights)
        asr = asr_loss(res.asr_logprobs, target)
        con = contrastive_loss(mine_pairs(embeddings_from_projection(res.proj, target, "u", "original")), 0.07)
        total = total_loss(asr, con, 0.0)
        assert total is asr
        grads = nx.backward(total, list(weights.values()))
        np.testing.assert_array_equal(grads[weights["f_W"]], np.zeros_like(tiny_params.weights["f_W"]))
        np.testing.assert_array_equal(grads[weights["f_b"]], np.zeros_like(tiny_params.weights["f_b"]))

    def test_alpha_one_sums(self):
        asr, con = Tensor(1.25), Tensor(0.5)
        assert total_loss(asr, con, 1.0).item() == 1.75


class TestExamples:
    def test_permutation_invariant(self, rng):
        vectors = rng.standard_normal((12, 8))
        labels = rng.integers(0, 4, size=12)
        order = rng.permutation(12)
        a = contrastive_loss(make_batch(vectors, labels), 0.07).item()
        b = contrastive_loss(make_batch(vectors[order], labels[order]), 0.07).item()
        assert a == pytest.approx(b, abs=1e-10)

    def test_repeated_letter_gives_one_pair(self):
        target = VOCAB.wrap("happy")
        embeddings = [CharEmbedding(Tensor(np.eye(8)[i]), int(t)) for i, t in enumerate(target[1:])]
        batch = mine_pairs(embeddings)
        assert len(batch.positive_pairs) == 1
        a, b = batch.positive_pairs[0]
        assert batch.candidates[a].label == batch.candidates[b].label == VOCAB.index["p"]

    def test_two_views_pair_across_views(self):
        target = VOCAB.wrap("boy")
        embeddings = [CharEmbedding(Tensor(np.eye(8)[i + 4 * v]), int(t), "u", tag, i)
                      for v, tag in enumerate(("original", "altvoice")) for i, t in enumerate(target[1:])]
        batch = mine_pairs(embeddings)
        assert len(batch.positive_pairs) == 3
        for a, b in batch.positive_pairs:
            assert {batch.candidates[a].view_tag, batch.candidates[b].view_tag} == {"original", "altvoice"}

    def test_orthogonal_negatives_closed_form(self):
        vectors = np.array([[1.0, 0, 0], [1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0]])
        loss = contrastive_loss(make_batch(vectors, [0, 0, 1, 2]), 0.07).item()
        assert loss == pytest.approx(math.log1p(2 * math.exp(-1 / 0.07)), rel=1e-9)
        assert loss == pytest.approx(1.25e-6, rel=1e-2)

    def test_uniform_asr_prediction(self):
        target = VOCAB.wrap("abc")
        logprobs = Tensor(np.full((len(target) - 1, VOCAB_SIZE), -math.log(VOCAB_SIZE)))
        assert asr_loss(logprobs, target).item() == pytest.approx(math.log(33), abs=1e-12)
        assert math.log(33) == pytest.approx(3.4965, abs=1e-4)

    def test_perfect_asr_prediction(self):
        target = VOCAB.wrap("abc")
        logits = np.zeros((len(target) - 1, VOCAB_SIZE))
        logits[np.arange(len(target) - 1), target[1:]] = 1000.0
        assert asr_loss(nx.log_softmax(Tensor(logits)), target).item() == pytest.approx(0.0, abs=1e-12)


class TestBatchedLosses:
    @pytest.fixture
    def batch(self, tiny_params, rng):
        frames = [rng.standard_normal((5, 8)), rng.standard_normal((3, 8))]
        targets = [VOCAB.wrap("abba"), VOCAB.wrap("ab")]
        return frames, targets, forward_batch(frames, targets, tiny_params)

    def test_embeddings_match_single_forward(self, batch, tiny_params):
        frames, targets, out = batch
        embeddings = embeddings_from_batch(out, ["u1", "u2"], ["original", "noise"])
        expected = []
        for f, t, uid, tag in zip(frames, targets, ["u1", "u2"], ["original", "noise"]):
            proj = forward_teacher_forced(f, t, tiny_params).proj
            expected.extend(embeddings_from_projection(proj, t, uid, tag))
        assert len(embeddings) == len(expected)
        key = lambda e: (e.utterance_id, e.position)  # noqa: E731
        for got, want in zip(sorted(embeddings, key=key), sorted(expected, key=key)):
            assert (got.label, got.view_tag) == (want.label, want.view_tag)
            np.testing.assert_allclose(got.vector, want.vector, atol=1e-12)

    def test_matrix_is_one_gather(self, batch):
        _, _, out = batch
        pairs = mine_pairs(embeddings_from_batch(out, ["u1", "u2"], ["original", "original"]))
        m = pairs.matrix()
        assert m._op == "take"
        np.testing.assert_array_equal(m.data, np.stack([c.vector for c in pairs.candidates]))

    def test_batch_asr_loss_is_mean_of_utterances(self, batch, tiny_params):
        frames, targets, out = batch
        singles = [asr_loss(forward_teacher_forced(f, t, tiny_params).asr_logprobs, t).item()
                   for f, t in zip(frames, targets)]
        assert batch_asr_loss(out).item() == pytest.approx(np.mean(singles), abs=1e-12)
