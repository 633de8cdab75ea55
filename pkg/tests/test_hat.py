"""Transducer tests: lattice oracles, normalization, ILM, losses, checkpoints."""

import itertools
import math

import numpy as np
import pytest

from hatfusion import tensor as T
from hatfusion.hat import (
    HatConfig,
    HatModel,
    Utterance,
    load_checkpoint,
    save_checkpoint,
)

from conftest import check_gradients


def tiny_model(v=3, a=4, seed=0, **kw):
    cfg = HatConfig(vocab_size=v, acoustic_size=a, embed_dim=3, hidden_dim=4, joint_dim=4, **kw)
    return HatModel(cfg, seed=seed)


def local_grids(model, acoustics, labels):
    """Numpy (log b, log(1-b), label log-probs) grids for one pair."""
    enc = model.encode(list(acoustics))
    locs = model.joint_locals(enc, list(labels))
    logit = locs.blank_logit.data
    lb = -np.logaddexp(0.0, -logit)
    l1mb = -np.logaddexp(0.0, logit)
    return lb, l1mb, locs.label_logprob.data


def enumerated_full_sum(lb, l1mb, lab, labels):
    """Sum over every monotonic alignment, walked recursively.

    Independent of the production DP: explores blank (consume a frame)
    and label (emit the next token) moves from each node.
    """
    t_len = lb.shape[0]
    u_len = len(labels)
    done = []

    def walk(t, u, w):
        wb = w + lb[t, u]
        if t == t_len - 1:
            if u == u_len:
                done.append(wb)
        else:
            walk(t + 1, u, wb)
        if u < u_len:
            walk(t, u + 1, w + l1mb[t, u] + lab[t, u, labels[u]])

    walk(0, 0, 0.0)
    if not done:
        return -np.inf
    m = max(done)
    return m + math.log(sum(math.exp(x - m) for x in done))


class TestEncoder:
    def test_single_frame_single_state(self):
        m = tiny_model()
        assert m.encode([2]).shape == (1, m.config.hidden_dim)

    def test_deterministic(self):
        m = tiny_model()
        a = m.encode([0, 1, 2, 3]).data
        b = m.encode([0, 1, 2, 3]).data
        np.testing.assert_array_equal(a, b)

    def test_frame_order_matters_when_recurrent(self):
        m = tiny_model(seed=5)
        fwd = m.encode([0, 1, 2]).data
        rev = m.encode([2, 1, 0]).data
        assert not np.allclose(fwd, rev)

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="empty acoustic"):
            tiny_model().encode([])

    def test_bad_symbol_rejected(self):
        with pytest.raises(ValueError, match="out of range"):
            tiny_model(a=4).encode([0, 4])

    def test_numpy_path_matches_tensor_path(self):
        for seed in range(3):
            m = tiny_model(seed=seed)
            ids = [0, 3, 1, 2, 2]
            np.testing.assert_array_equal(m.encode(ids).data, m.encode_np(ids))

    def test_nonrecurrent_is_framewise(self):
        m = tiny_model(recurrent_encoder=False)
        full = m.encode([0, 1, 2]).data
        np.testing.assert_allclose(full[1], m.encode([1]).data[0], atol=1e-15)


class TestJointLocals:
    def test_grid_shape(self):
        m = tiny_model()
        enc = m.encode([0, 1, 2])
        locs = m.joint_locals(enc, [1, 0])
        assert locs.blank_logit.shape == (3, 3)
        assert locs.label_logprob.shape == (3, 3, m.config.vocab_size)

    def test_zeroed_label_head_uniform(self):
        m = tiny_model(v=3)
        m.params["label_w"].data[...] = 0.0
        m.params["label_b"].data[...] = 0.0
        locs = m.joint_locals(m.encode([0, 1]), [2])
        np.testing.assert_allclose(locs.label_logprob.data, -math.log(3), atol=1e-15)

    def test_zeroed_blank_head_gives_half(self):
        m = tiny_model()
        m.params["blank_w"].data[...] = 0.0
        m.params["blank_b"].data[...] = 0.0
        locs = m.joint_locals(m.encode([0, 1]), [])
        np.testing.assert_allclose(locs.blank_prob, 0.5, atol=1e-15)

    def test_blank_prob_in_open_interval(self):
        m = tiny_model(seed=3)
        locs = m.joint_locals(m.encode([0, 1, 2, 3]), [0, 1, 2])
        assert np.all(locs.blank_prob > 0) and np.all(locs.blank_prob < 1)

    def test_label_rows_normalize(self):
        m = tiny_model(seed=4)
        locs = m.joint_locals(m.encode([1, 2]), [0, 2])
        sums = np.exp(locs.label_logprob.data).sum(axis=-1)
        np.testing.assert_allclose(sums, 1.0, atol=1e-12)

    def test_prefix_token_outside_vocab_rejected(self):
        m = tiny_model(v=3)
        with pytest.raises(ValueError, match="out of range"):
            m.joint_locals(m.encode([0]), [3])


class TestFullSum:
    def test_single_frame_empty_label(self):
        m = tiny_model(seed=1)
        lb, _, _ = local_grids(m, [2], [])
        got = m.full_sum_log_prob(Utterance("u", [2], []), [])
        assert got.item() == pytest.approx(lb[0, 0], abs=1e-14)

    def test_two_frames_one_label_two_paths(self):
        m = tiny_model(seed=2)
        y = [1]
        lb, l1mb, lab = local_grids(m, [0, 3], y)
        p1 = l1mb[0, 0] + lab[0, 0, 1] + lb[0, 1] + lb[1, 1]
        p2 = lb[0, 0] + l1mb[1, 0] + lab[1, 0, 1] + lb[1, 1]
        want = np.logaddexp(p1, p2)
        got = m.full_sum_log_prob(Utterance("u", [0, 3], y), y)
        assert got.item() == pytest.approx(want, abs=1e-12)

    @pytest.mark.parametrize("seed", range(4))
    def test_matches_path_enumeration(self, seed):
        rng = np.random.default_rng(seed)
        m = tiny_model(v=3, seed=seed + 10)
        for t_len, u_len in itertools.product([1, 2, 3, 4], [0, 1, 2, 3]):
            ac = rng.integers(0, 4, size=t_len).tolist()
            y = rng.integers(0, 3, size=u_len).tolist()
            lb, l1mb, lab = local_grids(m, ac, y)
            want = enumerated_full_sum(lb, l1mb, lab, y)
            got = m.full_sum_log_prob(Utterance("u", ac, y), y).item()
            assert got == pytest.approx(want, abs=1e-10)

    def test_batched_matches_single(self):
        m = tiny_model(v=3, seed=7)
        enc = m.encode([0, 1, 2, 3, 0])
        seqs = [[], [1], [2, 0], [1, 1, 2], [0]]
        batched = m.full_sum_log_probs(enc, seqs).data
        for s, b in zip(seqs, batched):
            single = m.full_sum_log_prob(Utterance("u", [0, 1, 2, 3, 0], s), s).item()
            assert b == pytest.approx(single, abs=1e-12)

    def test_geometric_constant_blank(self):
        # Single frame, |V| = 1, constant blank prob: P(len n) = (1-b)^n b.
        m = tiny_model(v=1, seed=0)
        m.params["blank_w"].data[...] = 0.0
        m.params["blank_b"].data[...] = 1.1
        b = 1.0 / (1.0 + math.exp(-1.1))
        for n in range(6):
            got = m.full_sum_log_prob(Utterance("u", [0], [0] * n), [0] * n).item()
            assert math.exp(got) == pytest.approx((1 - b) ** n * b, abs=1e-12)

    def test_gradient_matches_finite_differences(self):
        m = tiny_model(v=3, seed=11)
        utt = Utterance("u", [0, 2, 1], [1, 2])

        def build():
            return m.full_sum_log_prob(utt, utt.reference)

        check_gradients(build, m.params, rtol=1e-4)

    def test_probability_normalizes_small_case(self):
        # T = 2, |V| = 2, blank-biased so the tail is provably negligible.
        m = tiny_model(v=2, seed=3)
        m.params["blank_w"].data[...] *= 0.1
        m.params["blank_b"].data[...] = 2.5
        utt = Utterance("u", [1, 2], [])
        enc = m.encode(utt.acoustics)
        t_len = len(utt.acoustics)
        mass = 0.0
        partials = []
        for n in range(11):
            seqs = [list(y) for y in itertools.product(range(2), repeat=n)]
            mass += float(np.exp(m.full_sum_log_probs(enc, seqs).data).sum())
            partials.append(mass)
        assert all(b >= a for a, b in zip(partials, partials[1:]))
        assert partials[-1] <= 1 + 1e-9
        # Worst case over every node: blank logit >= bias - |w|_1 since the
        # joint activation lies in (-1, 1)^J. Summing the label distribution
        # out telescopes to 1, so length-n mass <= C(T-1+n, n) q^n.
        q = 1 - 1 / (1 + math.exp(-(2.5 - float(np.abs(m.params["blank_w"].data).sum()))))
        tail = sum(math.comb(t_len - 1 + n, n) * q**n for n in range(11, 600))
        assert tail < 1e-7
        assert partials[-1] == pytest.approx(1.0, abs=1e-6)


class TestInternalLm:
    def test_empty_sequence(self):
        s = tiny_model().internal_lm_log_prob([])
        assert s.total == 0.0 and s.per_token.size == 0

    def test_zeroed_label_head_uniform(self):
        m = tiny_model(v=3)
        m.params["label_w"].data[...] = 0.0
        m.params["label_b"].data[...] = 0.0
        s = m.internal_lm_log_prob([0, 2, 1])
        np.testing.assert_allclose(s.per_token, -math.log(3), atol=1e-15)

    def test_total_is_sum_of_tokens(self):
        s = tiny_model(seed=6).internal_lm_log_prob([0, 1, 2, 2, 0])
        assert s.total == float(np.sum(s.per_token))

    def test_incremental_prefix_oracle(self):
        m = tiny_model(seed=8)
        y = [2, 0, 1, 1]
        s = m.internal_lm_log_prob(y)
        for l in range(1, len(y) + 1):
            prefix_total = m.internal_lm_log_prob(y[:l]).total
            assert prefix_total == pytest.approx(float(np.sum(s.per_token[:l])), abs=1e-12)

    def test_ignores_acoustics_by_construction(self):
        m = tiny_model(seed=9)
        before = m.internal_lm_log_prob([1, 0, 2])
        m.params["aemb"].data[...] = 0.12345
        m.params["enc_wx"].data[...] *= -3.0
        after = m.internal_lm_log_prob([1, 0, 2])
        np.testing.assert_array_equal(before.per_token, after.per_token)

    def test_batched_ilm_matches_single(self):
        m = tiny_model(v=3, seed=12)
        enc = m.encode([0, 1])
        seqs = [[1, 2], [0], [2, 2, 1]]
        _, totals = m.score_sequences(enc, seqs)
        for s, tot in zip(seqs, totals.data):
            assert tot == pytest.approx(m.internal_lm_log_prob(s).total, abs=1e-12)


class TestMleLoss:
    def test_single_utterance_is_negative_log_prob(self):
        m = tiny_model(seed=2)
        utt = Utterance("u", [0, 1, 2], [1])
        loss = m.mle_loss([utt]).item()
        direct = m.full_sum_log_prob(utt, utt.reference).item()
        assert loss == pytest.approx(-direct, abs=1e-14)

    def test_strictly_positive(self):
        m = tiny_model(seed=4)
        batch = [Utterance("a", [0, 1], [2]), Utterance("b", [3], [])]
        assert m.mle_loss(batch).item() > 0

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError, match="empty batch"):
            tiny_model().mle_loss([])

    def test_gradient_matches_finite_differences(self):
        m = tiny_model(v=3, seed=13)
        batch = [Utterance("a", [0, 2], [1, 0]), Utterance("b", [3, 1, 2], [2])]
        check_gradients(lambda: m.mle_loss(batch), m.params, rtol=1e-4)

    def test_one_descent_step_lowers_loss(self):
        m = tiny_model(seed=14)
        batch = [Utterance("a", [0, 1, 2, 3], [1, 2]), Utterance("b", [2, 2], [0])]
        with T.Tape() as tape:
            loss0 = m.mle_loss(batch)
        tape.backward(loss0)
        T.Sgd(0.05).step(m.params)
        assert m.mle_loss(batch).item() < loss0.item()


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        m = tiny_model(v=5, a=6, seed=21)
        save_checkpoint(m, tmp_path / "ck")
        again = load_checkpoint(tmp_path / "ck")
        assert again.config == m.config
        for (_, a), (_, b) in zip(m.params.items(), again.params.items()):
            np.testing.assert_array_equal(a.data, b.data)
        utt = Utterance("u", [0, 1], [2, 3])
        assert again.full_sum_log_prob(utt, utt.reference).item() == pytest.approx(
            m.full_sum_log_prob(utt, utt.reference).item(), abs=0
        )

    def test_wrong_kind_rejected(self, tmp_path):
        m = tiny_model()
        save_checkpoint(m, tmp_path / "ck")
        header = (tmp_path / "ck.json").read_text().replace("hat", "other")
        (tmp_path / "ck.json").write_text(header)
        with pytest.raises(ValueError, match="checkpoint"):
            load_checkpoint(tmp_path / "ck")
