"""Hybrid autoregressive transducer over discrete acoustic symbols.

Factorized joint: each lattice node (t, u) carries a blank Bernoulli
(sigmoid of a blank logit) and a label log-softmax over the vocabulary,
with blank excluded from the label distribution. The full-sum score of a
label sequence marginalizes over every monotonic alignment; the internal
LM view scores labels with the encoder contribution zeroed out.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import tensor as T

# Log-domain stand-in for "unreachable"; finite so masked lattice cells
# never produce inf - inf in the backward pass.
NEG = -1.0e30

_COUNTERS = {"lattice_sweeps": 0}


def lattice_sweep_count() -> int:
    """Total full-sum lattice sweeps run in this process; rescoring sweeps
    are checked against it to prove they re-rank without re-scoring."""
    return _COUNTERS["lattice_sweeps"]


@dataclass
class Utterance:
    uid: str
    acoustics: list[int]
    reference: list[int]


@dataclass
class HatConfig:
    vocab_size: int
    acoustic_size: int
    embed_dim: int = 16
    hidden_dim: int = 32
    joint_dim: int = 32
    recurrent_encoder: bool = True


@dataclass
class LatticeLocals:
    """Per-node locals for one utterance/prefix pair.

    blank_logit: (T, U+1); label_logprob: (T, U+1, V).
    """

    blank_logit: T.Tensor
    label_logprob: T.Tensor

    @property
    def blank_prob(self) -> np.ndarray:
        x = self.blank_logit.data
        e = np.exp(-np.abs(x))
        return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


@dataclass
class IlmScore:
    per_token: np.ndarray
    total: float


class HatModel:
    """Encoder + prediction network + factorized joint, all trainable."""

    def __init__(self, config: HatConfig, seed: int = 0):
        self.config = config
        self.params = _init_params(config, seed)

    def _p(self, name: str) -> T.Tensor:
        return self.params[name]

    # -- encoder ------------------------------------------------------

    def encode(self, acoustics) -> T.Tensor:
        """Encoder states, one (hidden_dim,) row per frame: (T, H)."""
        ids = _check_ids(acoustics, self.config.acoustic_size, "acoustic symbol")
        if ids.size == 0:
            raise ValueError("encode: empty acoustic sequence")
        x = T.embedding_lookup(self._p("aemb"), ids)
        wx, wh, b = self._p("enc_wx"), self._p("enc_wh"), self._p("enc_b")
        if not self.config.recurrent_encoder:
            return T.tanh(T.add(T.matmul(x, wx), b))
        rows = []
        h = None
        for t in range(ids.size):
            pre = T.add(T.matmul(x[t : t + 1, :], wx), b)
            if h is not None:
                pre = T.add(pre, T.matmul(h, wh))
            h = T.tanh(pre)
            rows.append(h)
        return T.concat(rows, axis=0)

    def encode_np(self, acoustics) -> np.ndarray:
        ids = _check_ids(acoustics, self.config.acoustic_size, "acoustic symbol")
        if ids.size == 0:
            raise ValueError("encode: empty acoustic sequence")
        x = self._p("aemb").data[ids]
        wx, wh, b = self._p("enc_wx").data, self._p("enc_wh").data, self._p("enc_b").data
        if not self.config.recurrent_encoder:
            return np.tanh(x @ wx + b)
        rows = np.empty((ids.size, self.config.hidden_dim))
        h = None
        for t in range(ids.size):
            pre = x[t : t + 1] @ wx + b
            if h is not None:
                pre = pre + h @ wh
            h = np.tanh(pre)
            rows[t] = h[0]
        return rows

    # -- prediction network -------------------------------------------

    def predict_states(self, seqs: list[list[int]]) -> T.Tensor:
        """Prediction states for each sequence and prefix length: (K, U_max+1, H).

        Row (k, u) conditions on the first u tokens of seqs[k]; sequences
        shorter than U_max are padded and their trailing states are junk
        the caller must mask.
        """
        k = len(seqs)
        lens = [len(s) for s in seqs]
        u_max = max(lens) if lens else 0
        pad = np.zeros((k, u_max), dtype=np.int64)
        for i, s in enumerate(seqs):
            pad[i, : lens[i]] = s
        lemb = self._p("lemb")
        wx, wh, b = self._p("pred_wx"), self._p("pred_wh"), self._p("pred_b")
        bos = np.full(k, self.config.vocab_size, dtype=np.int64)
        steps = []
        h = None
        for u in range(u_max + 1):
            ids = bos if u == 0 else pad[:, u - 1]
            x = T.embedding_lookup(lemb, ids)
            pre = T.add(T.matmul(x, wx), b)
            if h is not None:
                pre = T.add(pre, T.matmul(h, wh))
            h = T.tanh(pre)
            steps.append(h[:, None, :])
        return T.concat(steps, axis=1)

    def pred_start_np(self) -> np.ndarray:
        lemb = self._p("lemb").data
        return np.tanh(
            lemb[self.config.vocab_size] @ self._p("pred_wx").data
            + self._p("pred_b").data
        )

    def pred_step_np(self, h: np.ndarray, token: int) -> np.ndarray:
        lemb = self._p("lemb").data
        pre = lemb[token] @ self._p("pred_wx").data + self._p("pred_b").data
        return np.tanh(pre + h @ self._p("pred_wh").data)

    # -- factorized joint ---------------------------------------------

    def _grids(self, enc: T.Tensor, dstates: T.Tensor):
        """Blank-logit (K,T,U+1) and label log-prob (K,T,U+1,V) grids."""
        eproj = T.matmul(enc, self._p("joint_we"))
        dproj = T.matmul(dstates, self._p("joint_wd"))
        z = T.tanh(
            T.add(T.add(eproj[None, :, None, :], dproj[:, None, :, :]), self._p("joint_b"))
        )
        blank_logit = T.add(T.matmul(z, self._p("blank_w")), self._p("blank_b"))
        label_lp = T.log_softmax(
            T.add(T.matmul(z, self._p("label_w")), self._p("label_b")), axis=-1
        )
        return blank_logit, label_lp, dproj

    def joint_locals(self, enc: T.Tensor, prefix) -> LatticeLocals:
        tokens = list(_check_ids(prefix, self.config.vocab_size, "label"))
        blank_logit, label_lp, _ = self._grids(enc, self.predict_states([tokens]))
        return LatticeLocals(blank_logit=blank_logit[0], label_logprob=label_lp[0])

    def eproj_np(self, enc: np.ndarray) -> np.ndarray:
        return enc @ self._p("joint_we").data

    def dproj_np(self, h: np.ndarray) -> np.ndarray:
        return h @ self._p("joint_wd").data

    def joint_np(self, eproj_t: np.ndarray, dproj_u: np.ndarray):
        """(blank logit, label log-probs over V) at one lattice node."""
        z = np.tanh(eproj_t + dproj_u + self._p("joint_b").data)
        blank_logit = float(z @ self._p("blank_w").data + self._p("blank_b").data)
        label_lp = T.log_softmax_np(z @ self._p("label_w").data + self._p("label_b").data)
        return blank_logit, label_lp

    def ilm_logprobs_np(self, dproj_u: np.ndarray) -> np.ndarray:
        z = np.tanh(dproj_u + self._p("joint_b").data)
        return T.log_softmax_np(z @ self._p("label_w").data + self._p("label_b").data)

    # -- exact scoring --------------------------------------------------

    def score_sequences(self, enc: T.Tensor, seqs, with_ilm: bool = True):
        """Full-sum log P(Y|X) for each sequence against shared encoder states.

        Returns (full_sums (K,), ilm_totals (K,) or None). All sequences are
        scored in one lattice sweep over anti-diagonals; unreachable cells
        are masked to NEG so their exp-weight underflows to exactly zero.
        """
        _COUNTERS["lattice_sweeps"] += 1
        seqs = [list(s) for s in seqs]
        if not seqs:
            raise ValueError("score_sequences: no sequences")
        for s in seqs:
            _check_ids(s, self.config.vocab_size, "label")
        k = len(seqs)
        t_len = enc.shape[0]
        lens = np.array([len(s) for s in seqs], dtype=np.int64)
        u_max = int(lens.max())
        pad = np.zeros((k, u_max), dtype=np.int64)
        for i, s in enumerate(seqs):
            pad[i, : lens[i]] = s

        dstates = self.predict_states(seqs)
        blank_logit, label_lp, dproj = self._grids(enc, dstates)
        lb = T.log_sigmoid(blank_logit)
        l1mb = T.log_one_minus_sigmoid(blank_logit)

        n_diag = t_len + u_max
        width = u_max + 1
        dd = np.arange(n_diag)[:, None]
        us = np.arange(width)[None, :]
        tgrid = dd - us
        valid = (tgrid >= 0) & (tgrid < t_len)
        tclip = np.clip(tgrid, 0, t_len - 1)
        kk = np.arange(k)[:, None, None]
        lb_diag = T.add(
            T.slice_(lb, (kk, tclip[None], np.broadcast_to(us, tgrid.shape)[None])),
            T.constant(np.where(valid, 0.0, NEG)[None]),
        )
        if u_max > 0:
            kk4 = np.arange(k)[:, None, None]
            tt4 = np.arange(t_len)[None, :, None]
            uu4 = np.arange(u_max)[None, None, :]
            yy4 = pad[:, None, :]
            label_tok = T.slice_(label_lp, (kk4, tt4, uu4, yy4))
            le = T.add(l1mb[:, :, :u_max], label_tok)
            le_valid = valid & (us < u_max)
            le_diag = T.add(
                T.slice_(
                    le,
                    (
                        kk,
                        tclip[None],
                        np.broadcast_to(np.clip(us, 0, u_max - 1), tgrid.shape)[None],
                    ),
                ),
                T.constant(np.where(le_valid, 0.0, NEG)[None]),
            )

        a0 = np.full((k, width), NEG)
        a0[:, 0] = 0.0
        alpha = T.constant(a0)
        alphas = [alpha]
        negcol = T.constant(np.full((k, 1), NEG))
        for d in range(1, n_diag):
            t_blank = T.add(alpha, lb_diag[:, d - 1, :])
            if u_max > 0:
                t_label = T.concat(
                    [negcol, T.add(alpha, le_diag[:, d - 1, :])[:, : width - 1]], axis=1
                )
                alpha = T.logsumexp(
                    T.concat([t_blank[None], t_label[None]], axis=0), axis=0
                )
            else:
                alpha = t_blank
            alphas.append(alpha)

        stacked = T.concat([a[:, None, :] for a in alphas], axis=1)
        k_idx = np.arange(k)
        a_fin = T.slice_(stacked, (k_idx, t_len - 1 + lens, lens))
        lb_fin = T.slice_(lb, (k_idx, np.full(k, t_len - 1), lens))
        full_sums = T.add(a_fin, lb_fin)

        if not with_ilm:
            return full_sums, None
        if u_max == 0:
            return full_sums, T.constant(np.zeros(k))
        z_ilm = T.tanh(T.add(dproj, self._p("joint_b")))
        ilm_lp = T.log_softmax(
            T.add(T.matmul(z_ilm, self._p("label_w")), self._p("label_b")), axis=-1
        )
        kk2 = np.arange(k)[:, None]
        uu2 = np.arange(u_max)[None, :]
        per_tok = T.slice_(ilm_lp, (np.broadcast_to(kk2, pad.shape), np.broadcast_to(uu2, pad.shape), pad))
        keep = (uu2 < lens[:, None]).astype(float)
        ilm_totals = T.matmul(T.multiply(per_tok, T.constant(keep)), T.constant(np.ones(u_max)))
        return full_sums, ilm_totals

    def full_sum_log_probs(self, enc: T.Tensor, seqs) -> T.Tensor:
        full_sums, _ = self.score_sequences(enc, seqs, with_ilm=False)
        return full_sums

    def full_sum_log_prob(self, utterance: Utterance, labels) -> T.Tensor:
        enc = self.encode(utterance.acoustics)
        return T.slice_(self.full_sum_log_probs(enc, [list(labels)]), 0)

    def internal_lm_log_prob(self, labels) -> IlmScore:
        tokens = list(_check_ids(labels, self.config.vocab_size, "label"))
        if not tokens:
            return IlmScore(per_token=np.zeros(0), total=0.0)
        dstates = self.predict_states([tokens])
        dproj = T.matmul(dstates, self._p("joint_wd"))
        lp = T.log_softmax(
            T.add(
                T.matmul(T.tanh(T.add(dproj, self._p("joint_b"))), self._p("label_w")),
                self._p("label_b"),
            ),
            axis=-1,
        )
        per = lp.data[0, np.arange(len(tokens)), tokens]
        return IlmScore(per_token=per, total=float(np.sum(per)))

    def mle_loss(self, batch: list[Utterance]) -> T.Tensor:
        if not batch:
            raise ValueError("mle_loss: empty batch")
        parts = []
        for utt in batch:
            enc = self.encode(utt.acoustics)
            parts.append(self.full_sum_log_probs(enc, [utt.reference]))
        stacked = T.concat(parts, axis=0)
        return T.matmul(stacked, T.constant(np.full(len(batch), -1.0 / len(batch))))


def _init_params(cfg: HatConfig, seed: int) -> T.ParamSet:
    rng = np.random.default_rng(seed)
    e, h, j = cfg.embed_dim, cfg.hidden_dim, cfg.joint_dim
    v, a = cfg.vocab_size, cfg.acoustic_size

    def normal(*shape, scale):
        return rng.normal(size=shape) * scale

    ps = T.ParamSet()
    ps.add("aemb", normal(a, e, scale=1.0))
    ps.add("enc_wx", normal(e, h, scale=e**-0.5))
    ps.add("enc_wh", normal(h, h, scale=h**-0.5))
    ps.add("enc_b", np.zeros(h))
    ps.add("lemb", normal(v + 1, e, scale=1.0))
    ps.add("pred_wx", normal(e, h, scale=e**-0.5))
    ps.add("pred_wh", normal(h, h, scale=h**-0.5))
    ps.add("pred_b", np.zeros(h))
    ps.add("joint_we", normal(h, j, scale=h**-0.5))
    ps.add("joint_wd", normal(h, j, scale=h**-0.5))
    ps.add("joint_b", np.zeros(j))
    ps.add("blank_w", normal(j, scale=j**-0.5))
    ps.add("blank_b", np.float64(0.0))
    ps.add("label_w", normal(j, v, scale=j**-0.5))
    ps.add("label_b", np.zeros(v))
    return ps


def _check_ids(ids, bound: int, what: str) -> np.ndarray:
    arr = np.asarray(list(ids) if not isinstance(ids, np.ndarray) else ids, dtype=np.int64)
    if arr.ndim != 1:
        raise ValueError(f"{what} ids must be a flat sequence, got shape {arr.shape}")
    if arr.size and (arr.min() < 0 or arr.max() >= bound):
        raise ValueError(f"{what} id out of range [0, {bound})")
    return arr


def save_checkpoint(model: HatModel, base) -> None:
    base = Path(base)
    model.params.save(base.parent / (base.name + ".params"))
    header = {"kind": "hat", "config": asdict(model.config)}
    (base.parent / (base.name + ".json")).write_text(json.dumps(header, indent=2) + "\n")


def load_checkpoint(base) -> HatModel:
    base = Path(base)
    header = json.loads((base.parent / (base.name + ".json")).read_text())
    if header.get("kind") != "hat":
        raise ValueError(f"not a transducer checkpoint: {base}")
    model = HatModel(HatConfig(**header["config"]))
    model.params.set_values(T.ParamSet.load(base.parent / (base.name + ".params")).copy_values())
    return model
