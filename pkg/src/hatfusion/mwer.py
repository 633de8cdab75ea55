"""Expected word-error objective over N-best lists.

The discriminative loss renormalizes exact sequence scores over the decoded
top-K,

    log p_k = (e2e_k - mu * sum(s_l) + nu * sum(r_l)) + C,

and minimizes sum_k p_k * NWE(Y_k, Y*) plus a small MLE anchor on the
reference. Word-error counts come from a unit-cost Levenshtein distance.
The tensor path recomputes e2e and ILM scores on tape so gradients reach
model parameters; ELM scores enter as constants (the external LM is frozen).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .decode import NBestList
from .hat import HatModel, Utterance


@dataclass
class MwerConfig:
    mu: float = 0.0
    nu: float = 0.0
    theta: float = 0.005
    k: int = 8
    stop_ilm_gradient: bool = False

    def __post_init__(self):
        if self.mu < 0 or self.nu < 0 or self.theta < 0:
            raise ValueError("mwer weights must be nonnegative")
        if self.k < 1:
            raise ValueError(f"top-K size must be >= 1, got {self.k}")


@dataclass
class TopKPosterior:
    log_phat: np.ndarray
    normalizer: float

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_phat)


def nwe(hypothesis, reference) -> int:
    """Word-level edit distance with unit substitution/insertion/deletion."""
    a, b = list(hypothesis), list(reference)
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[-1]


def _lse(x: np.ndarray) -> float:
    m = float(np.max(x))
    return m + float(np.log(np.sum(np.exp(x - m))))


def _raw_scores(nbest: NBestList, mu: float, nu: float) -> np.ndarray:
    if not nbest.hyps:
        raise ValueError("renormalize: empty hypothesis list")
    for h in nbest.hyps:
        if h.e2e_fullsum is None:
            raise ValueError("renormalize: exact full-sum scores missing; rescore first")
    return np.array(
        [
            (h.e2e_fullsum - mu * float(np.sum(h.ilm_scores)))
            + nu * float(np.sum(h.elm_scores))
            for h in nbest.hyps
        ]
    )


def renormalize(nbest: NBestList, mu: float = 0.0, nu: float = 0.0) -> TopKPosterior:
    """Posterior over the decoded top-K from exact full-sum scores."""
    raw = _raw_scores(nbest, mu, nu)
    c = -_lse(raw)
    return TopKPosterior(log_phat=raw + c, normalizer=c)


def mwer_loss(posterior: TopKPosterior, nbest: NBestList, reference) -> float:
    """Expected number of word errors under the top-K posterior."""
    errors = np.array([nwe(h.tokens, reference) for h in nbest.hyps], dtype=float)
    return float(np.dot(posterior.probs, errors))


def expected_errors(nbest: NBestList, reference, mu: float = 0.0, nu: float = 0.0) -> float:
    return mwer_loss(renormalize(nbest, mu, nu), nbest, reference)


# -- differentiable path ------------------------------------------------------


def renormalized_expectation(raw: T.Tensor, errors) -> T.Tensor:
    """Σ softmax(raw)_k · errors_k; the shared core of every MWER-style loss."""
    log_phat = T.add(raw, T.scale(T.logsumexp(raw, axis=0), -1.0))
    return T.dot(T.exp(log_phat), T.constant(np.asarray(errors, dtype=float)))


def mwer_loss_scores(e2e: T.Tensor, errors, ilm: T.Tensor | None = None,
                     elm_totals=None, mu: float = 0.0, nu: float = 0.0,
                     stop_ilm_gradient: bool = False) -> T.Tensor:
    """Σ p_k · NWE_k from score vectors; omit ilm/elm for the plain objective.

    ``e2e`` and ``ilm`` are (K,) tensors on tape; ``elm_totals`` is a constant
    vector. With ``stop_ilm_gradient`` the ILM term still shifts the posterior
    but contributes no gradient to the shared decoder weights.
    """
    raw = e2e
    if ilm is not None:
        if stop_ilm_gradient:
            ilm = ilm.detach()
        raw = T.add(raw, T.scale(ilm, -float(mu)))
    if elm_totals is not None:
        raw = T.add(raw, T.constant(float(nu) * np.asarray(elm_totals, dtype=float)))
    return renormalized_expectation(raw, errors)


def composite_loss(utterance: Utterance, nbest: NBestList, model: HatModel,
                   config: MwerConfig, lm_aware: bool = True) -> T.Tensor:
    """MWER term plus -theta * log P(Y*|X), scored in one lattice sweep.

    With ``lm_aware`` off the raw scores are the e2e full-sums alone and no
    LM machinery is touched; that is the regular-MWER special case.
    """
    if not nbest.hyps:
        raise ValueError("composite_loss: empty hypothesis list")
    reference = list(utterance.reference)
    seqs = nbest.token_lists() + [reference]
    k = len(nbest.hyps)
    errors = np.array([nwe(h.tokens, reference) for h in nbest.hyps], dtype=float)
    enc = model.encode(utterance.acoustics)
    if lm_aware:
        full, ilm = model.score_sequences(enc, seqs)
        elm_totals = np.array([float(np.sum(h.elm_scores)) for h in nbest.hyps])
        term = mwer_loss_scores(full[:k], errors, ilm[:k], elm_totals,
                                config.mu, config.nu, config.stop_ilm_gradient)
    else:
        full = model.full_sum_log_probs(enc, seqs)
        term = mwer_loss_scores(full[:k], errors)
    return T.add(term, T.scale(full[k], -float(config.theta)))
