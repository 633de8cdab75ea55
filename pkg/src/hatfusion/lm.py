"""External language models: add-k n-gram and a tiny recurrent neural LM.

Both expose the same incremental interface (initial_state / advance_state /
next_token_logprobs) so fusion code never cares which one it holds. The
n-gram next-token distribution normalizes over the vocabulary alone;
sentence end is modeled as a separate stop event so the optional EOS term
does not disturb per-token normalization.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T

BOS = "<s>"
UNK = "<unk>"
_RESERVED = {BOS, UNK}


@dataclass
class LmScore:
    per_token: np.ndarray
    eos: float
    total: float


@dataclass
class NGramLm:
    order: int
    smoothing: float
    vocab: list
    counts: dict
    eos_counts: dict
    context_totals: dict
    has_unk: bool
    _index: dict = field(default_factory=dict, repr=False)
    _dists: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._index = {tok: i for i, tok in enumerate(self.vocab)}

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def token_index(self, token) -> int:
        idx = self._index.get(token)
        if idx is None:
            if not self.has_unk:
                raise ValueError(f"token {token!r} not in vocabulary and no {UNK!r} entry")
            idx = self._index[UNK]
        return idx

    def context_dist(self, ctx: tuple) -> np.ndarray:
        """Log-probs over the vocabulary for one context, cached."""
        cached = self._dists.get(ctx)
        if cached is not None:
            return cached
        v = self.vocab_size
        k = self.smoothing
        num = np.full(v, k)
        table = self.counts.get(ctx)
        if table:
            for tok, c in table.items():
                num[self._index[tok]] += c
        tot = self.context_totals.get(ctx, 0) + k * v
        if tot == 0.0:
            dist = np.full(v, -np.log(v))
        else:
            with np.errstate(divide="ignore"):
                dist = np.log(num) - np.log(tot)
        self._dists[ctx] = dist
        return dist

    def stop_logprob(self, ctx: tuple) -> float:
        """Log-prob of the sentence ending after this context (add-k Bernoulli)."""
        k = self.smoothing
        stop = self.eos_counts.get(ctx, 0)
        go = self.context_totals.get(ctx, 0)
        denom = stop + go + 2 * k
        if denom == 0.0:
            return float(np.log(0.5))
        with np.errstate(divide="ignore"):
            return float(np.log(stop + k) - np.log(denom))


class NeuralLm:
    """Single-layer tanh recurrence with an output head over V plus EOS."""

    def __init__(self, vocab: list, embed_dim: int = 8, hidden_dim: int = 16, seed: int = 0):
        self.vocab = list(vocab)
        self.embed_dim = embed_dim
        self.hidden_dim = hidden_dim
        self._index = {tok: i for i, tok in enumerate(self.vocab)}
        rng = np.random.default_rng(seed)
        v, e, h = len(self.vocab), embed_dim, hidden_dim
        ps = T.ParamSet()
        ps.add("emb", rng.normal(size=(v + 1, e)))
        ps.add("wx", rng.normal(size=(e, h)) * e**-0.5)
        ps.add("wh", rng.normal(size=(h, h)) * h**-0.5)
        ps.add("b", np.zeros(h))
        ps.add("head_w", rng.normal(size=(h, v + 1)) * h**-0.5)
        ps.add("head_b", np.zeros(v + 1))
        self.params = ps

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    @property
    def has_unk(self) -> bool:
        return UNK in self._index

    def token_index(self, token) -> int:
        idx = self._index.get(token)
        if idx is None:
            if not self.has_unk:
                raise ValueError(f"token {token!r} not in vocabulary and no {UNK!r} entry")
            idx = self._index[UNK]
        return idx

    def start_hidden(self) -> np.ndarray:
        emb = self.params["emb"].data
        return np.tanh(emb[self.vocab_size] @ self.params["wx"].data + self.params["b"].data)

    def step_hidden(self, h: np.ndarray, idx: int) -> np.ndarray:
        emb = self.params["emb"].data
        pre = emb[idx] @ self.params["wx"].data + self.params["b"].data
        return np.tanh(pre + h @ self.params["wh"].data)

    def output_logprobs(self, h: np.ndarray) -> np.ndarray:
        logits = h @ self.params["head_w"].data + self.params["head_b"].data
        return T.log_softmax_np(logits)


@dataclass
class LmState:
    """Opaque incremental scoring state for either model kind."""

    context: tuple = ()
    hidden: np.ndarray | None = None


def _as_tokens(sentence):
    return sentence.split() if isinstance(sentence, str) else list(sentence)


def train_ngram(corpus, order: int, smoothing: float = 0.1, vocab=None) -> NGramLm:
    if order < 1:
        raise ValueError(f"n-gram order must be >= 1, got {order}")
    sentences = [_as_tokens(s) for s in corpus]
    if not sentences:
        raise ValueError("empty corpus")
    if vocab is None:
        seen = {}
        for s in sentences:
            for tok in s:
                if tok in _RESERVED:
                    raise ValueError(f"corpus token {tok!r} collides with a reserved marker")
                seen.setdefault(tok, None)
        vocab = list(seen) + [UNK]
    else:
        vocab = list(vocab)
    has_unk = UNK in vocab
    index = set(vocab)

    counts: dict = {}
    eos_counts: dict = {}
    totals: dict = {}
    pad = (BOS,) * (order - 1)
    for s in sentences:
        toks = [t if t in index else UNK for t in s] if has_unk else s
        ctx = pad
        for tok in toks:
            if tok not in index:
                raise ValueError(f"token {tok!r} outside the explicit vocabulary")
            counts.setdefault(ctx, {})
            counts[ctx][tok] = counts[ctx].get(tok, 0) + 1
            totals[ctx] = totals.get(ctx, 0) + 1
            if order > 1:
                ctx = (ctx + (tok,))[-(order - 1):]
        eos_counts[ctx] = eos_counts.get(ctx, 0) + 1
    return NGramLm(
        order=order,
        smoothing=float(smoothing),
        vocab=vocab,
        counts=counts,
        eos_counts=eos_counts,
        context_totals=totals,
        has_unk=has_unk,
    )


def initial_state(lm) -> LmState:
    if isinstance(lm, NGramLm):
        return LmState(context=(BOS,) * (lm.order - 1))
    return LmState(hidden=lm.start_hidden())


def next_token_logprobs(lm, state: LmState) -> np.ndarray:
    """Log-probs over lm.vocab for the next token (EOS mass excluded)."""
    if isinstance(lm, NGramLm):
        return lm.context_dist(state.context)
    return lm.output_logprobs(state.hidden)[: lm.vocab_size]


def eos_logprob(lm, state: LmState) -> float:
    if isinstance(lm, NGramLm):
        return lm.stop_logprob(state.context)
    return float(lm.output_logprobs(state.hidden)[lm.vocab_size])


def advance_state(lm, state: LmState, token) -> tuple[LmState, float]:
    idx = lm.token_index(token)
    logp = float(next_token_logprobs(lm, state)[idx])
    if isinstance(lm, NGramLm):
        tok = lm.vocab[idx]
        new = LmState(context=(state.context + (tok,))[-(lm.order - 1):] if lm.order > 1 else ())
        return new, logp
    return LmState(hidden=lm.step_hidden(state.hidden, idx)), logp


def score_tokens(lm, tokens, with_eos: bool = False) -> LmScore:
    """Per-token log-probs r_l plus the optional sentence-end term."""
    state = initial_state(lm)
    toks = _as_tokens(tokens)
    per = np.empty(len(toks))
    for i, tok in enumerate(toks):
        state, per[i] = advance_state(lm, state, tok)
    eos = eos_logprob(lm, state)
    total = float(np.sum(per)) + (eos if with_eos else 0.0)
    return LmScore(per_token=per, eos=eos, total=total)


def train_neural_lm(
    corpus,
    vocab,
    embed_dim: int = 8,
    hidden_dim: int = 16,
    steps: int = 300,
    lr: float = 1e-2,
    batch_size: int = 8,
    seed: int = 0,
) -> NeuralLm:
    """Next-token cross-entropy training (EOS included as a target)."""
    lm = NeuralLm(vocab, embed_dim, hidden_dim, seed=seed)
    sentences = [[lm.token_index(t) for t in _as_tokens(s)] for s in corpus]
    if not sentences:
        raise ValueError("empty corpus")
    rng = np.random.default_rng(seed + 1)
    opt = T.Adam(lr)
    v = lm.vocab_size
    for _ in range(steps):
        picks = rng.integers(0, len(sentences), size=batch_size)
        with T.Tape() as tape:
            parts = []
            for p in picks:
                ids = sentences[p]
                terms = []
                h = T.tanh(
                    T.add(
                        T.matmul(T.embedding_lookup(lm.params["emb"], [v]), lm.params["wx"]),
                        lm.params["b"],
                    )
                )
                for tgt in ids + [v]:
                    logits = T.add(T.matmul(h, lm.params["head_w"]), lm.params["head_b"])
                    lp = T.log_softmax(logits, axis=-1)
                    terms.append(lp[:, tgt])
                    if tgt != v:
                        pre = T.add(
                            T.matmul(T.embedding_lookup(lm.params["emb"], [tgt]), lm.params["wx"]),
                            lm.params["b"],
                        )
                        h = T.tanh(T.add(pre, T.matmul(h, lm.params["wh"])))
                parts.append(T.concat(terms, axis=0))
            flat = T.concat(parts, axis=0)
            loss = T.matmul(flat, T.constant(np.full(flat.shape[0], -1.0 / flat.shape[0])))
        tape.backward(loss)
        opt.step(lm.params)
    return lm


# -- persistence ------------------------------------------------------------


def save_lm(lm, path) -> None:
    path = Path(path)
    if isinstance(lm, NGramLm):
        lines = ["ngram-lm v1"]
        lines.append(
            json.dumps(
                {
                    "order": lm.order,
                    "smoothing": lm.smoothing,
                    "vocab": lm.vocab,
                    "has_unk": lm.has_unk,
                }
            )
        )
        for ctx in sorted(lm.counts, key=repr):
            for tok in sorted(lm.counts[ctx], key=repr):
                lines.append(json.dumps([list(ctx), tok, lm.counts[ctx][tok]]))
        for ctx in sorted(lm.eos_counts, key=repr):
            lines.append(json.dumps([list(ctx), None, lm.eos_counts[ctx]]))
        path.write_text("\n".join(lines) + "\n")
        return
    header = {
        "kind": "neural-lm",
        "vocab": lm.vocab,
        "embed_dim": lm.embed_dim,
        "hidden_dim": lm.hidden_dim,
    }
    (path.parent / (path.name + ".json")).write_text(json.dumps(header) + "\n")
    lm.params.save(path.parent / (path.name + ".params"))


def load_lm(path):
    path = Path(path)
    if path.exists():
        lines = path.read_text().splitlines()
        if not lines or lines[0] != "ngram-lm v1":
            raise ValueError(f"unrecognized LM file {path}")
        meta = json.loads(lines[1])
        counts: dict = {}
        eos_counts: dict = {}
        totals: dict = {}
        for line in lines[2:]:
            if not line.strip():
                continue
            ctx_l, tok, c = json.loads(line)
            ctx = tuple(ctx_l)
            if tok is None:
                eos_counts[ctx] = c
            else:
                counts.setdefault(ctx, {})[tok] = c
                totals[ctx] = totals.get(ctx, 0) + c
        return NGramLm(
            order=meta["order"],
            smoothing=meta["smoothing"],
            vocab=meta["vocab"],
            counts=counts,
            eos_counts=eos_counts,
            context_totals=totals,
            has_unk=meta["has_unk"],
        )
    header_path = path.parent / (path.name + ".json")
    if not header_path.exists():
        raise FileNotFoundError(f"no LM at {path}")
    header = json.loads(header_path.read_text())
    if header.get("kind") != "neural-lm":
        raise ValueError(f"unrecognized LM header {header_path}")
    lm = NeuralLm(header["vocab"], header["embed_dim"], header["hidden_dim"])
    lm.params.set_values(T.ParamSet.load(path.parent / (path.name + ".params")).copy_values())
    return lm
