"""
Training and querying the external n-gram LM
============================================

The external LM is an interpolated add-k n-gram fit on text-only data.
Here we build a corpus with a strong bigram regularity, train on it, and
watch the model assign most of its probability to the expected follower.
"""

import numpy as np

from hatfusion import lm

rng = np.random.default_rng(3)

# word 5 is nearly always followed by word 6; everything else is uniform
corpus = []
for _ in range(400):
    sent = [int(x) for x in rng.integers(0, 5, size=rng.integers(2, 6))]
    if rng.random() < 0.5:
        at = int(rng.integers(0, len(sent)))
        sent[at:at] = [5, 6]
    corpus.append(sent)

model = lm.train_ngram(corpus, order=2, smoothing=0.1, vocab=list(range(7)))

# next-token distribution after the trigger word
dist = np.exp([lm.next_logprob(model, [5], w) for w in range(7)])
print("P(w | 5):", np.round(dist, 4))
print("mass on the expected follower:", round(float(dist[6]), 4))

# scoring a whole sequence returns per-token log-probs
scores = lm.score_tokens(model, [5, 6, 2])
print("per-token log-probs for [5, 6, 2]:", np.round(scores, 3))

# unseen contexts back off toward the unigram distribution
tail = np.exp([lm.next_logprob(model, [6], w) for w in range(7)])
print("P(w | 6) backs off smoothly:", np.round(tail, 4))
print("rows sum to one:", float(dist.sum()), float(tail.sum()))

# persistence round-trips exactly
lm.save_lm(model, "/tmp/demo.lm")
back = lm.load_lm("/tmp/demo.lm")
print("round-trip identical:",
      np.array_equal(lm.score_tokens(model, [1, 5, 6]),
                     lm.score_tokens(back, [1, 5, 6])))
