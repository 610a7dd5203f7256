"""
Which words drive the decision?
===============================

Word salience is the size of the gradient of a sentence's score with respect
to each word vector. The hand-built pass-through model only lets the last
word of a sentence through, so its salience map should light up the final
token of every sentence.
"""

import numpy as np

from sentorder import analysis as A, data as D

params, config = A.passthrough_model(vocab_size=20)
rng = np.random.default_rng(0)
doc = D.Document("toy", tuple(tuple(int(t) for t in rng.integers(2, 20, 5)) for _ in range(3)))

smap = A.word_salience(params, doc, config)
for sent in smap.sentences:
    print(" ".join(f"{n:.1e}" for n in sent.norms))

# brighter = more salient
print(A.render_ansi(smap))
