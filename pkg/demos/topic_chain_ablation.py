"""
Does reading the whole set help?
================================

In the topic-chain corpus each sentence shares a link token with its
successor, and which end of the chain comes first is only signalled by a flag
in the interior sentences. A decoder that has not looked at the full set
cannot tell the two ends apart, so the set encoder should buy a higher
Kendall tau. One seed of each model, roughly 5 minutes in total.
"""

from sentorder import data as D, decode as DE, model as M, training as TR

corpus = D.generate_synthetic(D.SyntheticSpec(kind="topic-chain", min_filler=1, max_filler=3, seed=0))

for use_encoder in (True, False):
    config = M.ModelConfig(vocab_size=len(corpus.vocab), d_word=32, d_hidden=64, d_mlp=64,
                           scorer="bilinear", use_encoder=use_encoder)
    result = TR.train(corpus.train, corpus.validation, config,
                      TR.TrainConfig(lr=2e-3, max_epochs=80, patience=6))
    report = DE.evaluate(result.params, corpus.test, config, beam_width=16)
    name = "with set encoder" if use_encoder else "decoder only    "
    print(f"{name}: tau {report.mean_tau:.3f}, accuracy {report.accuracy:.3f} "
          f"({result.best_epoch} epochs to best)")
