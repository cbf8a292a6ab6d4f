"""Linear CCA against feature-input deep CCA when the audio view is a cubic function of the latent.

Trains both on 800 pairs and scores held-out correlation and instance-level retrieval.
Takes about a minute on one core.

    python demos/nonlinearity_gap.py
"""

import numpy as np

from crossmodal.retrieval import evaluate
from crossmodal.synthdata import SynthSpec, generate
from crossmodal.training import TrainConfig, epoch_means, train_feature_dcca, train_linear_cca

data, truth = generate(SynthSpec(n_pairs=1000, latent_dim=3, noise=0.1, nonlinear=True, seed=0))
train_set, test_set = data.split(0.8, seed=0)
print("population correlations of the observed views:", np.round(truth.population_correlations, 3))
print("what an ideal nonlinear audio map could reach:  ", np.round(truth.oracle_correlations, 3))

linear = train_linear_cca(train_set, k=3)
deep = train_feature_dcca(train_set, TrainConfig(epochs=100, batch_size=200, shared_dim=3))
curve = epoch_means(deep.loss_trace)
print(f"DCCA batch objective: epoch 1 {curve[0]:.3f}, epoch 100 {curve[-1]:.3f}")

for name, model in (("linear CCA", linear), ("deep CCA", deep)):
    a, t = model.embed(test_set.audio, "audio"), model.embed(test_set.text, "text")
    held_out = sum(np.corrcoef(a[:, i], t[:, i])[0, 1] for i in range(3))
    mrr = [evaluate(model, test_set, d, ks=[3], ns=[1, 10])[0] for d in ("audio-to-text", "text-to-audio")]
    print(f"{name:10s}  held-out total corr {held_out:.3f}  "
          f"MRR1 a2t {mrr[0].mrr1:.3f}  t2a {mrr[1].mrr1:.3f}  recall@10 a2t {mrr[0].recall_at[10]:.3f}")
