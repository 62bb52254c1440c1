"""
Training a single privatizer
============================

A generator and a Siamese discriminator play against each other for a few
epochs on small synthetic images.  The distortion penalty ``lam`` sets how
far the generator may move away from its input.  Try ``lam = 10`` against
``lam = 0.7`` to see both ends of the trade-off.

Takes about a minute on one core.
"""

import sys

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from sgap.data import DatasetSpec, stack_images, synth_glyph_corpus
from sgap.experiment import reference_pairs
from sgap.metrics import misclassification_rate_from_probs, pair_probabilities, privatize_images, ssim
from sgap.training import TrainingConfig, train

lam = float(sys.argv[1]) if len(sys.argv) > 1 else 1.0

dataset = DatasetSpec(kind="SYNTHETIC", image_size=32, identities=8, images_per_identity=8, epoch_pair_count=128,
                      seed=0)
cfg = TrainingConfig(lam=lam, epochs=15, batch_size=16, learning_rate_g=1e-3, seed=0,
                     generator={"base_channels": 8},
                     discriminator={"conv_channels": [8, 16, 16], "dense_units": 64})
result = train(dataset, cfg)

# %%
# The step log records both sides of the game.  ``mean_prob`` is the
# discriminator's same-identity probability on (reference, privatized) pairs;
# the generator pushes it down.

for epoch in range(0, cfg.epochs, 3):
    recs = [r for r in result.records if r.epoch == epoch]
    print(f"epoch {epoch:2d}  d_loss {np.mean([r.d_loss for r in recs]):.3f}  "
          f"distortion {np.mean([r.mean_distortion for r in recs]):.3f}  "
          f"p(same) {np.mean([r.mean_prob for r in recs]):.3f}")

# %%
# Privatize fresh images of the same people and ask the trained discriminator
# whether each one still matches another photo of its owner.

held = synth_glyph_corpus(8, 12, 32, seed=0)[8:]
gen, disc = result.params.build()
originals = stack_images(held)
private = privatize_images(gen, originals, seed=0)
refs, _ = reference_pairs(held, seed=0)
rate = misclassification_rate_from_probs(pair_probabilities(disc, refs, private))
mean_ssim = np.mean([ssim(o.transpose(1, 2, 0), p.transpose(1, 2, 0)) for o, p in zip(originals, private)])
print(f"lambda {lam}: misclassification {rate:.3f}, mean SSIM {mean_ssim:.3f}")

fig, axes = plt.subplots(2, 6, figsize=(9, 3.2))
for k in range(6):
    axes[0, k].imshow(originals[4 * k, 0], cmap="gray", vmin=-1, vmax=1)
    axes[1, k].imshow(private[4 * k, 0], cmap="gray", vmin=-1, vmax=1)
    axes[0, k].axis("off")
    axes[1, k].axis("off")
axes[0, 0].set_title("original", fontsize=8, loc="left")
axes[1, 0].set_title("privatized", fontsize=8, loc="left")
fig.tight_layout()
fig.savefig(f"privatized_lam_{lam:g}.png")
