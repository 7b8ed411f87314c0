"""
Generating a CNN from five glyphs
=================================

One support image per class goes in, the weights of a small CNN come out.
This walk-through samples a 5-way 1-shot episode, looks at the tokens the
generator sees, trains for a few hundred steps and checks the generated
classifiers on held-out classes.

Training first sits at chance for several hundred steps while the
generator learns to tell the label embeddings apart; after that, accuracy
climbs quickly.  Runs in about two minutes.
"""

import numpy as np

from hypergen import (AugmentationSpec, CnnSpec, EpisodeConfig, HyperTransformer, TrainConfig,
                      TransformerConfig, evaluate, open_dataset, sample_episode, train)
from hypergen import tensor as T

# procedural glyphs: 30 classes of 20 samples, 16x16 pixels
glyphs = open_dataset("synth://glyphs?classes=30&per=20&size=16&seed=0")
splits = glyphs.partition({"train": 20, "test": 10})
print("train classes:", len(splits["train"]), " test classes:", len(splits["test"]))

# four 3x3 conv blocks (learned) and a logits layer (generated)
spec = CnnSpec.standard(channels=8, n_classes=5, generate="logits", input_shape=(1, 16, 16))
model = HyperTransformer(spec, TransformerConfig(num_layers=2, num_heads=2), seed=0)
print("generated layers:", spec.generated_layers)

episode = sample_episode(splits["train"], n=5, k=1, q=5, seed=0)
print("support", episode.support_images.shape, "query", episode.query_images.shape)

# One token per support sample and one placeholder per logits column.
with T.no_grad():
    run = model.generate(episode.support_images, episode.support_labels)
layout = run.layouts[spec.generated_layers[-1]]
print("token roles:", layout.roles)
print("token width:", layout.dim, "=", layout.sample_dim)
print("logits weights:", run.weights.kernels[4].shape)

# untrained generator: chance level on unseen classes
ep_config = EpisodeConfig(n_way=5, k_shot=1, q_query=5)
before = evaluate(model, splits["test"], 50, seed=1, episode_config=ep_config)
print(f"before training: {before.mean_accuracy:.3f} +- {before.ci95:.3f}")

config = TrainConfig(lr0=0.05, total_steps=1200, meta_batch=4, seed=0, eval_every=300, eval_episodes=0)
result = train(model, config, splits["train"], episode_config=ep_config,
               augmentation=AugmentationSpec(rotations_90=True))
for row in result.metrics:
    print(f"step {row['step']:5d}  train loss {row['train_loss']:.3f}  train accuracy {row['train_acc']:.3f}")

after = evaluate(model, splits["test"], 50, seed=1, episode_config=ep_config,
                 forbidden_classes=splits["train"].class_names)
print(f"after 1200 steps: {after.mean_accuracy:.3f} +- {after.ci95:.3f}")
print("per-episode accuracy, first ten:", np.round(after.accuracies[:10], 2))
