"""
Two attention layers make use of unlabeled samples
==================================================

Layer one lets each unlabeled sample attend to the labeled ones and adds a
little of the matching class token to itself.  Layer two is the class-mean
construction, which now also picks up the marked unlabeled samples.  The
prototype for a class becomes the mean of its labeled and unlabeled members.
"""

import numpy as np

from hypergen.episodes import UNLABELED
from hypergen.oracles import construct_attention_generator, semi_supervised_propagation

rng = np.random.default_rng(3)
centres = 3.0 * np.eye(3, 5)
labeled = centres + 0.1 * rng.normal(size=centres.shape)
unlabeled = centres + 0.1 * rng.normal(size=centres.shape)

emb = np.vstack([labeled, unlabeled])
labels = np.array([0, 1, 2] + [UNLABELED] * 3)

only_labeled = construct_attention_generator(labeled, [0, 1, 2])
both = semi_supervised_propagation(emb, labels, beta1=5.0)

print("class marks on the unlabeled samples:")
print(np.round(both.marks, 3))
truth = (labeled + unlabeled) / 2
print("prototype error, labeled only:   ", np.abs(only_labeled.slices - centres).mean().round(4))
print("prototype error, with propagation:", np.abs(both.slices - centres).mean().round(4))
print("distance to the two-sample mean:  ", np.abs(both.slices - truth).max().round(6))
