"""
One attention layer doing one step of gradient descent
======================================================

Starting from a logits layer that ignores the label, one gradient step of
cross-entropy moves each class row towards that class's mean embedding and
away from the overall mean.  A single self-attention layer with hand-set
query/key/value matrices produces the same update, which is why a
Transformer is a natural weight generator.
"""

import numpy as np

from hypergen.checks import autodiff_logits_step
from hypergen.oracles import construct_attention_generator, one_step_gd_logits

rng = np.random.default_rng(0)
n_classes, shots, dim, gamma = 4, 3, 6, 0.5
labels = np.repeat(np.arange(n_classes), shots)
emb = rng.normal(size=(len(labels), dim))

# the closed form ...
update = one_step_gd_logits(emb, labels, gamma, n_classes)
# ... against the tape
dW, db = autodiff_logits_step(emb, labels, gamma, n_classes)
print("closed form vs autodiff, max |dW| gap:", np.max(np.abs(update.deltaW - dW)))
print("bias update on a balanced episode:", np.round(update.deltaB, 15))

# Placeholder i queries the label embedding of class i; a sharp softmax
# (beta_scale) picks out that class's samples, the value map copies their
# embeddings, and a second head averages over every sample.
att = construct_attention_generator(emb, labels, n_classes, gamma=gamma, beta_scale=50.0, two_head=True)
print("attention vs gradient step, max gap:", np.max(np.abs(att.delta_w - update.deltaW)))
print("attention mass leaking to other classes:", att.leakage.max())

# Too soft a softmax mixes classes together.
for beta in (1.0, 5.0, 20.0, 50.0):
    soft = construct_attention_generator(emb, labels, n_classes, gamma=gamma, beta_scale=beta, two_head=True)
    print(f"beta {beta:5.1f}: gap {np.max(np.abs(soft.delta_w - update.deltaW)):.2e}")
