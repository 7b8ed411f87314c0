"""
Omniglot 20-way 1-shot, logits generated
========================================

Full-size reproduction attempt: an 8-channel CNN whose logits layer is
generated, trained on the usual 1200 background/evaluation character split
with 90 degree rotations as extra classes.  Expect hours to days on a CPU;
the published figure for this setting is about 87%.  There is no pass
threshold.

Usage::

    python demos/omniglot_20way.py /path/to/omniglot [--steps 50000] [--out runs/omniglot]

The Omniglot root holds ``<alphabet>/<character>/*.png`` (both the background
and evaluation archives unpacked into it).  Images are resized to 28x28 once
and cached next to ``--out``.
"""

import argparse
import logging
from dataclasses import replace
from pathlib import Path

import numpy as np
from PIL import Image

from hypergen import (AugmentationSpec, CnnSpec, EpisodeConfig, HyperTransformer, TrainConfig,
                      TransformerConfig, evaluate, open_dataset, train)


def flatten(root: Path, cache: Path, size: int = 28) -> Path:
    """Copy every character into ``cache/<alphabet>__<character>/`` at ``size`` pixels."""
    if cache.exists() and any(cache.iterdir()):
        return cache
    for char_dir in sorted(root.glob("*/*")):
        if not char_dir.is_dir():
            continue
        dest = cache / f"{char_dir.parent.name}__{char_dir.name}"
        dest.mkdir(parents=True, exist_ok=True)
        for png in sorted(char_dir.glob("*.png")):
            with Image.open(png) as im:
                im.convert("L").resize((size, size), Image.LANCZOS).save(dest / png.name)
    return cache


parser = argparse.ArgumentParser()
parser.add_argument("root", type=Path)
parser.add_argument("--steps", type=int, default=50_000)
parser.add_argument("--out", type=Path, default=Path("runs/omniglot"))
parser.add_argument("--seed", type=int, default=0)
args = parser.parse_args()
logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

data = open_dataset(str(flatten(args.root, args.out.parent / "omniglot28")))
# class order is alphabetical; shuffle once so train/test mix alphabets
order = np.random.default_rng(0).permutation(len(data.classes))
data = replace(data, classes=[data.classes[i] for i in order])
splits = data.partition({"train": 1200, "test": len(data.classes) - 1200})

spec = CnnSpec.standard(8, 20, generate="logits", input_shape=data.image_shape)
model = HyperTransformer(spec, TransformerConfig(num_layers=2, num_heads=2), seed=args.seed)
episodes = EpisodeConfig(n_way=20, k_shot=1, q_query=5)
config = TrainConfig(lr0=0.02, total_steps=args.steps, meta_batch=8, seed=args.seed,
                     eval_every=2000, eval_episodes=100, checkpoint_every=2000)
train(model, config, splits["train"], splits["test"], episodes, AugmentationSpec(rotations_90=True),
      out_dir=args.out)
report = evaluate(model, splits["test"], 1000, seed=2024, episode_config=episodes,
                  forbidden_classes=splits["train"].class_names)
print(f"20-way 1-shot test accuracy: {report.mean_accuracy:.4f} +- {report.ci95:.4f}")
