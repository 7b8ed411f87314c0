"""Desk-scale glyph experiments: one recipe shared by the acceptance harness and the demos.

A :class:`GlyphRun` names everything that affects the outcome, so its
:meth:`~GlyphRun.key` can be used to cache finished runs.
"""

from __future__ import annotations

import ast
import hashlib
import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path

from .cnn import CnnSpec
from .episodes import AugmentationSpec, open_dataset
from .generator import HyperTransformer, TransformerConfig
from .trainer import EpisodeConfig, EvalReport, TrainConfig, evaluate, train

GLYPHS = "synth://glyphs?classes=30&per=20&size=16&seed=0"


@dataclass(frozen=True)
class GlyphRun:
    channels: int = 8
    generate: str = "logits"
    seed: int = 0
    steps: int = 4000
    unlabeled: int = 0
    transformer_layers: int = 2
    n_way: int = 5
    k_shot: int = 1
    q_query: int = 5
    lr0: float = 0.05
    meta_batch: int = 4
    rotations: bool = True
    eval_episodes: int = 200
    eval_seed: int = 777
    dataset: str = GLYPHS
    train_classes: int = 20
    test_classes: int = 10

    @property
    def label(self) -> str:
        kind = f"semi u={self.unlabeled}" if self.unlabeled else "supervised"
        return (f"{self.channels}ch {self.generate} {kind} {self.transformer_layers}L "
                f"seed {self.seed}")

    def key(self, salt: str = "") -> str:
        blob = json.dumps(asdict(self), sort_keys=True) + salt
        return hashlib.sha256(blob.encode()).hexdigest()[:20]

    def episode_config(self) -> EpisodeConfig:
        return EpisodeConfig(self.n_way, self.k_shot, self.q_query, self.unlabeled)


TRAINING_MODULES = ("tensor", "episodes", "cnn", "generator", "trainer", "experiments")


def _strip_docstrings(tree: ast.AST) -> ast.AST:
    for node in ast.walk(tree):
        body = getattr(node, "body", None)
        if (isinstance(body, list) and body and isinstance(body[0], ast.Expr)
                and isinstance(body[0].value, ast.Constant) and isinstance(body[0].value.value, str)):
            node.body = body[1:] or [ast.Pass()]
    return tree


def source_fingerprint() -> str:
    """Hash of the code that can change a training run's numbers.

    Comments and docstrings are ignored, so only semantic edits to the
    training path invalidate cached results.
    """
    h = hashlib.sha256()
    root = Path(__file__).parent
    for name in TRAINING_MODULES:
        tree = _strip_docstrings(ast.parse((root / f"{name}.py").read_text()))
        h.update(name.encode())
        h.update(ast.dump(tree).encode())
    return h.hexdigest()[:20]


def run_glyphs(run: GlyphRun, out_dir=None) -> dict:
    """Train one model and evaluate it on fresh episodes from the held-out classes."""
    started = time.time()
    parts = open_dataset(run.dataset).partition({"train": run.train_classes, "test": run.test_classes})
    spec = CnnSpec.standard(run.channels, run.n_way, generate=run.generate,
                            input_shape=parts["train"].image_shape)
    model = HyperTransformer(spec, TransformerConfig(num_layers=run.transformer_layers), seed=run.seed)
    config = TrainConfig(lr0=run.lr0, total_steps=run.steps, meta_batch=run.meta_batch, seed=run.seed,
                         eval_every=max(1, run.steps // 4), eval_episodes=50, eval_seed=run.eval_seed + 1,
                         semi_supervised=run.unlabeled > 0)
    episodes = run.episode_config()
    result = train(model, config, parts["train"], parts["test"], episodes,
                   AugmentationSpec(rotations_90=run.rotations), out_dir=out_dir)
    report = evaluate(model, parts["test"], run.eval_episodes, run.eval_seed, episodes,
                      forbidden_classes=parts["train"].class_names)
    return {"run": asdict(run), "accuracies": report.accuracies, "mean_accuracy": report.mean_accuracy,
            "ci95": report.ci95, "curve": result.metrics, "seconds": time.time() - started}


def pooled(results: list) -> EvalReport:
    """One report over every evaluation episode of several runs (e.g. seeds)."""
    return EvalReport.from_accuracies([a for r in results for a in r["accuracies"]])
