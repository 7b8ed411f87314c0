"""End-to-end meta-training of the weight generator and episode evaluation."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .cnn import CnnSpec, accuracy
from .episodes import AugmentationSpec, DatasetIndex, Episode, sample_episode, unlabeled_keep_probability
from .generator import HyperTransformer, TransformerConfig
from .io import read_hgw, write_hgw

log = logging.getLogger(__name__)

METRIC_FIELDS = ["step", "lr", "train_loss", "train_acc", "test_acc", "ci95"]


@dataclass
class EpisodeConfig:
    n_way: int = 5
    k_shot: int = 1
    q_query: int = 15
    u_unlabeled: int = 0


@dataclass
class TrainConfig:
    lr0: float = 0.02
    decay: float = 0.95
    decay_every: int = 100_000
    total_steps: int = 1000
    meta_batch: int = 8
    seed: int = 0
    eval_every: int = 0  # 0: evaluate only at the end
    eval_episodes: int = 100
    eval_seed: int = 12345
    checkpoint_every: int = 0  # 0: checkpoint only at the end
    semi_supervised: bool = False
    ignore_start: float = 0.7

    def __post_init__(self):
        if self.meta_batch < 1:
            raise ValueError("meta_batch must be >= 1")

    def lr(self, step: int) -> float:
        return self.lr0 * self.decay ** (step // self.decay_every)


def ci95(std: float, n: int) -> float:
    return 1.96 * std / math.sqrt(n) if n > 0 else float("nan")


@dataclass
class EvalReport:
    episodes: int
    mean_accuracy: float
    ci95: float
    accuracies: list = field(default_factory=list)
    class_maps: list = field(default_factory=list)

    @classmethod
    def from_accuracies(cls, accs, class_maps=()) -> "EvalReport":
        accs = [float(a) for a in accs]
        std = float(np.std(accs, ddof=1)) if len(accs) > 1 else 0.0
        return cls(len(accs), float(np.mean(accs)), ci95(std, len(accs)), accs, list(class_maps))

    def to_json(self) -> dict:
        return {"episodes": self.episodes, "mean_accuracy": self.mean_accuracy, "ci95": self.ci95}


def pooled_ci(*reports: EvalReport) -> float:
    """CI half-width of a difference of independent means."""
    return math.sqrt(sum(r.ci95 ** 2 for r in reports))


def _derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1, dtype=np.uint64)[0])


def training_episodes(index: DatasetIndex, ep: EpisodeConfig, config: TrainConfig, step: int,
                      augmentation: AugmentationSpec | None = None) -> list:
    """The meta-batch for ``step``; a pure function of (index, configs, step)."""
    eps = []
    for i in range(config.meta_batch):
        e = sample_episode(index, ep.n_way, ep.k_shot, ep.q_query, ep.u_unlabeled,
                           _derive_seed(config.seed, step, i), augmentation)
        if config.semi_supervised and ep.u_unlabeled:
            keep = unlabeled_keep_probability(step, config.total_steps, config.ignore_start)
            e = e.mask_unlabeled(keep, np.random.default_rng(_derive_seed(config.seed, step, i, 1)))
        eps.append(e)
    return eps


def episode_gradients(model: HyperTransformer, episode: Episode):
    """Query loss, query accuracy and per-parameter gradients for one episode."""
    with T.Tape():
        loss, logits, _ = model.episode_loss(episode)
        if not np.isfinite(loss.item()):
            raise T.NumericError(f"non-finite query loss on episode seed {episode.seed}")
        grads = T.backward(loss)
    by_name = {}
    for name, p in model.params.items():
        g = grads.get(p)
        p.grad = None
        by_name[name] = g
    return loss.item(), accuracy(logits, episode.query_labels), by_name


def meta_step(model: HyperTransformer, episodes: list, lr: float):
    """One plain SGD update with the gradient averaged over ``episodes``.

    Gradients are reduced in episode order.  Returns ``(params, mean loss,
    mean query accuracy)``.
    """
    total = {name: None for name in model.params}
    losses, accs = [], []
    for ep in episodes:
        loss, acc, grads = episode_gradients(model, ep)
        losses.append(loss)
        accs.append(acc)
        for name, g in grads.items():
            if g is not None:
                total[name] = g if total[name] is None else total[name] + g
    scale = lr / len(episodes)
    for name, p in model.params.items():
        if total[name] is not None:
            p.data = p.data - scale * total[name]
    return model.params, float(np.mean(losses)), float(np.mean(accs))


def evaluate(model: HyperTransformer, index: DatasetIndex, n_episodes: int, seed: int,
             episode_config: EpisodeConfig | None = None, forbidden_classes=()) -> EvalReport:
    """Mean query accuracy of generated CNNs over ``n_episodes`` fresh episodes.

    ``forbidden_classes`` (e.g. the training split's class names) must not
    appear in any evaluated episode.
    """
    ep = episode_config or EpisodeConfig()
    forbidden = set(forbidden_classes)
    accs, maps = [], []
    with T.no_grad():
        for e in range(n_episodes):
            episode = sample_episode(index, ep.n_way, ep.k_shot, ep.q_query, ep.u_unlabeled,
                                     _derive_seed(seed, e))
            clash = forbidden.intersection(name.split("@")[0] for name in episode.class_map)
            if clash:
                raise AssertionError(f"evaluation episode uses training classes {sorted(clash)}")
            run = model.generate(episode.support_images, episode.support_labels)
            logits = model.query_logits(run, episode.query_images)
            accs.append(accuracy(logits, episode.query_labels))
            maps.append(list(episode.class_map))
    return EvalReport.from_accuracies(accs, maps)


def build_model(config: dict) -> HyperTransformer:
    """Rebuild a model from the ``config_dict()`` stored in a checkpoint."""
    spec = CnnSpec(**config["cnn"])
    return HyperTransformer(spec, TransformerConfig(**config["transformer"]), config.get("seed", 0),
                            np.dtype(config.get("dtype", "float64")))


def save_checkpoint(path, model: HyperTransformer, step: int = 0, extra: dict | None = None) -> Path:
    meta = {"model": model.config_dict(), "state": {"step": step, **(extra or {})}}
    return write_hgw(path, meta, model.state_dict())


def load_checkpoint(path) -> tuple[HyperTransformer, dict]:
    meta, tensors = read_hgw(path)
    model = build_model(meta["model"])
    model.load_state_dict(tensors)
    return model, meta.get("state", {})


@dataclass
class TrainResult:
    model: HyperTransformer
    metrics: list
    final_report: EvalReport | None
    step: int


def train(model: HyperTransformer, config: TrainConfig, train_index: DatasetIndex,
          test_index: DatasetIndex | None = None, episode_config: EpisodeConfig | None = None,
          augmentation: AugmentationSpec | None = None, out_dir=None, start_step: int = 0,
          stop_step: int | None = None) -> TrainResult:
    """Run SGD steps ``start_step .. stop_step`` (default ``total_steps``).

    Every step's episodes depend only on ``(config.seed, step)``, so resuming
    from a checkpoint written at step ``s`` continues exactly as an
    uninterrupted run.  Metrics go to ``metrics.csv`` and ``metrics.jsonl``
    and checkpoints to ``checkpoint.hgw`` under ``out_dir``.
    """
    ep = episode_config or EpisodeConfig()
    stop = config.total_steps if stop_step is None else stop_step
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    metrics, window_loss, window_acc = [], [], []
    report = None
    forbidden = train_index.class_names
    for step in range(start_step, stop):
        lr = config.lr(step)
        episodes = training_episodes(train_index, ep, config, step, augmentation)
        _, loss, acc = meta_step(model, episodes, lr)
        window_loss.append(loss)
        window_acc.append(acc)
        done = step + 1
        at_eval = done == stop or (config.eval_every and done % config.eval_every == 0)
        if at_eval:
            row = {"step": done, "lr": lr, "train_loss": float(np.mean(window_loss)),
                   "train_acc": float(np.mean(window_acc)), "test_acc": float("nan"), "ci95": float("nan")}
            if test_index is not None and config.eval_episodes:
                report = evaluate(model, test_index, config.eval_episodes, config.eval_seed, ep, forbidden)
                row["test_acc"], row["ci95"] = report.mean_accuracy, report.ci95
            metrics.append(row)
            window_loss, window_acc = [], []
            log.info("step %d lr %.4g loss %.4f train %.3f test %.3f", done, lr, row["train_loss"],
                     row["train_acc"], row["test_acc"])
            if out is not None:
                _append_metrics(out, row)
        at_ckpt = done == stop or (config.checkpoint_every and done % config.checkpoint_every == 0)
        if out is not None and at_ckpt:
            save_checkpoint(out / "checkpoint.hgw", model, done, {"train": asdict(config)})
    return TrainResult(model, metrics, report, stop)


def _append_metrics(out: Path, row: dict) -> None:
    csv_path = out / "metrics.csv"
    new = not csv_path.exists()
    with csv_path.open("a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        if new:
            w.writeheader()
        w.writerow(row)
    with (out / "metrics.jsonl").open("a") as fh:
        fh.write(json.dumps(row) + "\n")
