"""``hypergen`` command line.

Exit codes: 0 success, 2 configuration error, 3 numeric failure, 4 I/O error.
``HYPERGEN_THREADS`` caps the BLAS thread pool.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .checks import run_suite
from .episodes import load_dataset, open_dataset, sample_episode
from .generator import HyperTransformer, export_attention_maps
from .io import write_hgw
from .tensor import NumericError, no_grad
from .trainer import (EpisodeConfig, TrainConfig, _derive_seed, evaluate, load_checkpoint,
                      save_checkpoint, train)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("hypergen")


class UsageError(Exception):
    """Bad flag combination or inconsistent inputs (exit code 2)."""


# -- helpers -------------------------------------------------------------------------

def _dataset_splits(uri: str, train_classes: int, test_classes: int) -> dict:
    return open_dataset(uri).partition({"train": train_classes, "test": test_classes})


def _split_for(state: dict, uri: str | None, split: str):
    ds = state.get("dataset", {})
    uri = uri or ds.get("uri")
    if uri is None:
        raise UsageError("no dataset URI in the checkpoint; pass --dataset")
    parts = _dataset_splits(uri, ds.get("train_classes", 20), ds.get("test_classes", 10))
    return parts[split], parts


def _episode_config(state: dict, model: HyperTransformer) -> EpisodeConfig:
    ep = state.get("episode")
    if ep:
        return EpisodeConfig(**ep)
    return EpisodeConfig(n_way=model.spec.n_classes)


def _print_json(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- commands ------------------------------------------------------------------------

def cmd_train(args) -> int:
    run = cfgmod.load(args.config)
    overrides = {f.name: getattr(args, f.name) for f in fields(TrainConfig)
                 if getattr(args, f.name, None) is not None}
    if overrides:
        run.train = replace(run.train, **overrides)
    out = Path(args.output_dir or run.output_dir)
    parts = _dataset_splits(run.dataset.uri, run.dataset.train_classes, run.dataset.test_classes)
    spec = run.cnn_spec(parts["train"].image_shape)
    ckpt = out / "checkpoint.hgw"
    start = 0
    if args.resume and ckpt.exists():
        model, state = load_checkpoint(ckpt)
        start = int(state.get("step", 0))
        log.info("resuming from step %d", start)
    else:
        model = HyperTransformer(spec, run.transformer, seed=run.train.seed)
    out.mkdir(parents=True, exist_ok=True)
    cfgmod.dump(run, out / "config.toml")
    extra = {"dataset": asdict(run.dataset), "episode": asdict(run.episode)}
    result = train(model, run.train, parts["train"], parts["test"], run.episode, run.augmentation,
                   out_dir=out, start_step=start, stop_step=args.stop_step)
    save_checkpoint(ckpt, model, result.step, {"train": asdict(run.train), **extra})
    summary = {"step": result.step, "checkpoint": str(ckpt)}
    if result.final_report is not None:
        summary.update(result.final_report.to_json())
    _print_json(summary)
    return EXIT_OK


def cmd_eval(args) -> int:
    model, state = load_checkpoint(args.checkpoint)
    index, parts = _split_for(state, args.dataset, args.split)
    ep = _episode_config(state, model)
    forbidden = parts["train"].class_names if args.split != "train" else ()
    report = evaluate(model, index, args.episodes, args.seed, ep, forbidden)
    _print_json({**report.to_json(), "split": args.split, "seed": args.seed})
    return EXIT_OK


def _support_from_dir(model, state, directory):
    index, _ = _split_for(state, None, "train") if "dataset" in state else (None, None)
    support = load_dataset(directory)
    if len(support.classes) != model.spec.n_classes:
        raise UsageError(f"support directory has {len(support.classes)} classes, "
                         f"model generates {model.spec.n_classes}-way classifiers")
    mean, std = (index.mean, index.std) if index is not None else (0.0, 1.0)
    images, labels = [], []
    for c, rec in enumerate(support.classes):
        images.append((rec.images - mean) / std)
        labels += [c] * len(rec.images)
    return np.concatenate(images), np.asarray(labels), support.class_names


def cmd_generate(args) -> int:
    model, state = load_checkpoint(args.checkpoint)
    if args.support_dir:
        images, labels, class_map = _support_from_dir(model, state, args.support_dir)
    else:
        index, _ = _split_for(state, args.dataset, args.split)
        ep = _episode_config(state, model)
        episode = sample_episode(index, ep.n_way, ep.k_shot, 0, ep.u_unlabeled, args.episode_seed)
        images, labels, class_map = episode.support_images, episode.support_labels, episode.class_map
    with no_grad():
        run = model.generate(images, labels)
    meta = {"cnn": model.spec.to_dict(), "class_map": list(class_map),
            "sources": list(run.weights.sources), "allocation": run.weights.allocation}
    tensors = {k: v for k, v in run.weights.named_tensors().items() if v is not None}
    for i, st in enumerate(run.weights.support_stats or []):
        if st is not None:
            tensors[f"layer{i}.support_mean"] = st.mean
            tensors[f"layer{i}.support_var"] = st.var
    path = write_hgw(args.out, meta, tensors)
    _print_json({"out": str(path), "class_map": list(class_map), "tensors": sorted(tensors)})
    return EXIT_OK


def cmd_inspect_attention(args) -> int:
    model, state = load_checkpoint(args.checkpoint)
    index, _ = _split_for(state, args.dataset, args.split)
    ep = _episode_config(state, model)
    episode = sample_episode(index, ep.n_way, ep.k_shot, 0, ep.u_unlabeled, args.episode_seed)
    with no_grad():
        run = model.generate(episode.support_images, episode.support_labels, retain_attention=True)
    npz, side = export_attention_maps(run, args.out)
    notes = json.loads(side.read_text())
    notes["class_map"] = list(episode.class_map)
    side.write_text(json.dumps(notes, indent=2, sort_keys=True))
    _print_json({"arrays": str(npz), "annotations": str(side)})
    return EXIT_OK


def cmd_oracle_check(args) -> int:
    report = run_suite(args.suite)
    _print_json(report)
    return EXIT_OK if report["passed"] else EXIT_NUMERIC


def cmd_export_weight_embeddings(args) -> int:
    model, state = load_checkpoint(args.checkpoint)
    index, _ = _split_for(state, args.dataset, args.split)
    ep = _episode_config(state, model)
    generated = model.spec.generated_layers
    if args.layers == "all":
        layers = list(generated)
    else:
        layers = [int(v) for v in args.layers.split(",")]
        missing = sorted(set(layers) - set(generated))
        if missing:
            raise UsageError(f"layers {missing} are not generated by this model")
    rows, maps, columns = [], [], None
    with no_grad():
        for e in range(args.episodes):
            episode = sample_episode(index, ep.n_way, ep.k_shot, 0, ep.u_unlabeled, _derive_seed(args.seed, e))
            w = model.generate(episode.support_images, episode.support_labels).weights
            parts = [np.concatenate([w.kernels[i].data.ravel(), w.biases[i].data.ravel()]) for i in layers]
            columns = columns or {str(i): int(p.size) for i, p in zip(layers, parts)}
            rows.append(np.concatenate(parts))
            maps.append(list(episode.class_map))
    out = Path(args.out).with_suffix(".npy")
    out.parent.mkdir(parents=True, exist_ok=True)
    np.save(out, np.stack(rows))
    side = out.with_suffix(".json")
    side.write_text(json.dumps({"layers": layers, "columns_per_layer": columns, "class_map": maps,
                                "seed": args.seed}, indent=2))
    _print_json({"matrix": str(out), "sidecar": str(side), "shape": [len(rows), int(rows[0].size) if rows else 0]})
    return EXIT_OK


# -- parser ------------------------------------------------------------------------------

def _add_train_flags(p) -> None:
    for f in fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        kind = {"int": int, "float": float, "bool": None}[str(f.type)]
        if kind is None:
            p.add_argument(flag, dest=f.name, default=None, action=argparse.BooleanOptionalAction)
        else:
            p.add_argument(flag, dest=f.name, type=kind, default=None, help=f"override [train] {f.name}")


def _add_source_flags(p) -> None:
    p.add_argument("--dataset", help="dataset URI (default: the one recorded in the checkpoint)")
    p.add_argument("--split", default="test", choices=["train", "test"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hypergen", description="Few-shot CNN weight generation.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="meta-train from a TOML run config")
    p.add_argument("config")
    p.add_argument("--output-dir")
    p.add_argument("--resume", action="store_true", help="continue from <output_dir>/checkpoint.hgw")
    p.add_argument("--stop-step", type=int, help="stop early at this step (checkpoint is written)")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy over fresh test episodes")
    p.add_argument("checkpoint")
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    _add_source_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("generate", help="export the CNN generated for one support set")
    p.add_argument("checkpoint")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--episode-seed", type=int)
    src.add_argument("--support-dir")
    p.add_argument("--out", required=True)
    _add_source_flags(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("inspect-attention", help="dump attention maps with token annotations")
    p.add_argument("checkpoint")
    p.add_argument("--episode-seed", type=int, required=True)
    p.add_argument("--out", required=True)
    _add_source_flags(p)
    p.set_defaults(func=cmd_inspect_attention)

    p = sub.add_parser("oracle-check", help="verify the closed-form constructions")
    p.add_argument("suite", choices=["appendixA", "appendixB", "all"])
    p.set_defaults(func=cmd_oracle_check)

    p = sub.add_parser("export-weight-embeddings", help="flattened generated weights, one row per episode")
    p.add_argument("checkpoint")
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--layers", default="all", help="'all' or comma-separated generated layer indices")
    p.add_argument("--out", required=True)
    _add_source_flags(p)
    p.set_defaults(func=cmd_export_weight_embeddings)
    return parser


def _limit_threads():
    value = os.environ.get("HYPERGEN_THREADS")
    if not value:
        return None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(value))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        limiter = _limit_threads()
    except ValueError:
        print("error: HYPERGEN_THREADS must be an integer", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except (cfgmod.ConfigError, UsageError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    finally:
        if limiter is not None:
            limiter.restore_original_limits()


if __name__ == "__main__":
    sys.exit(main())
