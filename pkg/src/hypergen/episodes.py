"""Datasets and deterministic n-way-k-shot episode sampling."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from urllib.parse import parse_qs, urlparse

import numpy as np

from .tensor import tensor_to_bytes

UNLABELED = -1


@dataclass
class ClassRecord:
    name: str
    images: np.ndarray  # N x C x H x W, values in [0, 1]
    refs: list = field(default_factory=list)


@dataclass
class DatasetIndex:
    """Immutable collection of image classes for one split.

    ``mean``/``std`` are the standardization constants applied when images
    are placed into episodes; :meth:`partition` computes them over the
    train split and shares them with every split.
    """

    classes: list
    split: str = "all"
    image_shape: tuple = (1, 28, 28)
    mean: float = 0.0
    std: float = 1.0
    source: str = ""

    def __post_init__(self):
        names = [c.name for c in self.classes]
        if len(set(names)) != len(names):
            raise ValueError("class names must be unique")

    def __len__(self) -> int:
        return len(self.classes)

    @property
    def class_names(self) -> list:
        return [c.name for c in self.classes]

    def partition(self, counts: dict) -> dict:
        """Split classes, in index order, into disjoint named splits.

        ``counts`` maps split name to number of classes, e.g.
        ``{"train": 20, "test": 10}``.  Standardization constants come from
        the ``"train"`` split (or the first split if none is named so).
        """
        total = sum(counts.values())
        if total > len(self.classes):
            raise ValueError(f"requested {total} classes, index has {len(self.classes)}")
        parts, start = {}, 0
        for name, n in counts.items():
            parts[name] = self.classes[start: start + n]
            start += n
        ref = parts.get("train", next(iter(parts.values())))
        pix = np.concatenate([c.images.reshape(-1) for c in ref])
        mean, std = float(pix.mean()), float(pix.std()) or 1.0
        return {name: DatasetIndex(cls, name, self.image_shape, mean, std, self.source)
                for name, cls in parts.items()}

    def with_standardization(self) -> "DatasetIndex":
        pix = np.concatenate([c.images.reshape(-1) for c in self.classes])
        return replace(self, mean=float(pix.mean()), std=float(pix.std()) or 1.0)


# -- loading -------------------------------------------------------------------

def load_dataset(root, split: str = "all", min_samples: int = 1) -> DatasetIndex:
    """Index ``root/<class_name>/*.png`` with classes in sorted order.

    Raises ``ValueError`` for empty classes or classes with fewer than
    ``min_samples`` images and ``OSError`` for unreadable images.
    """
    from PIL import Image

    root = Path(root)
    if not root.is_dir():
        raise OSError(f"dataset root {root} is not a directory")
    classes, shape = [], None
    for cdir in sorted(p for p in root.iterdir() if p.is_dir()):
        files = sorted(cdir.glob("*.png"))
        if not files:
            raise ValueError(f"class {cdir.name!r} has no images")
        if len(files) < min_samples:
            raise ValueError(f"class {cdir.name!r} has {len(files)} images, need {min_samples}")
        imgs = []
        for f in files:
            try:
                with Image.open(f) as im:
                    arr = np.asarray(im.convert("L" if im.mode in ("L", "1", "P", "LA") else "RGB"))
            except Exception as exc:  # PIL raises several unrelated types
                raise OSError(f"cannot read image {f}: {exc}") from exc
            arr = arr.astype(np.float64) / 255.0
            arr = arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)
            if shape is None:
                shape = arr.shape
            elif arr.shape != shape:
                raise ValueError(f"image {f} has shape {arr.shape}, expected {shape}")
            imgs.append(arr)
        classes.append(ClassRecord(cdir.name, np.stack(imgs), [str(f) for f in files]))
    if not classes:
        raise ValueError(f"no class directories under {root}")
    return DatasetIndex(classes, split, tuple(shape), source=str(root)).with_standardization()


def _segment_distance(px, py, x0, y0, x1, y1):
    dx, dy = x1 - x0, y1 - y0
    t = ((px - x0) * dx + (py - y0) * dy) / max(dx * dx + dy * dy, 1e-12)
    t = np.clip(t, 0.0, 1.0)
    return np.hypot(px - (x0 + t * dx), py - (y0 + t * dy))


def _render_glyph(strokes, size, rng, jitter):
    """Draw polyline strokes (unit-square coords) with per-sample distortion."""
    ang = rng.normal(0.0, 0.12 * jitter)
    scale = 1.0 + rng.normal(0.0, 0.06 * jitter)
    shift = rng.normal(0.0, 0.04 * jitter, size=2)
    ca, sa = np.cos(ang) * scale, np.sin(ang) * scale
    width = 0.045 * (1.0 + rng.normal(0.0, 0.1 * jitter))
    ys, xs = np.mgrid[0:size, 0:size]
    px, py = (xs + 0.5) / size, (ys + 0.5) / size
    img = np.zeros((size, size))
    for stroke in strokes:
        pts = stroke + rng.normal(0.0, 0.025 * jitter, size=stroke.shape)
        c = pts - 0.5
        pts = np.stack([ca * c[:, 0] - sa * c[:, 1], sa * c[:, 0] + ca * c[:, 1]], 1) + 0.5 + shift
        for (x0, y0), (x1, y1) in zip(pts[:-1], pts[1:]):
            d = _segment_distance(px, py, x0, y0, x1, y1)
            img = np.maximum(img, np.exp(-0.5 * (d / width) ** 2))
    img += rng.normal(0.0, 0.04, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def synth_glyphs(n_classes: int, samples_per_class: int, image_size: int = 28, seed: int = 0,
                 jitter: float = 0.8) -> DatasetIndex:
    """Procedural stand-in for Omniglot: each class is a random set of pen strokes.

    Samples of a class share the stroke skeleton and differ by small affine
    distortion, endpoint noise, stroke width and pixel noise.
    """
    if n_classes < 2:
        raise ValueError("synth_glyphs needs at least 2 classes")
    if image_size < 16:
        raise ValueError("image_size must be >= 16")
    rng = np.random.default_rng(seed)
    classes = []
    for c in range(n_classes):
        n_strokes = rng.integers(2, 4)
        strokes = []
        for _ in range(n_strokes):
            n_pts = rng.integers(2, 4)
            start = rng.uniform(0.2, 0.8, size=2)
            steps = rng.normal(0.0, 0.28, size=(n_pts - 1, 2))
            pts = np.clip(np.vstack([start, start + np.cumsum(steps, axis=0)]), 0.12, 0.88)
            strokes.append(pts)
        imgs = np.stack([_render_glyph(strokes, image_size, rng, jitter)[None]
                         for _ in range(samples_per_class)])
        classes.append(ClassRecord(f"glyph{c:04d}", imgs, [f"seed:{seed}/{c}/{i}"
                                                           for i in range(samples_per_class)]))
    uri = f"synth://glyphs?classes={n_classes}&per={samples_per_class}&size={image_size}&seed={seed}"
    return DatasetIndex(classes, "all", (1, image_size, image_size), source=uri).with_standardization()


def open_dataset(uri: str) -> DatasetIndex:
    """Resolve a dataset URI: ``synth://glyphs?...`` or a directory path."""
    if uri.startswith("synth://"):
        parsed = urlparse(uri)
        if parsed.netloc != "glyphs":
            raise ValueError(f"unknown synthetic dataset {parsed.netloc!r}")
        q = {k: v[0] for k, v in parse_qs(parsed.query).items()}
        unknown = set(q) - {"classes", "per", "size", "seed", "jitter"}
        if unknown:
            raise ValueError(f"unknown synth parameters {sorted(unknown)}")
        return synth_glyphs(int(q.get("classes", 30)), int(q.get("per", 20)),
                            int(q.get("size", 28)), int(q.get("seed", 0)),
                            float(q.get("jitter", 0.8)))
    return load_dataset(uri)


# -- augmentation --------------------------------------------------------------

@dataclass(frozen=True)
class AugmentationSpec:
    rotations_90: bool = False
    hflip: bool = False
    crop_jitter: int = 0


def augment(image: np.ndarray, spec: AugmentationSpec, seed: int, rotation: int = 0) -> np.ndarray:
    """Apply augmentation to a ``C x H x W`` image.

    ``rotation`` is the class-level number of quarter turns, applied only
    when ``spec.rotations_90`` is set; flip and crop jitter are drawn per
    sample from ``seed``.
    """
    out = image
    if spec.rotations_90 and rotation % 4:
        out = np.rot90(out, k=rotation % 4, axes=(1, 2))
    if not (spec.hflip or spec.crop_jitter):
        return np.ascontiguousarray(out)
    rng = np.random.default_rng(seed)
    if spec.hflip and rng.random() < 0.5:
        out = out[:, :, ::-1]
    if spec.crop_jitter:
        j = spec.crop_jitter
        dy, dx = rng.integers(-j, j + 1, size=2)
        padded = np.pad(out, ((0, 0), (j, j), (j, j)), mode="edge")
        H, W = out.shape[1:]
        out = padded[:, j + dy: j + dy + H, j + dx: j + dx + W]
    return np.ascontiguousarray(out)


# -- episodes ------------------------------------------------------------------

@dataclass
class Episode:
    """One few-shot task.

    ``support_labels`` holds episode labels in ``[0, n_way)`` or
    :data:`UNLABELED`.  ``support_classes``/``query_classes`` record the
    dataset class (and rotation) of each sample for auditing only.
    """

    support_images: np.ndarray
    support_labels: np.ndarray
    support_classes: np.ndarray
    query_images: np.ndarray
    query_labels: np.ndarray
    class_map: list
    n_way: int
    k_shot: int
    u_unlabeled: int
    q_query: int
    seed: int
    support_ids: np.ndarray = None
    query_ids: np.ndarray = None
    split: str = "all"

    @property
    def labeled_mask(self) -> np.ndarray:
        return self.support_labels != UNLABELED

    def mask_unlabeled(self, keep_probability: float, rng: np.random.Generator) -> "Episode":
        """Drop each unlabeled support sample independently with prob ``1 - keep``."""
        unl = ~self.labeled_mask
        keep = self.labeled_mask | (rng.random(len(unl)) < keep_probability)
        return replace(self, support_images=self.support_images[keep],
                       support_labels=self.support_labels[keep],
                       support_classes=self.support_classes[keep],
                       support_ids=None if self.support_ids is None else self.support_ids[keep])

    def permuted(self, perm) -> "Episode":
        perm = np.asarray(perm)
        return replace(self, support_images=self.support_images[perm],
                       support_labels=self.support_labels[perm],
                       support_classes=self.support_classes[perm],
                       support_ids=None if self.support_ids is None else self.support_ids[perm])


def sample_episode(index: DatasetIndex, n: int, k: int, q: int, u: int = 0, seed: int = 0,
                   augmentation: AugmentationSpec | None = None) -> Episode:
    """Sample an n-way episode: per class ``k`` labeled, ``u`` unlabeled, ``q`` query samples.

    Deterministic in ``(index, arguments, seed)``.  With class-level
    rotations enabled, the class pool is every (class, quarter-turn) pair.
    """
    aug = augmentation or AugmentationSpec()
    n_rot = 4 if aug.rotations_90 else 1
    pool = len(index.classes) * n_rot
    if n > pool:
        raise ValueError(f"index has {pool} classes, episode needs {n}")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(pool, size=n, replace=False)
    per = k + u + q
    s_img, s_lab, s_cls, s_ids, q_img, q_lab, q_ids, cmap = [], [], [], [], [], [], [], []
    for label, pick in enumerate(chosen):
        ci, rot = divmod(int(pick), n_rot)
        rec = index.classes[ci]
        if len(rec.images) < per:
            raise ValueError(f"class {rec.name!r} has {len(rec.images)} samples, episode needs {per}")
        idx = rng.choice(len(rec.images), size=per, replace=False)
        sample_seeds = rng.integers(0, 2**63 - 1, size=per)
        imgs = [augment(rec.images[i], aug, int(s), rot) for i, s in zip(idx, sample_seeds)]
        name = rec.name if n_rot == 1 else f"{rec.name}@rot{rot}"
        cmap.append(name)
        for j in range(k + u):
            s_img.append(imgs[j])
            s_lab.append(label if j < k else UNLABELED)
            s_cls.append(ci)
            s_ids.append((ci, int(idx[j])))
        for j in range(k + u, per):
            q_img.append(imgs[j])
            q_lab.append(label)
            q_ids.append((ci, int(idx[j])))
    norm = lambda a: ((np.stack(a) - index.mean) / index.std) if a else np.zeros((0,) + tuple(index.image_shape))
    return Episode(norm(s_img), np.array(s_lab, dtype=np.int64), np.array(s_cls, dtype=np.int64),
                   norm(q_img), np.array(q_lab, dtype=np.int64), cmap, n, k, u, q, seed,
                   np.array(s_ids, dtype=np.int64).reshape(-1, 2),
                   np.array(q_ids, dtype=np.int64).reshape(-1, 2), index.split)


def unlabeled_keep_probability(step: int, total_steps: int, start_ignore: float = 0.7) -> float:
    """Probability of keeping an unlabeled sample at ``step``.

    The ignore probability falls linearly from ``start_ignore`` at step 0 to
    zero at half of ``total_steps`` and stays zero afterwards.
    """
    half = total_steps / 2.0
    if half <= 0 or step >= half:
        return 1.0
    return 1.0 - start_ignore * (1.0 - step / half)


def export_episodes(episodes, out_dir) -> Path:
    """Write ``manifest.jsonl`` plus one ``HGT1`` blob per episode array."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = out / "manifest.jsonl"
    with manifest.open("w") as fh:
        for i, ep in enumerate(episodes):
            files = {}
            for key in ("support_images", "query_images"):
                fname = f"ep{i:06d}_{key}.hgt"
                (out / fname).write_bytes(tensor_to_bytes(np.asarray(getattr(ep, key), dtype=np.float64)))
                files[key] = fname
            row = {"index": i, "seed": int(ep.seed), "n_way": ep.n_way, "k_shot": ep.k_shot,
                   "u_unlabeled": ep.u_unlabeled, "q_query": ep.q_query, "split": ep.split,
                   "class_map": list(ep.class_map),
                   "support_labels": ep.support_labels.tolist(),
                   "query_labels": ep.query_labels.tolist(), **files}
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    return manifest
