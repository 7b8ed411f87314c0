"""The small target CNN whose weights are partly generated, partly learned."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

GENERATED = "generated"
LEARNED = "learned"


@dataclass
class LayerSpec:
    kind: str  # "conv" or "logits"
    channels: int
    kernel: int = 3
    stride: int = 1
    padding: str = "SAME"
    bn: bool = True
    pool: bool = True
    source: str = LEARNED

    def __post_init__(self):
        if self.kind not in ("conv", "logits"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.source not in (GENERATED, LEARNED):
            raise ValueError(f"unknown layer source {self.source!r}")


@dataclass
class CnnSpec:
    layers: list
    n_classes: int
    input_shape: tuple = (1, 28, 28)

    def __post_init__(self):
        self.layers = [l if isinstance(l, LayerSpec) else LayerSpec(**l) for l in self.layers]
        self.input_shape = tuple(self.input_shape)
        if not self.layers or self.layers[-1].kind != "logits":
            raise ValueError("final layer must be the logits layer")
        if any(l.kind == "logits" for l in self.layers[:-1]):
            raise ValueError("only the final layer may be a logits layer")
        if self.layers[-1].channels != self.n_classes:
            raise ValueError("logits width must equal n_classes")

    @classmethod
    def standard(cls, channels: int = 8, n_classes: int = 5, n_conv: int = 4,
                 generate: str = "logits", input_shape=(1, 28, 28)) -> "CnnSpec":
        """Four 3x3 conv blocks (BN, ReLU, 2x2 max-pool) plus a logits layer.

        ``generate`` is ``"none"``, ``"logits"``, ``"all"`` or a comma list of
        layer indices.
        """
        if generate == "none":
            gen = set()
        elif generate == "logits":
            gen = {n_conv}
        elif generate == "all":
            gen = set(range(n_conv + 1))
        else:
            gen = {int(i) for i in generate.split(",")} | {n_conv}
        layers = [LayerSpec("conv", channels, 3, 1, "SAME", True, True,
                            GENERATED if i in gen else LEARNED) for i in range(n_conv)]
        layers.append(LayerSpec("logits", n_classes, 1, 1, "VALID", False, False,
                                GENERATED if n_conv in gen else LEARNED))
        return cls(layers, n_classes, tuple(input_shape))

    def in_channels(self, i: int) -> int:
        return self.input_shape[0] if i == 0 else self.layers[i - 1].channels

    def kernel_shape(self, i: int) -> tuple:
        l = self.layers[i]
        if l.kind == "logits":
            return (self.in_channels(i), l.channels)
        return (l.kernel, l.kernel, self.in_channels(i), l.channels)

    def activation_shape(self, i: int) -> tuple:
        """Shape (C, H, W) of the input z to layer ``i``."""
        c, h, w = self.input_shape
        for l in self.layers[:i]:
            if l.padding == "SAME":
                h, w = -(-h // l.stride), -(-w // l.stride)
            else:
                h, w = (h - l.kernel) // l.stride + 1, (w - l.kernel) // l.stride + 1
            if l.pool:
                h, w = (h - 2) // 2 + 1, (w - 2) // 2 + 1
            c = l.channels
        return (c, h, w)

    @property
    def generated_layers(self) -> list:
        return [i for i, l in enumerate(self.layers) if l.source == GENERATED]

    def to_dict(self) -> dict:
        return {"n_classes": self.n_classes, "input_shape": list(self.input_shape),
                "layers": [asdict(l) for l in self.layers]}


@dataclass
class GeneratedWeights:
    """Per-layer kernels/biases tagged by source, plus learned BN variables."""

    kernels: list
    biases: list
    sources: list
    bn_gamma: list
    bn_beta: list
    running_mean: list = field(default_factory=list)
    running_var: list = field(default_factory=list)
    allocation: str = "output"
    support_stats: list = field(default_factory=list)

    def named_tensors(self, prefix: str = "") -> dict:
        out = {}
        for i, (k, b) in enumerate(zip(self.kernels, self.biases)):
            out[f"{prefix}layer{i}.kernel"] = k
            out[f"{prefix}layer{i}.bias"] = b
            if self.bn_gamma[i] is not None:
                out[f"{prefix}layer{i}.bn_gamma"] = self.bn_gamma[i]
                out[f"{prefix}layer{i}.bn_beta"] = self.bn_beta[i]
        return out


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype=np.float64) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def init_cnn_params(spec: CnnSpec, rng: np.random.Generator, dtype=np.float64,
                    prefix: str = "cnn.") -> tuple[dict, dict]:
    """Learned CNN variables (kernels of Learned layers, all BN variables) and BN buffers."""
    params, buffers = {}, {}
    for i, l in enumerate(spec.layers):
        if l.source == LEARNED:
            shape = spec.kernel_shape(i)
            fan_in = int(np.prod(shape[:-1]))
            params[f"{prefix}{i}.kernel"] = Tensor(he_normal(rng, shape, fan_in, dtype), True)
            params[f"{prefix}{i}.bias"] = Tensor(np.zeros(l.channels, dtype), True)
        if l.bn:
            params[f"{prefix}{i}.bn_gamma"] = Tensor(np.ones(l.channels, dtype), True)
            params[f"{prefix}{i}.bn_beta"] = Tensor(np.zeros(l.channels, dtype), True)
            buffers[f"{prefix}{i}.running_mean"] = np.zeros(l.channels, dtype)
            buffers[f"{prefix}{i}.running_var"] = np.ones(l.channels, dtype)
    return params, buffers


def learned_weights(spec: CnnSpec, params: dict, buffers: dict, prefix: str = "cnn.") -> GeneratedWeights:
    """Assemble a weight set in which every Learned layer comes from ``params``."""
    n = len(spec.layers)
    w = GeneratedWeights([None] * n, [None] * n, [l.source for l in spec.layers],
                         [None] * n, [None] * n, [None] * n, [None] * n)
    for i, l in enumerate(spec.layers):
        if l.source == LEARNED:
            w.kernels[i] = params[f"{prefix}{i}.kernel"]
            w.biases[i] = params[f"{prefix}{i}.bias"]
        if l.bn:
            w.bn_gamma[i] = params[f"{prefix}{i}.bn_gamma"]
            w.bn_beta[i] = params[f"{prefix}{i}.bn_beta"]
            w.running_mean[i] = buffers.get(f"{prefix}{i}.running_mean")
            w.running_var[i] = buffers.get(f"{prefix}{i}.running_var")
    return w


def apply_layer(z: Tensor, i: int, spec: CnnSpec, weights: GeneratedWeights,
                bn_mode: str = "eval", stats=None, update_running: bool = False):
    """Run layer ``i`` on its input; returns ``(output, batch_stats_or_None)``."""
    l = spec.layers[i]
    kernel, bias = weights.kernels[i], weights.biases[i]
    if l.kind == "logits":
        feats = T.global_avgpool(z) if z.ndim == 4 else z
        if feats.shape[-1] != kernel.shape[0]:
            raise T.DimensionError(f"logits layer expects {kernel.shape[0]} features, got {feats.shape[-1]}")
        return T.linear(feats, kernel, bias), None
    y = T.conv2d(z, kernel, bias, stride=l.stride, padding=l.padding)
    used = None
    if l.bn:
        rm = weights.running_mean[i] if update_running else None
        rv = weights.running_var[i] if update_running else None
        if bn_mode == "eval":
            rm, rv = weights.running_mean[i], weights.running_var[i]
        y, used = T.batchnorm(y, weights.bn_gamma[i], weights.bn_beta[i], bn_mode,
                              running_mean=rm, running_var=rv, stats=stats)
    y = T.relu(y)
    if l.pool:
        y = T.maxpool2d(y, 2, 2)
    return y, used


def cnn_forward(images, spec: CnnSpec, weights: GeneratedWeights, bn_mode: str = "eval",
                update_running: bool = False) -> Tensor:
    """Logits ``B x n_classes`` for a batch of images.

    ``bn_mode`` is ``"train"`` (batch statistics), ``"eval"`` (running
    statistics) or ``"support"`` (the per-layer statistics stored in
    ``weights.support_stats`` by the generator's support pass).
    """
    z = images if isinstance(images, Tensor) else Tensor(np.asarray(images))
    for i in range(len(spec.layers)):
        mode, stats = bn_mode, None
        if bn_mode == "support":
            mode, stats = "stats", weights.support_stats[i]
        z, _ = apply_layer(z, i, spec, weights, mode, stats, update_running)
    return z


def accuracy(logits, labels) -> float:
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return float(np.mean(data.argmax(axis=-1) == np.asarray(labels)))


@dataclass
class OracleResult:
    params: dict
    buffers: dict
    train_accuracy: float
    heldout_accuracy: float
    losses: list


def oracle_train(classes, spec: CnnSpec, steps: int = 500, seed: int = 0, lr: float = 0.05,
                 batch_size: int = 32, holdout: float = 0.25, mean: float = 0.0,
                 std: float = 1.0) -> OracleResult:
    """Conventionally train an all-Learned CNN on every sample of ``classes``.

    ``classes`` is a list of ``N x C x H x W`` arrays (or ``ClassRecord``s).
    The last ``holdout`` fraction of each class is kept out for evaluation.
    """
    if spec.generated_layers:
        raise ValueError("oracle_train needs an all-Learned spec")
    arrays = [np.asarray(getattr(c, "images", c)) for c in classes]
    if spec.n_classes != len(arrays):
        raise ValueError("spec.n_classes must equal the number of classes")
    xs_tr, ys_tr, xs_ho, ys_ho = [], [], [], []
    for label, arr in enumerate(arrays):
        n_ho = int(round(len(arr) * holdout))
        cut = len(arr) - n_ho
        xs_tr.append(arr[:cut]); ys_tr += [label] * cut
        xs_ho.append(arr[cut:]); ys_ho += [label] * n_ho
    x_tr = (np.concatenate(xs_tr) - mean) / std
    x_ho = (np.concatenate(xs_ho) - mean) / std
    y_tr, y_ho = np.array(ys_tr), np.array(ys_ho)
    rng = np.random.default_rng(seed)
    params, buffers = init_cnn_params(spec, rng)
    weights = learned_weights(spec, params, buffers)
    losses = []
    for _ in range(steps):
        idx = rng.choice(len(x_tr), size=min(batch_size, len(x_tr)), replace=False)
        with T.Tape():
            logits = cnn_forward(x_tr[idx], spec, weights, "train", update_running=True)
            loss = T.cross_entropy(logits, y_tr[idx])
            grads = T.backward(loss)
        if not np.isfinite(loss.item()):
            raise T.NumericError("oracle_train diverged (non-finite loss)")
        losses.append(loss.item())
        for p, g in grads.items():
            p.data = p.data - lr * g
            p.grad = None
    with T.no_grad():
        tr_acc = accuracy(cnn_forward(x_tr, spec, weights, "eval"), y_tr)
        ho_acc = accuracy(cnn_forward(x_ho, spec, weights, "eval"), y_ho) if len(y_ho) else float("nan")
    return OracleResult(params, buffers, tr_acc, ho_acc, losses)
