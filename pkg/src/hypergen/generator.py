"""Transformer-based weight generator for the target CNN.

For every generated CNN layer the support set is encoded as tokens
``(label embedding, image embedding, activation embedding)``; one
placeholder token per weight slice is appended, the sequence runs through
that layer's own Transformer, and the placeholder outputs are read out and
assembled into the layer's kernel and bias.  Layers are generated in order,
so the activations conditioning layer ``l`` come from the already
generated layers ``1..l-1``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .cnn import GENERATED, CnnSpec, GeneratedWeights, apply_layer, cnn_forward, he_normal, init_cnn_params, learned_weights
from .episodes import UNLABELED
from .tensor import Tensor

ENCODER = "encoder"
ENCODER_DECODER = "encoder_decoder"
OUTPUT = "output"
SPATIAL = "spatial"


@dataclass
class TransformerConfig:
    """Weight-generator hyperparameters.

    ``nu`` sets key/query, value and feed-forward widths as a fraction of the
    token width; ``nu_qk``/``nu_v``/``nu_ff`` override it individually.
    """

    num_layers: int = 2
    num_heads: int = 2
    nu: float = 1.0
    nu_qk: float | None = None
    nu_v: float | None = None
    nu_ff: float | None = None
    variant: str = ENCODER
    feedforward: bool = True
    d_label: int = 32
    image_dim: int = 32
    image_channels: int = 32
    use_image_embedding: bool = True
    activation_dim: int = 0  # 0 means "same as the CNN channel count"
    allocation: str = OUTPUT
    embedding_init_std: float = 1.0  # label codebook and placeholder init scale
    slice_offsets: bool = True  # learned per-slice base kernel for generated conv layers
    conv_readout_gain: float = 0.1  # scales the readout init of generated conv layers

    def __post_init__(self):
        if self.variant not in (ENCODER, ENCODER_DECODER):
            raise ValueError(f"unknown transformer variant {self.variant!r}")
        if self.allocation not in (OUTPUT, SPATIAL):
            raise ValueError(f"unknown weight allocation {self.allocation!r}")
        if self.num_layers < 1 or self.num_heads < 1:
            raise ValueError("num_layers and num_heads must be >= 1")

    def widths(self, token_dim: int) -> tuple[int, int, int]:
        """(key/query, value, feed-forward) widths; attention widths divisible by heads."""
        h = self.num_heads

        def attn(frac):
            w = max(1, int(round(frac * token_dim)))
            return -(-w // h) * h

        qk = attn(self.nu if self.nu_qk is None else self.nu_qk)
        v = attn(self.nu if self.nu_v is None else self.nu_v)
        ff = max(1, int(round((self.nu if self.nu_ff is None else self.nu_ff) * token_dim)))
        return qk, v, ff


# -- weight slices ---------------------------------------------------------------

@dataclass(frozen=True)
class LayerGeometry:
    kind: str
    k: int
    n_in: int
    n_out: int

    def slices(self, allocation: str) -> tuple[int, int]:
        """(number of slices, slice length) for an allocation mode."""
        k2 = self.k * self.k
        if allocation == OUTPUT:
            return self.n_out, k2 * self.n_in + 1
        return k2 + 1, self.n_in * self.n_out


def layer_geometry(spec: CnnSpec, i: int) -> LayerGeometry:
    l = spec.layers[i]
    k = 1 if l.kind == "logits" else l.kernel
    return LayerGeometry(l.kind, k, spec.in_channels(i), l.channels)


def decode_weights(slices: Tensor, allocation: str, geom: LayerGeometry) -> tuple[Tensor, Tensor]:
    """Assemble ``(kernel, bias)`` from placeholder outputs, one row per slice.

    Output allocation: row ``j`` is output channel ``j`` flattened as
    ``k x k x n_in`` followed by its bias.  Spatial allocation: row ``p`` is
    kernel position ``p`` flattened as ``n_in x n_out``; the extra last row
    carries the biases in its first ``n_out`` entries.
    """
    count, length = geom.slices(allocation)
    if slices.shape != (count, length):
        raise T.DimensionError(f"expected {count} slices of length {length}, got {slices.shape}")
    k, n_in, n_out = geom.k, geom.n_in, geom.n_out
    if allocation == OUTPUT:
        w = slices[:, : k * k * n_in]
        bias = slices[:, -1]
        if geom.kind == "logits":
            return w.T, bias
        return w.reshape(n_out, k, k, n_in).transpose(1, 2, 3, 0), bias
    w = slices[: k * k, :]
    bias = slices[k * k, :n_out]
    if geom.kind == "logits":
        return w.reshape(n_in, n_out), bias
    return w.reshape(k, k, n_in, n_out), bias


def encode_slices(kernel: np.ndarray, bias: np.ndarray, allocation: str, geom: LayerGeometry) -> np.ndarray:
    """Inverse of :func:`decode_weights` (numpy); unused entries are zero."""
    count, length = geom.slices(allocation)
    k, n_in, n_out = geom.k, geom.n_in, geom.n_out
    kernel = np.asarray(kernel).reshape(k, k, n_in, n_out)
    out = np.zeros((count, length))
    if allocation == OUTPUT:
        out[:, :-1] = kernel.transpose(3, 0, 1, 2).reshape(n_out, -1)
        out[:, -1] = bias
    else:
        out[: k * k] = kernel.reshape(k * k, n_in * n_out)
        out[k * k, :n_out] = bias
    return out


# -- tokens --------------------------------------------------------------------

@dataclass
class TokenSequence:
    tokens: Tensor
    roles: list  # "labeled" | "unlabeled" | "weights" per row
    labels: np.ndarray  # episode label per row (-1 for unlabeled, -2 for placeholders)
    n_samples: int
    sample_dim: dict = field(default_factory=dict)

    @property
    def placeholder_rows(self) -> np.ndarray:
        return np.arange(self.n_samples, len(self.roles))

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]


def encode_tokens(labels, label_table: Tensor, image_emb: Tensor | None, act_emb: Tensor,
                  mu: Tensor) -> TokenSequence:
    """Build the token sequence for one generated layer.

    ``label_table`` stacks the n class embeddings followed by the unlabeled
    embedding; each sample token is ``[label | image | activation]`` and each
    placeholder token is ``[mu_i | 0...]``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n_way = label_table.shape[0] - 1
    if act_emb.shape[0] != len(labels):
        raise T.DimensionError("activation embeddings do not match the number of support samples")
    if np.any((labels < UNLABELED) | (labels >= n_way)):
        raise ValueError("labels must be in [0, n) or UNLABELED")
    rows = np.where(labels == UNLABELED, n_way, labels)
    parts = [T.gather(label_table, rows, axis=0)]
    if image_emb is not None:
        parts.append(image_emb)
    parts.append(act_emb)
    samples = T.concat(parts, axis=1)
    d = mu.shape[1]
    pad = Tensor(np.zeros((mu.shape[0], samples.shape[1] - d), dtype=mu.dtype))
    placeholders = T.concat([mu, pad], axis=1)
    tokens = T.concat([samples, placeholders], axis=0)
    roles = ["labeled" if c != UNLABELED else "unlabeled" for c in labels] + ["weights"] * mu.shape[0]
    all_labels = np.concatenate([labels, np.full(mu.shape[0], -2)])
    dims = {"label": d, "image": 0 if image_emb is None else image_emb.shape[1], "activation": act_emb.shape[1]}
    return TokenSequence(tokens, roles, all_labels, len(labels), dims)


# -- transformer ---------------------------------------------------------------

def multi_head_attention(x: Tensor, p: dict, prefix: str, num_heads: int,
                         memory: Tensor | None = None, maps: list | None = None) -> Tensor:
    """Unmasked multi-head attention; queries from ``x``, keys/values from ``memory`` (or ``x``)."""
    src = x if memory is None else memory
    n_q, n_k = x.shape[0], src.shape[0]
    q = T.linear(x, p[prefix + "wq"], p[prefix + "bq"])
    k = T.linear(src, p[prefix + "wk"], p[prefix + "bk"])
    v = T.linear(src, p[prefix + "wv"], p[prefix + "bv"])
    a, av = q.shape[1] // num_heads, v.shape[1] // num_heads
    qh = q.reshape(n_q, num_heads, a).transpose(1, 0, 2)
    kh = k.reshape(n_k, num_heads, a).transpose(1, 2, 0)
    vh = v.reshape(n_k, num_heads, av).transpose(1, 0, 2)
    scores = T.mul(T.matmul(qh, kh), 1.0 / np.sqrt(a))
    attn = T.softmax(scores, axis=-1)
    if maps is not None:
        maps.append(attn.data.copy())
    out = T.matmul(attn, vh).transpose(1, 0, 2).reshape(n_q, num_heads * av)
    return T.linear(out, p[prefix + "wo"], p[prefix + "bo"])


def _feedforward(x, p, prefix):
    h = T.relu(T.linear(x, p[prefix + "w1"], p[prefix + "b1"]))
    return T.linear(h, p[prefix + "w2"], p[prefix + "b2"])


def _ln(x, p, prefix):
    return T.layer_norm(x, p[prefix + "g"], p[prefix + "b"])


def transformer_forward(tokens: Tensor, params: dict, prefix: str, config: TransformerConfig,
                        maps: list | None = None) -> Tensor:
    """Post-LN encoder stack (optionally followed by a decoder over the same input).

    No positional encodings and no masking, so the map is equivariant to
    permutations of the token rows.  When ``maps`` is a list, every
    attention matrix (heads x queries x keys) is appended to it.
    """
    x = tokens
    for b in range(config.num_layers):
        pre = f"{prefix}enc{b}."
        x = _ln(T.add(x, multi_head_attention(x, params, pre + "attn.", config.num_heads, maps=maps)),
                params, pre + "ln1.")
        if config.feedforward:
            x = _ln(T.add(x, _feedforward(x, params, pre + "ff.")), params, pre + "ln2.")
    if config.variant == ENCODER_DECODER:
        memory, y = x, tokens
        for b in range(config.num_layers):
            pre = f"{prefix}dec{b}."
            y = _ln(T.add(y, multi_head_attention(y, params, pre + "self.", config.num_heads, maps=maps)),
                    params, pre + "ln1.")
            y = _ln(T.add(y, multi_head_attention(y, params, pre + "cross.", config.num_heads,
                                                  memory=memory, maps=maps)), params, pre + "ln2.")
            if config.feedforward:
                y = _ln(T.add(y, _feedforward(y, params, pre + "ff.")), params, pre + "ln3.")
        x = y
    if not np.all(np.isfinite(x.data)):
        raise T.NumericError(f"{prefix}transformer produced non-finite values")
    return x


# -- parameter construction ----------------------------------------------------

def _he(rng, shape, fan_in, dtype):
    return Tensor((rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype), True)


def _zeros(shape, dtype):
    return Tensor(np.zeros(shape, dtype), True)


def _ones(shape, dtype):
    return Tensor(np.ones(shape, dtype), True)


def init_attention_params(p, rng, prefix, d_model, qk, v, dtype):
    p[prefix + "wq"] = _he(rng, (d_model, qk), d_model, dtype)
    p[prefix + "bq"] = _zeros(qk, dtype)
    p[prefix + "wk"] = _he(rng, (d_model, qk), d_model, dtype)
    p[prefix + "bk"] = _zeros(qk, dtype)
    p[prefix + "wv"] = _he(rng, (d_model, v), d_model, dtype)
    p[prefix + "bv"] = _zeros(v, dtype)
    p[prefix + "wo"] = _he(rng, (v, d_model), v, dtype)
    p[prefix + "bo"] = _zeros(d_model, dtype)


def init_transformer_params(config: TransformerConfig, token_dim: int, rng, prefix: str,
                            dtype=np.float64) -> dict:
    qk, v, ff = config.widths(token_dim)
    p = {}

    def ln(pre):
        p[pre + "g"] = _ones(token_dim, dtype)
        p[pre + "b"] = _zeros(token_dim, dtype)

    def ffn(pre):
        p[pre + "w1"] = _he(rng, (token_dim, ff), token_dim, dtype)
        p[pre + "b1"] = _zeros(ff, dtype)
        p[pre + "w2"] = _he(rng, (ff, token_dim), ff, dtype)
        p[pre + "b2"] = _zeros(token_dim, dtype)

    for b in range(config.num_layers):
        pre = f"{prefix}enc{b}."
        init_attention_params(p, rng, pre + "attn.", token_dim, qk, v, dtype)
        ln(pre + "ln1.")
        if config.feedforward:
            ffn(pre + "ff.")
            ln(pre + "ln2.")
    if config.variant == ENCODER_DECODER:
        for b in range(config.num_layers):
            pre = f"{prefix}dec{b}."
            init_attention_params(p, rng, pre + "self.", token_dim, qk, v, dtype)
            ln(pre + "ln1.")
            init_attention_params(p, rng, pre + "cross.", token_dim, qk, v, dtype)
            ln(pre + "ln2.")
            if config.feedforward:
                ffn(pre + "ff.")
                ln(pre + "ln3.")
    return p


# -- model ---------------------------------------------------------------------

@dataclass
class GenerationRun:
    weights: GeneratedWeights
    attention: dict = field(default_factory=dict)  # layer index -> list of H x T x T arrays
    layouts: dict = field(default_factory=dict)  # layer index -> TokenSequence
    retained: bool = False


class HyperTransformer:
    """Weight generator plus the learned variables of the target CNN.

    All trainable variables live in ``params`` (name -> Tensor); BN running
    statistics of the target CNN are in ``buffers``.
    """

    def __init__(self, cnn_spec: CnnSpec, config: TransformerConfig | None = None, seed: int = 0,
                 dtype=np.float64):
        self.spec = cnn_spec
        self.config = config or TransformerConfig()
        self.dtype = np.dtype(dtype)
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.params, self.buffers = init_cnn_params(cnn_spec, rng, self.dtype)
        c = self.config
        gen = cnn_spec.generated_layers
        if not gen:
            return
        d = c.d_label
        n = cnn_spec.n_classes
        emb_std = c.embedding_init_std
        self.params["codebook.xi"] = Tensor((rng.standard_normal((n, d)) * emb_std).astype(self.dtype), True)
        self.params["codebook.xi_hat"] = Tensor((rng.standard_normal((1, d)) * emb_std).astype(self.dtype), True)
        if c.use_image_embedding:
            cin = cnn_spec.input_shape[0]
            for j in range(4):
                cout = c.image_dim if j == 3 else c.image_channels
                self.params[f"image.{j}.kernel"] = _he(rng, (3, 3, cin, cout), 9 * cin, self.dtype)
                self.params[f"image.{j}.bias"] = _zeros(cout, self.dtype)
                self.params[f"image.{j}.bn_gamma"] = _ones(cout, self.dtype)
                self.params[f"image.{j}.bn_beta"] = _zeros(cout, self.dtype)
                cin = cout
        for i in gen:
            geom = layer_geometry(cnn_spec, i)
            count, length = geom.slices(c.allocation)
            act = self.activation_dim
            c1, c2 = act - act // 2, act // 2
            cin = cnn_spec.activation_shape(i)[0]
            pre = f"gen{i}."
            self.params[pre + "act.0.kernel"] = _he(rng, (3, 3, cin, c1), 9 * cin, self.dtype)
            self.params[pre + "act.0.bias"] = _zeros(c1, self.dtype)
            if c2:
                self.params[pre + "act.1.kernel"] = _he(rng, (3, 3, c1, c2), 9 * c1, self.dtype)
                self.params[pre + "act.1.bias"] = _zeros(c2, self.dtype)
            self.params[pre + "mu"] = Tensor((rng.standard_normal((count, d)) * emb_std).astype(self.dtype), True)
            D = self.token_dim
            self.params.update(init_transformer_params(c, D, rng, pre + "tf.", self.dtype))
            self.params[pre + "readout.w"] = _he(rng, (D, length), D, self.dtype)
            if geom.kind == "conv":
                self.params[pre + "readout.w"].data *= c.conv_readout_gain
            self.params[pre + "readout.b"] = _zeros(length, self.dtype)
            if c.slice_offsets and geom.kind == "conv":
                base = he_normal(rng, (geom.k, geom.k, geom.n_in, geom.n_out), geom.k * geom.k * geom.n_in,
                                 self.dtype)
                self.params[pre + "offset"] = Tensor(
                    encode_slices(base, np.zeros(geom.n_out), c.allocation, geom).astype(self.dtype), True)

    # -- dimensions ---------------------------------------------------------
    @property
    def activation_dim(self) -> int:
        if self.config.activation_dim:
            return self.config.activation_dim
        convs = [l.channels for l in self.spec.layers if l.kind == "conv"]
        return max(convs[0] if convs else self.spec.input_shape[0], 1)

    @property
    def token_dim(self) -> int:
        c = self.config
        return c.d_label + (c.image_dim if c.use_image_embedding else 0) + self.activation_dim

    # -- embeddings ---------------------------------------------------------
    def image_embedding(self, x: Tensor) -> Tensor:
        """Shared global embedding: four stride-2 3x3 conv blocks, then spatial mean."""
        p = self.params
        h = x
        for j in range(4):
            h = T.conv2d(h, p[f"image.{j}.kernel"], p[f"image.{j}.bias"], stride=2)
            h, _ = T.batchnorm(h, p[f"image.{j}.bn_gamma"], p[f"image.{j}.bn_beta"], "train")
            h = T.relu(h)
        return T.global_avgpool(h)

    def activation_embedding(self, z: Tensor, i: int) -> Tensor:
        """Two conv layers (3x3 stride 1, 3x3 stride 2); both spatially averaged and concatenated."""
        p, pre = self.params, f"gen{i}.act."
        expected = self.spec.activation_shape(i)[0]
        if z.ndim != 4 or z.shape[1] != expected:
            raise T.DimensionError(f"layer {i} activations have shape {z.shape}, expected {expected} channels")
        h1 = T.relu(T.conv2d(z, p[pre + "0.kernel"], p[pre + "0.bias"], stride=1))
        feats = [T.global_avgpool(h1)]
        if pre + "1.kernel" in p:
            h2 = T.relu(T.conv2d(h1, p[pre + "1.kernel"], p[pre + "1.bias"], stride=2))
            feats.append(T.global_avgpool(h2))
        return T.concat(feats, axis=1)

    def label_table(self) -> Tensor:
        return T.concat([self.params["codebook.xi"], self.params["codebook.xi_hat"]], axis=0)

    # -- generation ---------------------------------------------------------
    def generate(self, support_images, support_labels, retain_attention: bool = False) -> GenerationRun:
        """Generate every Generated layer in order and collect support BN statistics."""
        spec = self.spec
        x = support_images if isinstance(support_images, Tensor) else Tensor(
            np.asarray(support_images, dtype=self.dtype))
        labels = np.asarray(support_labels, dtype=np.int64)
        weights = learned_weights(spec, self.params, self.buffers)
        weights.allocation = self.config.allocation
        run = GenerationRun(weights, retained=retain_attention)
        gen = set(spec.generated_layers)
        img = None
        if gen and self.config.use_image_embedding:
            img = self.image_embedding(x)
        table = self.label_table() if gen else None
        z = x
        stats = []
        for i, layer in enumerate(spec.layers):
            if i in gen:
                pre = f"gen{i}."
                act = self.activation_embedding(z, i)
                seq = encode_tokens(labels, table, img, act, self.params[pre + "mu"])
                maps = [] if retain_attention else None
                out = transformer_forward(seq.tokens, self.params, pre + "tf.", self.config, maps)
                ph = T.gather(out, seq.placeholder_rows, axis=0)
                slices = T.linear(ph, self.params[pre + "readout.w"], self.params[pre + "readout.b"])
                if pre + "offset" in self.params:
                    slices = T.add(slices, self.params[pre + "offset"])
                kernel, bias = decode_weights(slices, self.config.allocation, layer_geometry(spec, i))
                weights.kernels[i], weights.biases[i] = kernel, bias
                run.layouts[i] = seq
                if retain_attention:
                    run.attention[i] = maps
            if layer.kind == "conv":
                z, used = apply_layer(z, i, spec, weights, "train")
                stats.append(used)
            else:
                stats.append(None)
        weights.support_stats = stats
        return run

    def query_logits(self, run: GenerationRun, images) -> Tensor:
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=self.dtype))
        return cnn_forward(x, self.spec, run.weights, "support")

    def episode_loss(self, episode, retain_attention: bool = False):
        """Query cross-entropy of the CNN generated from the episode's support set."""
        run = self.generate(episode.support_images, episode.support_labels, retain_attention)
        logits = self.query_logits(run, episode.query_images)
        return T.cross_entropy(logits, episode.query_labels), logits, run

    def state_dict(self) -> dict:
        out = {k: v.data for k, v in self.params.items()}
        out.update({f"buffer:{k}": v for k, v in self.buffers.items()})
        return out

    def load_state_dict(self, state: dict) -> None:
        for k, v in state.items():
            if k.startswith("buffer:"):
                self.buffers[k[7:]] = np.array(v, dtype=self.dtype)
            else:
                if k not in self.params:
                    raise KeyError(f"unexpected parameter {k!r}")
                if self.params[k].shape != np.shape(v):
                    raise T.DimensionError(f"parameter {k!r}: shape {np.shape(v)} != {self.params[k].shape}")
                self.params[k].data = np.array(v, dtype=self.dtype)

    def config_dict(self) -> dict:
        return {"cnn": self.spec.to_dict(), "transformer": asdict(self.config),
                "seed": self.seed, "dtype": self.dtype.name}


def generate_all_layers(support_images, support_labels, cnn_spec: CnnSpec, model: HyperTransformer,
                        retain_attention: bool = False) -> GeneratedWeights:
    if model.spec is not cnn_spec and model.spec.to_dict() != cnn_spec.to_dict():
        raise ValueError("model was built for a different CNN spec")
    return model.generate(support_images, support_labels, retain_attention).weights


def export_attention_maps(run: GenerationRun, path) -> tuple[Path, Path]:
    """Write attention matrices to ``<path>.npz`` and token roles to ``<path>.json``.

    Array keys are ``cnn{layer}_att{j}`` with shape heads x tokens x tokens,
    one per attention module in execution order.
    """
    if not run.retained:
        raise RuntimeError("attention maps were not retained for this run")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays, notes = {}, {"layers": {}}
    for layer, maps in run.attention.items():
        seq = run.layouts[layer]
        names = []
        for j, m in enumerate(maps):
            key = f"cnn{layer}_att{j}"
            arrays[key] = m
            names.append(key)
        notes["layers"][str(layer)] = {
            "arrays": names,
            "roles": seq.roles,
            "labels": [int(v) for v in seq.labels],
            "axes": ["head", "query_token", "key_token"],
        }
    npz = path.with_suffix(".npz")
    np.savez(npz, **arrays)
    side = path.with_suffix(".json")
    side.write_text(json.dumps(notes, indent=2, sort_keys=True))
    return npz, side
