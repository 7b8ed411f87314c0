import json

import numpy as np
import pytest

from hypergen import tensor as T
from hypergen.checks import check_episode_gradient, micro_episode, micro_generator, support_permutation_error
from hypergen.cnn import CnnSpec
from hypergen.episodes import UNLABELED, sample_episode, synth_glyphs
from hypergen.generator import (OUTPUT, SPATIAL, HyperTransformer, TransformerConfig, decode_weights,
                                encode_slices, encode_tokens, export_attention_maps, layer_geometry,
                                multi_head_attention, transformer_forward)


@pytest.fixture(scope="module")
def glyphs():
    return synth_glyphs(8, 8, 16, seed=0).with_standardization()


def small_model(generate="logits", channels=4, n=3, **cfg):
    spec = CnnSpec.standard(channels, n, generate=generate, input_shape=(1, 16, 16))
    return HyperTransformer(spec, TransformerConfig(**cfg), seed=0)


# -- tokens --------------------------------------------------------------------

def test_token_layout_two_samples_two_placeholders(rng):
    table = T.Tensor(rng.normal(size=(3, 4)))  # two classes plus the unlabeled row
    img, act = T.Tensor(rng.normal(size=(2, 5))), T.Tensor(rng.normal(size=(2, 3)))
    mu = T.Tensor(rng.normal(size=(2, 4)))
    seq = encode_tokens([1, UNLABELED], table, img, act, mu)
    assert seq.tokens.shape == (4, 12)
    assert seq.roles == ["labeled", "unlabeled", "weights", "weights"]
    assert list(seq.placeholder_rows) == [2, 3]
    assert np.array_equal(seq.tokens.data[0, :4], table.data[1])
    assert np.array_equal(seq.tokens.data[1, :4], table.data[2])
    assert np.array_equal(seq.tokens.data[0, 4:9], img.data[0])
    assert np.array_equal(seq.tokens.data[2:, :4], mu.data)
    assert np.all(seq.tokens.data[2:, 4:] == 0.0)


def test_token_width_is_label_plus_image_plus_channels():
    model = small_model(channels=4)
    assert model.token_dim == 32 + 32 + 4
    assert small_model(channels=4, use_image_embedding=False).token_dim == 32 + 4


def test_token_errors(rng):
    table = T.Tensor(rng.normal(size=(3, 4)))
    mu = T.Tensor(rng.normal(size=(1, 4)))
    with pytest.raises(ValueError):
        encode_tokens([2], table, None, T.Tensor(rng.normal(size=(1, 3))), mu)
    with pytest.raises(T.DimensionError):
        encode_tokens([0, 1], table, None, T.Tensor(rng.normal(size=(1, 3))), mu)


# -- attention -----------------------------------------------------------------

def attention_params(rng, d, qk, v):
    return {"wq": T.Tensor(rng.normal(size=(d, qk))), "bq": T.Tensor(rng.normal(size=qk)),
            "wk": T.Tensor(rng.normal(size=(d, qk))), "bk": T.Tensor(rng.normal(size=qk)),
            "wv": T.Tensor(rng.normal(size=(d, v))), "bv": T.Tensor(rng.normal(size=v)),
            "wo": T.Tensor(rng.normal(size=(v, d))), "bo": T.Tensor(rng.normal(size=d))}


def test_single_token_attention_is_value_projection(rng):
    p = attention_params(rng, 5, 4, 6)
    x = rng.normal(size=(1, 5))
    out = multi_head_attention(T.Tensor(x), p, "", 2).data
    want = (x @ p["wv"].data + p["bv"].data) @ p["wo"].data + p["bo"].data
    assert np.max(np.abs(out - want)) < 1e-10


def test_two_token_attention_by_hand(rng):
    p = attention_params(rng, 3, 2, 2)
    x = rng.normal(size=(2, 3))
    maps = []
    out = multi_head_attention(T.Tensor(x), p, "", 1, maps=maps).data
    q = x @ p["wq"].data + p["bq"].data
    k = x @ p["wk"].data + p["bk"].data
    v = x @ p["wv"].data + p["bv"].data
    want = np.zeros((2, 3))
    for i in range(2):
        s = np.array([q[i] @ k[j] / np.sqrt(2) for j in range(2)])
        a = np.exp(s - s.max()) / np.exp(s - s.max()).sum()
        assert np.allclose(maps[0][0, i], a, atol=1e-12)
        want[i] = (a[0] * v[0] + a[1] * v[1]) @ p["wo"].data + p["bo"].data
    assert np.max(np.abs(out - want)) < 1e-10


def test_transformer_is_permutation_equivariant(rng):
    cfg = TransformerConfig(num_layers=2, num_heads=2)
    model = small_model()
    params = {k: v for k, v in model.params.items() if k.startswith("gen4.tf.")}
    x = rng.normal(size=(7, model.token_dim))
    order = rng.permutation(7)
    a = transformer_forward(T.Tensor(x), params, "gen4.tf.", cfg).data
    b = transformer_forward(T.Tensor(x[order]), params, "gen4.tf.", cfg).data
    assert np.max(np.abs(a[order] - b)) < 1e-10


def test_encoder_decoder_variant_runs(glyphs):
    model = small_model(variant="encoder_decoder", num_layers=1)
    ep = sample_episode(glyphs, 3, 1, 2, seed=0)
    with T.no_grad():
        run = model.generate(ep.support_images, ep.support_labels, retain_attention=True)
    assert len(run.attention[4]) == 3  # encoder self, decoder self, decoder cross


# -- weight slices -------------------------------------------------------------

@pytest.mark.parametrize("allocation", [OUTPUT, SPATIAL])
@pytest.mark.parametrize("layer", [0, 1, 4])
def test_slices_round_trip(rng, allocation, layer):
    spec = CnnSpec.standard(3, 5, input_shape=(1, 16, 16))
    geom = layer_geometry(spec, layer)
    count, length = geom.slices(allocation)
    kernel = rng.normal(size=spec.kernel_shape(layer))
    bias = rng.normal(size=geom.n_out)
    slices = encode_slices(kernel, bias, allocation, geom)
    assert slices.shape == (count, length)
    k, b = decode_weights(T.Tensor(slices), allocation, geom)
    assert np.array_equal(k.data.reshape(kernel.shape), kernel) and np.array_equal(b.data, bias)


def test_slice_counts():
    spec = CnnSpec.standard(3, 5, input_shape=(1, 16, 16))
    assert layer_geometry(spec, 1).slices(OUTPUT) == (3, 9 * 3 + 1)
    assert layer_geometry(spec, 1).slices(SPATIAL) == (10, 9)
    assert layer_geometry(spec, 4).slices(OUTPUT) == (5, 4)
    with pytest.raises(T.DimensionError):
        decode_weights(T.Tensor(np.zeros((2, 2))), OUTPUT, layer_geometry(spec, 1))


@pytest.mark.parametrize("allocation", [OUTPUT, SPATIAL])
def test_generated_shapes_match_spec(glyphs, allocation):
    model = small_model("all", allocation=allocation)
    ep = sample_episode(glyphs, 3, 1, 2, seed=0)
    with T.no_grad():
        w = model.generate(ep.support_images, ep.support_labels).weights
    for i in range(5):
        assert w.kernels[i].shape == model.spec.kernel_shape(i)
        assert w.biases[i].shape == (model.spec.layers[i].channels,)


# -- symmetries ----------------------------------------------------------------

def test_support_permutation_invariance(glyphs):
    model = small_model("all")
    ep = sample_episode(glyphs, 3, 2, 1, 1, seed=1)
    assert support_permutation_error(model, ep, permutations=5) < 1e-10


def test_relabeling_with_swapped_embeddings_swaps_logit_columns(glyphs):
    model = small_model("logits", n=2)
    ep = sample_episode(glyphs, 2, 2, 1, seed=3)
    with T.no_grad():
        before = model.generate(ep.support_images, ep.support_labels).weights
        for name in ("codebook.xi", "gen4.mu"):
            model.params[name].data = model.params[name].data[[1, 0]]
        after = model.generate(ep.support_images, 1 - ep.support_labels).weights
    assert np.max(np.abs(after.kernels[4].data - before.kernels[4].data[:, [1, 0]])) < 1e-10
    assert np.max(np.abs(after.biases[4].data - before.biases[4].data[[1, 0]])) < 1e-10


def test_unlabeled_embedding_unused_without_unlabeled_samples(glyphs):
    model = small_model()
    ep = sample_episode(glyphs, 3, 1, 1, seed=0)
    with T.no_grad():
        a = model.generate(ep.support_images, ep.support_labels).weights.kernels[4].data
        model.params["codebook.xi_hat"].data += 5.0
        b = model.generate(ep.support_images, ep.support_labels).weights.kernels[4].data
    assert np.array_equal(a, b)


def test_unlabeled_tokens_carry_unlabeled_embedding(glyphs):
    model = small_model()
    ep = sample_episode(glyphs, 3, 1, 1, 2, seed=0)
    with T.no_grad():
        run = model.generate(ep.support_images, ep.support_labels, retain_attention=True)
    seq = run.layouts[4]
    rows = [i for i, r in enumerate(seq.roles) if r == "unlabeled"]
    assert len(rows) == 6
    assert np.array_equal(seq.tokens.data[rows, :32], np.repeat(model.params["codebook.xi_hat"].data, 6, 0))


# -- gradients and attention export -------------------------------------------

def test_episode_gradient_matches_finite_differences():
    for seed in range(3):
        result = check_episode_gradient(coords=24, seed=seed)
        assert result.passed, result


def test_attention_export(glyphs, tmp_path):
    model = small_model("all", num_layers=2, num_heads=2)
    ep = sample_episode(glyphs, 3, 1, 1, 1, seed=0)
    with T.no_grad():
        run = model.generate(ep.support_images, ep.support_labels, retain_attention=True)
        with pytest.raises(RuntimeError):
            export_attention_maps(model.generate(ep.support_images, ep.support_labels), tmp_path / "x")
    npz, side = export_attention_maps(run, tmp_path / "att")
    notes = json.loads(side.read_text())
    arrays = np.load(npz)
    assert sorted(arrays.files) == sorted(f"cnn{i}_att{j}" for i in range(5) for j in range(2))
    for i in range(5):
        info = notes["layers"][str(i)]
        n_tok = len(info["roles"])
        assert info["roles"].count("unlabeled") == 3 and info["roles"].count("labeled") == 3
        for key in info["arrays"]:
            m = arrays[key]
            assert m.shape == (2, n_tok, n_tok)
            assert np.allclose(m.sum(axis=-1), 1.0, atol=1e-12)


def test_state_dict_round_trip(glyphs):
    model = small_model("all")
    other = HyperTransformer(model.spec, model.config, seed=9)
    other.load_state_dict(model.state_dict())
    ep = sample_episode(glyphs, 3, 1, 1, seed=0)
    with T.no_grad():
        a = model.generate(ep.support_images, ep.support_labels).weights
        b = other.generate(ep.support_images, ep.support_labels).weights
    assert all(np.array_equal(a.kernels[i].data, b.kernels[i].data) for i in range(5))
    with pytest.raises(KeyError):
        other.load_state_dict({"nope": np.zeros(1)})


def test_micro_config_is_small():
    model = micro_generator()
    ep = micro_episode()
    assert model.spec.n_classes == 2 and len(model.spec.layers) == 3
    assert ep.support_images.shape[0] == 2
