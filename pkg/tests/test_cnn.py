import numpy as np
import pytest

from hypergen import tensor as T
from hypergen.cnn import (GENERATED, LEARNED, CnnSpec, LayerSpec, accuracy, cnn_forward, init_cnn_params,
                          learned_weights, oracle_train)
from hypergen.episodes import sample_episode, synth_glyphs
from hypergen.generator import HyperTransformer, TransformerConfig
from test_tensor import loop_conv, loop_maxpool


def plain(spec, seed=0):
    params, buffers = init_cnn_params(spec, np.random.default_rng(seed))
    return params, buffers, learned_weights(spec, params, buffers)


def test_spec_validation():
    with pytest.raises(ValueError):
        CnnSpec([LayerSpec("conv", 4)], 2)
    with pytest.raises(ValueError):
        CnnSpec([LayerSpec("logits", 3)], 2)
    spec = CnnSpec.standard(8, 5, generate="1,2")
    assert spec.generated_layers == [1, 2, 4]
    assert CnnSpec.standard(8, 5, generate="none").generated_layers == []
    assert spec.kernel_shape(0) == (3, 3, 1, 8) and spec.kernel_shape(4) == (8, 5)
    assert spec.activation_shape(4) == (8, 1, 1)
    assert CnnSpec(**spec.to_dict()).to_dict() == spec.to_dict()


def test_single_class_softmax_is_one(rng):
    spec = CnnSpec.standard(4, 1, generate="none", input_shape=(1, 16, 16))
    _, _, w = plain(spec)
    logits = cnn_forward(rng.normal(size=(3, 1, 16, 16)), spec, w, "train")
    assert np.allclose(T.softmax(logits).data, 1.0)
    assert accuracy(logits, [0, 0, 0]) == 1.0


def test_duplicated_batch_duplicates_logits(rng):
    spec = CnnSpec.standard(4, 3, generate="none", input_shape=(1, 16, 16))
    params, buffers, w = plain(spec)
    for key in buffers:
        buffers[key] += rng.random(buffers[key].shape)
    w = learned_weights(spec, params, buffers)
    x = rng.normal(size=(2, 1, 16, 16))
    single = cnn_forward(x, spec, w, "eval").data
    double = cnn_forward(np.concatenate([x, x]), spec, w, "eval").data
    assert np.array_equal(double, np.concatenate([single, single]))


def test_micro_cnn_matches_loop_oracle(rng):
    spec = CnnSpec([LayerSpec("conv", 2), LayerSpec("logits", 3, 1, 1, "VALID", False, False)], 3, (1, 6, 6))
    params, buffers, w = plain(spec, seed=4)
    for key in ("cnn.0.bn_gamma", "cnn.0.bn_beta", "cnn.0.bias", "cnn.1.bias"):
        params[key].data = rng.normal(size=params[key].shape)
    buffers["cnn.0.running_mean"][:] = rng.normal(size=2)
    buffers["cnn.0.running_var"][:] = rng.random(2) + 0.5
    x = rng.normal(size=(3, 1, 6, 6))
    got = cnn_forward(x, spec, learned_weights(spec, params, buffers), "eval").data

    g, b = params["cnn.0.bn_gamma"].data, params["cnn.0.bn_beta"].data
    m, v = buffers["cnn.0.running_mean"], buffers["cnn.0.running_var"]
    h = loop_conv(x, params["cnn.0.kernel"].data, params["cnn.0.bias"].data)
    for c in range(2):
        h[:, c] = (h[:, c] - m[c]) / np.sqrt(v[c] + 1e-5) * g[c] + b[c]
    h = loop_maxpool(np.maximum(h, 0.0))
    feats = h.mean(axis=(2, 3))
    want = np.zeros((3, 3))
    W1, b1 = params["cnn.1.kernel"].data, params["cnn.1.bias"].data
    for i in range(3):
        for o in range(3):
            want[i, o] = b1[o] + sum(feats[i, c] * W1[c, o] for c in range(2))
    assert np.max(np.abs(got - want)) < 1e-10


def test_oracle_train_single_class_and_determinism():
    index = synth_glyphs(2, 8, 16, seed=0)
    spec1 = CnnSpec.standard(4, 1, generate="none", input_shape=(1, 16, 16))
    r = oracle_train(index.classes[:1], spec1, steps=1, seed=0)
    assert r.train_accuracy == 1.0 and r.heldout_accuracy == 1.0
    spec2 = CnnSpec.standard(4, 2, generate="none", input_shape=(1, 16, 16))
    a = oracle_train(index.classes, spec2, steps=5, seed=3)
    b = oracle_train(index.classes, spec2, steps=5, seed=3)
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)


def test_logits_only_body_is_episode_independent():
    index = synth_glyphs(8, 6, 16, seed=1)
    spec = CnnSpec.standard(4, 2, generate="logits", input_shape=(1, 16, 16))
    model = HyperTransformer(spec, TransformerConfig(num_layers=1), seed=0)
    x = np.random.default_rng(0).normal(size=(3, 1, 16, 16))
    feats = []
    for seed in (0, 1):
        ep = sample_episode(index, 2, 1, 1, seed=seed)
        with T.no_grad():
            run = model.generate(ep.support_images, ep.support_labels)
        w = run.weights
        assert w.kernels[4] is not None and w.sources[4] == GENERATED
        assert all(w.sources[i] == LEARNED for i in range(4))
        z = T.Tensor(x)
        from hypergen.cnn import apply_layer
        for i in range(4):
            z, _ = apply_layer(z, i, spec, w, "eval")
        feats.append(z.data)
    assert np.array_equal(feats[0], feats[1])


def test_all_generated_every_parameter_gets_gradient():
    index = synth_glyphs(6, 6, 16, seed=2)
    # Counted per named tensor; unlabeled samples make the unlabeled-label row live.
    spec = CnnSpec.standard(8, 3, generate="all", input_shape=(1, 16, 16))
    model = HyperTransformer(spec, TransformerConfig(), seed=0)
    ep = sample_episode(index, 3, 2, 2, 2, seed=0)
    with T.Tape():
        loss, _, _ = model.episode_loss(ep)
        grads = T.backward(loss)
    gen_params = [k for k in model.params if not k.startswith("cnn.")]
    nonzero = sum(1 for k in gen_params if np.any(grads.get(model.params[k], 0.0) != 0.0))
    assert nonzero >= 0.99 * len(gen_params), [k for k in gen_params
                                                if not np.any(grads.get(model.params[k], 0.0) != 0.0)]


def test_generated_model_does_not_beat_conventional_training():
    """Fresh generator vs a CNN trained on all samples of the same five classes."""
    index = synth_glyphs(5, 20, 16, seed=0).with_standardization()
    spec_oracle = CnnSpec.standard(8, 5, generate="none", input_shape=(1, 16, 16))
    oracle = oracle_train(index.classes, spec_oracle, steps=300, seed=0, mean=index.mean, std=index.std)
    spec = CnnSpec.standard(8, 5, generate="logits", input_shape=(1, 16, 16))
    model = HyperTransformer(spec, TransformerConfig(num_layers=1), seed=0)
    accs = []
    with T.no_grad():
        for s in range(20):
            ep = sample_episode(index, 5, 1, 4, seed=s)
            accs.append(accuracy(model.query_logits(model.generate(ep.support_images, ep.support_labels),
                                                    ep.query_images), ep.query_labels))
    assert oracle.heldout_accuracy >= np.mean(accs)
