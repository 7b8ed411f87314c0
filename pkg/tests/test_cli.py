import json

import numpy as np
import pytest

from hypergen import cli
from hypergen.episodes import synth_glyphs

CONFIG = """output_dir = "{out}"

[dataset]
uri = "synth://glyphs?classes=8&per=8&size=16&seed=0"
train_classes = 5
test_classes = 3

[episode]
n_way = 2
q_query = 2

[train]
total_steps = 2
meta_batch = 1
eval_episodes = 4

[cnn]
channels = 2
n_conv = 2
generate = "all"

[transformer]
num_layers = 1
num_heads = 1
"""


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    conf = root / "run.toml"
    conf.write_text(CONFIG.format(out=root / "run"))
    assert cli.main(["train", str(conf)]) == 0
    return root


def test_train_outputs(trained):
    run_dir = trained / "run"
    for name in ("checkpoint.hgw", "metrics.csv", "metrics.jsonl", "config.toml"):
        assert (run_dir / name).exists()


def test_resume_to_more_steps(trained, capsys):
    code, out, _ = run(capsys, "train", trained / "run.toml", "--output-dir", trained / "more",
                       "--total-steps", 3, "--stop-step", 1)
    assert code == 0 and json.loads(out)["step"] == 1
    code, out, _ = run(capsys, "train", trained / "run.toml", "--output-dir", trained / "more",
                       "--total-steps", 3, "--resume")
    assert code == 0 and json.loads(out)["step"] == 3


def test_eval_is_deterministic(trained, capsys):
    ckpt = trained / "run" / "checkpoint.hgw"
    _, a, _ = run(capsys, "eval", ckpt, "--episodes", 20, "--seed", 1)
    _, b, _ = run(capsys, "eval", ckpt, "--episodes", 20, "--seed", 1)
    report = json.loads(a)
    assert a == b and report["episodes"] == 20 and 0.0 <= report["mean_accuracy"] <= 1.0


def test_generate_from_episode_and_directory(trained, capsys, tmp_path):
    ckpt = trained / "run" / "checkpoint.hgw"
    code, out, _ = run(capsys, "generate", ckpt, "--episode-seed", 3, "--out", tmp_path / "g.hgw")
    assert code == 0 and "layer0.kernel" in json.loads(out)["tensors"]
    glyphs = synth_glyphs(2, 2, 16, seed=7)
    from PIL import Image
    for rec in glyphs.classes:
        d = tmp_path / "support" / rec.name
        d.mkdir(parents=True)
        for j, img in enumerate(rec.images):
            Image.fromarray((img[0] * 255).astype(np.uint8)).save(d / f"{j}.png")
    code, out, _ = run(capsys, "generate", ckpt, "--support-dir", tmp_path / "support", "--out", tmp_path / "d.hgw")
    assert code == 0 and json.loads(out)["class_map"] == glyphs.class_names


def test_inspect_attention(trained, capsys, tmp_path):
    code, out, _ = run(capsys, "inspect-attention", trained / "run" / "checkpoint.hgw", "--episode-seed", 0,
                       "--out", tmp_path / "att")
    paths = json.loads(out)
    notes = json.loads(open(paths["annotations"]).read())
    assert code == 0 and len(notes["class_map"]) == 2 and set(notes["layers"]) == {"0", "1", "2"}


def test_export_weight_embeddings(trained, capsys, tmp_path):
    code, out, _ = run(capsys, "export-weight-embeddings", trained / "run" / "checkpoint.hgw", "--episodes", 6,
                       "--layers", "2", "--out", tmp_path / "emb")
    matrix = np.load(tmp_path / "emb.npy")
    assert code == 0 and matrix.shape == (6, 2 * 2 + 2)
    code, _, err = run(capsys, "export-weight-embeddings", trained / "run" / "checkpoint.hgw", "--layers", "7",
                       "--out", tmp_path / "bad")
    assert code == 2 and "not generated" in err


def test_oracle_check(capsys):
    code, out, _ = run(capsys, "oracle-check", "all")
    assert code == 0 and json.loads(out)["passed"]


def test_exit_codes(capsys, tmp_path):
    code, _, err = run(capsys, "train", tmp_path / "missing.toml")
    assert code == 4
    bad = tmp_path / "bad.toml"
    bad.write_text("[train]\nlr0 = 0.1\nwhat = 2\n")
    code, _, err = run(capsys, "train", bad)
    assert code == 2 and "line 3, column 1" in err
    (tmp_path / "junk.hgw").write_bytes(b"junk")
    code, _, _ = run(capsys, "eval", tmp_path / "junk.hgw")
    assert code == 2


def test_thread_limit_must_be_integer(capsys, monkeypatch):
    monkeypatch.setenv("HYPERGEN_THREADS", "many")
    code, _, err = run(capsys, "oracle-check", "appendixB")
    assert code == 2 and "HYPERGEN_THREADS" in err
    monkeypatch.setenv("HYPERGEN_THREADS", "1")
    code, _, _ = run(capsys, "oracle-check", "appendixB")
    assert code == 0
