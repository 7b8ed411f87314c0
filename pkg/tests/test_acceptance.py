"""Acceptance criteria, one printed PASS/FAIL line each.

Criteria 5 to 7 train 18 desk-scale models (about three hours on one core).
Finished runs are cached in ``.acceptance_cache/`` under a key made of the
run settings and a fingerprint of the training code, so a second ``pytest``
reuses them and any semantic code change recomputes them.  Set
``HYPERGEN_ACCEPTANCE_FRESH=1`` to ignore the cache.

Run directly (``python3 tests/test_acceptance.py``) to print the lines
without pytest.
"""

import json
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from conftest import check_gradients, record_acceptance  # noqa: E402
from test_tensor import PRIMITIVES, _cases  # noqa: E402

from hypergen import checks  # noqa: E402
from hypergen.cnn import CnnSpec  # noqa: E402
from hypergen.episodes import sample_episode, synth_glyphs  # noqa: E402
from hypergen.experiments import GlyphRun, pooled, run_glyphs, source_fingerprint  # noqa: E402
from hypergen.generator import HyperTransformer, TransformerConfig  # noqa: E402
from hypergen.trainer import pooled_ci  # noqa: E402

CACHE = Path(__file__).resolve().parent.parent / ".acceptance_cache"
SEEDS = (0, 1, 2)
THRESHOLD_5 = 0.75  # frozen from the calibration run before the acceptance runs
BUDGET_5 = 4 * 3600.0

SUPERVISED_8 = GlyphRun(channels=8, generate="logits")
ALL_8 = replace(SUPERVISED_8, generate="all")
LOGITS_2 = replace(SUPERVISED_8, channels=2)
ALL_2 = replace(LOGITS_2, generate="all")
SEMI_2L = replace(SUPERVISED_8, unlabeled=4)
SEMI_1L = replace(SEMI_2L, transformer_layers=1)


def cached_run(run: GlyphRun) -> dict:
    key = run.key(source_fingerprint())
    path = CACHE / f"{key}.json"
    if path.exists() and not os.environ.get("HYPERGEN_ACCEPTANCE_FRESH"):
        return json.loads(path.read_text())
    result = run_glyphs(run)
    CACHE.mkdir(exist_ok=True)
    path.write_text(json.dumps(result))
    return result


def arm(base: GlyphRun) -> list:
    return [cached_run(replace(base, seed=s)) for s in SEEDS]


def seed_mean(results) -> float:
    return float(np.mean([r["mean_accuracy"] for r in results]))


def describe(name, results) -> str:
    per_seed = ", ".join(f"{r['mean_accuracy']:.3f}" for r in results)
    return f"{name} {seed_mean(results):.3f} (seeds {per_seed}; ci {pooled(results).ci95:.3f})"


# -- 1: gradient integrity ------------------------------------------------------------

def test_criterion_1_gradient_integrity():
    start = time.time()
    worst_primitive, worst_name = 0.0, ""
    for name in PRIMITIVES:
        for seed in range(5):
            build, arrays = _cases(np.random.default_rng(seed))[name]
            err = check_gradients(build, arrays)
            if err > worst_primitive:
                worst_primitive, worst_name = err, name
    episode = max((checks.check_episode_gradient(coords=24, seed=s) for s in range(3)), key=lambda r: r.value)
    elapsed = time.time() - start
    passed = worst_primitive < 1e-3 and episode.value < 1e-3 and elapsed < 120
    record_acceptance(1, "gradient integrity", passed,
                      f"worst primitive {worst_primitive:.1e} ({worst_name}), micro episode loss "
                      f"{episode.value:.1e}, tol 1e-3, {elapsed:.0f}s of 120s")
    assert passed


# -- 2: one-step equivalence ----------------------------------------------------------

def test_criterion_2_attention_equals_gradient_step():
    start = time.time()
    gd = checks.check_gd_matches_autodiff(instances=100)
    mean = checks.check_attention_class_mean(instances=100)
    elapsed = time.time() - start
    passed = gd.passed and mean.passed and gd.tolerance == 1e-10 and mean.tolerance == 1e-6 and elapsed < 60
    record_acceptance(2, "one-step update and attention construction", passed,
                      f"GD vs autodiff {gd.value:.1e} (tol 1e-10), attention vs class mean {mean.value:.1e} "
                      f"(tol 1e-6, beta 50), {elapsed:.1f}s of 60s")
    assert passed


# -- 3: minimizer tracking ------------------------------------------------------------

def test_criterion_3_minimizer_tracking():
    start = time.time()
    results = {r.name: r for r in checks.check_tracking()}
    elapsed = time.time() - start
    quad = results["quadratic family tracks A t1"]
    logi = results["logistic tracking vs direct re-optimization"]
    grad = results["logistic final gradient norm"]
    passed = all(r.passed for r in results.values()) and elapsed < 60
    record_acceptance(3, "minimizer tracking", passed,
                      f"quadratic {quad.value:.1e} (tol 1e-10), logistic {logi.value:.1e} (tol 1e-4), "
                      f"grad norm {grad.value:.1e} (tol 1e-6), {elapsed:.1f}s of 60s")
    assert passed


# -- 4: permutation invariance --------------------------------------------------------

def test_criterion_4_permutation_invariance():
    start = time.time()
    index = synth_glyphs(12, 12, 16, seed=4).with_standardization()
    spec = CnnSpec.standard(8, 5, generate="all", input_shape=(1, 16, 16))
    model = HyperTransformer(spec, TransformerConfig(), seed=0)
    worst = 0.0
    for e in range(100):
        episode = sample_episode(index, 5, 2, 1, 1, seed=e)
        worst = max(worst, checks.support_permutation_error(model, episode, permutations=5, seed=e))
    elapsed = time.time() - start
    passed = worst < 1e-6 and elapsed < 300
    record_acceptance(4, "support permutation invariance", passed,
                      f"max change {worst:.1e} over 100 episodes x 5 permutations (tol 1e-6), "
                      f"{elapsed:.0f}s of 300s")
    assert passed


# -- 5: desk-scale supervised learning --------------------------------------------------

@pytest.mark.slow
def test_criterion_5_supervised_glyphs():
    results = arm(SUPERVISED_8)
    mean = seed_mean(results)
    seconds = sum(r["seconds"] for r in results)
    passed = mean >= THRESHOLD_5 and seconds <= BUDGET_5 and SUPERVISED_8.steps <= 50_000
    record_acceptance(5, "5-way 1-shot glyphs, 8ch logits-only", passed,
                      f"{describe('test accuracy', results)} >= {THRESHOLD_5} (chance 0.20); "
                      f"{SUPERVISED_8.steps} steps, {seconds / 3600:.2f} h of 4 h")
    assert passed


# -- 6: generating more layers helps small CNNs -----------------------------------------

@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="at desk scale 8-channel all-layers generation still beats logits-only "
                   "by more than the pooled CI; analysis in the README")
def test_criterion_6_layer_generation_trend():
    logits2, all2 = arm(LOGITS_2), arm(ALL_2)
    logits8, all8 = arm(SUPERVISED_8), arm(ALL_8)
    small_gain = seed_mean(all2) - seed_mean(logits2)
    large_gain = seed_mean(all8) - seed_mean(logits8)
    large_ci = pooled_ci(pooled(all8), pooled(logits8))
    passed = small_gain > 0 and large_gain <= large_ci
    record_acceptance(6, "all-layers vs logits-only generation", passed,
                      f"2ch: {describe('all', all2)} vs {describe('logits', logits2)}, gain {small_gain:+.3f} > 0; "
                      f"8ch: gain {large_gain:+.3f} <= pooled ci {large_ci:.3f}")
    assert passed


# -- 7: unlabeled samples ---------------------------------------------------------------

@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="the unlabeled-sample gain is positive but inside the pooled CI "
                   "at desk scale; analysis in the README")
def test_criterion_7_semi_supervised_trend():
    supervised, semi2, semi1 = arm(SUPERVISED_8), arm(SEMI_2L), arm(SEMI_1L)
    gain = seed_mean(semi2) - seed_mean(supervised)
    ci = pooled_ci(pooled(semi2), pooled(supervised))
    depth_gain = seed_mean(semi2) - seed_mean(semi1)
    passed = gain > ci and depth_gain > 0
    record_acceptance(7, "unlabeled samples with 2 vs 1 transformer layers", passed,
                      f"{describe('semi 2L', semi2)} vs {describe('supervised', supervised)}: "
                      f"gain {gain:+.3f} vs pooled ci {ci:.3f}; {describe('semi 1L', semi1)}, "
                      f"2L - 1L {depth_gain:+.3f} > 0")
    assert passed


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s"]))
