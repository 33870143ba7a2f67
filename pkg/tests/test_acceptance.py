"""Acceptance gate: twelve verifiable properties of the pipeline, each with
its stated tolerance.  Run with `pytest tests/test_acceptance.py -v -s` to
see one PASS line per criterion."""

import math
import time

import numpy as np
import pytest

from confmatch.attention import (
    attention_weights,
    biased_scores,
    block_forward,
    standard_block_forward,
    AttentionParams,
)
from confmatch.config import AblationFlags, RunConfig
from confmatch.confidence import CorrelationMatrix, confidence_maps
from confmatch.evaluate import generate_corpus, load_corpus, mma, run_benchmark
from confmatch.geometry import (
    Homography,
    build_coarse_gt,
    build_conf_gt,
    build_correspondence_field,
)
from confmatch.losses import (
    FocalConfig,
    confidence_grad,
    confidence_loss,
    focal_grad,
    focal_loss,
    grad_check,
    subpixel_grad,
    subpixel_loss,
    total_loss,
)
from confmatch.matching import dual_softmax, fine_stage2, match_pair, mnn_filter

CFG = RunConfig()


def _report(num, desc):
    print(f"ACCEPTANCE {num:02d} PASS: {desc}")


@pytest.fixture(scope="module")
def identity_corpus(tmp_path_factory):
    d = tmp_path_factory.mktemp("acceptance") / "identity"
    generate_corpus(d, seed=11, n_pairs=10, size=64, warp_mode="identity")
    return d


@pytest.fixture(scope="module")
def translation_corpus(tmp_path_factory):
    d = tmp_path_factory.mktemp("acceptance") / "translate8"
    generate_corpus(
        d, seed=12, n_pairs=10, size=64, warp_magnitude=8.0, warp_mode="translation"
    )
    return d


def test_criterion_01_bias_equivalence():
    start = time.perf_counter()
    rng = np.random.default_rng(100)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 17))
        c = int(rng.integers(2, 17))
        q = rng.standard_normal((n, c))
        k = rng.standard_normal((n, c))
        w1 = rng.random((n, 1))
        alpha = float(rng.uniform(0.1, 10.0))
        scale = 1.0 / math.sqrt(c)
        modulated = scale * ((q * (1.0 + alpha * w1)) @ k.T)
        additive = scale * (q @ k.T + alpha * ((q * w1) @ k.T))
        worst = max(worst, float(np.abs(modulated - additive).max()))
    elapsed = time.perf_counter() - start
    assert worst <= 1e-10
    assert elapsed < 1.0
    _report(1, f"bias forms agree elementwise (max err {worst:.2e}, {elapsed:.2f}s)")


def test_criterion_02_temperature_semantics():
    rng = np.random.default_rng(101)
    # zero confidence: biased path must be bitwise-equal to plain softmax
    for _ in range(10):
        q = rng.standard_normal((5, 8))
        k = rng.standard_normal((5, 8))
        scale = 1.0 / math.sqrt(8)
        a_biased = attention_weights(biased_scores(q, k, np.zeros(5), 1.0, scale))
        a_plain = attention_weights(scale * (q @ k.T))
        np.testing.assert_array_equal(a_biased, a_plain)
    # argmax mass strictly increasing in the temperature
    for _ in range(20):
        row = rng.standard_normal(10)
        top = row.argmax()
        masses = [
            attention_weights((tau * row)[None, :])[0, top]
            for tau in (1, 2, 5, 10, 100)
        ]
        assert all(b > a for a, b in zip(masses, masses[1:]))
    _report(2, "zero-confidence rows are bitwise standard; sharpening is monotone")


def test_criterion_03_argmax_limit():
    rng = np.random.default_rng(102)
    tau = 1e3
    worst_unique = 0.0
    for _ in range(20):
        row = rng.standard_normal(12)
        top = row.argmax()
        row[top] = row.max() + 0.5
        a = attention_weights((tau * row)[None, :])[0]
        worst_unique = max(worst_unique, 1.0 - float(a[top]))
    assert worst_unique <= 1e-6
    worst_tie = 0.0
    for k in (2, 3):
        row = rng.standard_normal(10)
        row[:k] = row.max() + 1.0
        a = attention_weights((tau * row)[None, :])[0]
        worst_tie = max(worst_tie, float(np.abs(a[:k] - 1.0 / k).max()))
    assert worst_tie <= 1e-6
    _report(3, f"tau=1e3 saturates (err {worst_unique:.1e}) and splits ties evenly "
               f"(err {worst_tie:.1e})")


def test_criterion_04_value_rescaling():
    from confmatch.attention import aggregate

    rng = np.random.default_rng(103)
    worst = 0.0
    for _ in range(50):
        n = int(rng.integers(2, 9))
        c = int(rng.integers(2, 9))
        a = attention_weights(rng.standard_normal((n, n)))
        v = rng.standard_normal((n, c))
        w2 = rng.random(n)
        got = aggregate(a, v, w2)
        for i in range(n):
            for ch in range(c):
                expected = sum(a[i, j] * w2[j] * v[j, ch] for j in range(n))
                worst = max(worst, abs(got[i, ch] - expected))
        np.testing.assert_array_equal(aggregate(a, v, np.ones(n)), a @ v)
    assert worst <= 1e-12
    _report(4, f"rescaled aggregation matches the scalar oracle (max err {worst:.1e})")


def test_criterion_05_dual_softmax_mnn_oracle():
    start = time.perf_counter()
    rng = np.random.default_rng(104)
    checked = 0
    for h1 in range(1, 5):
        for w1 in range(1, 5):
            for h2 in range(1, 5):
                for w2 in range(1, 5):
                    n, m = h1 * w1, h2 * w2
                    s = rng.standard_normal((n, m)) * 2.0
                    p = dual_softmax(s)
                    # scalar re-derivation of the probability matrix
                    oracle = np.empty_like(p)
                    for i in range(n):
                        rden = sum(math.exp(v) for v in s[i])
                        for j in range(m):
                            cden = sum(math.exp(s[a, j]) for a in range(n))
                            oracle[i, j] = (math.exp(s[i, j]) / rden) * (
                                math.exp(s[i, j]) / cden
                            )
                    np.testing.assert_allclose(p, oracle, atol=1e-12)
                    for theta in (0.0, 0.05):
                        want = set()
                        for i in range(n):
                            for j in range(m):
                                row, col = p[i, :], p[:, j]
                                if (
                                    p[i, j] >= theta
                                    and (row == row.max()).sum() == 1
                                    and (col == col.max()).sum() == 1
                                    and p[i, j] == row.max() == col.max()
                                ):
                                    want.add((i, j))
                        pairs, _ = mnn_filter(p, theta)
                        assert {tuple(q) for q in pairs} == want
                    checked += 1
    elapsed = time.perf_counter() - start
    assert elapsed < 1.0
    _report(5, f"coarse matching equals exhaustive enumeration on {checked} grids "
               f"({elapsed:.2f}s)")


def test_criterion_06_confidence_maps():
    rng = np.random.default_rng(105)
    s = rng.standard_normal((16, 16)) * 2
    base1, base2 = confidence_maps(CorrelationMatrix(s=s, gamma=1.0))
    for w in (base1.w, base2.w):
        assert (w > 0.0).all() and (w < 1.0).all()
    for c in (-5.0, 3.0):
        w1, w2 = confidence_maps(CorrelationMatrix(s=s + c, gamma=1.0))
        np.testing.assert_allclose(w1.w, base1.w, atol=1e-12)
        np.testing.assert_allclose(w2.w, base2.w, atol=1e-12)
    w1, w2 = confidence_maps(CorrelationMatrix(s=np.full((9, 9), 1.7), gamma=1.0))
    np.testing.assert_allclose(w1.w, 0.5, atol=1e-15)
    np.testing.assert_allclose(w2.w, 0.5, atol=1e-15)
    _report(6, "maps in (0,1); shift-invariant; constant input gives 0.5")


def test_criterion_07_gt_targets_binary():
    rng = np.random.default_rng(106)
    for _ in range(200):
        w = int(rng.integers(1, 9))
        hgt = int(rng.integers(1, 9))
        while True:
            m = np.eye(3) + rng.uniform(-0.15, 0.15, (3, 3))
            m[0, 2] = rng.uniform(-w, w)
            m[1, 2] = rng.uniform(-hgt, hgt)
            m[2, :2] *= 0.2
            m[2, 2] = 1.0
            if abs(np.linalg.det(m)) > 0.3:
                break
        field = build_correspondence_field(Homography(m), w, hgt)
        t1, t2 = build_conf_gt(build_coarse_gt(field))
        assert np.isin(t1, (0.0, 1.0)).all()
        assert np.isin(t2, (0.0, 1.0)).all()
    _report(7, "confidence targets exactly binary on 200 random homography GTs")


def test_criterion_08_loss_gradients():
    rng = np.random.default_rng(107)
    fc = FocalConfig()
    worst = {"focal": 0.0, "subpixel": 0.0, "bce": 0.0}
    for _ in range(20):
        p = rng.uniform(0.05, 0.95, size=(4, 5))
        gt = (rng.random((4, 5)) < 0.3).astype(float)
        worst["focal"] = max(
            worst["focal"],
            grad_check(lambda x: focal_loss(x, gt, fc), lambda x: focal_grad(x, gt, fc), p),
        )
        pred = rng.standard_normal((6, 2))
        tgt = rng.standard_normal((6, 2)) * 1.2
        worst["subpixel"] = max(
            worst["subpixel"],
            grad_check(
                lambda x: subpixel_loss(x, tgt, 1.0)[0],
                lambda x: subpixel_grad(x, tgt, 1.0),
                pred,
            ),
        )
        w = rng.uniform(0.05, 0.95, size=8)
        t1 = (rng.random(8) < 0.5).astype(float)
        w2v = rng.uniform(0.05, 0.95, size=8)
        t2 = (rng.random(8) < 0.5).astype(float)
        worst["bce"] = max(
            worst["bce"],
            grad_check(
                lambda x: confidence_loss(x, w2v, t1, t2),
                lambda x: confidence_grad(x, t1),
                w,
            ),
        )
    assert all(v <= 1e-4 for v in worst.values()), worst
    value, count = subpixel_loss(np.array([[0.3, -0.4]]), np.array([[0.0, 0.0]]), 1.0)
    assert count == 1
    np.testing.assert_allclose(value, 0.25, rtol=1e-12)
    t = np.array([1.0, 0.0, 1.0, 0.0])
    np.testing.assert_allclose(
        confidence_loss(np.full(4, 0.5), np.full(4, 0.5), t, t),
        math.log(2.0),
        atol=1e-9,
    )
    for beta in (0.0, 0.5, 1.0, 2.0):
        assert total_loss(1.0, 2.0, 3.0, 4.0, beta).total == 6.0 + beta * 4.0
    _report(8, f"gradient checks pass (focal {worst['focal']:.1e}, "
               f"subpixel {worst['subpixel']:.1e}, bce {worst['bce']:.1e}); "
               f"hand cases exact")


def test_criterion_09_fine_refinement_geometry():
    rng = np.random.default_rng(108)
    fused1 = rng.standard_normal((4, 32, 32))
    fused2 = rng.standard_normal((4, 32, 32))
    src = rng.integers(0, 32, size=(1000, 2))
    tgt = rng.integers(0, 32, size=(1000, 2))
    res = fine_stage2(fused1, fused2, src, tgt)
    assert (np.abs(res.deltas) <= 1.0 + 1e-9).all()
    # uniform window: constant target map scores every neighbor equally
    f1 = np.zeros((3, 8, 8))
    f1[:, 4, 4] = [1.0, -0.5, 2.0]
    f2 = np.tile(np.array([0.2, 0.4, 0.1])[:, None, None], (1, 8, 8))
    uniform = fine_stage2(f1, f2, [(4, 4)], [(4, 4)])
    np.testing.assert_array_equal(uniform.deltas, [[0.0, 0.0]])
    # two-way split: expectation lands at the midpoint
    f2m = np.zeros((3, 8, 8))
    f2m[0, :, :] = -100.0
    f2m[0, 4, 4] = 5.0
    f2m[0, 4, 5] = 5.0
    f1m = np.zeros((3, 8, 8))
    f1m[0, 4, 4] = 1.0
    mid = fine_stage2(f1m, f2m, [(4, 4)], [(4, 4)])
    np.testing.assert_allclose(mid.deltas, [[0.5, 0.0]], atol=1e-9)
    _report(9, "1000 random windows stay in the 3x3 hull; uniform and midpoint exact")


def test_criterion_10_self_matching(identity_corpus):
    start = time.perf_counter()
    report = run_benchmark(identity_corpus, CFG)
    assert report["mean_accuracy"][0] >= 0.99
    worst = 0.0
    for pair in load_corpus(identity_corpus):
        ms = match_pair(pair.image1, pair.image2, CFG)
        assert ms.n_fine > 0
        d = np.linalg.norm(ms.fine_p1 - ms.fine_p2, axis=1)
        worst = max(worst, float(d.max()))
    elapsed = time.perf_counter() - start
    assert worst <= 0.5
    assert elapsed < 30.0
    _report(10, f"identity corpus: MMA@1={report['mean_accuracy'][0]:.4f}, "
                f"worst self-offset {worst:.3f}px, {elapsed:.1f}s")


def test_criterion_11_translation_robustness(translation_corpus):
    start = time.perf_counter()
    errors = []
    curves = []
    for pair in load_corpus(translation_corpus):
        ms = match_pair(pair.image1, pair.image2, CFG)
        assert ms.n_fine > 0
        from confmatch.geometry import warp_points

        err = np.linalg.norm(warp_points(pair.h, ms.fine_p1) - ms.fine_p2, axis=1)
        errors.append(err)
        curves.append(mma(ms, pair.h).accuracy)
    elapsed = time.perf_counter() - start
    median = float(np.median(np.concatenate(errors)))
    mma3 = float(np.mean([c[1] for c in curves]))
    assert median < 2.0
    assert mma3 >= 0.8
    assert elapsed < 60.0
    _report(11, f"8px translation: median err {median:.3f}px, MMA@3={mma3:.4f}, "
                f"{elapsed:.1f}s")


def test_criterion_12_ablation_structure(tmp_path, translation_corpus):
    # block level: the off/off configuration is bitwise the vanilla code path
    rng = np.random.default_rng(109)
    f1 = rng.standard_normal((8, 4, 4))
    f2 = rng.standard_normal((8, 4, 4))
    w1 = rng.random((4, 4))
    w2 = rng.random((4, 4))
    params = AttentionParams.from_seed(0, 8)
    off = block_forward(f1, f2, w1, w2, params, use_bias=False, use_rescale=False)
    np.testing.assert_array_equal(off, standard_block_forward(f1, f2, params))

    # benchmark level: four distinct, deterministic reports tagged by flags
    combos = [(True, True), (True, False), (False, True), (False, False)]
    paths = []
    for bias, rescale in combos:
        cfg = RunConfig(flags=AblationFlags(bias=bias, rescale=rescale))
        out = tmp_path / f"report-{cfg.flags.tag()}.json"
        run_benchmark(translation_corpus, cfg, out_path=out)
        paths.append(out)
    contents = [p.read_bytes() for p in paths]
    assert len(set(contents)) == 4
    rerun = tmp_path / "rerun.json"
    run_benchmark(
        translation_corpus,
        RunConfig(flags=AblationFlags(bias=False, rescale=False)),
        out_path=rerun,
    )
    assert rerun.read_bytes() == contents[3]
    _report(12, "off/off equals vanilla bitwise; 4 flag combos give 4 distinct "
                "deterministic reports")
