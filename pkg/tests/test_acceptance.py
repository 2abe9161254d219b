"""Headline acceptance criteria.

Each test prints one PASS/FAIL line (collected again in the terminal summary)
with the measured quantity, its tolerance and the runtime against its limit.
"""

import math
import time

import mpmath
import numpy as np
import pytest

from gabic import attention as A
from gabic import range_coder as rc
from gabic import tensor as T
from gabic.codec import BitstreamError, allocation_diff, allocation_from_bits, analyse_image, decode_image
from gabic.data import validation_set
from gabic.evaluator import RDCurve, bd_rate, compare_modes, psnr
from gabic.network import PAPER_LAMBDAS, GabicModel, ModelConfig, rd_loss
from gabic.trainer import TrainConfig, evaluate_loss, train

pytestmark = pytest.mark.acceptance

# Toy training protocol shared by the sweep and the knn/dense comparison.
DESCENT_STEPS = 500
DESCENT_LR = 1e-3
BASE_LAMBDA = 0.0483
BASE_STEPS = 800
BASE_LR = 1e-3
TUNE_STEPS = 300
TUNE_LR = 3e-4


def _elapsed(start):
    return time.perf_counter() - start


# -- 1 ---------------------------------------------------------------------------------

def test_1_full_knn_graph_equals_dense_attention(report):
    start = time.perf_counter()
    worst, cases = 0.0, 0
    with T.precision(64):
        for seed in range(6):
            for c in (8, 32):
                for m in (4, 8):
                    rng = T.Rng(1000 + seed)
                    params = A.GwamParams.init(c, m, rng, k=m * m, include_self=True)
                    fm = T.Tensor(rng.normal((2, c, 2 * m, 2 * m)))
                    knn = A.gwam_forward(fm, params, "knn").data
                    dense = A.gwam_forward(fm, params, "dense").data
                    worst = max(worst, float(np.abs(knn - dense).max() / np.abs(dense).max()))
                    cases += 1
    secs = _elapsed(start)
    ok = cases >= 20 and worst < 1e-6 and secs < 10
    report(1, "knn(full, include self) == dense", ok,
           f"{cases} cases, max rel err {worst:.2e} (< 1e-6), {secs:.1f}s (< 10s)")
    assert cases >= 20 and worst < 1e-6
    assert secs < 10


# -- 2 ---------------------------------------------------------------------------------

def _brute_force_knn(nodes, k):
    n = len(nodes)
    rows = []
    for i in range(n):
        scored = []
        for j in range(n):
            if j != i:
                scored.append((sum((float(a) - float(b)) ** 2 for a, b in zip(nodes[i], nodes[j])), j))
        scored.sort()
        rows.append([j for _, j in scored[:k]])
    return np.array(rows)


def _windows(count):
    """Random windows; every third has coarse integer features, every fifth duplicated nodes."""
    rng = np.random.default_rng(2024)
    for w in range(count):
        n = 64 if w % 4 == 0 else 16
        nodes = rng.normal(size=(n, 8))
        if w % 3 == 0:
            nodes = rng.integers(-1, 2, size=(n, 8)).astype(float)
        if w % 5 == 0:
            nodes[rng.integers(0, n, n // 2)] = nodes[0]
        yield nodes, int(rng.integers(1, n))


def test_2_knn_matches_brute_force(report):
    start = time.perf_counter()
    mismatches, ties, count = 0, 0, 0
    for nodes, k in _windows(200):
        count += 1
        d = A.pairwise_sq_dist(nodes)
        np.fill_diagonal(d, np.inf)
        ties += int(any(len(set(row)) < len(row) - 1 for row in d))
        if not np.array_equal(A.knn_graph(nodes, k), _brute_force_knn(nodes, k)):
            mismatches += 1
    secs = _elapsed(start)
    ok = mismatches == 0 and count == 200 and ties > 0 and secs < 5
    report(2, "k-NN == brute force", ok,
           f"{count} windows ({ties} with tied distances), {mismatches} mismatches, {secs:.1f}s (< 5s)")
    assert mismatches == 0 and ties > 0
    assert secs < 5


# -- 3 ---------------------------------------------------------------------------------

GRAD_CONFIG = ModelConfig(channels=8, latent_channels=8, hyper_channels=8, num_slices=2, slice_hidden=8)


def _rd_gradient_error(seed):
    with T.precision(64):
        model = GabicModel(GRAD_CONFIG, seed=seed)
        rng = np.random.default_rng(seed)
        img = rng.uniform(0, 1, (1, 3, 16, 16))
        # the transforms need multiples of 64; reflect-pad the 16 x 16 input
        x = T.Tensor(np.pad(img, ((0, 0), (0, 0), (24, 24), (24, 24)), mode="reflect"))

        def loss(_):
            out = model.forward(x, "noise", T.Rng(seed))
            return rd_loss(x, out["x_hat"], out["rate_y"], out["rate_z"], 0.025)[0]

        worst = 0.0
        with A.frozen_graphs():
            for p in model.params.values():
                coords = rng.choice(p.size, min(3, p.size), replace=False)
                # small step so the probe stays on one side of leaky-relu kinks
                worst = max(worst, T.finite_diff_check(loss, p, 1e-7, coords))
        return worst


def test_3_rd_loss_gradient_matches_finite_differences(report):
    start = time.perf_counter()
    errors = [_rd_gradient_error(seed) for seed in range(5)]
    secs = _elapsed(start)
    worst = max(errors)
    ok = worst < 1e-4 and secs < 120
    report(3, "RD-loss gradient vs finite differences", ok,
           f"5 seeds, max rel err {worst:.2e} (< 1e-4), {secs:.1f}s (< 120s)")
    assert worst < 1e-4
    assert secs < 120


# -- 4 ---------------------------------------------------------------------------------

def test_4_range_coder_exact_and_near_ideal(report):
    start = time.perf_counter()
    rng = np.random.default_rng(4)
    total, overhead_ok, exact = 0, True, True
    tables_cache = rc.GaussianTables()
    worst_ratio = 0.0
    for chunk in range(10):
        n = 100_000
        sigmas = np.exp(rng.uniform(np.log(0.04), np.log(64.0), n))
        symbols = np.rint(rng.normal(0, sigmas * rng.uniform(0.5, 2.0, n))).astype(np.int64)
        symbols[rng.integers(0, n, 50)] = rng.integers(-(2 ** 31), 2 ** 31, 50)  # escapes
        tables = tables_cache.for_sigmas(sigmas)
        data = rc.encode(symbols.tolist(), tables)
        exact &= rc.decode(data, tables, n) == symbols.tolist()
        ideal = rc.ideal_bits(symbols.tolist(), tables)
        bits = 8 * len(data)
        overhead_ok &= bits <= ideal * 1.02 + 64
        worst_ratio = max(worst_ratio, bits / ideal)
        total += n
    secs = _elapsed(start)
    ok = exact and overhead_ok and total == 10 ** 6 and secs < 30
    report(4, "range coder round trip and length", ok,
           f"{total} symbols exact={exact}, worst length/ideal {worst_ratio:.5f} (<= 1.02 + 64 bits), "
           f"{secs:.1f}s (< 30s)")
    assert exact and overhead_ok and total == 10 ** 6
    assert secs < 30


# -- 5 ---------------------------------------------------------------------------------

def test_5_codec_decode_matches_encoder(report):
    model = GabicModel(ModelConfig(), seed=5)
    # widen the latents so every slice carries nonzero symbols
    model.params["ga.3.w"].data *= 20
    rng = np.random.default_rng(5)
    start = time.perf_counter()
    exact, failures_detected, trials = 0, 0, 0
    for i in range(20):
        h, w = (int(v) for v in rng.integers(16, 130, 2))
        img = rng.integers(0, 256, (h, w, 3), dtype=np.uint8)
        state = analyse_image(img, model, i % 4)
        exact += np.array_equal(decode_image(state.data, model), state.reconstruction)
        data = state.data
        flipped = bytearray(data)
        flipped[int(rng.integers(0, len(data)))] ^= 0x41
        for broken in (data[: int(rng.integers(0, len(data)))], bytes(flipped)):
            trials += 1
            try:
                decode_image(broken, model)
            except (BitstreamError, rc.DecodeError):
                failures_detected += 1
    secs = _elapsed(start)
    ok = exact == 20 and failures_detected == trials and secs < 60
    report(5, "decode(encode(x)) == encoder reconstruction", ok,
           f"{exact}/20 bit-exact, {failures_detected}/{trials} damaged streams rejected, {secs:.1f}s (< 60s)")
    assert exact == 20 and failures_detected == trials
    assert secs < 60


# -- 6 ---------------------------------------------------------------------------------

def _sweep(attention):
    """Base model at the highest lambda, then one fine-tune per lambda from that base."""
    base = train(TrainConfig(lam=BASE_LAMBDA, lr0=BASE_LR, max_steps=BASE_STEPS, attention=attention))
    models = []
    for lam in PAPER_LAMBDAS:
        model = GabicModel(base.model.config)
        model.load_state_dict(base.model.state_dict())
        tuned = train(TrainConfig(lam=lam, lr0=TUNE_LR, max_steps=TUNE_STEPS, seed=1, attention=attention),
                      model=model)
        models.append((lam, tuned.model))
    return models


@pytest.fixture(scope="module")
def descent_run():
    start = time.perf_counter()
    result = train(TrainConfig(lam=0.025, lr0=DESCENT_LR, max_steps=DESCENT_STEPS))
    return result, _elapsed(start)


@pytest.fixture(scope="module")
def knn_sweep():
    start = time.perf_counter()
    models = _sweep("knn")
    return models, _elapsed(start)


def test_6_training_descent_and_lambda_sweep(report, descent_run, knn_sweep):
    result, descent_secs = descent_run
    losses = np.array([r["loss"] for r in result.log])
    ratio = float(losses[-50:].mean() / losses[:50].mean())
    models, sweep_secs = knn_sweep
    val = validation_set()
    bpp, quality = [], []
    for lam, model in models:
        e = evaluate_loss(model, val, lam)
        bpp.append(e["bpp"])
        quality.append(10 * math.log10(1.0 / e["mse"]))
    bpp_up = all(b > a for a, b in zip(bpp, bpp[1:]))
    psnr_up = all(b > a for a, b in zip(quality, quality[1:]))
    secs = descent_secs + sweep_secs
    ok = ratio < 0.8 and bpp_up and psnr_up and secs < 900
    report(6, "toy training descent and lambda sweep", ok,
           f"loss ratio {ratio:.3f} (< 0.8); val bpp {', '.join(f'{b:.4f}' for b in bpp)} increasing={bpp_up}; "
           f"val PSNR {', '.join(f'{q:.3f}' for q in quality)} increasing={psnr_up}; {secs:.0f}s (< 900s)")
    assert ratio < 0.8, f"loss ratio {ratio}"
    assert bpp_up, f"validation bpp not increasing with lambda: {bpp}"
    assert psnr_up, f"validation PSNR not increasing with lambda: {quality}"
    assert secs < 900


# -- 7 ---------------------------------------------------------------------------------

def _quadrature_bd_rate(anchor, test):
    mpmath.mp.dps = 30

    def fit(curve):
        a = mpmath.matrix([[mpmath.mpf(float(q)) ** j for j in range(4)] for q in curve.psnr])
        b = mpmath.matrix([mpmath.log10(mpmath.mpf(float(r))) for r in curve.bpp])
        coef = mpmath.lu_solve(a.T * a, a.T * b)
        return lambda x: sum(coef[j] * x ** j for j in range(4))

    fa, ft = fit(anchor), fit(test)
    lo = max(anchor.psnr.min(), test.psnr.min())
    hi = min(anchor.psnr.max(), test.psnr.max())
    avg = mpmath.quad(lambda x: ft(x) - fa(x), [lo, hi]) / (hi - lo)
    return float(100 * (mpmath.power(10, avg) - 1))


def test_7_bd_rate_fixtures(report):
    start = time.perf_counter()
    anchor = RDCurve.from_arrays("anchor", [0.12, 0.25, 0.48, 0.9], [29.1, 31.4, 33.6, 36.0])
    halved = RDCurve.from_arrays("halved", anchor.bpp / 2, anchor.psnr)
    half = bd_rate(anchor, halved)
    rng = np.random.default_rng(7)
    a = RDCurve.from_arrays("a", np.sort(rng.uniform(0.1, 1.2, 5)), np.sort(rng.uniform(27, 37, 5)))
    b = RDCurve.from_arrays("b", np.sort(rng.uniform(0.1, 1.2, 5)), np.sort(rng.uniform(27, 37, 5)))
    ours = bd_rate(a, b)
    secs_ours = _elapsed(start)
    oracle = _quadrature_bd_rate(a, b)
    rel = abs(ours - oracle) / abs(oracle)
    ok = abs(half + 50.0) <= 1e-6 and rel <= 1e-4 and secs_ours < 1
    report(7, "BD-rate fixtures", ok,
           f"halved bpp {half:.9f}% (-50 +/- 1e-6); random fixture {ours:.6f}% vs quadrature {oracle:.6f}% "
           f"(rel diff {rel:.1e} <= 1e-4), {secs_ours * 1e3:.1f}ms (< 1s)")
    assert abs(half + 50.0) <= 1e-6
    assert rel <= 1e-4
    assert secs_ours < 1


# -- 8 ---------------------------------------------------------------------------------

def test_8_allocation_maps_conserve_bits(report, knn_sweep):
    models, _ = knn_sweep
    rng = np.random.default_rng(8)
    images = validation_set()[:6] + [rng.integers(0, 256, (50, 90, 3), dtype=np.uint8)]
    start = time.perf_counter()
    worst, nonzero_self = 0.0, 0
    for _, model in models:
        for img in images:
            state = analyse_image(img, model)
            amap = allocation_from_bits(state.bits_y, state.bits_z, *img.shape[:2])
            worst = max(worst, abs(amap.total - state.estimated_bits) / state.estimated_bits)
            diff, rgb = allocation_diff(amap, amap)
            nonzero_self += int(np.count_nonzero(diff)) + int(np.count_nonzero(rgb != 255))
    secs = _elapsed(start)
    ok = worst < 1e-3 and nonzero_self == 0 and secs < 30
    report(8, "allocation maps conserve bits", ok,
           f"{len(models) * len(images)} maps, max rel err {worst:.1e} (< 1e-3), "
           f"self-diff nonzero pixels {nonzero_self}, {secs:.1f}s (< 30s)")
    assert worst < 1e-3 and nonzero_self == 0
    assert secs < 30


# -- 9 ---------------------------------------------------------------------------------

def test_9_knn_vs_dense_smoke(report, knn_sweep):
    knn_models, _ = knn_sweep
    dense_models = _sweep("dense")
    images = validation_set()
    comparison = compare_modes(knn_models, dense_models, images)
    value = comparison.bd_rate
    finite = math.isfinite(value)
    any_nonzero = any(np.any(d) for d, _ in comparison.diffs.values())
    sign = "knn saves bits" if value < 0 else "knn spends more bits"
    report(9, "knn vs dense BD-rate (sign not gated)", finite,
           f"BD-rate {value:+.2f}% ({sign}); knn PSNR {comparison.knn.curve.psnr.round(3).tolist()}, "
           f"dense PSNR {comparison.dense.curve.psnr.round(3).tolist()}; nonzero diff maps={any_nonzero}")
    assert finite
