import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gabic.evaluator import (BD_METHOD, RDCurve, RDPoint, bd_log_rate_difference, bd_rate, gnuplot_script, psnr,
                             rd_sweep, summary_table, write_csv, write_curve_csv)
from gabic.network import GabicModel, ModelConfig

ANCHOR = RDCurve.from_arrays("anchor", [0.1, 0.2, 0.4, 0.8], [28.0, 30.0, 32.5, 35.0])


def quadrature_bd_rate(anchor_bpp, anchor_psnr, test_bpp, test_psnr):
    """Least-squares cubic via mpmath linear algebra, integrated by adaptive quadrature."""
    mpmath.mp.dps = 30

    def fit(bpp, q):
        a = mpmath.matrix([[mpmath.mpf(p) ** j for j in range(4)] for p in q])
        b = mpmath.matrix([mpmath.log10(mpmath.mpf(r)) for r in bpp])
        coef = mpmath.lu_solve(a.T * a, a.T * b)
        return lambda x: sum(coef[j] * x ** j for j in range(4))

    fa, ft = fit(anchor_bpp, anchor_psnr), fit(test_bpp, test_psnr)
    lo = max(min(anchor_psnr), min(test_psnr))
    hi = min(max(anchor_psnr), max(test_psnr))
    avg = mpmath.quad(lambda x: ft(x) - fa(x), [lo, hi]) / (hi - lo)
    return float(100 * (mpmath.power(10, avg) - 1))


def test_halved_rate_is_minus_fifty_percent():
    test = RDCurve.from_arrays("half", ANCHOR.bpp / 2, ANCHOR.psnr)
    assert bd_rate(ANCHOR, test) == pytest.approx(-50.0, abs=1e-6)


def test_identical_curves_give_zero():
    assert bd_rate(ANCHOR, ANCHOR) == 0.0


@settings(deadline=None, max_examples=30)
@given(seed=st.integers(0, 2 ** 31))
def test_matches_quadrature_oracle(seed):
    rng = np.random.default_rng(seed)
    pa = np.sort(rng.uniform(26, 40, 4))
    pt = np.sort(rng.uniform(26, 40, 4))
    if min(pa.max(), pt.max()) - max(pa.min(), pt.min()) < 1.0 or np.min(np.diff(pa)) < 0.3 or np.min(np.diff(pt)) < 0.3:
        return
    ba = np.exp(np.log(0.05) + np.cumsum(rng.uniform(0.2, 1.0, 4)))
    bt = np.exp(np.log(0.05) + np.cumsum(rng.uniform(0.2, 1.0, 4)))
    ours = bd_rate(RDCurve.from_arrays("a", ba, pa), RDCurve.from_arrays("t", bt, pt))
    oracle = quadrature_bd_rate(ba, pa, bt, pt)
    assert abs(ours - oracle) <= 1e-4 * max(abs(oracle), 1e-9) + 1e-9


@settings(deadline=None, max_examples=30)
@given(seed=st.integers(0, 2 ** 31), shift=st.floats(-0.5, 0.5))
def test_log_rate_difference_is_antisymmetric(seed, shift):
    rng = np.random.default_rng(seed)
    q = np.array([28.0, 30.5, 33.0, 36.0]) + rng.uniform(-0.5, 0.5, 4)
    a = RDCurve.from_arrays("a", 0.1 * 2.0 ** np.arange(4) * rng.uniform(0.9, 1.1, 4), q)
    b = RDCurve.from_arrays("b", a.bpp * 10 ** shift, q + rng.uniform(-0.2, 0.2, 4))
    assert bd_log_rate_difference(a, b) == pytest.approx(-bd_log_rate_difference(b, a), abs=1e-12)


def test_bd_rate_needs_overlap_and_four_points():
    far = RDCurve.from_arrays("far", ANCHOR.bpp, ANCHOR.psnr + 20)
    with pytest.raises(ValueError, match="overlap"):
        bd_rate(ANCHOR, far)
    short = RDCurve.from_arrays("short", [0.1, 0.2, 0.3], [30.0, 31.0, 32.0])
    with pytest.raises(ValueError, match="at least 4"):
        bd_rate(ANCHOR, short)


def test_curve_validation():
    with pytest.raises(ValueError):
        RDPoint(0.0, 30.0)
    with pytest.raises(ValueError):
        RDPoint(0.1, math.inf)
    with pytest.raises(ValueError, match="distinct"):
        RDCurve.from_arrays("dup", [0.1, 0.1], [30.0, 31.0])
    c = RDCurve.from_arrays("c", [0.4, 0.1], [33.0, 30.0])
    assert c.bpp.tolist() == [0.1, 0.4]


def test_psnr_fixtures():
    a = np.zeros((8, 8, 3), np.uint8)
    assert psnr(a, a) == math.inf
    b = np.full((8, 8, 3), 255, np.uint8)
    assert psnr(a, b) == pytest.approx(0.0)
    c = a.copy()
    c[::2, ::2, 0] = 1  # mse = 1/12
    assert psnr(a, c) == pytest.approx(10 * math.log10(255 ** 2 * 12))
    d = a + np.uint8(1)
    assert psnr(a, d) == pytest.approx(48.1308, abs=1e-4)
    with pytest.raises(ValueError):
        psnr(a, a[:4])


def test_psnr_decreases_with_noise():
    rng = np.random.default_rng(0)
    img = rng.integers(60, 196, (32, 32, 3)).astype(np.float64)
    noise = rng.normal(size=img.shape)
    values = [psnr(img, img + s * noise) for s in (0.5, 1, 2, 4, 8, 16)]
    assert all(a > b for a, b in zip(values, values[1:]))


def test_rd_sweep_rows_and_csv(tmp_path):
    cfg = ModelConfig(channels=8, latent_channels=8, hyper_channels=8, num_slices=2, slice_hidden=8)
    models = []
    for i, lam in enumerate((0.0067, 0.013, 0.025, 0.0483)):
        m = GabicModel(cfg, seed=i)
        m.params["ga.3.w"].data *= 5 * (i + 1)
        models.append((lam, m))
    images = [np.random.default_rng(s).integers(0, 256, (40, 48, 3), dtype=np.uint8) for s in range(2)]
    result = rd_sweep(models, images)
    assert len(result.rows) == 8
    assert result.lambdas == [0.0067, 0.013, 0.025, 0.0483]
    for row in result.rows:
        assert row["enc_ms"] > 0 and row["dec_ms"] > 0
        assert row["bpp"] * 40 * 48 % 8 == pytest.approx(0, abs=1e-6)
    path = tmp_path / "rd.csv"
    write_csv(path, result.rows)
    lines = path.read_text().splitlines()
    assert lines[0] == "image,lambda,bpp,psnr,enc_ms,dec_ms,bpp_est"
    assert len(lines) == 9
    with pytest.raises(ValueError):
        rd_sweep(models[:3], images)


def test_summary_and_plot_text(tmp_path):
    half = RDCurve.from_arrays("half", ANCHOR.bpp / 2, ANCHOR.psnr)
    table = summary_table([ANCHOR, half], anchor=ANCHOR)
    assert "-50.00%" in table and BD_METHOD in table
    write_curve_csv(tmp_path / "c.csv", half)
    assert (tmp_path / "c.csv").read_text().splitlines()[1] == "0.050000,28.000000"
    script = gnuplot_script({"half": str(tmp_path / "c.csv")}, "out.png")
    assert "set output 'out.png'" in script and "title 'half'" in script
