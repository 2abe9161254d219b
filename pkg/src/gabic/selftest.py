"""Fast invariant checks over every module, runnable from the command line."""

from __future__ import annotations

import math
import time
from typing import Callable

import numpy as np

from . import attention as A
from . import checkpoint
from . import range_coder as rc
from . import tensor as T
from .codec import allocation_diff, allocation_from_bits, analyse_image, decode_image
from .evaluator import RDCurve, bd_rate, psnr
from .network import GabicModel, ModelConfig


def _conv_paths_agree() -> str:
    rng = T.Rng(1)
    x = T.Tensor(rng.normal((2, 3, 9, 9)))
    w = T.Tensor(rng.normal((4, 3, 3, 3)))
    a = T.conv2d(x, w, stride=2, pad=1).data
    b = T.conv2d(x, w, stride=2, pad=1, method="direct").data
    err = float(np.abs(a - b).max())
    assert err < 1e-4, f"im2col and direct differ by {err}"
    return f"max diff {err:.1e}"


def _gradients() -> str:
    with T.precision(64):
        rng = T.Rng(2)
        x = T.parameter(rng.normal((1, 2, 6, 6)))
        w = T.Tensor(rng.normal((3, 2, 3, 3)))
        err = T.finite_diff_check(lambda t: T.tsum(T.tanh(T.conv2d(t, w, stride=2, pad=1))), x, 1e-6)
    assert err < 1e-6, f"finite-difference error {err}"
    return f"max rel err {err:.1e}"


def _knn_brute_force() -> str:
    rng = T.Rng(3)
    for _ in range(20):
        nodes = rng.normal((16, 4))
        edges = A.knn_graph(nodes[None], 5)[0]
        d = ((nodes[:, None] - nodes[None]) ** 2).sum(-1)
        np.fill_diagonal(d, np.inf)
        expected = np.argsort(d, axis=1, kind="stable")[:, :5]
        assert np.array_equal(edges, expected), "k-NN edges differ from brute force"
    return "20 windows"


def _full_graph_is_dense() -> str:
    with T.precision(64):
        params = A.GwamParams.init(8, 4, T.Rng(4), k=16, include_self=True)
        fm = T.Tensor(T.Rng(5).normal((1, 8, 8, 8)))
        a = A.gwam_forward(fm, params, "knn").data
        b = A.gwam_forward(fm, params, "dense").data
    err = float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-12))
    assert err < 1e-6, f"knn with full neighbourhood differs from dense by {err}"
    return f"rel err {err:.1e}"


def _range_coder() -> str:
    rng = np.random.default_rng(6)
    sigmas = rng.uniform(0.05, 20.0, 2000)
    symbols = np.rint(rng.normal(0, sigmas)).astype(int)
    symbols[::97] = 10_000
    tables = rc.GaussianTables().for_sigmas(sigmas)
    data = rc.encode(symbols.tolist(), tables)
    assert rc.decode(data, tables, len(tables)) == symbols.tolist(), "range coder round trip failed"
    ideal = rc.ideal_bits(symbols.tolist(), tables)
    return f"{8 * len(data)} bits vs ideal {ideal:.0f}"


def _codec_and_maps() -> str:
    model = GabicModel(ModelConfig(channels=8, latent_channels=8, hyper_channels=8, num_slices=2, slice_hidden=8))
    image = (np.random.default_rng(7).uniform(0, 255, (40, 50, 3))).astype(np.uint8)
    state = analyse_image(image, model)
    decoded = decode_image(state.data, model)
    assert np.array_equal(decoded, state.reconstruction), "decoder disagrees with encoder reconstruction"
    amap = allocation_from_bits(state.bits_y, state.bits_z, 40, 50)
    rel = abs(amap.total - state.estimated_bits) / state.estimated_bits
    assert rel < 1e-6, f"allocation map loses {rel:.2e} of the bits"
    diff, _ = allocation_diff(amap, amap)
    assert not diff.any(), "self-diff is not zero"
    blob = checkpoint.serialize(model.config, model.state_dict())
    _, tensors, _ = checkpoint.deserialize(blob)
    assert all(np.array_equal(tensors[k], v) for k, v in model.state_dict().items()), "checkpoint round trip"
    return f"{len(state.data)} bytes"


def _metrics() -> str:
    a = np.full((4, 4, 3), 100, np.uint8)
    b = a.copy()
    b[::2] += 1
    b[1::2] -= 1
    value = psnr(a, b)
    assert abs(value - 10 * math.log10(255 ** 2)) < 1e-9, f"psnr {value}"
    assert psnr(a, a) == math.inf
    anchor = RDCurve.from_arrays("a", [0.1, 0.2, 0.4, 0.8], [28.0, 30.0, 32.5, 35.0])
    test = RDCurve.from_arrays("b", anchor.bpp / 2, anchor.psnr)
    bd = bd_rate(anchor, test)
    assert abs(bd + 50.0) < 1e-6, f"bd-rate {bd}"
    return f"psnr {value:.2f} dB, bd {bd:.6f}%"


CHECKS: dict[str, Callable[[], str]] = {
    "conv2d im2col == direct": _conv_paths_agree,
    "autodiff vs finite differences": _gradients,
    "k-NN vs brute force": _knn_brute_force,
    "full k-NN graph == dense attention": _full_graph_is_dense,
    "range coder round trip": _range_coder,
    "codec, maps and checkpoint": _codec_and_maps,
    "psnr and BD-rate identities": _metrics,
}


def run(log: Callable[[str], None] = print) -> bool:
    ok = True
    for name, check in CHECKS.items():
        start = time.perf_counter()
        try:
            detail = check()
            status = "PASS"
        except AssertionError as exc:
            detail, status, ok = str(exc), "FAIL", False
        log(f"{status}  {name:<36} {detail}  ({time.perf_counter() - start:.2f}s)")
    return ok
