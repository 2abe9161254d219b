"""PSNR, rate-distortion sweeps over checkpoints, and Bjontegaard BD-rate."""

from __future__ import annotations

import csv
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import checkpoint
from .codec import BitAllocationMap, allocation_diff, allocation_map, analyse_image, decode_image
from .data import load_folder
from .network import GabicModel

BD_METHOD = "cubic polynomial fit of log10(bpp) over PSNR, averaged on the common PSNR interval"
CSV_COLUMNS = ["image", "lambda", "bpp", "psnr", "enc_ms", "dec_ms", "bpp_est"]


def psnr(x: np.ndarray, x_hat: np.ndarray) -> float:
    """10 log10(255^2 / MSE) over every sample; ``math.inf`` for identical inputs."""
    x = np.asarray(x)
    x_hat = np.asarray(x_hat)
    if x.shape != x_hat.shape:
        raise ValueError(f"psnr: shape mismatch {x.shape} vs {x_hat.shape}")
    mse = float(np.mean((x.astype(np.float64) - x_hat.astype(np.float64)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(255.0 ** 2 / mse)


@dataclass(frozen=True)
class RDPoint:
    bpp: float
    psnr: float

    def __post_init__(self):
        if not self.bpp > 0:
            raise ValueError(f"bpp must be positive, got {self.bpp}")
        if not math.isfinite(self.psnr):
            raise ValueError(f"psnr must be finite, got {self.psnr}")


@dataclass
class RDCurve:
    label: str
    points: list[RDPoint] = field(default_factory=list)

    def __post_init__(self):
        self.points = sorted(self.points, key=lambda p: p.bpp)
        for a, b in zip(self.points, self.points[1:]):
            if not b.bpp > a.bpp:
                raise ValueError(f"curve {self.label!r}: bpp values must be distinct, got {a.bpp} twice")

    @classmethod
    def from_arrays(cls, label: str, bpp: Iterable[float], psnr_values: Iterable[float]) -> "RDCurve":
        return cls(label, [RDPoint(float(b), float(p)) for b, p in zip(bpp, psnr_values)])

    @property
    def bpp(self) -> np.ndarray:
        return np.array([p.bpp for p in self.points])

    @property
    def psnr(self) -> np.ndarray:
        return np.array([p.psnr for p in self.points])


def _log_rate_fit(curve: RDCurve) -> np.ndarray:
    if len(curve.points) < 4:
        raise ValueError(f"curve {curve.label!r} has {len(curve.points)} points; BD-rate needs at least 4")
    return np.polyfit(curve.psnr, np.log10(curve.bpp), 3)


def bd_log_rate_difference(anchor: RDCurve, test: RDCurve) -> float:
    """Mean of (fitted log10 bpp of test - of anchor) over the shared PSNR range."""
    pa, pt = _log_rate_fit(anchor), _log_rate_fit(test)
    lo = max(anchor.psnr.min(), test.psnr.min())
    hi = min(anchor.psnr.max(), test.psnr.max())
    if not hi > lo:
        raise ValueError(
            f"no PSNR overlap between {anchor.label!r} [{anchor.psnr.min():.3f}, {anchor.psnr.max():.3f}] "
            f"and {test.label!r} [{test.psnr.min():.3f}, {test.psnr.max():.3f}]"
        )
    ia, it = np.polyint(pa), np.polyint(pt)
    area_a = np.polyval(ia, hi) - np.polyval(ia, lo)
    area_t = np.polyval(it, hi) - np.polyval(it, lo)
    return float((area_t - area_a) / (hi - lo))


def bd_rate(anchor: RDCurve, test: RDCurve) -> float:
    """Bjontegaard delta rate in percent; negative means ``test`` needs fewer bits."""
    return 100.0 * (10.0 ** bd_log_rate_difference(anchor, test) - 1.0)


# -- sweeps --------------------------------------------------------------------------

@dataclass
class SweepResult:
    label: str
    points: list[tuple[float, float]]
    rows: list[dict]
    lambdas: list[float]

    @property
    def curve(self) -> RDCurve:
        """Image-averaged (bpp, psnr) per lambda; raises if two lambdas share a bpp."""
        return RDCurve(self.label, [RDPoint(b, q) for b, q in self.points])


def _load_models(models: Sequence[str | os.PathLike | tuple[float, GabicModel]]) -> list[tuple[float, GabicModel]]:
    loaded = []
    for item in models:
        if isinstance(item, tuple):
            loaded.append((float(item[0]), item[1]))
        else:
            model, meta, _ = checkpoint.load(item)
            loaded.append((float(meta.get("lambda", math.nan)), model))
    return loaded


def _load_images(images) -> list[tuple[str, np.ndarray]]:
    if isinstance(images, (str, os.PathLike)):
        files = sorted(p for p in Path(images).iterdir() if p.suffix.lower() == ".ppm")
        return [(p.name, img) for p, img in zip(files, load_folder(images))]
    out = []
    for i, item in enumerate(images):
        out.append(item if isinstance(item, tuple) else (f"image{i:03d}", item))
    return out


def rd_sweep(models, images, label: str = "model") -> SweepResult:
    """Encode and decode every image with every model, measuring actual stream bytes.

    ``models`` holds checkpoint paths or ``(lambda, model)`` pairs; ``images``
    is a folder of .ppm files or a list of arrays / ``(name, array)`` pairs.
    """
    loaded = _load_models(models)
    named = _load_images(images)
    if not named:
        raise ValueError("rd_sweep needs at least one image")
    if len(loaded) < 4:
        raise ValueError(f"rd_sweep needs at least 4 models, got {len(loaded)}")
    rows = []
    for lam_index, (lam, model) in enumerate(loaded):
        for name, image in named:
            if image.ndim == 2:
                image = np.repeat(image[..., None], 3, axis=2)
            h, w = image.shape[:2]
            t0 = time.perf_counter()
            state = analyse_image(image, model, lam_index)
            data = state.data
            t1 = time.perf_counter()
            decoded = decode_image(data, model)
            t2 = time.perf_counter()
            rows.append({
                "image": name,
                "lambda": lam,
                "bpp": 8.0 * len(data) / (h * w),
                "psnr": psnr(image, decoded),
                "enc_ms": 1e3 * (t1 - t0),
                "dec_ms": 1e3 * (t2 - t1),
                "bpp_est": state.estimated_bits / (h * w),
            })
    rows.sort(key=lambda r: (r["lambda"], r["image"]))
    lambdas = sorted({r["lambda"] for r in rows})
    points = []
    for lam in lambdas:
        sel = [r for r in rows if r["lambda"] == lam]
        points.append((float(np.mean([r["bpp"] for r in sel])),
                       float(np.mean([min(r["psnr"], 99.0) for r in sel]))))
    return SweepResult(label, points, rows, lambdas)


def write_csv(path: str | os.PathLike, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{row[k]:.6f}" if isinstance(row[k], float) else row[k]) for k in CSV_COLUMNS})


@dataclass
class ModeComparison:
    bd_rate: float
    knn: SweepResult
    dense: SweepResult
    diffs: dict[str, tuple[np.ndarray, np.ndarray]]
    maps: dict[str, tuple[BitAllocationMap, BitAllocationMap]]


def compare_modes(knn_models, dense_models, images, map_index: int = -1) -> ModeComparison:
    """BD-rate of the knn models against the dense anchor, plus per-image allocation diffs.

    The diff maps compare the pair at ``map_index`` in the lambda ordering;
    red marks pixels where the knn model spends more bits.
    """
    knn = rd_sweep(knn_models, images, "knn")
    dense = rd_sweep(dense_models, images, "dense")
    value = bd_rate(dense.curve, knn.curve)
    knn_pair = sorted(_load_models(knn_models), key=lambda t: t[0])[map_index][1]
    dense_pair = sorted(_load_models(dense_models), key=lambda t: t[0])[map_index][1]
    diffs, maps = {}, {}
    for name, image in _load_images(images):
        ma, mb = allocation_map(image, knn_pair), allocation_map(image, dense_pair)
        maps[name] = (ma, mb)
        diffs[name] = allocation_diff(ma, mb)
    return ModeComparison(value, knn, dense, diffs, maps)


def summary_table(curves: Sequence[RDCurve], anchor: RDCurve | None = None) -> str:
    lines = [f"{'curve':<12} {'points':>6} {'bpp range':>21} {'psnr range':>17} {'BD-rate':>9}"]
    for c in curves:
        bd = ""
        if anchor is not None and c is not anchor:
            try:
                bd = f"{bd_rate(anchor, c):+.2f}%"
            except ValueError:
                bd = "n/a"
        lines.append(f"{c.label:<12} {len(c.points):>6} {c.bpp.min():>10.4f}-{c.bpp.max():<10.4f}"
                     f" {c.psnr.min():>8.3f}-{c.psnr.max():<8.3f} {bd:>9}")
    lines.append(f"BD method: {BD_METHOD}")
    return "\n".join(lines)


def gnuplot_script(csv_paths: dict[str, str], output: str = "rd.png") -> str:
    """Script text plotting averaged bpp/PSNR columns of the given per-curve CSV files."""
    plots = ", ".join(
        f"'{path}' using 1:2 with linespoints title '{label}'" for label, path in csv_paths.items()
    )
    return "\n".join([
        "set terminal pngcairo size 800,600",
        f"set output '{output}'",
        "set datafile separator ','",
        "set xlabel 'bpp'",
        "set ylabel 'PSNR (dB)'",
        "set key bottom right",
        "set grid",
        f"plot {plots}",
        "",
    ])


def write_curve_csv(path: str | os.PathLike, curve: RDCurve) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("bpp,psnr\n")
        for p in curve.points:
            fh.write(f"{p.bpp:.6f},{p.psnr:.6f}\n")
