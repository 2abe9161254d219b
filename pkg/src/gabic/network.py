"""The compression model: transforms, hyperprior, channel-slice entropy model and RD loss.

Layout (encoder; the decoder mirrors it with transposed convolutions)::

    x -> conv s2 -> res -> conv s2 -> res -> GWAM(8) -> conv s2 -> res -> conv s2 -> GWAM(4) -> y

The hyperprior pair maps ``y`` to ``z`` (two more stride-2 stages) and back to
per-channel mean/scale features ``(d_mu, d_sigma)``.  ``y`` is split into
slices coded in order; each slice's mean and scale are predicted from the
hyperprior features and the already reconstructed slices, so the decoder can
rebuild them before the slice arrives.  A residual head then corrects the
quantized slice.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import ndtr

from . import attention as A
from . import tensor as T
from .tensor import Tensor

SIGMA_MIN = 0.04
LIKELIHOOD_BOUND = 1e-9
# Pixels are centred before analysis and the offset restored after synthesis.
PIXEL_OFFSET = 0.5
# Weight variance numerator (fan-in scaled); smaller than He's 2 so the deep
# conv stack leaves the predict-the-mean plateau quickly.
INIT_VARIANCE = 0.5
PAPER_LAMBDAS = (0.0067, 0.0130, 0.025, 0.0483)
_LN2 = np.log(2.0)


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 24
    latent_channels: int = 32
    hyper_channels: int = 16
    num_slices: int = 4
    slice_hidden: int = 32
    window_sizes: tuple[int, int] = (8, 4)
    k: tuple[int, int] | None = None
    heads: int = 1
    attention: str = "knn"

    def __post_init__(self):
        if self.attention not in ("knn", "dense"):
            raise ValueError(f"attention must be 'knn' or 'dense', got {self.attention!r}")
        if not 1 <= self.num_slices <= self.latent_channels:
            raise ValueError("num_slices must be in [1, latent_channels]")
        object.__setattr__(self, "window_sizes", tuple(self.window_sizes))
        if self.k is not None:
            object.__setattr__(self, "k", tuple(self.k))
            for k, m in zip(self.k, self.window_sizes):
                if not 1 <= k < m * m:
                    raise ValueError(f"k={k} must be in [1, {m * m - 1}] for window size {m}")

    @property
    def block_k(self) -> tuple[int, int]:
        if self.k is not None:
            return self.k
        return tuple(m * m // 2 for m in self.window_sizes)

    @property
    def slice_sizes(self) -> list[int]:
        base = self.latent_channels // self.num_slices
        sizes = [base] * self.num_slices
        sizes[-1] += self.latent_channels - base * self.num_slices
        return sizes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["window_sizes"] = list(self.window_sizes)
        d["k"] = None if self.k is None else list(self.k)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def hash(self) -> bytes:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).digest()[:8]


TOY_CONFIG = ModelConfig()
# Channel counts used at full scale (latent 320, hyper-latent 192); documentation only.
PAPER_CONFIG = ModelConfig(channels=192, latent_channels=320, hyper_channels=192, num_slices=10,
                           slice_hidden=224, window_sizes=(8, 4))


# -- likelihoods ---------------------------------------------------------------

def _normal_pdf(t):
    return np.exp(-0.5 * t * t) / np.sqrt(2.0 * np.pi)


def gaussian_bits(y_hat: Tensor, mu: Tensor, sigma: Tensor, stats: dict | None = None) -> Tensor:
    """Bits of each quantized value under N(mu, sigma^2) integrated over its unit bin."""
    dtype = y_hat.data.dtype
    delta = y_hat.data.astype(np.float64) - mu.data
    s = sigma.data.astype(np.float64)
    low = s < SIGMA_MIN
    if stats is not None:
        stats["sigma_clamped"] = stats.get("sigma_clamped", 0) + int(low.sum())
    s = np.where(low, SIGMA_MIN, s)
    a = np.abs(delta)
    upper = (0.5 - a) / s
    lower = (-0.5 - a) / s
    tail = ndtr(-upper) + ndtr(lower)
    with np.errstate(divide="ignore"):
        p = np.where(tail < 0.5, 1.0 - tail, ndtr(upper) - ndtr(lower))
        log_p = np.where(tail < 0.5, np.log1p(-np.minimum(tail, 0.5)), np.log(np.maximum(p, 1e-300)))
    bounded = p < LIKELIHOOD_BOUND
    log_p = np.where(bounded, np.log(LIKELIHOOD_BOUND), log_p)
    bits = (-log_p / _LN2).astype(dtype)

    def backward(g):
        scale = np.where(bounded, 0.0, -g / (np.maximum(p, LIKELIHOOD_BOUND) * _LN2))
        pu, pl = _normal_pdf(upper), _normal_pdf(lower)
        dp_ddelta = -np.sign(delta) * (pu - pl) / s
        dp_ds = (-upper * pu + lower * pl) / s
        gd = (scale * dp_ddelta).astype(dtype)
        gs = np.where(low, 0.0, scale * dp_ds).astype(dtype)
        return (T._unbroadcast(gd, y_hat.shape), T._unbroadcast(-gd, mu.shape), T._unbroadcast(gs, sigma.shape))

    return T.make(bits, (y_hat, mu, sigma), backward)


def _sigmoid(t):
    return 0.5 * (1.0 + np.tanh(0.5 * t))


def logistic_bin_probability(v, loc, scale):
    """P(bin [v-0.5, v+0.5]) under a logistic(loc, scale); float64 numpy."""
    a = np.abs(np.asarray(v, np.float64) - loc)
    return _sigmoid((0.5 - a) / scale) - _sigmoid((-0.5 - a) / scale)


def factorized_bits(z_hat: Tensor, loc: Tensor, log_scale: Tensor) -> Tensor:
    """Bits of ``z_hat`` under a per-channel logistic prior; loc/log_scale are (C,)."""
    dtype = z_hat.data.dtype
    shape = (1, -1) + (1,) * (z_hat.ndim - 2)
    m = loc.data.astype(np.float64).reshape(shape)
    s = np.exp(log_scale.data.astype(np.float64)).reshape(shape)
    delta = z_hat.data.astype(np.float64) - m
    a = np.abs(delta)
    upper = (0.5 - a) / s
    lower = (-0.5 - a) / s
    tail = _sigmoid(-upper) + _sigmoid(lower)
    p = np.where(tail < 0.5, 1.0 - tail, _sigmoid(upper) - _sigmoid(lower))
    with np.errstate(divide="ignore"):
        log_p = np.where(tail < 0.5, np.log1p(-np.minimum(tail, 0.5)), np.log(np.maximum(p, 1e-300)))
    bounded = p < LIKELIHOOD_BOUND
    log_p = np.where(bounded, np.log(LIKELIHOOD_BOUND), log_p)
    bits = (-log_p / _LN2).astype(dtype)
    reduce_axes = (0,) + tuple(range(2, z_hat.ndim))

    def backward(g):
        scale = np.where(bounded, 0.0, -g / (np.maximum(p, LIKELIHOOD_BOUND) * _LN2))
        su, sl = _sigmoid(upper), _sigmoid(lower)
        du, dl = su * (1.0 - su), sl * (1.0 - sl)
        dp_ddelta = -np.sign(delta) * (du - dl) / s
        dp_dlogs = -(upper * du - lower * dl)
        gd = scale * dp_ddelta
        return (
            gd.astype(dtype),
            (-gd).sum(axis=reduce_axes).astype(dtype),
            (scale * dp_dlogs).sum(axis=reduce_axes).astype(dtype),
        )

    return T.make(bits, (z_hat, loc, log_scale), backward)


def lower_bound(x: Tensor, bound: float) -> Tensor:
    """max(x, bound) letting gradients through when they would raise x."""
    keep = x.data >= bound
    out = np.where(keep, x.data, np.asarray(bound, x.data.dtype))
    return T.make(out, (x,), lambda g: (np.where(keep | (g < 0), g, 0.0).astype(g.dtype),))


# -- quantization ----------------------------------------------------------------

QUANT_MODES = ("noise", "ste_round", "round")


def quantize(v: Tensor, mu: Tensor | float, mode: str, rng: T.Rng | None = None) -> Tensor:
    """Q(v - mu) + mu.

    ``noise`` adds U(-0.5, 0.5); ``ste_round`` rounds with an identity gradient;
    ``round`` rounds half away from zero.
    """
    mu = T.as_tensor(mu)
    if mode == "noise":
        if rng is None:
            raise ValueError("noise quantization needs an Rng")
        u = rng.uniform(-0.5, 0.5, v.shape).astype(v.data.dtype)
        return v + Tensor(u)
    if mode == "ste_round":
        return T.ste_round(v - mu) + mu
    if mode == "round":
        with T.no_grad():
            return Tensor(T.round_half_away(v.data - mu.data) + mu.data, dtype=v.data.dtype)
    raise ValueError(f"unknown quantization mode {mode!r}")


# -- model -------------------------------------------------------------------------

@dataclass
class PipelineOutput:
    y_bar: Tensor
    y_hat: Tensor
    mu: Tensor
    sigma: Tensor
    z_hat: Tensor
    rate_y: Tensor
    rate_z: Tensor
    slices: list[dict] = field(default_factory=list)


class GabicModel:
    """Parameters plus the forward functions of every sub-network."""

    def __init__(self, config: ModelConfig = TOY_CONFIG, seed: int = 0):
        self.config = config
        self.params: dict[str, Tensor] = {}
        rng = T.Rng(seed)
        c, cy, cz = config.channels, config.latent_channels, config.hyper_channels

        self._conv("ga.0", 3, c, 5, rng)
        self._res("ga.r0", c, rng)
        self._conv("ga.1", c, c, 5, rng)
        self._res("ga.r1", c, rng)
        self._conv("ga.2", c, c, 5, rng)
        self._res("ga.r2", c, rng)
        self._conv("ga.3", c, cy, 5, rng)

        self._convt("gs.0", cy, c, 5, rng)
        self._res("gs.r0", c, rng)
        self._convt("gs.1", c, c, 5, rng)
        self._res("gs.r1", c, rng)
        self._convt("gs.2", c, c, 5, rng)
        self._res("gs.r2", c, rng)
        self._convt("gs.3", c, 3, 5, rng)

        self._conv("ha.0", cy, c, 3, rng)
        self._conv("ha.1", c, c, 5, rng)
        self._conv("ha.2", c, cz, 5, rng)
        self._convt("hs.0", cz, c, 5, rng)
        self._convt("hs.1", c, c, 5, rng)
        self._conv("hs.2", c, 2 * cy, 3, rng)

        self.add_param("prior.loc", np.zeros(cz))
        self.add_param("prior.log_scale", np.zeros(cz))

        hidden = config.slice_hidden
        done = 0
        for i, size in enumerate(config.slice_sizes):
            support = 2 * cy + done
            for head, extra in (("mu", 0), ("sigma", 0), ("res", size)):
                self._conv(f"slice{i}.{head}.0", support + extra, hidden, 1, rng)
                self._conv(f"slice{i}.{head}.1", hidden, hidden, 1, rng)
                self._conv(f"slice{i}.{head}.2", hidden, size, 1, rng, gain=0.1)
            done += size

        m1, m2 = config.window_sizes
        k1, k2 = config.block_k
        self.gwam = {
            "ga.att0": A.GwamParams.init(c, m1, rng, k1, config.heads),
            "ga.att1": A.GwamParams.init(cy, m2, rng, k2, config.heads),
            "gs.att0": A.GwamParams.init(cy, m2, rng, k2, config.heads),
            "gs.att1": A.GwamParams.init(c, m1, rng, k1, config.heads),
        }
        for name, block in self.gwam.items():
            for key, tensor in block.tensors().items():
                tensor.data *= 0.5 if key in ("w_g", "w_z") else 1.0
                self.params[f"{name}.{key}"] = tensor
        self.cast(T.get_dtype())

    # -- parameter helpers ----------------------------------------------------
    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        t = T.parameter(value, name=name)
        self.params[name] = t
        return t

    def _conv(self, name, cin, cout, k, rng, gain=1.0):
        std = gain * np.sqrt(INIT_VARIANCE / (cin * k * k))
        self.add_param(name + ".w", rng.normal((cout, cin, k, k), std))
        self.add_param(name + ".b", np.zeros(cout))

    def _convt(self, name, cin, cout, k, rng):
        std = np.sqrt(INIT_VARIANCE / (cin * k * k / 4))
        self.add_param(name + ".w", rng.normal((cin, cout, k, k), std))
        self.add_param(name + ".b", np.zeros(cout))

    def _res(self, name, c, rng):
        self._conv(name + ".a", c, c, 3, rng)
        self._conv(name + ".b", c, c, 3, rng, gain=0.1)

    def cast(self, dtype) -> "GabicModel":
        for t in self.params.values():
            t.data = t.data.astype(dtype)
        return self

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def num_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        for name, t in self.params.items():
            value = np.asarray(state[name])
            if value.shape != t.shape:
                raise ValueError(f"parameter {name}: shape {value.shape} != expected {t.shape}")
            t.data = value.astype(t.data.dtype).copy()

    def fingerprint(self) -> bytes:
        h = hashlib.sha256(self.config.hash())
        for name, t in self.params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        return h.digest()[:8]

    # -- layers ---------------------------------------------------------------
    def conv(self, name, x, stride=1):
        w = self.params[name + ".w"]
        return T.conv2d(x, w, self.params[name + ".b"], stride, w.shape[-1] // 2)

    def convt(self, name, x):
        w = self.params[name + ".w"]
        k = w.shape[-1]
        return T.conv_transpose2d(x, w, self.params[name + ".b"], 2, k // 2, 1)

    def res(self, name, x):
        h = T.leaky_relu(self.conv(name + ".a", x))
        return x + self.conv(name + ".b", h)

    def attend(self, name, x):
        return A.gwam_forward(x, self.gwam[name], self.config.attention)

    # -- transforms -----------------------------------------------------------
    def analysis(self, x: Tensor) -> Tensor:
        x = T.as_tensor(x)
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"analysis expects N x 3 x H x W input, got {x.shape}")
        if x.shape[2] % 64 or x.shape[3] % 64:
            raise ValueError(f"spatial extents {x.shape[2:]} must be multiples of 64 (pad first)")
        h = T.leaky_relu(self.conv("ga.0", x - PIXEL_OFFSET, 2))
        h = self.res("ga.r0", h)
        h = T.leaky_relu(self.conv("ga.1", h, 2))
        h = self.res("ga.r1", h)
        h = self.attend("ga.att0", h)
        h = T.leaky_relu(self.conv("ga.2", h, 2))
        h = self.res("ga.r2", h)
        h = self.conv("ga.3", h, 2)
        return self.attend("ga.att1", h)

    def synthesis(self, y_bar: Tensor) -> Tensor:
        if y_bar.ndim != 4 or y_bar.shape[1] != self.config.latent_channels:
            raise ValueError(f"synthesis expects N x {self.config.latent_channels} x h x w, got {y_bar.shape}")
        h = self.attend("gs.att0", y_bar)
        h = T.leaky_relu(self.convt("gs.0", h))
        h = self.res("gs.r0", h)
        h = T.leaky_relu(self.convt("gs.1", h))
        h = self.res("gs.r1", h)
        h = self.attend("gs.att1", h)
        h = T.leaky_relu(self.convt("gs.2", h))
        h = self.res("gs.r2", h)
        return self.convt("gs.3", h) + PIXEL_OFFSET

    def hyper_analysis(self, y: Tensor) -> Tensor:
        h = T.leaky_relu(self.conv("ha.0", y))
        h = T.leaky_relu(self.conv("ha.1", h, 2))
        return self.conv("ha.2", h, 2)

    def hyper_synthesis(self, z_hat: Tensor) -> tuple[Tensor, Tensor]:
        h = T.leaky_relu(self.convt("hs.0", z_hat))
        h = T.leaky_relu(self.convt("hs.1", h))
        d = self.conv("hs.2", h)
        cy = self.config.latent_channels
        d_mu, d_sigma = T.split(d, [cy, cy], axis=1)
        return d_mu, d_sigma

    def _stack(self, prefix, x):
        h = T.leaky_relu(self.conv(prefix + ".0", x))
        h = T.leaky_relu(self.conv(prefix + ".1", h))
        return self.conv(prefix + ".2", h)

    def slice_params(self, i: int, d_mu: Tensor, d_sigma: Tensor, previous: list[Tensor]) -> tuple[Tensor, Tensor]:
        """(mu_i, sigma_i) from hyperprior features and already decoded slices."""
        support = T.concat([d_mu, d_sigma] + list(previous), axis=1)
        mu = self._stack(f"slice{i}.mu", support)
        sigma = lower_bound(T.softplus(self._stack(f"slice{i}.sigma", support)), SIGMA_MIN)
        return mu, sigma

    def slice_residual(self, i: int, d_mu: Tensor, d_sigma: Tensor, previous: list[Tensor], y_hat_i: Tensor) -> Tensor:
        support = T.concat([d_mu, d_sigma] + list(previous) + [y_hat_i], axis=1)
        return 0.5 * T.tanh(self._stack(f"slice{i}.res", support))

    def prior(self) -> tuple[Tensor, Tensor]:
        return self.params["prior.loc"], self.params["prior.log_scale"]

    # -- entropy model --------------------------------------------------------
    def entropy_pipeline(self, y: Tensor, mode: str = "round", rng: T.Rng | None = None) -> PipelineOutput:
        """Hyperprior plus sequential slice coding.

        ``mode`` is a quantization mode, or ``"ste"`` for training: rates are
        measured on noisy values while the reconstruction path uses
        straight-through rounding.
        """
        rate_mode, value_mode = ("noise", "ste_round") if mode == "ste" else (mode, mode)
        if rate_mode not in QUANT_MODES:
            raise ValueError(f"unknown pipeline mode {mode!r}")
        z = self.hyper_analysis(y)
        z_value = quantize(z, 0.0, value_mode, rng)
        z_rated = z_value if rate_mode == value_mode else quantize(z, 0.0, rate_mode, rng)
        loc, log_scale = self.prior()
        rate_z = factorized_bits(z_rated, loc, log_scale)
        d_mu, d_sigma = self.hyper_synthesis(z_value)

        y_slices = T.split(y, self.config.slice_sizes, axis=1)
        previous: list[Tensor] = []
        hats, mus, sigmas, rates, slices = [], [], [], [], []
        for i, y_i in enumerate(y_slices):
            mu_i, sigma_i = self.slice_params(i, d_mu, d_sigma, previous)
            y_hat_i = quantize(y_i, mu_i, value_mode, rng)
            y_rated = y_hat_i if rate_mode == value_mode else quantize(y_i, mu_i, rate_mode, rng)
            rates.append(gaussian_bits(y_rated, mu_i, sigma_i))
            r_i = self.slice_residual(i, d_mu, d_sigma, previous, y_hat_i)
            y_bar_i = y_hat_i + r_i
            previous.append(y_bar_i)
            hats.append(y_hat_i)
            mus.append(mu_i)
            sigmas.append(sigma_i)
            slices.append({"mu": mu_i, "sigma": sigma_i, "r": r_i, "y_hat": y_hat_i, "y_bar": y_bar_i})
        return PipelineOutput(
            y_bar=T.concat(previous, axis=1),
            y_hat=T.concat(hats, axis=1),
            mu=T.concat(mus, axis=1),
            sigma=T.concat(sigmas, axis=1),
            z_hat=z_value,
            rate_y=T.concat(rates, axis=1),
            rate_z=rate_z,
            slices=slices,
        )

    def forward(self, x: Tensor, mode: str = "round", rng: T.Rng | None = None) -> dict:
        y = self.analysis(x)
        out = self.entropy_pipeline(y, mode, rng)
        x_hat = self.synthesis(out.y_bar)
        return {"y": y, "x_hat": x_hat, "pipeline": out, "rate_y": out.rate_y, "rate_z": out.rate_z}


def rd_loss(x: Tensor, x_hat: Tensor, rate_y: Tensor, rate_z: Tensor, lam: float,
            distortion_scale: float = 255.0 ** 2) -> tuple[Tensor, Tensor, Tensor]:
    """(loss, bpp, mse) with loss = bpp + lam * distortion_scale * mse.

    ``mse`` is measured on the [0, 1] pixel scale.  The default scale of 255^2
    puts the four standard operating points (0.0067 ... 0.0483) in a useful range.
    """
    if lam <= 0:
        raise ValueError("lambda must be positive")
    x = T.as_tensor(x)
    n, _, h, w = x.shape
    bpp = (rate_y.sum() + rate_z.sum()) * (1.0 / (n * h * w))
    mse = T.mean(T.square(x_hat - x))
    loss = bpp + mse * (lam * distortion_scale)
    return loss, bpp, mse
