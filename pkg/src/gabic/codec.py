"""Image encode/decode, the bitstream container and bit-allocation maps.

Bitstream layout (integers little-endian)::

    offset  size  field
    0       4     magic b"GABC"
    4       1     u8 version (1)
    5       8     model config hash
    13      16    u32 width, height, padded width, padded height
    29      1     u8 lambda index
    30      1     u8 slice count S
    31      4     u32 CRC-32 of the decoded integer symbols (int32 LE, z then slices)
    35      4+n   u32 z payload length, z payload
    ...     S x   (u32 length, payload) per latent slice
    end     4     u32 CRC-32 of every preceding byte

Payloads are raw range-coder streams (see ``range_coder``).  The symbol CRC
catches decoding with the wrong weights, which the container CRC cannot.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import range_coder as rc
from . import tensor as T
from .network import GabicModel, factorized_bits, gaussian_bits
from .tensor import Tensor

MAGIC = b"GABC"
VERSION = 1
PAD_MULTIPLE = 64
LATENT_STRIDE = 16
HYPER_STRIDE = 64
_HEADER = struct.Struct("<4sB8s4IBBI")


class BitstreamError(ValueError):
    """Malformed, truncated or corrupted container."""


class ConfigMismatchError(BitstreamError):
    """Stream was produced by a model with a different configuration."""


@dataclass
class Bitstream:
    config_hash: bytes
    width: int
    height: int
    padded_width: int
    padded_height: int
    lambda_index: int
    z_payload: bytes
    y_payloads: list[bytes]
    symbol_crc: int = 0

    def to_bytes(self) -> bytes:
        out = bytearray(_HEADER.pack(
            MAGIC, VERSION, self.config_hash, self.width, self.height, self.padded_width,
            self.padded_height, self.lambda_index, len(self.y_payloads), self.symbol_crc,
        ))
        for payload in [self.z_payload, *self.y_payloads]:
            out += struct.pack("<I", len(payload)) + payload
        out += struct.pack("<I", zlib.crc32(bytes(out)))
        return bytes(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Bitstream":
        if len(data) < _HEADER.size + 8:
            raise BitstreamError(f"stream too short ({len(data)} bytes)")
        (crc,) = struct.unpack_from("<I", data, len(data) - 4)
        if zlib.crc32(data[:-4]) != crc:
            raise BitstreamError("container checksum mismatch")
        magic, version, chash, w, h, pw, ph, lam, slices, sym_crc = _HEADER.unpack_from(data, 0)
        if magic != MAGIC:
            raise BitstreamError(f"bad magic {magic!r}")
        if version != VERSION:
            raise BitstreamError(f"unsupported version {version}")
        pos, payloads = _HEADER.size, []
        for _ in range(slices + 1):
            if pos + 4 > len(data) - 4:
                raise BitstreamError(f"missing payload length at byte {pos}")
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            if pos + n > len(data) - 4:
                raise BitstreamError(f"payload of {n} bytes at byte {pos} overruns the stream")
            payloads.append(bytes(data[pos:pos + n]))
            pos += n
        if pos != len(data) - 4:
            raise BitstreamError(f"{len(data) - 4 - pos} unexpected bytes before checksum")
        return cls(chash, w, h, pw, ph, lam, payloads[0], payloads[1:], sym_crc)

    def __len__(self) -> int:
        return len(self.to_bytes())


# -- helpers ---------------------------------------------------------------------------

def padded_extent(n: int, multiple: int = PAD_MULTIPLE) -> int:
    return max(multiple, -(-n // multiple) * multiple)


def image_to_tensor(image: np.ndarray) -> tuple[np.ndarray, int, int]:
    """uint8 (H, W, 3) -> reflect-padded float (1, 3, Hp, Wp) in [0, 1]."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.size == 0:
        raise ValueError(f"expected a nonempty H x W x 3 image, got {image.shape}")
    h, w = image.shape[:2]
    ph, pw = padded_extent(h), padded_extent(w)
    x = np.pad(image.astype(np.float64) / 255.0, ((0, ph - h), (0, pw - w), (0, 0)), mode="reflect")
    return x.transpose(2, 0, 1)[None].astype(T.get_dtype()), h, w


def tensor_to_image(x: np.ndarray, h: int, w: int) -> np.ndarray:
    img = np.clip(x[0, :, :h, :w].transpose(1, 2, 0), 0.0, 1.0)
    return np.rint(img * 255.0).astype(np.uint8)


def _symbol_crc(chunks: list[np.ndarray]) -> int:
    crc = 0
    for chunk in chunks:
        crc = zlib.crc32(np.ascontiguousarray(chunk, dtype="<i4").tobytes(), crc)
    return crc


def prior_tables(model: GabicModel) -> list[rc.CdfTable]:
    """One logistic table per hyper-latent channel."""
    loc, log_scale = model.prior()
    locs = loc.data.astype(np.float64)
    scales = np.exp(log_scale.data.astype(np.float64))
    return [rc.build_logistic_cdf(float(m), float(s)) for m, s in zip(locs, scales)]


_GAUSSIAN_TABLES = rc.GaussianTables()


def _z_tables(model: GabicModel, shape: tuple[int, ...]) -> list[rc.CdfTable]:
    per_channel = prior_tables(model)
    spatial = int(np.prod(shape[2:]))
    return [per_channel[c] for _ in range(shape[0]) for c in range(shape[1]) for _ in range(spatial)]


# -- encoder --------------------------------------------------------------------------

@dataclass
class CodingState:
    """Everything the encoder computes for one image."""

    bitstream: Bitstream
    reconstruction: np.ndarray
    x_hat: np.ndarray
    bits_y: np.ndarray
    bits_z: np.ndarray
    symbols: list[np.ndarray] = field(default_factory=list)

    @property
    def estimated_bits(self) -> float:
        return float(self.bits_y.sum() + self.bits_z.sum())

    @property
    def data(self) -> bytes:
        return self.bitstream.to_bytes()


def analyse_image(image: np.ndarray, model: GabicModel, lambda_index: int = 0) -> CodingState:
    """Run the encoder: transforms, rounded entropy pipeline, range coding."""
    x, h, w = image_to_tensor(image)
    with T.no_grad():
        y = model.analysis(Tensor(x))
        z = model.hyper_analysis(y)
        z_hat = Tensor(T.round_half_away(z.data), dtype=z.data.dtype)
        loc, log_scale = model.prior()
        bits_z = factorized_bits(z_hat, loc, log_scale).data
        z_symbols = z_hat.data.astype(np.int64)
        z_payload = rc.encode(z_symbols.reshape(-1).tolist(), _z_tables(model, z_hat.shape))

        d_mu, d_sigma = model.hyper_synthesis(z_hat)
        previous: list[Tensor] = []
        payloads, symbols, bits_y = [], [z_symbols], []
        for i, y_i in enumerate(T.split(y, model.config.slice_sizes, axis=1)):
            mu, sigma = model.slice_params(i, d_mu, d_sigma, previous)
            q = T.round_half_away(y_i.data - mu.data)
            y_hat = Tensor(q + mu.data, dtype=y_i.data.dtype)
            bits_y.append(gaussian_bits(y_hat, mu, sigma).data)
            q_int = q.astype(np.int64)
            tables = _GAUSSIAN_TABLES.for_sigmas(sigma.data)
            payloads.append(rc.encode(q_int.reshape(-1).tolist(), tables))
            symbols.append(q_int)
            r = model.slice_residual(i, d_mu, d_sigma, previous, y_hat)
            previous.append(y_hat + r)
        x_hat = model.synthesis(T.concat(previous, axis=1)).data

    bs = Bitstream(
        config_hash=model.config.hash(), width=w, height=h,
        padded_width=x.shape[3], padded_height=x.shape[2], lambda_index=lambda_index,
        z_payload=z_payload, y_payloads=payloads, symbol_crc=_symbol_crc(symbols),
    )
    return CodingState(bs, tensor_to_image(x_hat, h, w), x_hat, np.concatenate(bits_y, axis=1), bits_z, symbols)


def encode_image(image: np.ndarray, model: GabicModel, lambda_index: int = 0) -> Bitstream:
    return analyse_image(image, model, lambda_index).bitstream


# -- decoder ---------------------------------------------------------------------------

def decode_image(bs: Bitstream | bytes, model: GabicModel) -> np.ndarray:
    """Rebuild the image from the stream and the model alone."""
    if isinstance(bs, (bytes, bytearray)):
        bs = Bitstream.from_bytes(bytes(bs))
    cfg = model.config
    if bs.config_hash != cfg.hash():
        raise ConfigMismatchError("bitstream was produced with a different model configuration")
    if len(bs.y_payloads) != cfg.num_slices:
        raise BitstreamError(f"stream has {len(bs.y_payloads)} slices, model expects {cfg.num_slices}")
    if bs.padded_height % PAD_MULTIPLE or bs.padded_width % PAD_MULTIPLE:
        raise BitstreamError("padded extents are not multiples of 64")
    hz, wz = bs.padded_height // HYPER_STRIDE, bs.padded_width // HYPER_STRIDE
    hy, wy = bs.padded_height // LATENT_STRIDE, bs.padded_width // LATENT_STRIDE
    dtype = T.get_dtype()

    with T.no_grad():
        z_shape = (1, cfg.hyper_channels, hz, wz)
        tables = _z_tables(model, z_shape)
        z_symbols = np.array(rc.decode(bs.z_payload, tables, len(tables)), dtype=np.int64).reshape(z_shape)
        z_hat = Tensor(z_symbols.astype(dtype))
        d_mu, d_sigma = model.hyper_synthesis(z_hat)
        previous: list[Tensor] = []
        symbols = [z_symbols]
        for i, size in enumerate(cfg.slice_sizes):
            mu, sigma = model.slice_params(i, d_mu, d_sigma, previous)
            tables = _GAUSSIAN_TABLES.for_sigmas(sigma.data)
            q = np.array(rc.decode(bs.y_payloads[i], tables, len(tables)), dtype=np.int64)
            q = q.reshape(1, size, hy, wy)
            symbols.append(q)
            y_hat = Tensor(q.astype(dtype) + mu.data, dtype=dtype)
            r = model.slice_residual(i, d_mu, d_sigma, previous, y_hat)
            previous.append(y_hat + r)
        if _symbol_crc(symbols) != bs.symbol_crc:
            raise rc.DecodeError("decoded symbols fail the checksum (wrong model or corrupt payload)")
        x_hat = model.synthesis(T.concat(previous, axis=1)).data
    return tensor_to_image(x_hat, bs.height, bs.width)


# -- bit allocation -----------------------------------------------------------------

@dataclass
class BitAllocationMap:
    """Estimated bits per pixel over the padded grid; ``height``/``width`` give the original extent."""

    bits: np.ndarray
    height: int
    width: int

    @property
    def total(self) -> float:
        return float(self.bits.sum())

    def cropped(self) -> np.ndarray:
        return self.bits[: self.height, : self.width]


def allocation_from_bits(bits_y: np.ndarray, bits_z: np.ndarray, height: int, width: int) -> BitAllocationMap:
    per_latent = bits_y[0].astype(np.float64).sum(axis=0)
    per_hyper = bits_z[0].astype(np.float64).sum(axis=0)
    grid = np.kron(per_latent, np.ones((LATENT_STRIDE, LATENT_STRIDE))) / LATENT_STRIDE ** 2
    grid += np.kron(per_hyper, np.ones((HYPER_STRIDE, HYPER_STRIDE))) / HYPER_STRIDE ** 2
    return BitAllocationMap(grid, height, width)


def allocation_map(image: np.ndarray, model: GabicModel) -> BitAllocationMap:
    state = analyse_image(image, model)
    return allocation_from_bits(state.bits_y, state.bits_z, image.shape[0], image.shape[1])


def allocation_diff(map_a: BitAllocationMap | np.ndarray, map_b: BitAllocationMap | np.ndarray,
                    percentile: float = 99.0) -> tuple[np.ndarray, np.ndarray]:
    """Signed a - b and an RGB render: red where a spends more, blue where less, white at zero."""
    a = map_a.cropped() if isinstance(map_a, BitAllocationMap) else np.asarray(map_a, np.float64)
    b = map_b.cropped() if isinstance(map_b, BitAllocationMap) else np.asarray(map_b, np.float64)
    if a.shape != b.shape:
        raise ValueError(f"allocation maps differ in shape: {a.shape} vs {b.shape}")
    diff = a - b
    return diff, render_diff(diff, percentile)


def render_diff(diff: np.ndarray, percentile: float = 99.0) -> np.ndarray:
    scale = float(np.percentile(np.abs(diff), percentile)) if diff.size else 0.0
    if scale <= 0.0:
        scale = float(np.abs(diff).max()) if diff.size else 0.0
    t = np.zeros_like(diff) if scale <= 0.0 else np.clip(np.abs(diff) / scale, 0.0, 1.0)
    fade = np.rint(255.0 * (1.0 - t)).astype(np.uint8)
    full = np.full(diff.shape, 255, dtype=np.uint8)
    red = np.where(diff < 0, fade, full)
    blue = np.where(diff > 0, fade, full)
    return np.stack([red, fade, blue], axis=-1)


def render_map(bits: np.ndarray) -> np.ndarray:
    """Greyscale render of a single allocation map (white = most bits)."""
    top = float(bits.max()) if bits.size else 0.0
    if top <= 0:
        return np.zeros(bits.shape, dtype=np.uint8)
    return np.rint(255.0 * np.clip(bits / top, 0.0, 1.0)).astype(np.uint8)
