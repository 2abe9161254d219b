"""Binary PPM (P6) and PGM (P5) files with maxval 255."""

from __future__ import annotations

import os

import numpy as np

_WHITESPACE = b" \t\n\r\v\f"


class ImageFormatError(ValueError):
    pass


def _tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` header tokens, skipping whitespace and comments; return end offset."""
    tokens, pos, n = [], 0, len(data)
    while len(tokens) < count:
        while pos < n and (data[pos] in _WHITESPACE or data[pos] == ord("#")):
            if data[pos] == ord("#"):
                while pos < n and data[pos] not in b"\r\n":
                    pos += 1
            else:
                pos += 1
        if pos >= n:
            raise ImageFormatError(f"header ends early at byte {pos}")
        start = pos
        while pos < n and data[pos] not in _WHITESPACE and data[pos] != ord("#"):
            pos += 1
        tokens.append(data[start:pos])
    if pos >= n or data[pos] not in _WHITESPACE:
        raise ImageFormatError(f"expected single whitespace after header at byte {pos}")
    return tokens, pos + 1


def parse_image(data: bytes) -> np.ndarray:
    """Decode P6 to (H, W, 3) or P5 to (H, W) uint8."""
    magic = data[:2]
    if magic not in (b"P6", b"P5"):
        raise ImageFormatError(f"unsupported magic {magic!r} at byte 0")
    tokens, offset = _tokens(data, 4)
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise ImageFormatError(f"non-numeric header field: {exc}") from None
    if width < 1 or height < 1:
        raise ImageFormatError(f"invalid dimensions {width}x{height}")
    if maxval != 255:
        raise ImageFormatError(f"maxval {maxval} unsupported (only 255)")
    channels = 3 if magic == b"P6" else 1
    expected = width * height * channels
    payload = data[offset:offset + expected]
    if len(payload) < expected:
        raise ImageFormatError(
            f"payload truncated: expected {expected} bytes from byte {offset}, found {len(payload)}"
        )
    pixels = np.frombuffer(payload, dtype=np.uint8)
    shape = (height, width, 3) if channels == 3 else (height, width)
    return pixels.reshape(shape).copy()


def read_image(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return parse_image(fh.read())


def format_image(image: np.ndarray) -> bytes:
    image = np.asarray(image)
    if image.dtype != np.uint8:
        raise ImageFormatError(f"expected uint8 pixels, got {image.dtype}")
    if image.ndim == 3 and image.shape[2] == 3:
        magic = b"P6"
    elif image.ndim == 2:
        magic = b"P5"
    else:
        raise ImageFormatError(f"cannot write array of shape {image.shape}")
    h, w = image.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode() + np.ascontiguousarray(image).tobytes()


def write_image(path: str | os.PathLike, image: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(format_image(image))
