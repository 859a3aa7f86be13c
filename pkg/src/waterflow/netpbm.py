"""Binary PPM (P6) and PGM (P5) readers/writers, maxval 255.

Color images travel as (3, H, W) float arrays in [0, 1]; gray maps as (H, W).
Masks use the 128 threshold when read back as binary.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import PipelineIOError, ShapeError

MASK_THRESHOLD = 128


def _quantize(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(x, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ShapeError(f"PPM writer expects (3, H, W), got {image.shape}")
    _, h, w = image.shape
    payload = _quantize(image).transpose(1, 2, 0).tobytes()
    _write(path, b"P6\n%d %d\n255\n" % (w, h) + payload)


def write_pgm(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim == 3 and image.shape[0] == 1:
        image = image[0]
    if image.ndim != 2:
        raise ShapeError(f"PGM writer expects (H, W), got {image.shape}")
    h, w = image.shape
    _write(path, b"P5\n%d %d\n255\n" % (w, h) + _quantize(image).tobytes())


def write_pgm_preview(path, image: np.ndarray) -> None:
    """Min-max normalize an arbitrary map (channel-averaged if stacked) to 8 bits.

    A flat map has no range to stretch, so its constant value is shown
    directly (clipped to [0, 1]): an all-ones map previews white, all-zeros
    black.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        image = image.mean(axis=0)
    lo, hi = float(image.min()), float(image.max())
    if hi - lo < 1e-12:
        scaled = np.full_like(image, min(max(lo, 0.0), 1.0))
    else:
        scaled = (image - lo) / (hi - lo)
    write_pgm(path, scaled)


def read_ppm(path) -> np.ndarray:
    magic, w, h, maxval, payload = _read(path)
    if magic != b"P6":
        raise PipelineIOError(f"{path}: expected binary PPM (P6), got {magic.decode(errors='replace')}")
    data = np.frombuffer(payload, dtype=np.uint8, count=h * w * 3).reshape(h, w, 3)
    return data.transpose(2, 0, 1).astype(np.float64) / float(maxval)


def read_pgm(path) -> np.ndarray:
    magic, w, h, maxval, payload = _read(path)
    if magic != b"P5":
        raise PipelineIOError(f"{path}: expected binary PGM (P5), got {magic.decode(errors='replace')}")
    data = np.frombuffer(payload, dtype=np.uint8, count=h * w).reshape(h, w)
    return data.astype(np.float64) / float(maxval)


def read_mask(path) -> np.ndarray:
    """Read a PGM as a binary {0, 1} mask using the 128 cutoff."""
    magic, w, h, maxval, payload = _read(path)
    if magic != b"P5":
        raise PipelineIOError(f"{path}: expected binary PGM (P5) mask")
    data = np.frombuffer(payload, dtype=np.uint8, count=h * w).reshape(h, w)
    return (data >= MASK_THRESHOLD).astype(np.float64)


def _write(path, blob: bytes) -> None:
    try:
        Path(path).write_bytes(blob)
    except OSError as exc:
        raise PipelineIOError(f"cannot write image to {path}: {exc}") from exc


def _read(path):
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise PipelineIOError(f"cannot read image from {path}: {exc}") from exc
    pos = 0
    tokens: list[bytes] = []
    try:
        while len(tokens) < 4:
            while blob[pos : pos + 1].isspace():
                pos += 1
            if blob[pos : pos + 1] == b"#":  # comment line
                pos = blob.index(b"\n", pos) + 1
                continue
            start = pos
            while pos < len(blob) and not blob[pos : pos + 1].isspace():
                pos += 1
            if start == pos:
                raise ValueError("truncated header")
            tokens.append(blob[start:pos])
        pos += 1  # single whitespace byte before the payload
        magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    except (ValueError, IndexError) as exc:
        raise PipelineIOError(f"{path}: malformed netpbm header") from exc
    if maxval != 255:
        raise PipelineIOError(f"{path}: only maxval 255 is supported, got {maxval}")
    return magic, w, h, maxval, blob[pos:]
