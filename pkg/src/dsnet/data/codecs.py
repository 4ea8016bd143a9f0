"""Binary PPM (P6) and PGM (P5) codecs, maxval 255 only."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np


class CodecError(ValueError):
    pass


def _read_header(buf: bytes, magic: bytes) -> tuple[int, int, int, int]:
    """Parse ``magic W H maxval`` with '#' comments; return (w, h, maxval, payload offset)."""
    if buf[:2] != magic:
        found = buf[:2].decode("latin-1", "replace")
        raise CodecError(f"unsupported format {found!r}, expected {magic.decode()}")
    fields: list[int] = []
    pos = 2
    n = len(buf)
    while len(fields) < 3:
        while pos < n and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos : pos + 1] == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and buf[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise CodecError("malformed header")
        fields.append(int(buf[start:pos]))
    if pos >= n or not buf[pos : pos + 1].isspace():
        raise CodecError("malformed header")
    w, h, maxval = fields
    if w < 1 or h < 1:
        raise CodecError(f"malformed header: size {w}x{h}")
    if maxval != 255:
        raise CodecError(f"unsupported maxval {maxval}")
    return w, h, maxval, pos + 1


def decode_ppm(buf: bytes) -> np.ndarray:
    """Return uint8 array (3, H, W), channels R, G, B."""
    w, h, _, off = _read_header(buf, b"P6")
    need = 3 * w * h
    if len(buf) - off < need:
        raise CodecError(f"truncated payload: {len(buf) - off} of {need} bytes")
    pix = np.frombuffer(buf, dtype=np.uint8, count=need, offset=off).reshape(h, w, 3)
    return np.ascontiguousarray(pix.transpose(2, 0, 1))


def decode_pgm(buf: bytes) -> np.ndarray:
    """Return uint8 array (H, W)."""
    w, h, _, off = _read_header(buf, b"P5")
    need = w * h
    if len(buf) - off < need:
        raise CodecError(f"truncated payload: {len(buf) - off} of {need} bytes")
    return np.frombuffer(buf, dtype=np.uint8, count=need, offset=off).reshape(h, w).copy()


def encode_ppm(rgb: np.ndarray) -> bytes:
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise CodecError(f"PPM data must be (3, H, W), got {rgb.shape}")
    _, h, w = rgb.shape
    return f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(rgb.transpose(1, 2, 0), dtype=np.uint8).tobytes()


def encode_pgm(gray: np.ndarray) -> bytes:
    gray = np.asarray(gray)
    if gray.ndim != 2:
        raise CodecError(f"PGM data must be (H, W), got {gray.shape}")
    if gray.min(initial=0) < 0 or gray.max(initial=0) > 255:
        raise CodecError("PGM values must lie in [0, 255]")
    h, w = gray.shape
    return f"P5\n{w} {h}\n255\n".encode() + np.ascontiguousarray(gray, dtype=np.uint8).tobytes()


def _write_atomic(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def read_image(path: str | os.PathLike) -> np.ndarray:
    """Read a P6 file into float32 (1, 3, H, W) scaled to [0, 1]."""
    try:
        rgb = decode_ppm(Path(path).read_bytes())
    except CodecError as exc:
        raise CodecError(f"{path}: {exc}") from None
    return (rgb.astype(np.float32) / 255.0)[None]


def write_image(path: str | os.PathLike, image: np.ndarray) -> None:
    """Write (1, 3, H, W) or (3, H, W) values in [0, 1] as P6."""
    image = np.asarray(image)
    if image.ndim == 4:
        image = image[0]
    rgb = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    _write_atomic(path, encode_ppm(rgb))


def read_label(path: str | os.PathLike, num_classes: int, ignore_index: int = 255) -> np.ndarray:
    """Read a P5 label map as int64 (H, W); values must be class ids or ignore_index."""
    try:
        lab = decode_pgm(Path(path).read_bytes()).astype(np.int64)
    except CodecError as exc:
        raise CodecError(f"{path}: {exc}") from None
    bad = (lab >= num_classes) & (lab != ignore_index)
    if bad.any():
        raise CodecError(f"{path}: label value {int(lab[bad][0])} outside [0, {num_classes}) and not ignore {ignore_index}")
    return lab


def write_label(path: str | os.PathLike, label: np.ndarray) -> None:
    _write_atomic(path, encode_pgm(np.asarray(label)))
