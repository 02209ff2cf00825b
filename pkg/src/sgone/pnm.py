"""Minimal PPM/PGM codec (P2, P3, P5, P6)."""

from __future__ import annotations

import os

import numpy as np


class MalformedImage(ValueError):
    pass


_MAGIC = {b"P2": (1, False), b"P3": (3, False), b"P5": (1, True), b"P6": (3, True)}


def _header(buf: bytes, path) -> tuple[bytes, int, int, int, int]:
    """Parse magic, width, height, maxval.  Returns them plus the payload offset."""
    pos, tokens = 0, []
    n = len(buf)
    while len(tokens) < 4:
        while pos < n and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        if pos >= n:
            raise MalformedImage(f"{path}: truncated header at byte {pos}")
        start = pos
        while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        tokens.append((buf[start:pos], start))
    magic, off = tokens[0]
    if magic not in _MAGIC:
        raise MalformedImage(f"{path}: bad magic {magic!r} at byte {off}")
    vals = []
    for tok, off in tokens[1:]:
        if not tok.isdigit() or int(tok) <= 0:
            raise MalformedImage(f"{path}: bad header field {tok!r} at byte {off}")
        vals.append(int(tok))
    w, h, maxval = vals
    if maxval > 65535:
        raise MalformedImage(f"{path}: maxval {maxval} out of range at byte {tokens[3][1]}")
    if pos >= n or not buf[pos:pos + 1].isspace():
        raise MalformedImage(f"{path}: missing whitespace after header at byte {pos}")
    return magic, w, h, maxval, pos + 1


def read_pnm(path) -> tuple[np.ndarray, int]:
    """Decode a PNM file to an integer array (H x W or H x W x 3) and its maxval."""
    with open(path, "rb") as fh:
        buf = fh.read()
    magic, w, h, maxval, off = _header(buf, path)
    channels, binary = _MAGIC[magic]
    count = w * h * channels
    if binary:
        dt = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        need = count * dt.itemsize
        if len(buf) - off < need:
            raise MalformedImage(
                f"{path}: truncated payload at byte {len(buf)}, expected {off + need} bytes")
        arr = np.frombuffer(buf, dtype=dt, count=count, offset=off).astype(np.int64)
    else:
        # P2/P3 payload may carry comments too
        body = b"\n".join(line.split(b"#", 1)[0] for line in buf[off:].splitlines())
        parts = body.split()
        if len(parts) < count:
            raise MalformedImage(
                f"{path}: truncated payload at byte {len(buf)}, got {len(parts)} of {count} samples")
        try:
            arr = np.array([int(p) for p in parts[:count]], dtype=np.int64)
        except ValueError as exc:
            raise MalformedImage(f"{path}: non-integer sample after byte {off}") from exc
    if arr.size and (arr.min() < 0 or arr.max() > maxval):
        raise MalformedImage(f"{path}: sample exceeds maxval {maxval} after byte {off}")
    shape = (h, w, 3) if channels == 3 else (h, w)
    return arr.reshape(shape), maxval


def write_pnm(path, arr: np.ndarray, binary: bool = True, maxval: int = 255) -> None:
    a = np.asarray(arr)
    if a.ndim == 3 and a.shape[2] == 3:
        magic = b"P6" if binary else b"P3"
    elif a.ndim == 2:
        magic = b"P5" if binary else b"P2"
    else:
        raise ValueError(f"write_pnm: expected H x W or H x W x 3, got {a.shape}")
    if a.min(initial=0) < 0 or a.max(initial=0) > maxval:
        raise ValueError(f"write_pnm: samples outside [0, {maxval}]")
    h, w = a.shape[:2]
    head = b"%s\n%d %d\n%d\n" % (magic, w, h, maxval)
    if binary:
        dt = ">u2" if maxval > 255 else "u1"
        payload = np.ascontiguousarray(a, dtype=dt).tobytes()
    else:
        rows = a.reshape(h, -1)
        payload = b"".join(b" ".join(b"%d" % v for v in row) + b"\n" for row in rows)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(head + payload)


def to_uint8(img: np.ndarray) -> np.ndarray:
    """3 x H x W floats in [0, 1] -> H x W x 3 bytes."""
    return np.clip(np.floor(np.asarray(img) * 255.0 + 0.5), 0, 255).astype(np.uint8).transpose(1, 2, 0)


def load_image(path) -> np.ndarray:
    """PPM -> float64 array 3 x H x W in [0, 1]."""
    arr, maxval = read_pnm(path)
    if arr.ndim != 3:
        raise MalformedImage(f"{path}: expected a colour (P3/P6) image")
    return (arr.astype(np.float64) / maxval).transpose(2, 0, 1).copy()


def load_mask(path) -> np.ndarray:
    """PGM -> uint8 H x W in {0, 1}; samples above 127 (on a 0-255 scale) are foreground."""
    arr, maxval = read_pnm(path)
    if arr.ndim != 2:
        raise MalformedImage(f"{path}: expected a greyscale (P2/P5) mask")
    if maxval != 255:
        arr = arr * 255 // maxval
    return (arr > 127).astype(np.uint8)


def save_image(path, img: np.ndarray, binary: bool = True) -> None:
    write_pnm(path, to_uint8(img), binary=binary)


def save_mask(path, mask: np.ndarray, binary: bool = True) -> None:
    write_pnm(path, (np.asarray(mask) > 0).astype(np.uint8) * 255, binary=binary)


def pad_to_multiple(arr: np.ndarray, multiple: int = 8) -> np.ndarray:
    """Reflect-pad the trailing two axes up to the next multiple."""
    h, w = arr.shape[-2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    if not ph and not pw:
        return arr
    pad = [(0, 0)] * (arr.ndim - 2) + [(0, ph), (0, pw)]
    mode = "reflect" if min(h, w) > 1 else "edge"
    return np.pad(arr, pad, mode=mode)
