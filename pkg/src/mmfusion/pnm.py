"""Binary PGM (P5) and PPM (P6) reading and writing, 8-bit only."""

import re

import numpy as np

_HEADER = re.compile(rb"^(P[56])\s+(\d+)\s+(\d+)\s+(\d+)\s")


def write_pgm(path, img):
    """``img`` is a 2-D uint8 array, or floats in [0, 1] (rounded and clipped)."""
    data = to_uint8(img)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(data.tobytes())


def write_ppm(path, rgb):
    data = to_uint8(rgb)
    h, w, ch = data.shape
    if ch != 3:
        raise ValueError("PPM needs an [h, w, 3] array")
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(data.tobytes())


def to_uint8(img):
    a = np.asarray(img)
    if a.dtype == np.uint8:
        return np.ascontiguousarray(a)
    return np.ascontiguousarray(np.clip(np.rint(a * 255.0), 0, 255).astype(np.uint8))


def read_pnm(path):
    """Return the uint8 array ([h, w] for P5, [h, w, 3] for P6)."""
    with open(path, "rb") as fh:
        buf = fh.read()
    m = _HEADER.match(buf)
    if m is None:
        raise ValueError(f"{path}: not a binary PGM/PPM file")
    kind, w, h, maxval = m.group(1), int(m.group(2)), int(m.group(3)), int(m.group(4))
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported")
    ch = 1 if kind == b"P5" else 3
    body = buf[m.end():]
    if len(body) != w * h * ch:
        raise ValueError(f"{path}: expected {w * h * ch} pixel bytes, found {len(body)}")
    a = np.frombuffer(body, dtype=np.uint8)
    return a.reshape(h, w) if ch == 1 else a.reshape(h, w, 3)


def read_pgm(path):
    """Grayscale image as float64 in [0, 1]."""
    a = read_pnm(path)
    if a.ndim != 2:
        raise ValueError(f"{path}: expected a P5 grayscale image")
    return a.astype(np.float64) / 255.0
