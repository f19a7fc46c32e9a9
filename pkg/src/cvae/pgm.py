"""Netpbm greyscale images: read P2/P5, write P5 (maxval 255)."""

import numpy as np


class PgmError(ValueError):
    pass


def _tokens(data, count, pos):
    out = []
    n = len(data)
    while len(out) < count:
        while pos < n and data[pos : pos + 1].isspace():
            pos += 1
        if pos < n and data[pos : pos + 1] == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise PgmError("truncated PGM header")
        out.append(data[start:pos])
    return out, pos


def parse_pgm(data):
    """Decode PGM bytes to ``(pixels, maxval)`` with ``pixels`` an int array of shape (h, w)."""
    (magic,), pos = _tokens(data, 1, 0)
    if magic not in (b"P2", b"P5"):
        raise PgmError(f"not a greyscale PGM (magic {magic!r})")
    try:
        (w, h, maxval), pos = _tokens(data, 3, pos)
        width, height, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise PgmError(f"bad PGM header: {exc}") from None
    if width <= 0 or height <= 0 or not 0 < maxval < 65536:
        raise PgmError(f"bad PGM header values {width}x{height} maxval {maxval}")
    count = width * height
    if magic == b"P5":
        raster = data[pos + 1 :]
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        need = count * dtype.itemsize
        if len(raster) < need:
            raise PgmError(f"truncated PGM raster: need {need} bytes, have {len(raster)}")
        pixels = np.frombuffer(raster[:need], dtype=dtype).astype(np.int64)
    else:
        values, _ = _tokens(data, count, pos)
        pixels = np.array([int(v) for v in values], dtype=np.int64)
    if pixels.max(initial=0) > maxval:
        raise PgmError("PGM pixel exceeds maxval")
    return pixels.reshape(height, width), maxval


def read_pgm(path):
    """Pixels of a P2/P5 file scaled to [0, 1] as float64."""
    with open(path, "rb") as fh:
        data = fh.read()
    try:
        pixels, maxval = parse_pgm(data)
    except PgmError as exc:
        raise PgmError(f"{path}: {exc}") from None
    return pixels / float(maxval)


def encode_pgm(pixels):
    pixels = np.asarray(pixels)
    if pixels.ndim != 2:
        raise PgmError(f"PGM needs a 2-D array, got shape {pixels.shape}")
    if pixels.dtype != np.uint8:
        raise PgmError("encode_pgm expects uint8 pixels")
    h, w = pixels.shape
    return b"P5\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(pixels).tobytes()


def quantize(values):
    """[0, 1] floats to bytes by ``round(255 * v)`` (halves away from zero)."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.floor(255.0 * v + 0.5).astype(np.uint8)


def write_pgm(path, image):
    """Write a [0, 1] float image (or uint8 array) as binary P5."""
    image = np.asarray(image)
    pixels = image if image.dtype == np.uint8 else quantize(image)
    with open(path, "wb") as fh:
        fh.write(encode_pgm(pixels))
