"""Binary PGM (P5) / PPM (P6) reading and writing.

Depth maps are stored as 16-bit big-endian samples in millimetres (0 means
invalid); colour images as 8-bit RGB.
"""
from __future__ import annotations

import numpy as np

MAX_DEPTH_M = 65.535


class NetpbmError(ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (byte {offset})")
        self.offset = offset


def _header(magic, width, height, maxval, comments):
    lines = [magic]
    for c in comments:
        for part in str(c).splitlines():
            lines.append("# " + part)
    lines.append(f"{width} {height}")
    lines.append(str(maxval))
    return ("\n".join(lines) + "\n").encode("ascii")


def depth_to_mm(depth):
    depth = np.asarray(depth, dtype=np.float64)
    if depth.min(initial=0) < 0 or depth.max(initial=0) > MAX_DEPTH_M:
        raise ValueError(f"depth outside [0, {MAX_DEPTH_M}] m")
    return np.rint(depth * 1000.0).astype(np.uint16)


def quantize_depth(depth):
    """Depth as it will read back after a PGM round trip."""
    return depth_to_mm(depth).astype(np.float64) / 1000.0


def encode_pgm16(depth, comments=()):
    mm = depth_to_mm(depth)
    h, w = mm.shape
    return _header("P5", w, h, 65535, comments) + mm.astype(">u2").tobytes()


def encode_ppm8(rgb, comments=()):
    """rgb is (3, H, W) in [0, 1]."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise ValueError(f"expected (3,H,W) rgb, got {rgb.shape}")
    q = np.rint(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)
    _, h, w = q.shape
    return _header("P6", w, h, 255, comments) + q.transpose(1, 2, 0).tobytes()


def _parse(buf):
    """Return (magic, width, height, maxval, data offset, comments)."""
    pos = 0
    n = len(buf)
    comments = []

    def skip_ws():
        nonlocal pos
        while pos < n:
            ch = buf[pos : pos + 1]
            if ch == b"#":
                end = buf.find(b"\n", pos)
                end = n if end < 0 else end
                comments.append(buf[pos + 1 : end].decode("ascii", "replace").strip())
                pos = end
            elif ch.isspace():
                pos += 1
            else:
                break

    def token(what):
        nonlocal pos
        skip_ws()
        start = pos
        while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise NetpbmError(f"missing {what}", start)
        tok = buf[start:pos]
        if not tok.isdigit():
            raise NetpbmError(f"bad {what} {tok!r}", start)
        return int(tok)

    if n < 2:
        raise NetpbmError("file too short for a magic number", 0)
    magic = buf[:2].decode("ascii", "replace")
    if magic not in ("P5", "P6"):
        raise NetpbmError(f"unsupported magic {buf[:2]!r}", 0)
    pos = 2
    width = token("width")
    height = token("height")
    maxval_at = pos
    maxval = token("maxval")
    if width <= 0 or height <= 0:
        raise NetpbmError(f"bad dimensions {width}x{height}", maxval_at)
    if not 0 < maxval < 65536:
        raise NetpbmError(f"maxval {maxval} out of range", maxval_at)
    if pos >= n or not buf[pos : pos + 1].isspace():
        raise NetpbmError("missing whitespace after maxval", pos)
    return magic, width, height, maxval, pos + 1, comments


def _samples(buf, magic, width, height, maxval, offset):
    channels = 3 if magic == "P6" else 1
    dtype = ">u2" if maxval > 255 else "u1"
    count = width * height * channels
    nbytes = count * np.dtype(dtype).itemsize
    if len(buf) - offset < nbytes:
        raise NetpbmError(
            f"truncated raster: need {nbytes} bytes, have {len(buf) - offset}", len(buf)
        )
    data = np.frombuffer(buf, dtype=dtype, count=count, offset=offset)
    if channels == 3:
        return data.reshape(height, width, 3).transpose(2, 0, 1)
    return data.reshape(height, width)


def decode_pgm16(buf):
    """Returns (depth metres float64 (H,W), header comments)."""
    magic, w, h, maxval, off, comments = _parse(buf)
    if magic != "P5":
        raise NetpbmError(f"expected P5 depth map, got {magic}", 0)
    mm = _samples(buf, magic, w, h, maxval, off).astype(np.float64)
    return mm / 1000.0, comments


def decode_ppm8(buf):
    """Returns (rgb float64 (3,H,W) in [0,1], header comments)."""
    magic, w, h, maxval, off, comments = _parse(buf)
    if magic != "P6":
        raise NetpbmError(f"expected P6 colour image, got {magic}", 0)
    return _samples(buf, magic, w, h, maxval, off).astype(np.float64) / maxval, comments


def write_depth(path, depth, comments=()):
    with open(path, "wb") as fh:
        fh.write(encode_pgm16(depth, comments))


def read_depth(path):
    with open(path, "rb") as fh:
        return decode_pgm16(fh.read())[0]


def write_rgb(path, rgb, comments=()):
    with open(path, "wb") as fh:
        fh.write(encode_ppm8(rgb, comments))


def read_rgb(path):
    with open(path, "rb") as fh:
        return decode_ppm8(fh.read())[0]
