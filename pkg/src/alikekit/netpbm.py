"""Binary PGM (P5) and PPM (P6) image files.

8-bit samples only. load_image maps to float arrays in [0, 1] with
grayscale replicated to 3 channels, matching the network's input
contract; write_netpbm quantizes floats back to 8 bits. Parse errors
name the file and the byte offset where parsing stopped.
"""

from __future__ import annotations

import numpy as np


class ImageFormatError(ValueError):
    pass


def _fail(path, offset, msg):
    raise ImageFormatError(f"{path}: byte {offset}: {msg}")


def _read_token(data, pos, path):
    # whitespace-separated header token, '#' comments run to end of line
    n = len(data)
    while pos < n:
        c = data[pos:pos + 1]
        if c == b"#":
            while pos < n and data[pos:pos + 1] != b"\n":
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        _fail(path, start, "unexpected end of header")
    return data[start:pos], pos


def read_netpbm(path):
    """Returns a uint8 array: (H, W) for P5, (H, W, 3) for P6."""
    with open(path, "rb") as f:
        data = f.read()
    magic, pos = _read_token(data, 0, path)
    if magic not in (b"P5", b"P6"):
        _fail(path, 0, f"expected P5 or P6 magic, found {magic!r}")
    fields = []
    for _ in range(3):
        tok, pos = _read_token(data, pos, path)
        if not tok.isdigit():
            _fail(path, pos - len(tok), f"expected integer, found {tok!r}")
        fields.append(int(tok))
    width, height, maxval = fields
    if maxval != 255:
        _fail(path, pos, f"only maxval 255 supported, found {maxval}")
    if width < 1 or height < 1:
        _fail(path, pos, f"bad dimensions {width}x{height}")
    pos += 1  # single whitespace byte after maxval
    channels = 3 if magic == b"P6" else 1
    need = width * height * channels
    if len(data) - pos < need:
        _fail(path, len(data), f"truncated pixel data: need {need} bytes, "
              f"have {len(data) - pos}")
    pix = np.frombuffer(data, dtype=np.uint8, count=need, offset=pos)
    if channels == 1:
        return pix.reshape(height, width).copy()
    return pix.reshape(height, width, 3).copy()


def write_netpbm(path, image):
    """Writes (H, W) as P5 or (H, W, 3) as P6. Floats in [0, 1] are
    quantized with round-half-up to 8 bits; uint8 passes through."""
    a = np.asarray(image)
    if a.dtype != np.uint8:
        a = np.clip(np.floor(a * 255.0 + 0.5), 0, 255).astype(np.uint8)
    if a.ndim == 2:
        magic = b"P5"
    elif a.ndim == 3 and a.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"expected (H, W) or (H, W, 3) image, got {a.shape}")
    h, w = a.shape[:2]
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n255\n" % (w, h))
        f.write(a.tobytes())


def load_image(path):
    """Float64 (H, W, 3) in [0, 1]; grayscale replicated to 3 channels."""
    a = read_netpbm(path)
    if a.ndim == 2:
        a = np.repeat(a[:, :, None], 3, axis=2)
    return a.astype(np.float64) / 255.0
