"""8-bit binary portable greymaps for images with values in [-1, 1]."""
import os

import numpy as np

from .errors import CorruptFile


def to_uint8(img):
    return np.clip(np.rint((np.asarray(img, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def from_uint8(img):
    return img.astype(np.float64) / 127.5 - 1.0


def write_pgm(path, img):
    img = to_uint8(img)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {img.shape}")
    os.makedirs(os.path.dirname(os.fspath(path)) or ".", exist_ok=True)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(img.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        if pos >= len(data):
            raise CorruptFile(f"{path}: truncated PGM header")
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            nl = data.find(b"\n", pos)
            if nl < 0:
                raise CorruptFile(f"{path}: truncated PGM header")
            pos = nl + 1
            continue
        end = pos
        while end < len(data) and not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != b"P5" or not all(t.isdigit() for t in tokens[1:]) or int(tokens[3]) != 255:
        raise CorruptFile(f"{path}: only 8-bit binary PGM is supported")
    w, h = int(tokens[1]), int(tokens[2])
    if len(data) < pos + 1 + w * h:
        raise CorruptFile(f"{path}: truncated PGM data")
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos + 1)
    return from_uint8(pixels.reshape(h, w))
