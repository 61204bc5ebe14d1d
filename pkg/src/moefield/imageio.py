"""Binary PPM (P6) and optional PNG image output."""
from __future__ import annotations

import numpy as np


def to_uint8(image) -> np.ndarray:
    """round(255 * clamp(v, 0, 1)); grayscale (H, W) inputs are replicated to RGB."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) or (H, W) image, got {img.shape}")
    return np.round(255.0 * np.clip(img, 0.0, 1.0)).astype(np.uint8)


def ppm_bytes(image) -> bytes:
    px = to_uint8(image)
    h, w, _ = px.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + px.tobytes()


def write_ppm(path: str, image) -> None:
    with open(path, "wb") as f:
        f.write(ppm_bytes(image))


def _tokens(data: bytes, count: int, pos: int) -> tuple[list[bytes], int]:
    out = []
    while len(out) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        out.append(data[start:pos])
    return out, pos + 1


def parse_ppm(data: bytes) -> np.ndarray:
    (magic, w, h, maxval), pos = _tokens(data, 4, 0)
    if magic != b"P6":
        raise ValueError("only binary P6 PPM is supported")
    if int(maxval) != 255:
        raise ValueError("only 8-bit PPM is supported")
    w, h = int(w), int(h)
    px = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos)
    return px.reshape(h, w, 3).copy()


def read_ppm(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        return parse_ppm(f.read())


def write_png(path: str, image) -> None:
    from PIL import Image

    Image.fromarray(to_uint8(image), mode="RGB").save(path)
