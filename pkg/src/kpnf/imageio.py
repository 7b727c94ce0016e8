"""PNG and PPM image I/O.

Images travel through the engine as float arrays in [0, 1], shape [H, W, 3]
(or [H, W] for grayscale maps). Files store 8-bit channels; loading divides
by 255, saving rounds half-up. Encoder inputs additionally need the
documented [-1, 1] normalization, applied explicitly via
:func:`normalize_for_encoder`.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from kpnf.errors import ImageFormatError


def normalize_for_encoder(image01: np.ndarray) -> np.ndarray:
    """Map [0, 1] pixel values to the [-1, 1] range the encoders expect."""
    return 2.0 * np.asarray(image01, dtype=np.float64) - 1.0


def _quantize(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def save_image(path, image01: np.ndarray) -> None:
    """Write an [H, W, 3] float image in [0, 1]; format chosen by extension (.png/.ppm)."""
    path = Path(path)
    img8 = _quantize(image01)
    if img8.ndim != 3 or img8.shape[2] != 3:
        raise ImageFormatError(f"expected [H,W,3] image, got shape {np.asarray(image01).shape}")
    if path.suffix.lower() == ".ppm":
        save_ppm(path, image01)
    else:
        Image.fromarray(img8, mode="RGB").save(path, format="PNG")


def save_gray_image(path, values01: np.ndarray) -> None:
    """Write an [H, W] float map in [0, 1] as 8-bit grayscale (.png/.pgm)."""
    path = Path(path)
    img8 = _quantize(values01)
    if img8.ndim != 2:
        raise ImageFormatError(f"expected [H,W] map, got shape {np.asarray(values01).shape}")
    if path.suffix.lower() == ".pgm":
        with open(path, "wb") as fh:
            fh.write(f"P5\n{img8.shape[1]} {img8.shape[0]}\n255\n".encode("ascii"))
            fh.write(img8.tobytes())
    else:
        Image.fromarray(img8, mode="L").save(path, format="PNG")


def load_image(path) -> np.ndarray:
    """Read PNG or PPM into an [H, W, 3] float array in [0, 1]."""
    path = Path(path)
    if not path.exists():
        raise ImageFormatError(f"image file not found: {path}")
    if path.suffix.lower() == ".ppm":
        return load_ppm(path)
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.float64)
    except Exception as e:  # Pillow raises various types on corrupt data
        raise ImageFormatError(f"cannot read image {path}: {e}") from e
    return arr / 255.0


def save_ppm(path, image01: np.ndarray) -> None:
    """Binary PPM (P6), 8-bit, maxval 255."""
    img8 = _quantize(image01)
    if img8.ndim != 3 or img8.shape[2] != 3:
        raise ImageFormatError(f"expected [H,W,3] image, got shape {np.asarray(image01).shape}")
    with open(path, "wb") as fh:
        fh.write(f"P6\n{img8.shape[1]} {img8.shape[0]}\n255\n".encode("ascii"))
        fh.write(img8.tobytes())


def load_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    # header: magic, width, height, maxval; '#' comments allowed between tokens
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4 and pos < len(raw):
        ch = raw[pos : pos + 1]
        if ch == b"#":
            pos = raw.index(b"\n", pos) + 1
        elif ch.isspace():
            pos += 1
        else:
            end = pos
            while end < len(raw) and not raw[end : end + 1].isspace():
                end += 1
            tokens.append(raw[pos:end])
            pos = end
    if len(tokens) != 4 or tokens[0] != b"P6":
        raise ImageFormatError(f"{path}: not a binary PPM (P6) file")
    width, height, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ImageFormatError(f"{path}: only maxval 255 supported, got {maxval}")
    pos += 1  # single whitespace after maxval
    data = np.frombuffer(raw, dtype=np.uint8, count=width * height * 3, offset=pos)
    if data.size != width * height * 3:
        raise ImageFormatError(f"{path}: truncated pixel data")
    return data.reshape(height, width, 3).astype(np.float64) / 255.0
