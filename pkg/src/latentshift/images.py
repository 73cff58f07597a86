"""Image ingestion: binary PPM (P6, 8-bit), optional PNG, and a bundled photo set."""

from __future__ import annotations

from pathlib import Path

import numpy as np


class ImageFormatError(ValueError):
    pass


def _ppm_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated PPM header")
        tokens.append(data[start:pos])
    return tokens, pos + 1


def decode_ppm(data: bytes) -> np.ndarray:
    tokens, pos = _ppm_tokens(data, 4)
    if tokens[0] != b"P6":
        raise ImageFormatError(f"only binary P6 PPM is supported, got {tokens[0]!r}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise ImageFormatError("non-numeric PPM header field") from exc
    if maxval != 255:
        raise ImageFormatError(f"only 8-bit PPM is supported (maxval {maxval})")
    n = width * height * 3
    pixels = data[pos : pos + n]
    if len(pixels) != n:
        raise ImageFormatError(f"PPM raster has {len(pixels)} bytes, expected {n}")
    return np.frombuffer(pixels, np.uint8).reshape(height, width, 3).copy()


def encode_ppm(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ImageFormatError(f"expected (H, W, 3) uint8, got {img.shape} {img.dtype}")
    h, w, _ = img.shape
    return f"P6\n{w} {h}\n255\n".encode() + img.tobytes()


def read_image(path: str | Path) -> np.ndarray:
    """Read a PPM, or a PNG when Pillow is installed, as ``(H, W, 3)`` uint8."""
    path = Path(path)
    data = path.read_bytes()
    if data[:2] == b"P6":
        return decode_ppm(data)
    if data[:8] == b"\x89PNG\r\n\x1a\n":
        try:
            from PIL import Image
        except ImportError as exc:
            raise ImageFormatError("PNG input needs Pillow") from exc
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), np.uint8).copy()
    raise ImageFormatError(f"{path}: unsupported image format")


def write_image(path: str | Path, img: np.ndarray) -> None:
    path = Path(path)
    if path.suffix.lower() == ".png":
        from PIL import Image

        Image.fromarray(img).save(path)
    else:
        path.write_bytes(encode_ppm(img))


def read_dir(path: str | Path) -> list[tuple[str, np.ndarray]]:
    files = sorted(p for p in Path(path).iterdir() if p.suffix.lower() in (".ppm", ".png"))
    if not files:
        raise FileNotFoundError(f"no .ppm/.png images in {path}")
    return [(p.stem, read_image(p)) for p in files]


def to_float(img: np.ndarray) -> np.ndarray:
    return np.asarray(img, np.float64) / 255.0


def crop_to_multiple(img: np.ndarray, multiple: int) -> np.ndarray:
    h = img.shape[0] - img.shape[0] % multiple
    w = img.shape[1] - img.shape[1] % multiple
    return img[:h, :w]


# -- bundled photographs ------------------------------------------------------

TRAIN_SOURCES = ("astronaut", "coffee", "rocket", "retina", "hubble_deep_field", "immunohistochemistry")
HELDOUT_SOURCES = ("chelsea", "sample:china", "sample:flower")


def _load_source(name: str) -> np.ndarray:
    if name.startswith("sample:"):
        from sklearn.datasets import load_sample_image

        return load_sample_image(name.split(":", 1)[1] + ".jpg")
    import skimage.data

    return getattr(skimage.data, name)()[..., :3]


def builtin_images(split: str = "train") -> list[tuple[str, np.ndarray]]:
    """Public-domain photographs shipped with scikit-image / scikit-learn.

    ``train`` and ``heldout`` draw on disjoint source photos.
    """
    sources = {"train": TRAIN_SOURCES, "heldout": HELDOUT_SOURCES}[split]
    return [(name.split(":")[-1], _load_source(name)) for name in sources]


def grid_crops(images: list[tuple[str, np.ndarray]], size: int, per_image: int) -> list[tuple[str, np.ndarray]]:
    """Deterministic, evenly spread ``size`` x ``size`` crops."""
    out = []
    for name, img in images:
        h, w = img.shape[:2]
        rows = max(1, int(np.ceil(np.sqrt(per_image))))
        cols = max(1, int(np.ceil(per_image / rows)))
        count = 0
        for r in range(rows):
            for c in range(cols):
                if count == per_image:
                    break
                i = 0 if rows == 1 else (h - size) * r // (rows - 1)
                j = 0 if cols == 1 else (w - size) * c // (cols - 1)
                out.append((f"{name}_{count}", img[i : i + size, j : j + size].copy()))
                count += 1
    return out
