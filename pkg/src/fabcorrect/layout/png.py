"""8-bit grayscale PNG read/write (via Pillow)."""
from __future__ import annotations

import io
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from ..errors import FormatError


def png_encode(image) -> bytes:
    """Encode a 2-D uint8 image or boolean mask; masks are stored as {0, 255}."""
    arr = np.asarray(image)
    if arr.ndim != 2:
        raise FormatError(f"only 2-D grayscale rasters are supported, got shape {arr.shape}")
    if arr.dtype == bool:
        arr = arr.astype(np.uint8) * 255
    elif arr.dtype != np.uint8:
        if arr.size and (arr.min() < 0 or arr.max() > 255 or not np.all(arr == np.round(arr))):
            raise FormatError(f"values of dtype {arr.dtype} do not fit 8-bit gray")
        arr = arr.astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(arr), mode="L").save(buf, format="PNG")
    return buf.getvalue()


def png_decode(data: bytes, as_mask: bool = False) -> np.ndarray:
    """Decode 8-bit grayscale PNG bytes; ``as_mask`` returns ``pixels >= 128``."""
    try:
        img = Image.open(io.BytesIO(data))
        img.load()
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise FormatError(f"not a readable PNG: {exc}") from exc
    if img.format != "PNG":
        raise FormatError(f"expected PNG data, got {img.format}")
    if img.mode != "L":
        raise FormatError(f"unsupported PNG mode {img.mode!r}; only 8-bit grayscale is accepted")
    arr = np.array(img, dtype=np.uint8)
    return arr >= 128 if as_mask else arr


def png_write(path: str | Path, image) -> None:
    Path(path).write_bytes(png_encode(image))


def png_read(path: str | Path, as_mask: bool = False) -> np.ndarray:
    return png_decode(Path(path).read_bytes(), as_mask=as_mask)
