"""Raster serialization: PNG for color/alpha, raw float32 + JSON sidecar for depth."""

from __future__ import annotations

import base64
import io
import json
from pathlib import Path

import numpy as np
from PIL import Image

_MODES = {1: "L", 3: "RGB", 4: "RGBA"}


def _as_hwc(data):
    data = np.asarray(data)
    if data.ndim == 2:
        data = data[:, :, None]
    return data


def encode_png(data, bits=8) -> bytes:
    """Encode a float raster in [0, 1] as PNG bytes.

    8-bit supports 1, 3 or 4 channels; 16-bit only single-channel.
    """
    data = np.clip(_as_hwc(data).astype(np.float64), 0.0, 1.0)
    c = data.shape[2]
    if bits == 16:
        if c != 1:
            raise ValueError("16-bit PNG export supports single-channel rasters only")
        arr = np.round(data[:, :, 0] * 65535.0).astype(np.uint16)
        img = Image.fromarray(arr)
    elif bits == 8:
        if c == 2:
            data = np.concatenate([data, np.zeros_like(data[:, :, :1])], axis=2)
            c = 3
        arr = np.round(data * 255.0).astype(np.uint8)
        img = Image.fromarray(arr[:, :, 0] if c == 1 else arr, _MODES[c])
    else:
        raise ValueError(f"unsupported bit depth {bits}")
    buf = io.BytesIO()
    img.save(buf, format="PNG", optimize=False)
    return buf.getvalue()


def decode_png(blob: bytes) -> np.ndarray:
    """Decode PNG bytes to a float64 (H, W, C) raster in [0, 1]."""
    img = Image.open(io.BytesIO(blob))
    arr = np.asarray(img)
    if arr.dtype == np.uint16 or img.mode.startswith("I"):
        out = arr.astype(np.float64) / 65535.0
    else:
        out = arr.astype(np.float64) / 255.0
    return _as_hwc(out)


def write_png(path, data, bits=8):
    Path(path).write_bytes(encode_png(data, bits))


def read_png(path) -> np.ndarray:
    return decode_png(Path(path).read_bytes())


def png_b64(data, bits=8) -> str:
    return base64.b64encode(encode_png(data, bits)).decode("ascii")


def b64_png(text: str) -> np.ndarray:
    return decode_png(base64.b64decode(text))


def write_raw(path, data):
    """Write little-endian float32 samples plus ``<path>.json`` with the shape."""
    data = _as_hwc(data)
    h, w, c = data.shape
    path = Path(path)
    path.write_bytes(np.ascontiguousarray(data, dtype="<f4").tobytes())
    header = {"width": w, "height": h, "channels": c, "dtype": "float32-le"}
    Path(str(path) + ".json").write_text(json.dumps(header, sort_keys=True))


def read_raw(path) -> np.ndarray:
    path = Path(path)
    header = json.loads(Path(str(path) + ".json").read_text())
    flat = np.frombuffer(path.read_bytes(), dtype="<f4")
    shape = (header["height"], header["width"], header["channels"])
    return flat.reshape(shape).astype(np.float64)
