"""Dense image types, raster/tensor file I/O, resizing and normalization.

Images are plain numpy arrays:

* ``ImageRGB``  -- float64 array of shape (H, W, 3), values in [0, 1]
* ``GrayMap``   -- float64 array of shape (H, W), values in [0, 1]
* ``BinaryMask`` -- bool array of shape (H, W)
* feature / gradient stacks -- float64 arrays of shape (K, m, h)

The ``check_*`` helpers validate and coerce inputs the same way sklearn's
``check_array`` does for tabular data.
"""

import os
import struct
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

TENSOR_MAGIC = b"SALT"
TENSOR_VERSION = 1
_TENSOR_HEADER = struct.Struct("<4sIIII")


class FormatError(ValueError):
    """Raised when a raster or tensor file cannot be decoded."""


# --------------------------------------------------------------------------
# validation helpers
# --------------------------------------------------------------------------


def check_image(image, name="image"):
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"{name} must have shape (H, W, 3), got {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{name} must be at least 1x1")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or Inf")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(f"{name} values must lie in [0, 1]")
    return arr


def check_graymap(gray, name="map"):
    arr = np.asarray(gray, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{name} must be a non-empty 2-D array, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or Inf")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(f"{name} values must lie in [0, 1]")
    return arr


def check_mask(mask, name="gt"):
    arr = np.asarray(mask)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{name} must be a non-empty 2-D array, got {arr.shape}")
    if arr.dtype != bool:
        arr = arr > 0.5
    return arr


def check_stack(stack, name="stack"):
    arr = np.asarray(stack, dtype=np.float64)
    if arr.ndim != 3 or min(arr.shape) < 1:
        raise ValueError(f"{name} must have shape (K, m, h) with K, m, h >= 1, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or Inf")
    return arr


def check_same_shape(a, b, what="inputs"):
    if a.shape[:2] != b.shape[:2]:
        raise ValueError(f"{what} differ in size: {a.shape[:2]} vs {b.shape[:2]}")


# --------------------------------------------------------------------------
# file I/O
# --------------------------------------------------------------------------


def atomic_write_bytes(path, payload):
    """Write ``payload`` to ``path`` via a temp file in the same directory and rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_raster(path):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such image file: {path}")
    try:
        img = Image.open(path)
        img.load()
    except (OSError, SyntaxError, ValueError) as exc:
        raise FormatError(f"cannot decode {path}: {exc}") from exc
    if img.format not in ("PNG", "PPM"):
        raise FormatError(f"{path}: unsupported raster format {img.format!r}")
    if img.mode in ("L", "RGB"):
        return img
    if img.mode in ("P", "LA", "RGBA"):
        return img.convert("RGB")
    raise FormatError(f"{path}: unsupported bit depth / mode {img.mode!r}")


def load_image(path):
    """Load an 8-bit PNG or binary PPM/PGM as an (H, W, 3) array in [0, 1].

    Grayscale files are expanded to three identical channels.
    """
    img = _read_raster(path)
    arr = np.asarray(img, dtype=np.float64) / 255.0
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    return arr


def load_graymap(path):
    """Load a raster as a single-channel map in [0, 1] (channel mean for color files)."""
    img = _read_raster(path)
    arr = np.asarray(img, dtype=np.float64) / 255.0
    if arr.ndim == 3:
        arr = arr.mean(axis=2)
    return arr


def load_mask(path):
    return load_graymap(path) > 0.5


def graymap_to_uint8(gray):
    gray = check_graymap(gray)
    # floor(v + 0.5): round half up, so 0.5 -> 128
    return np.floor(gray * 255.0 + 0.5).astype(np.uint8)


def save_graymap(gray, path):
    """Save a map as 8-bit grayscale; value v is stored as round(v * 255).

    The format follows the suffix: ``.pgm`` writes binary P5, anything else PNG.
    """
    path = Path(path)
    pixels = graymap_to_uint8(gray)
    if path.suffix.lower() == ".pgm":
        h, w = pixels.shape
        payload = f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()
    else:
        import io

        buf = io.BytesIO()
        Image.fromarray(pixels, mode="L").save(buf, format="PNG")
        payload = buf.getvalue()
    atomic_write_bytes(path, payload)


def save_labels_pgm(labels, path):
    """Debug dump of a superpixel label map as a 16-bit big-endian PGM."""
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() > 65535:
        raise ValueError("labels must fit in 16 bits")
    h, w = labels.shape
    maxval = max(int(labels.max()), 256)
    payload = f"P5\n{w} {h}\n{maxval}\n".encode("ascii") + labels.astype(">u2").tobytes()
    atomic_write_bytes(path, payload)


def encode_tensor(stack):
    """Serialize a (K, m, h) array as one SALT record."""
    stack = np.asarray(stack, dtype=np.float64)
    if stack.ndim != 3:
        raise ValueError(f"tensor must be 3-D, got shape {stack.shape}")
    k, m, h = stack.shape
    header = _TENSOR_HEADER.pack(TENSOR_MAGIC, TENSOR_VERSION, k, m, h)
    return header + stack.astype("<f4").tobytes()


def decode_tensor(buf, offset=0):
    """Decode one SALT record starting at ``offset``; return (array, next_offset)."""
    if len(buf) - offset < _TENSOR_HEADER.size:
        raise FormatError("truncated tensor header")
    magic, version, k, m, h = _TENSOR_HEADER.unpack_from(buf, offset)
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}")
    if version != TENSOR_VERSION:
        raise FormatError(f"unsupported tensor version {version}")
    start = offset + _TENSOR_HEADER.size
    end = start + 4 * k * m * h
    if end > len(buf):
        raise FormatError(f"tensor payload too short: expected {k * m * h} floats")
    data = np.frombuffer(buf, dtype="<f4", count=k * m * h, offset=start)
    return data.astype(np.float64).reshape(k, m, h), end


def save_tensor(stack, path):
    atomic_write_bytes(path, encode_tensor(stack))


def load_tensor(path):
    """Read a single-record SALT file as a float64 (K, m, h) array."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such tensor file: {path}")
    buf = path.read_bytes()
    stack, end = decode_tensor(buf)
    if end != len(buf):
        raise FormatError(f"{path}: {len(buf) - end} trailing bytes after tensor payload")
    return stack


# --------------------------------------------------------------------------
# resampling / normalization
# --------------------------------------------------------------------------


def _axis_coords(n_in, n_out):
    if n_out == 1:
        pos = np.array([(n_in - 1) / 2.0])
    else:
        pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    i0 = np.clip(np.floor(pos).astype(int), 0, n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    t = pos - i0
    return i0, i1, t


def resize_array(arr, new_w, new_h):
    """Corner-aligned bilinear resampling of the first two axes of ``arr``."""
    arr = np.asarray(arr, dtype=np.float64)
    if new_w < 1 or new_h < 1:
        raise ValueError("target size must be at least 1x1")
    h, w = arr.shape[:2]
    if (h, w) == (new_h, new_w):
        return arr.copy()
    r0, r1, tr = _axis_coords(h, new_h)
    c0, c1, tc = _axis_coords(w, new_w)
    tr = tr.reshape((-1,) + (1,) * (arr.ndim - 1))
    tc = tc.reshape((1, -1) + (1,) * (arr.ndim - 2))
    top = arr[r0]
    bottom = arr[r1]
    rows = top + (bottom - top) * tr
    left = rows[:, c0]
    right = rows[:, c1]
    out = left + (right - left) * tc
    # bilinear weights are convex; clip away last-ulp excursions
    return np.clip(out, arr.min(), arr.max())


def resize_bilinear(gray, new_w, new_h):
    return resize_array(check_graymap(gray), new_w, new_h)


def resize_image(image, new_w, new_h):
    return resize_array(check_image(image), new_w, new_h)


def normalize_unit(raw):
    """Affine min-max rescale to [0, 1]; a constant input maps to all zeros."""
    arr = np.asarray(raw, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("cannot normalize a map containing NaN or Inf")
    lo, hi = arr.min(), arr.max()
    if hi == lo:
        return np.zeros_like(arr)
    out = (arr - lo) / (hi - lo)
    return np.clip(out, 0.0, 1.0)
