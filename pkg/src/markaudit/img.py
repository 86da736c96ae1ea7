"""Image representation, file I/O and visual-quality metrics.

An image is a float64 numpy array of shape (H, W, 3) with intensities in
[0, 1]. Supported file formats are 8-bit PNG (RGB, RGBA with alpha
discarded, grayscale replicated to 3 channels) and binary PPM (P6, maxval
255). PPM exists so tests can build bit-exact fixtures without a PNG
encoder.
"""

from __future__ import annotations

import io

import numpy as np
from PIL import Image as PILImage, UnidentifiedImageError

# Uniform-window SSIM parameters on the [0, 1] dynamic range.
SSIM_WINDOW = 8
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


class ImageError(Exception):
    """Base class for image I/O failures."""


class UnreadableImageError(ImageError):
    """File missing, truncated, or not readable."""


class UnsupportedDepthError(ImageError):
    """Image payload uses a bit depth other than 8 bits per sample."""


class NotAnImageError(ImageError):
    """File content is not a PNG or PPM P6 payload."""


def validate_image(img: np.ndarray) -> None:
    """Raise ValueError unless `img` is an (H, W, 3) array with values in [0, 1]."""
    if not isinstance(img, np.ndarray) or img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("image must be an (H, W, 3) array")
    if img.size == 0:
        raise ValueError("image must be non-empty")
    if not np.isfinite(img).all():
        raise ValueError("image intensities must be finite")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("image intensities must lie in [0, 1]")


def _load_ppm(data: bytes) -> np.ndarray:
    pos = 2  # past the "P6" magic

    def next_token() -> bytes:
        nonlocal pos
        while pos < len(data):
            if data[pos : pos + 1].isspace():
                pos += 1
            elif data[pos : pos + 1] == b"#":
                while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            else:
                break
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise UnreadableImageError("truncated PPM header")
        return data[start:pos]

    try:
        width = int(next_token())
        height = int(next_token())
        maxval = int(next_token())
    except ValueError as exc:
        raise NotAnImageError(f"malformed PPM header: {exc}") from exc
    if width <= 0 or height <= 0:
        raise NotAnImageError("non-positive PPM dimensions")
    if maxval != 255:
        raise UnsupportedDepthError(f"PPM maxval {maxval} is not 8-bit")
    pos += 1  # single whitespace separating header from raster
    raster = data[pos : pos + width * height * 3]
    if len(raster) < width * height * 3:
        raise UnreadableImageError("truncated PPM raster")
    pixels = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, 3)
    return pixels.astype(np.float64) / 255.0


def _load_png(data: bytes) -> np.ndarray:
    try:
        pil = PILImage.open(io.BytesIO(data))
        pil.load()
    except UnidentifiedImageError as exc:
        raise NotAnImageError(str(exc)) from exc
    except OSError as exc:
        raise UnreadableImageError(str(exc)) from exc
    if pil.mode in ("I", "I;16", "I;16B", "I;16L", "I;16N", "F"):
        raise UnsupportedDepthError(f"unsupported PNG mode {pil.mode}")
    if pil.mode not in ("RGB", "RGBA", "L", "LA", "P", "1"):
        raise UnsupportedDepthError(f"unsupported PNG mode {pil.mode}")
    if pil.mode != "RGB":
        # Alpha is discarded; grayscale and palette images become RGB.
        pil = pil.convert("RGB")
    pixels = np.asarray(pil, dtype=np.uint8)
    return pixels.astype(np.float64) / 255.0


def load_image(path: str) -> np.ndarray:
    """Load an 8-bit PNG or PPM (P6) file as a float image in [0, 1]."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise UnreadableImageError(f"{path}: {exc}") from exc
    if data[:8] == b"\x89PNG\r\n\x1a\n":
        return _load_png(data)
    if data[:2] == b"P6":
        return _load_ppm(data)
    raise NotAnImageError(f"{path}: not a PNG or PPM P6 file")


def save_image(img: np.ndarray, path: str) -> None:
    """Write `img` as an 8-bit PNG; quantization is round-half-up of v*255.

    Compression is turned down: marking runs write thousands of small
    images and the encoder, not the disk, is the bottleneck.
    """
    validate_image(img)
    quantized = np.floor(img * 255.0 + 0.5)
    pixels = np.clip(quantized, 0, 255).astype(np.uint8)
    try:
        PILImage.fromarray(pixels, mode="RGB").save(path, format="PNG", compress_level=1)
    except OSError as exc:
        raise UnreadableImageError(f"{path}: {exc}") from exc


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")


def mse(a: np.ndarray, b: np.ndarray) -> float:
    """Mean squared error over all H*W*3 intensities."""
    _check_same_shape(a, b)
    diff = a - b
    return float(np.mean(diff * diff))


def _window_means(channel: np.ndarray, w: int) -> np.ndarray:
    """Means of all w-by-w sliding windows (stride 1, valid positions only)."""
    c = np.cumsum(np.cumsum(channel, axis=0, dtype=np.float64), axis=1)
    c = np.pad(c, ((1, 0), (1, 0)))
    sums = c[w:, w:] - c[:-w, w:] - c[w:, :-w] + c[:-w, :-w]
    return sums / (w * w)


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean structural similarity over 8x8 uniform sliding windows.

    Computed per channel with population window statistics, then averaged
    across the three channels. Requires min(H, W) >= the window size.
    """
    _check_same_shape(a, b)
    h, w = a.shape[:2]
    if min(h, w) < SSIM_WINDOW:
        raise ValueError(f"image smaller than {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    per_channel = []
    for ch in range(3):
        x = a[:, :, ch].astype(np.float64)
        y = b[:, :, ch].astype(np.float64)
        mu_x = _window_means(x, SSIM_WINDOW)
        mu_y = _window_means(y, SSIM_WINDOW)
        var_x = _window_means(x * x, SSIM_WINDOW) - mu_x * mu_x
        var_y = _window_means(y * y, SSIM_WINDOW) - mu_y * mu_y
        cov = _window_means(x * y, SSIM_WINDOW) - mu_x * mu_y
        num = (2.0 * mu_x * mu_y + SSIM_C1) * (2.0 * cov + SSIM_C2)
        den = (mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (var_x + var_y + SSIM_C2)
        per_channel.append(np.mean(num / den))
    return float(np.mean(per_channel))
