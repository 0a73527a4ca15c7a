"""Image I/O, color conversion, synthetic rain, and patch sampling.

Images are 8-bit RGB throughout; the model boundary converts to [0,1]
float64 and back.  PNG goes through Pillow, binary PPM (P6) is read and
written directly.  Every randomized operation is a pure function of its
seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage, UnidentifiedImageError
from scipy.ndimage import gaussian_filter

__all__ = [
    "Image",
    "ImageError",
    "RainParams",
    "load_image",
    "save_image",
    "to_unit",
    "from_unit",
    "rgb_to_y",
    "rain_layer",
    "synth_rain",
    "sample_patch",
    "load_manifest",
    "write_manifest",
]


class ImageError(Exception):
    """Unreadable, truncated, or unsupported image data."""


@dataclass
class Image:
    """8-bit RGB raster, pixels shaped (H, W, 3)."""

    pixels: np.ndarray

    def __post_init__(self):
        p = self.pixels
        if p.ndim != 3 or p.shape[2] != 3 or p.dtype != np.uint8:
            raise ImageError(f"expected (H,W,3) uint8 pixels, got {p.shape} {p.dtype}")
        if p.shape[0] < 1 or p.shape[1] < 1:
            raise ImageError("empty image")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


def _load_ppm(path: Path) -> Image:
    data = path.read_bytes()
    # Header tokens may be separated by arbitrary whitespace and # comments.
    pos = 0
    tokens = []
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageError(f"{path}: truncated PPM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P6":
        raise ImageError(f"{path}: not a binary PPM (P6) file")
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError as exc:
        raise ImageError(f"{path}: malformed PPM header") from exc
    if maxval != 255:
        raise ImageError(f"{path}: unsupported bit depth (maxval {maxval})")
    pos += 1  # single whitespace after maxval
    body = data[pos : pos + 3 * w * h]
    if len(body) != 3 * w * h:
        raise ImageError(f"{path}: truncated PPM pixel data")
    return Image(np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).copy())


def load_image(path) -> Image:
    path = Path(path)
    if not path.exists():
        raise ImageError(f"{path}: no such file")
    suffix = path.suffix.lower()
    if suffix == ".ppm":
        return _load_ppm(path)
    if suffix == ".png":
        try:
            with PILImage.open(path) as im:
                im.load()
                if im.mode != "RGB":
                    raise ImageError(f"{path}: unsupported PNG mode {im.mode!r}")
                return Image(np.asarray(im, dtype=np.uint8))
        except ImageError:
            raise
        except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
            raise ImageError(f"{path}: failed to decode PNG ({exc})") from exc
    raise ImageError(f"{path}: unsupported format (use .png or .ppm)")


def save_image(img: Image, path):
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".ppm":
        header = f"P6\n{img.width} {img.height}\n255\n".encode("ascii")
        path.write_bytes(header + img.pixels.tobytes())
    elif suffix == ".png":
        PILImage.fromarray(img.pixels, mode="RGB").save(path, format="PNG")
    else:
        raise ImageError(f"{path}: unsupported format (use .png or .ppm)")


def to_unit(img: Image) -> np.ndarray:
    """(H,W,3) bytes -> (3,H,W) float64 in [0,1]."""
    return img.pixels.astype(np.float64).transpose(2, 0, 1) / 255.0


def from_unit(arr: np.ndarray) -> Image:
    """(3,H,W) float64 in [0,1] -> bytes, rounding half up."""
    clipped = np.clip(arr, 0.0, 1.0)
    q = np.floor(clipped * 255.0 + 0.5)
    return Image(np.clip(q, 0, 255).astype(np.uint8).transpose(1, 2, 0))


def rgb_to_y(img: Image) -> np.ndarray:
    """Studio-swing BT.601 luma: Y = 16 + (65.481R + 128.553G + 24.966B)/255.

    Computed as an exact integer combination (65481R + 128553G + 24966B)
    divided by 255000, which is the same real number with one rounding;
    pixels with equal combinations map to bitwise-equal luma.
    """
    p = img.pixels.astype(np.int64)
    combo = 65481 * p[:, :, 0] + 128553 * p[:, :, 1] + 24966 * p[:, :, 2]
    return 16.0 + combo / 255000.0


@dataclass(frozen=True)
class RainParams:
    """Additive streak model parameters; all ranges are (min, max)."""

    streak_count: int = 12
    length: tuple[float, float] = (8.0, 16.0)
    angle: tuple[float, float] = (-15.0, 15.0)  # degrees from vertical
    width: int = 1
    intensity: tuple[float, float] = (0.3, 0.8)
    blur_sigma: float = 0.5

    def __post_init__(self):
        if self.streak_count < 0 or self.width < 1 or self.blur_sigma < 0:
            raise ValueError("invalid rain parameters")
        for lo, hi in (self.length, self.angle, self.intensity):
            if lo > hi:
                raise ValueError(f"range ({lo}, {hi}) not ordered")
        if self.intensity[0] < 0 or self.intensity[1] > 1:
            raise ValueError("intensity range must lie in [0, 1]")


def rain_layer(height: int, width: int, params: RainParams, seed: int) -> np.ndarray:
    """Rasterize the streaks into a [0,1] float map, blurred by blur_sigma.

    Per streak the draw order is: length, angle, intensity, start x,
    start y.  Start points are sampled so the whole segment fits inside
    the canvas (when the canvas is large enough), and overlapping streaks
    keep the maximum, so the map stays bounded by the largest intensity.
    """
    rng = np.random.default_rng(seed)
    canvas = np.zeros((height, width))
    for _ in range(params.streak_count):
        length = rng.uniform(*params.length)
        theta = math.radians(rng.uniform(*params.angle))
        intensity = rng.uniform(*params.intensity)
        dx, dy = math.sin(theta), math.cos(theta)
        span_x, span_y = length * dx, length * dy
        x_lo = max(0.0, -span_x)
        x_hi = max(x_lo, (width - 1) - max(0.0, span_x))
        y_hi = max(0.0, (height - 1) - span_y)
        x0 = rng.uniform(x_lo, x_hi)
        y0 = rng.uniform(0.0, y_hi)
        steps = max(2, int(math.ceil(length * 2)) + 1)
        for t in np.linspace(0.0, length, steps):
            px, py = x0 + t * dx, y0 + t * dy
            for o in range(params.width):
                off = o - (params.width - 1) / 2.0
                ix = int(round(px + off * dy))
                iy = int(round(py - off * dx))
                if 0 <= iy < height and 0 <= ix < width:
                    canvas[iy, ix] = max(canvas[iy, ix], intensity)
    if params.blur_sigma > 0:
        canvas = gaussian_filter(canvas, params.blur_sigma)
    return canvas


def synth_rain(clean: Image, params: RainParams, seed: int) -> Image:
    """Add rasterized streaks to a clean image (light only, then clamp)."""
    layer = rain_layer(clean.height, clean.width, params, seed)
    rainy = clean.pixels.astype(np.float64) + layer[:, :, None] * 255.0
    q = np.floor(np.clip(rainy, 0.0, 255.0) + 0.5)
    return Image(np.clip(q, 0, 255).astype(np.uint8))


_PATCH_SALT = 0x9E3779B9


def sample_patch(pair: tuple[Image, Image], size: int, seed: int) -> tuple[Image, Image]:
    """Crop the same random window from a (clean, rainy) pair.

    Windows are drawn epoch-shuffled: valid top-left positions are randomly
    permuted per epoch and consecutive seeds walk that permutation, so any
    epoch-aligned run of N seeds hits N distinct windows while each single
    draw stays uniform.
    """
    clean, rainy = pair
    if clean.pixels.shape != rainy.pixels.shape:
        raise ImageError("pair images differ in size")
    if size > min(clean.height, clean.width):
        raise ImageError(
            f"patch {size} larger than image {clean.height}x{clean.width}"
        )
    n_top = clean.height - size + 1
    n_left = clean.width - size + 1
    epoch, idx = divmod(int(seed), n_top * n_left)
    perm = np.random.default_rng((epoch, _PATCH_SALT)).permutation(n_top * n_left)
    top, left = divmod(int(perm[idx]), n_left)
    window = (slice(top, top + size), slice(left, left + size))
    return (
        Image(clean.pixels[window].copy()),
        Image(rainy.pixels[window].copy()),
    )


def load_manifest(path) -> list[tuple[Path, Path]]:
    """Parse `clean<TAB>rainy` lines; relative paths resolve against the
    manifest's directory.  Blank lines and # comments are ignored."""
    path = Path(path)
    if not path.exists():
        raise ImageError(f"{path}: no such manifest")
    base = path.parent
    pairs = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ImageError(f"{path}:{lineno}: expected `clean<TAB>rainy`")
        pairs.append((base / parts[0], base / parts[1]))
    return pairs


def write_manifest(path, pairs):
    lines = [f"{c}\t{r}" for c, r in pairs]
    Path(path).write_text("\n".join(lines) + "\n")
