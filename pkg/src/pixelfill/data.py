"""Image I/O, geometry, masks, corruption fill, and evaluation metrics.

Images are stored as uint8 (h, w, 3) arrays and converted to float32
(c, h, w) tensors in [0, 1] for the network. Binary PPM (P6, maxval 255)
is decoded and encoded here byte-for-byte; PNG goes through Pillow.
Masks are uint8 (h, w) maps with 1 on missing pixels.

RMSE and PSNR are computed on the 0-255 scale, optionally restricted to
a region mask, and PSNR of a perfect reconstruction is reported as the
+infinity sentinel.
"""

from __future__ import annotations

import math
import os
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .errors import DataError

MASK_TASKS = ("center", "random", "extrapolate")

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


# ---------------------------------------------------------------------------
# Image I/O
# ---------------------------------------------------------------------------


def _parse_ppm(raw: bytes, path) -> np.ndarray:
    pos = 0

    def fail(msg):
        raise DataError(f"{path}: {msg} (byte offset {pos})")

    def skip_separators():
        nonlocal pos
        while pos < len(raw):
            if raw[pos : pos + 1].isspace():
                pos += 1
            elif raw[pos : pos + 1] == b"#":
                while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b""):
                    pos += 1
            else:
                return

    def read_int(what):
        nonlocal pos
        skip_separators()
        start = pos
        while pos < len(raw) and raw[pos : pos + 1].isdigit():
            pos += 1
        if pos == start:
            fail(f"expected {what}")
        return int(raw[start:pos])

    if raw[:2] != b"P6":
        fail("not a P6 ppm header")
    pos = 2
    width = read_int("width")
    height = read_int("height")
    maxval = read_int("maxval")
    if maxval != 255:
        fail(f"unsupported maxval {maxval} (only 255)")
    if pos >= len(raw) or not raw[pos : pos + 1].isspace():
        fail("expected single whitespace after maxval")
    pos += 1
    expected = width * height * 3
    payload = raw[pos : pos + expected]
    if len(payload) != expected:
        pos += len(payload)
        fail(f"truncated payload: need {expected} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3).copy()


def load_image(path) -> np.ndarray:
    """Load a P6 PPM or PNG file as uint8 (h, w, 3); grayscale is replicated."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    if raw[:2] == b"P6":
        return _parse_ppm(raw, path)
    if raw[: len(PNG_MAGIC)] == PNG_MAGIC:
        try:
            with PILImage.open(path) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
        except Exception as exc:
            raise DataError(f"cannot decode png {path}: {exc}") from exc
        return arr
    raise DataError(f"{path}: not a P6 ppm or png file (byte offset 0)")


def save_image(img: np.ndarray, path) -> None:
    """Write uint8 (h, w, 3) to .ppm (P6) or .png; no partial files on error."""
    path = Path(path)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ValueError(f"expected uint8 (h, w, 3) image, got {img.dtype} {img.shape}")
    tmp = path.with_name(path.name + ".tmp")
    try:
        if path.suffix.lower() == ".png":
            PILImage.fromarray(img, mode="RGB").save(tmp, format="PNG")
        else:
            h, w = img.shape[:2]
            with open(tmp, "wb") as fh:
                fh.write(b"P6\n%d %d\n255\n" % (w, h))
                fh.write(img.tobytes())
        os.replace(tmp, path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------


def bilinear_resize_float(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling with half-pixel-centre coordinates, in float64.

    Resizing to the source size reproduces it exactly; the midpoint of two
    pixels interpolates to their average.
    """
    h, w = img.shape[:2]
    src = img.astype(np.float64)
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :, None]
    top = src[y0][:, x0] * (1 - wx) + src[y0][:, x1] * wx
    bottom = src[y1][:, x0] * (1 - wx) + src[y1][:, x1] * wx
    return top * (1 - wy) + bottom * wy


def resize_bilinear(img: np.ndarray, shortest_side: int) -> np.ndarray:
    """Scale so the shortest side equals ``shortest_side``, keeping aspect."""
    h, w = img.shape[:2]
    if shortest_side < 1:
        raise ValueError("shortest_side must be >= 1")
    if min(h, w) == shortest_side:
        return img.copy()
    scale = shortest_side / min(h, w)
    out_h = max(1, round(h * scale))
    out_w = max(1, round(w * scale))
    out = bilinear_resize_float(img, out_h, out_w)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def resize_exact(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize to an exact (h, w), aspect ratio not preserved."""
    if img.shape[0] == out_h and img.shape[1] == out_w:
        return img.copy()
    out = bilinear_resize_float(img, out_h, out_w)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def random_crop(img: np.ndarray, size: int, rng: np.random.Generator | int) -> np.ndarray:
    """Uniformly placed size x size crop; deterministic under a seeded rng."""
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    h, w = img.shape[:2]
    if h < size or w < size:
        raise ValueError(f"image {h}x{w} smaller than crop size {size}")
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    return img[top : top + size, left : left + size].copy()


def center_crop(img: np.ndarray, size: int) -> np.ndarray:
    h, w = img.shape[:2]
    if h < size or w < size:
        raise ValueError(f"image {h}x{w} smaller than crop size {size}")
    top = (h - size) // 2
    left = (w - size) // 2
    return img[top : top + size, left : left + size].copy()


def hflip(img: np.ndarray, flip: bool) -> np.ndarray:
    """Mirror about the vertical axis when ``flip`` is true."""
    return img[:, ::-1].copy() if flip else img.copy()


# ---------------------------------------------------------------------------
# Masks and corruption
# ---------------------------------------------------------------------------


def make_mask(
    task: str,
    image_size: int,
    region: int,
    overlap: int = 0,
    rng: np.random.Generator | int | None = None,
) -> np.ndarray:
    """Binary (h, w) mask, 1 on missing pixels.

    ``center`` and ``random`` corrupt a (region - 2*overlap)^2 square (the
    overlap band stays visible on all sides); ``random`` places it
    uniformly at least ``overlap`` pixels from the borders.
    ``extrapolate`` corrupts everything except the central region^2
    square; overlap does not apply there.
    """
    if task not in MASK_TASKS:
        raise ValueError(f"task must be one of {MASK_TASKS}, got {task!r}")
    if region < 0 or overlap < 0:
        raise ValueError("region and overlap must be >= 0")
    mask = np.zeros((image_size, image_size), dtype=np.uint8)
    if task == "extrapolate":
        if region >= image_size:
            raise ValueError(
                f"extrapolation region {region} must be smaller than the "
                f"image size {image_size}"
            )
        off = (image_size - region) // 2
        mask[:] = 1
        mask[off : off + region, off : off + region] = 0
        return mask

    if region + 2 * overlap > image_size:
        raise ValueError(
            f"region {region} + 2*overlap {overlap} exceeds image size "
            f"{image_size}"
        )
    side = region - 2 * overlap
    if side < 0:
        raise ValueError(f"overlap {overlap} larger than half the region {region}")
    if side == 0:
        return mask
    if task == "center":
        top = left = (image_size - side) // 2
    else:
        if rng is None:
            raise ValueError("random mask placement needs an rng or seed")
        if isinstance(rng, (int, np.integer)):
            rng = np.random.default_rng(rng)
        lo, hi = overlap, image_size - overlap - side
        top = int(rng.integers(lo, hi + 1))
        left = int(rng.integers(lo, hi + 1))
    mask[top : top + side, left : left + side] = 1
    return mask


def corrupt(x: np.ndarray, mask: np.ndarray, fill: np.ndarray | float) -> np.ndarray:
    """Replace masked pixels of a (c, h, w) or (n, c, h, w) tensor by ``fill``.

    ``fill`` is a per-channel vector (the training-set mean) or a scalar.
    Unmasked pixels pass through bit-exactly.
    """
    m = mask
    if m.ndim == 2:
        m = m[None]
    if x.ndim == 4 and m.ndim == 3:
        m = m[None]
    if m.shape[-2:] != x.shape[-2:]:
        raise ValueError(f"mask {mask.shape} does not match tensor {x.shape}")
    fill_arr = np.asarray(fill, dtype=x.dtype)
    if fill_arr.ndim == 1:
        shape = (1,) * (x.ndim - 3) + (-1, 1, 1)
        fill_arr = fill_arr.reshape(shape)
    return np.where(m > 0, fill_arr, x).astype(x.dtype, copy=False)


# ---------------------------------------------------------------------------
# Tensor conversion
# ---------------------------------------------------------------------------


def image_to_tensor(img: np.ndarray) -> np.ndarray:
    """uint8 (h, w, 3) -> float32 (3, h, w) in [0, 1]."""
    return (img.astype(np.float32) / 255.0).transpose(2, 0, 1)


def tensor_to_image(t: np.ndarray) -> np.ndarray:
    """float (3, h, w) in [0, 1] -> uint8 (h, w, 3), clipped and rounded."""
    arr = np.clip(np.rint(t.astype(np.float64) * 255.0), 0, 255)
    return arr.astype(np.uint8).transpose(1, 2, 0)


# ---------------------------------------------------------------------------
# Metrics (0-255 scale)
# ---------------------------------------------------------------------------


def rmse(a: np.ndarray, b: np.ndarray, region: np.ndarray | None = None) -> float:
    """Root mean squared difference over the region (or the full image)."""
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    diff = a.astype(np.float64) - b.astype(np.float64)
    if region is not None:
        if region.shape != a.shape[:2]:
            raise ValueError(
                f"region {region.shape} does not match image {a.shape[:2]}"
            )
        sel = region > 0
        if not sel.any():
            raise ValueError("empty metric region")
        diff = diff[sel]
    return float(np.sqrt(np.mean(diff**2)))


def psnr(rmse_value: float) -> float:
    """20*log10(255 / rmse); +inf for a perfect reconstruction."""
    if rmse_value < 0:
        raise ValueError("rmse must be >= 0")
    if rmse_value == 0:
        return math.inf
    return 20.0 * math.log10(255.0 / rmse_value)


# ---------------------------------------------------------------------------
# Manifests and dataset statistics
# ---------------------------------------------------------------------------


def load_manifest(path) -> list[Path]:
    """Newline-delimited image paths, relative to the manifest file.

    Blank lines and ``#`` comments are skipped; duplicates are rejected.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    base = path.parent
    entries: list[Path] = []
    seen = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if stripped in seen:
            raise DataError(f"{path}:{lineno}: duplicate entry {stripped!r}")
        seen.add(stripped)
        entry = Path(stripped)
        entries.append(entry if entry.is_absolute() else base / entry)
    if not entries:
        raise DataError(f"manifest {path} lists no images")
    return entries


def dataset_channel_means(
    paths: list[Path], limit: int | None = 512
) -> np.ndarray:
    """Per-channel mean in [0, 1] over (the first ``limit``) images."""
    subset = paths if limit is None else paths[:limit]
    if not subset:
        raise DataError("cannot compute channel means of an empty dataset")
    total = np.zeros(3, dtype=np.float64)
    count = 0
    for p in subset:
        img = load_image(p)
        total += img.reshape(-1, 3).mean(axis=0)
        count += 1
    return (total / (255.0 * count)).astype(np.float32)


# ---------------------------------------------------------------------------
# Procedural corpus (for smoke training and self-contained benchmarks)
# ---------------------------------------------------------------------------


def make_synthetic_image(size: int, rng: np.random.Generator) -> np.ndarray:
    """Smoothly structured random image: gradient base plus soft discs."""
    yy, xx = np.meshgrid(
        np.linspace(0.0, 1.0, size), np.linspace(0.0, 1.0, size), indexing="ij"
    )
    angle = rng.uniform(0.0, 2.0 * np.pi)
    ramp = (np.cos(angle) * xx + np.sin(angle) * yy + 1.0) / 2.0
    c0 = rng.uniform(0.0, 1.0, size=3)
    c1 = rng.uniform(0.0, 1.0, size=3)
    img = ramp[:, :, None] * c1 + (1.0 - ramp[:, :, None]) * c0
    for _ in range(int(rng.integers(1, 4))):
        cy, cx = rng.uniform(0.1, 0.9, size=2)
        radius = rng.uniform(0.08, 0.3)
        colour = rng.uniform(0.0, 1.0, size=3)
        dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        blend = np.clip((radius - dist) / (0.25 * radius), 0.0, 1.0)
        img = blend[:, :, None] * colour + (1.0 - blend[:, :, None]) * img
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def write_synthetic_corpus(
    out_dir, count: int, size: int, seed: int
) -> Path:
    """Write ``count`` synthetic PPM images plus a manifest; returns its path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        name = f"synth_{i:05d}.ppm"
        save_image(make_synthetic_image(size, rng), out_dir / name)
        names.append(name)
    manifest = out_dir / "manifest.txt"
    manifest.write_text("".join(n + "\n" for n in names), encoding="utf-8")
    return manifest
