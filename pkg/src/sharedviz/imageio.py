"""Portable pixmap I/O, resizing, overlays, and saliency output files.

Images live in memory as ``3 x h x w`` float64 arrays in [0, 1].
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import BadMagicError, FormatError, ShapeError, TruncatedError, UnsupportedMaxvalError

WARM = np.array([1.0, 0.25, 0.0])
LUMA = np.array([0.299, 0.587, 0.114])


def _read_header(raw: bytes, magic: bytes, path, fields: int):
    if raw[:2] != magic:
        raise BadMagicError(f"{path}: expected {magic.decode()} magic, found {raw[:2]!r}")
    values, pos = [], 2
    while len(values) < fields:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and raw[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise TruncatedError(f"{path}: header ends before all {fields} fields were read")
        values.append(int(raw[start:pos]))
    if pos >= len(raw) or not raw[pos : pos + 1].isspace():
        raise TruncatedError(f"{path}: missing whitespace between header and pixel data")
    return values, pos + 1


def decode_ppm(raw: bytes, path="<bytes>") -> np.ndarray:
    (width, height, maxval), start = _read_header(raw, b"P6", path, 3)
    if width < 1 or height < 1:
        raise FormatError(f"{path}: image dimensions must be positive, got {width}x{height}")
    if not 1 <= maxval <= 255:
        raise UnsupportedMaxvalError(f"{path}: only 8-bit pixmaps are supported (maxval {maxval})")
    need = width * height * 3
    data = raw[start : start + need]
    if len(data) < need:
        raise TruncatedError(f"{path}: expected {need} pixel bytes, found {len(data)}")
    pixels = np.frombuffer(data, dtype=np.uint8).reshape(height, width, 3)
    return np.ascontiguousarray(pixels.transpose(2, 0, 1), dtype=np.float64) / maxval


def encode_ppm(image) -> bytes:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ShapeError(f"expected a 3 x h x w image, got shape {img.shape}")
    _, h, w = img.shape
    pixels = np.rint(np.clip(img, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    return f"P6\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def encode_pgm(plane) -> bytes:
    plane = np.asarray(plane, dtype=np.float64)
    h, w = plane.shape
    pixels = np.rint(np.clip(plane, 0, 1) * 255).astype(np.uint8)
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def decode_pgm(raw: bytes, path="<bytes>") -> np.ndarray:
    (width, height, maxval), start = _read_header(raw, b"P5", path, 3)
    if not 1 <= maxval <= 255:
        raise UnsupportedMaxvalError(f"{path}: only 8-bit graymaps are supported (maxval {maxval})")
    data = raw[start : start + width * height]
    if len(data) < width * height:
        raise TruncatedError(f"{path}: expected {width * height} pixel bytes, found {len(data)}")
    return np.frombuffer(data, dtype=np.uint8).reshape(height, width).astype(np.float64) / maxval


def save_ppm(image, path) -> None:
    Path(path).write_bytes(encode_ppm(image))


def resize_bilinear(image, size: int) -> np.ndarray:
    """Resize to ``size x size`` with half-pixel centres and edge clamping."""
    img = np.asarray(image, dtype=np.float64)

    def axis_weights(n_in: int, n_out: int):
        src = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
        i0 = np.floor(src).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, src - i0

    y0, y1, fy = axis_weights(img.shape[1], size)
    rows = img[:, y0, :] * (1 - fy)[None, :, None] + img[:, y1, :] * fy[None, :, None]
    x0, x1, fx = axis_weights(img.shape[2], size)
    return rows[:, :, x0] * (1 - fx)[None, None, :] + rows[:, :, x1] * fx[None, None, :]


def load_image(path, size: int | None = 224) -> np.ndarray:
    """Decode an 8-bit P6 pixmap to ``3 x h x w`` in [0, 1], resized to ``size`` unless None."""
    img = decode_ppm(Path(path).read_bytes(), path)
    if size is not None and img.shape[1:] != (size, size):
        img = resize_bilinear(img, size)
    return img


def load_image_list(path) -> list[tuple[str, Path]]:
    """Stimuli from a directory of ``.ppm`` files or a ``id<TAB>path[...]`` list file."""
    path = Path(path)
    if path.is_dir():
        return [(p.stem, p) for p in sorted(path.glob("*.ppm"))]
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            cols = line.split("\t")
            if len(cols) < 2:
                raise FormatError(f"{path}:{lineno}: expected at least id and path columns")
            out.append((cols[0], path.parent / cols[1]))
    return out


def grayscale(image) -> np.ndarray:
    return np.tensordot(LUMA, np.asarray(image, dtype=np.float64), axes=(0, 0))


def overlay_pixels(image, values) -> np.ndarray:
    """Blend a black-to-warm heat map of ``|values| / max`` over the image's grayscale."""
    image = np.asarray(image, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if values.shape != image.shape[1:]:
        raise ShapeError(f"saliency map {values.shape} does not match image {image.shape[1:]}")
    mag = np.abs(values)
    peak = mag.max() if mag.size else 0.0
    t = mag / peak if peak > 0 else np.zeros_like(mag)
    gray = grayscale(image)
    return (1 - t)[None] * gray[None] + t[None] * WARM[:, None, None]


def render_overlay(image, smap, path) -> None:
    save_ppm(overlay_pixels(image, smap.values), path)


def magnitude_plane(values) -> np.ndarray:
    mag = np.abs(np.asarray(values, dtype=np.float64))
    peak = mag.max() if mag.size else 0.0
    return mag / peak if peak > 0 else mag


def saliency_report(smap, beta, top: int = 10) -> str:
    order = np.argsort(-beta, kind="stable")[:top]
    lines = [
        f"image_id={smap.image_id}",
        f"similarity={smap.bound!r}",
        f"l2_norm={smap.l2_norm!r}",
        f"bound_ok={'true' if smap.l2_norm <= smap.bound + 1e-9 else 'false'}",
    ]
    lines += [f"beta.{rank}={int(i)}:{float(beta[i])!r}" for rank, i in enumerate(order)]
    return "\n".join(lines) + "\n"


def write_saliency_outputs(out_dir, stem: str, image, smap, beta) -> list[Path]:
    """Write ``stem.pgm`` (|I| scaled to the max), ``stem.overlay.ppm`` and ``stem.txt``."""
    out_dir = Path(out_dir)
    files = {
        out_dir / f"{stem}.pgm": encode_pgm(magnitude_plane(smap.values)),
        out_dir / f"{stem}.overlay.ppm": encode_ppm(overlay_pixels(image, smap.values)),
        out_dir / f"{stem}.txt": saliency_report(smap, beta).encode("utf-8"),
    }
    for p, data in files.items():
        p.write_bytes(data)
    return list(files)
