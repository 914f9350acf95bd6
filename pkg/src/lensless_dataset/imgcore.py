"""Image container, crop windows, resampling and PNG/PFM file I/O.

All samples are float64 in a ``(height, width, channels)`` array.  Pixel
``(r, c)`` covers the continuous square ``[c, c+1) x [r, r+1)`` so its centre
sits at ``(c + 0.5, r + 0.5)``; every resampling routine in the package uses
this convention.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import png

from . import _kernels
from .errors import (
    CorruptHeaderError,
    ShapeError,
    UnreadableFileError,
    UnsupportedFormatError,
)

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


@dataclass(frozen=True, eq=False)
class Image:
    """Immutable float raster.

    ``data`` is copied on construction and made read-only, so callers can
    never alias an Image's samples.  2-D input is promoted to one channel.
    """

    data: np.ndarray
    bit_depth_hint: int | str = "float"
    pixel_pitch: float | None = None

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64, copy=True)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[2] not in (1, 3):
            raise ShapeError(f"expected (H, W), (H, W, 1) or (H, W, 3), got {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ShapeError("image must be non-empty")
        if not np.all(np.isfinite(arr)):
            raise ValueError("image samples must be finite")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[0], self.data.shape[1]

    def plane(self, c: int = 0) -> np.ndarray:
        return self.data[:, :, c]

    def gray(self) -> np.ndarray:
        """Channel mean as a writable 2-D array."""
        return self.data.mean(axis=2)

    def array(self) -> np.ndarray:
        """Writable copy of the samples."""
        return self.data.copy()

    def with_data(self, data) -> "Image":
        return dataclasses.replace(self, data=data)

    def __eq__(self, other):
        if not isinstance(other, Image):
            return NotImplemented
        return self.data.shape == other.data.shape and bool(np.array_equal(self.data, other.data))

    __hash__ = None


@dataclass(frozen=True)
class PixelGrid:
    """Rectangular window: top-left offset plus shape, in whole pixels."""

    row: int
    col: int
    rows: int
    cols: int

    def __post_init__(self):
        if self.rows <= 0 or self.cols <= 0:
            raise ShapeError(f"window shape must be positive, got {self.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.rows, self.cols

    @property
    def offset(self) -> tuple[int, int]:
        return self.row, self.col

    @classmethod
    def full(cls, shape) -> "PixelGrid":
        return cls(0, 0, int(shape[0]), int(shape[1]))

    @classmethod
    def centered(cls, parent_shape, shape) -> "PixelGrid":
        """Window of ``shape`` centred in ``parent_shape`` (offset rounds down)."""
        rows, cols = int(shape[0]), int(shape[1])
        return cls((int(parent_shape[0]) - rows) // 2, (int(parent_shape[1]) - cols) // 2, rows, cols)

    def fits(self, parent_shape) -> bool:
        return (
            self.row >= 0
            and self.col >= 0
            and self.row + self.rows <= parent_shape[0]
            and self.col + self.cols <= parent_shape[1]
        )

    def slices(self) -> tuple[slice, slice]:
        return slice(self.row, self.row + self.rows), slice(self.col, self.col + self.cols)

    def to_dict(self) -> dict:
        return {"row": self.row, "col": self.col, "rows": self.rows, "cols": self.cols}

    @classmethod
    def from_dict(cls, d) -> "PixelGrid":
        return cls(int(d["row"]), int(d["col"]), int(d["rows"]), int(d["cols"]))


def as_image(x) -> Image:
    return x if isinstance(x, Image) else Image(x)


def crop(img: Image, window: PixelGrid) -> Image:
    """Exact sub-raster; raises ShapeError if the window leaves the image."""
    if not window.fits(img.shape):
        raise ShapeError(f"window {window} does not fit image of shape {img.shape}")
    rs, cs = window.slices()
    return img.with_data(img.data[rs, cs])


def embed(img: Image, window: PixelGrid, parent_shape) -> Image:
    """Zero canvas of ``parent_shape`` with ``img`` placed at ``window``."""
    if window.shape != img.shape:
        raise ShapeError(f"image shape {img.shape} != window shape {window.shape}")
    if not window.fits(parent_shape):
        raise ShapeError(f"window {window} does not fit parent {tuple(parent_shape)}")
    out = np.zeros((int(parent_shape[0]), int(parent_shape[1]), img.channels))
    rs, cs = window.slices()
    out[rs, cs] = img.data
    return img.with_data(out)


def center_crop(img: Image, shape) -> Image:
    return crop(img, PixelGrid.centered(img.shape, shape))


def resample_bilinear(img: Image, new_shape) -> Image:
    """Bilinear resize with half-pixel-centred sampling and edge clamping."""
    oh, ow = int(new_shape[0]), int(new_shape[1])
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"new shape must be positive, got {new_shape}")
    h, w = img.shape
    ys = np.clip((np.arange(oh) + 0.5) * (h / oh) - 0.5, 0.0, h - 1.0)
    xs = np.clip((np.arange(ow) + 0.5) * (w / ow) - 0.5, 0.0, w - 1.0)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    vals, _ = _kernels.bilinear_sample(img.data, xx, yy)
    return img.with_data(vals.reshape(oh, ow, img.channels))


# ---------------------------------------------------------------------------
# file I/O


def load_image(path) -> Image:
    """Read an 8/16-bit PNG (scaled to [0, 1]) or a PFM (verbatim)."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise UnreadableFileError(f"cannot read {path}: {exc}") from exc
    if raw.startswith(PNG_SIGNATURE):
        return _read_png(raw, path)
    if raw[:2] in (b"PF", b"Pf"):
        return _read_pfm(raw, path)
    raise UnsupportedFormatError(f"{path}: not a PNG or PFM file")


def save_image(img: Image, path, format: str = "pfm") -> None:
    """Write ``img`` as ``png8``, ``png16`` or ``pfm``.

    PNG samples are clamped to [0, 1] and quantized round-half-up.  PFM
    stores float32, little-endian, bottom-to-top rows.
    """
    data = img.data
    if np.isnan(data).any():
        raise ValueError("refusing to save NaN samples")
    path = Path(path)
    if format == "pfm":
        payload = _encode_pfm(data)
        with open(path, "wb") as fh:
            fh.write(payload)
    elif format in ("png8", "png16"):
        bits = 8 if format == "png8" else 16
        q = quantize_unit(data, bits)
        h, w, nc = q.shape
        writer = png.Writer(w, h, greyscale=(nc == 1), bitdepth=bits)
        with open(path, "wb") as fh:
            writer.write_array(fh, q.reshape(-1))
    else:
        raise ValueError(f"unknown format {format!r}")


def quantize_unit(data: np.ndarray, bits: int) -> np.ndarray:
    full = (1 << bits) - 1
    q = np.floor(np.clip(data, 0.0, 1.0) * full + 0.5)
    return q.astype(np.uint16 if bits > 8 else np.uint8)


def _read_png(raw: bytes, path: Path) -> Image:
    try:
        w, h, rows, info = png.Reader(bytes=raw).asDirect()
        arr = np.vstack([np.asarray(r, dtype=np.float64) for r in rows])
    except png.FormatError as exc:
        raise CorruptHeaderError(f"{path}: {exc}") from exc
    except png.Error as exc:
        raise CorruptHeaderError(f"{path}: {exc}") from exc
    bits = info["bitdepth"]
    if bits not in (8, 16):
        raise UnsupportedFormatError(f"{path}: {bits}-bit PNG is not supported")
    planes = info["planes"]
    arr = arr.reshape(h, w, planes)
    if info.get("alpha"):
        arr = arr[:, :, :-1]
    return Image(arr / float((1 << bits) - 1), bit_depth_hint=bits)


def _encode_pfm(data: np.ndarray) -> bytes:
    h, w, nc = data.shape
    tag = b"PF" if nc == 3 else b"Pf"
    header = tag + b"\n" + f"{w} {h}\n".encode() + b"-1.0\n"
    body = np.ascontiguousarray(data[::-1].astype("<f4"))
    return header + body.tobytes()


def _read_pfm(raw: bytes, path: Path) -> Image:
    # header: tag, width, height, scale as whitespace-separated tokens
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise CorruptHeaderError(f"{path}: truncated PFM header")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace byte ends the header
    tag = tokens[0]
    if tag not in (b"PF", b"Pf"):
        raise CorruptHeaderError(f"{path}: bad PFM identifier {tag!r}")
    try:
        w, h, scale = int(tokens[1]), int(tokens[2]), float(tokens[3])
    except ValueError as exc:
        raise CorruptHeaderError(f"{path}: bad PFM header values") from exc
    if w <= 0 or h <= 0 or scale == 0.0:
        raise CorruptHeaderError(f"{path}: bad PFM dimensions or scale")
    nc = 3 if tag == b"PF" else 1
    count = w * h * nc
    dtype = "<f4" if scale < 0 else ">f4"
    if len(raw) - pos < 4 * count:
        raise CorruptHeaderError(f"{path}: PFM payload truncated")
    arr = np.frombuffer(raw, dtype=dtype, count=count, offset=pos).astype(np.float64)
    return Image(arr.reshape(h, w, nc)[::-1], bit_depth_hint="float")
