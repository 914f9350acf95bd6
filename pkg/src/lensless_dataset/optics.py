"""Lensless forward model: PSF convolution, sensor crop, noise and clipping.

The measurement of a scene ``x`` through a PSF ``h`` is
``crop(x * h, sensor_window)`` where ``*`` is full linear convolution, so the
sensor window is expressed in the coordinates of the full convolution output
(shape ``scene + psf - 1``).
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.fft as sfft

from .errors import LenslessError, ShapeError
from .imgcore import Image, PixelGrid, as_image, crop, load_image, save_image

NORMALIZATIONS = ("unit_sum", "unit_energy", "raw")


@dataclass(frozen=True)
class PointSpreadFunction:
    image: Image
    normalization: str = "raw"
    label: str = "psf"
    support_shape: tuple[int, int] | None = None

    def __post_init__(self):
        img = as_image(self.image)
        if np.any(img.data < 0):
            raise ValueError("PSF samples must be non-negative")
        if self.normalization not in NORMALIZATIONS:
            raise ValueError(f"unknown normalization {self.normalization!r}")
        object.__setattr__(self, "image", img)
        if self.support_shape is None:
            object.__setattr__(self, "support_shape", _support_shape(img.data))
        else:
            object.__setattr__(self, "support_shape", tuple(int(v) for v in self.support_shape))

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape

    @property
    def data(self) -> np.ndarray:
        return self.image.data

    def normalized(self, mode: str = "unit_sum") -> "PointSpreadFunction":
        return normalize(self, mode)

    def scaled(self, c: float) -> "PointSpreadFunction":
        return dataclasses.replace(self, image=self.image.with_data(self.data * c), normalization="raw")


def _support_shape(data):
    nz = np.argwhere(data.sum(axis=2) > 0)
    if nz.size == 0:
        return (0, 0)
    lo, hi = nz.min(axis=0), nz.max(axis=0)
    return int(hi[0] - lo[0] + 1), int(hi[1] - lo[1] + 1)


def make_psf(data, label="psf", normalization="unit_sum") -> PointSpreadFunction:
    """Build a PSF from raw samples and normalize it."""
    return normalize(PointSpreadFunction(Image(data), "raw", label), normalization)


def normalize(psf: PointSpreadFunction, mode: str = "unit_sum") -> PointSpreadFunction:
    """Rescale per channel to unit sum or unit energy; ``raw`` is a no-op."""
    data = psf.image.array()
    if mode == "unit_sum":
        norm = data.sum(axis=(0, 1), keepdims=True)
    elif mode == "unit_energy":
        norm = np.sqrt((data**2).sum(axis=(0, 1), keepdims=True))
    elif mode == "raw":
        return dataclasses.replace(psf, normalization="raw")
    else:
        raise ValueError(f"unknown normalization {mode!r}")
    if np.any(norm <= 0):
        raise ValueError("cannot normalize a PSF channel that is identically zero")
    return dataclasses.replace(psf, image=psf.image.with_data(data / norm), normalization=mode)


@dataclass(frozen=True)
class SensorModel:
    full_well_fraction: float = 1.0
    read_noise_sigma: float = 0.002
    shot_noise_scale: float = 10000.0
    bit_depth: int = 12
    quantize: bool = True

    def __post_init__(self):
        if self.full_well_fraction <= 0:
            raise ValueError("full_well_fraction must be positive")
        if self.read_noise_sigma < 0 or self.shot_noise_scale < 0:
            raise ValueError("noise parameters must be non-negative")
        if not 8 <= self.bit_depth <= 16:
            raise ValueError("bit_depth must be in [8, 16]")

    @classmethod
    def noiseless(cls, full_well_fraction=1.0) -> "SensorModel":
        return cls(full_well_fraction, 0.0, 0.0, 16, False)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d) -> "SensorModel":
        return cls(**d)


@dataclass(frozen=True)
class Measurement:
    image: Image
    camera_id: str = ""
    exposure_scale: float = 1.0
    saturated_fraction: float = 0.0
    trigger_time_ms: int = 0
    source_image_id: str = ""


# ---------------------------------------------------------------------------
# convolution operator


def fft_shape(shape) -> tuple[int, int]:
    """Smallest 2,3,5-smooth sizes covering ``shape``."""
    return tuple(int(sfft.next_fast_len(int(n), real=True)) for n in shape)


class ConvolutionOperator:
    """Cropped linear convolution ``A`` and its adjoint on raw arrays.

    ``forward`` maps ``scene_shape + (C,)`` arrays to ``window.shape + (C,)``;
    ``adjoint`` goes back.  The PSF spectrum is computed once.
    """

    def __init__(self, psf: PointSpreadFunction, sensor_window: PixelGrid, scene_shape):
        self.psf = psf
        self.window = sensor_window
        self.scene_shape = (int(scene_shape[0]), int(scene_shape[1]))
        if min(self.scene_shape) < 1:
            raise ShapeError("scene shape must be positive")
        ph, pw = psf.shape
        self.full_shape = (self.scene_shape[0] + ph - 1, self.scene_shape[1] + pw - 1)
        if not sensor_window.fits(self.full_shape):
            raise ShapeError(f"sensor window {sensor_window} outside convolution extent {self.full_shape}")
        self.nfft = fft_shape(self.full_shape)
        self._H = sfft.rfft2(psf.data, s=self.nfft, axes=(0, 1))

    def _spectrum_for(self, nc):
        if self._H.shape[2] == nc or self._H.shape[2] == 1:
            return self._H
        raise ShapeError(f"PSF has {self._H.shape[2]} channels, signal has {nc}")

    def full(self, x: np.ndarray) -> np.ndarray:
        X = sfft.rfft2(x, s=self.nfft, axes=(0, 1))
        out = sfft.irfft2(X * self._spectrum_for(x.shape[2]), s=self.nfft, axes=(0, 1))
        return out[: self.full_shape[0], : self.full_shape[1]]

    def forward(self, x: np.ndarray) -> np.ndarray:
        rs, cs = self.window.slices()
        return self.full(x)[rs, cs]

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        if y.shape[:2] != self.window.shape:
            raise ShapeError(f"residual shape {y.shape[:2]} != sensor window {self.window.shape}")
        padded = np.zeros(self.full_shape + (y.shape[2],))
        rs, cs = self.window.slices()
        padded[rs, cs] = y
        Y = sfft.rfft2(padded, s=self.nfft, axes=(0, 1))
        out = sfft.irfft2(Y * np.conj(self._spectrum_for(y.shape[2])), s=self.nfft, axes=(0, 1))
        return out[: self.scene_shape[0], : self.scene_shape[1]]

    def output_channels(self, nc: int) -> int:
        return max(nc, self._H.shape[2])


def _check_compatible(scene: Image, psf: PointSpreadFunction):
    if psf.image.channels not in (1, scene.channels):
        raise ShapeError(f"PSF with {psf.image.channels} channels cannot act on a {scene.channels}-channel scene")


def convolve_linear(scene: Image, psf: PointSpreadFunction) -> Image:
    """Full (non-circular) 2-D convolution via zero-padded FFTs.

    Output shape is ``scene + psf - 1``.  When both inputs are non-negative,
    round-off negatives no smaller than -1e-9 are set to zero.
    """
    _check_compatible(scene, psf)
    op = ConvolutionOperator(psf, PixelGrid.full((1, 1)), scene.shape)
    out = op.full(scene.data)
    if scene.data.min() >= 0:
        out[(out < 0) & (out >= -1e-9)] = 0.0
    return scene.with_data(out)


def forward(scene: Image, psf: PointSpreadFunction, sensor_window: PixelGrid) -> Image:
    """Sensor image of ``scene``: the linear convolution cropped to the window."""
    return crop(convolve_linear(scene, psf), sensor_window)


def adjoint(residual: Image, psf: PointSpreadFunction, sensor_window: PixelGrid, scene_shape) -> Image:
    """Transpose of :func:`forward`: zero-embed, then correlate with the PSF."""
    op = ConvolutionOperator(psf, sensor_window, scene_shape)
    return residual.with_data(op.adjoint(residual.data))


def default_sensor_window(scene_shape, psf_shape, sensor_shape=None) -> PixelGrid:
    """Centred window of ``sensor_shape`` (default: scene shape) in the full extent."""
    full = (scene_shape[0] + psf_shape[0] - 1, scene_shape[1] + psf_shape[1] - 1)
    return PixelGrid.centered(full, sensor_shape if sensor_shape is not None else scene_shape)


# ---------------------------------------------------------------------------
# sensor


def sense(ideal: Image, sensor: SensorModel, exposure_scale: float = 1.0, rng_seed: int = 0, **meta) -> Measurement:
    """Scale, add shot and read noise, clip to the full well, then quantize.

    Shot noise is ``Poisson(v * shot_noise_scale) / shot_noise_scale``.  The
    output is a deterministic function of ``rng_seed``.
    """
    data = ideal.data
    if data.min() < 0:
        raise ValueError("ideal sensor image must be non-negative")
    if exposure_scale <= 0:
        raise ValueError("exposure_scale must be positive")
    rng = np.random.default_rng(rng_seed)
    v = data * exposure_scale
    if sensor.shot_noise_scale > 0:
        v = rng.poisson(v * sensor.shot_noise_scale) / sensor.shot_noise_scale
    if sensor.read_noise_sigma > 0:
        v = v + rng.normal(0.0, sensor.read_noise_sigma, size=v.shape)
    fw = sensor.full_well_fraction
    v = np.clip(v, 0.0, fw)
    if sensor.quantize:
        levels = (1 << sensor.bit_depth) - 1
        v = np.floor(v / fw * levels + 0.5) / levels * fw
    saturated = float(np.count_nonzero(v >= fw)) / v.size
    return Measurement(
        image=ideal.with_data(v),
        exposure_scale=float(exposure_scale),
        saturated_fraction=saturated,
        **meta,
    )


# ---------------------------------------------------------------------------
# PSF files and synthetic PSFs


def save_psf(psf: PointSpreadFunction, path) -> Path:
    """Write ``<path>.pfm`` plus a JSON sidecar next to it."""
    path = Path(path).with_suffix(".pfm")
    save_image(psf.image, path, "pfm")
    sidecar = {
        "label": psf.label,
        "normalization": psf.normalization,
        "support_shape": list(psf.support_shape),
        "shape": list(psf.shape),
        "channels": psf.image.channels,
        "pixel_pitch": psf.image.pixel_pitch,
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return path


def load_psf(path) -> PointSpreadFunction:
    path = Path(path)
    img = load_image(path)
    meta = {}
    sidecar = path.with_suffix(".json")
    if sidecar.exists():
        meta = json.loads(sidecar.read_text())
    if np.any(img.data < 0):
        raise LenslessError(f"{path}: PSF contains negative samples")
    return PointSpreadFunction(
        dataclasses.replace(img, pixel_pitch=meta.get("pixel_pitch")),
        meta.get("normalization", "raw"),
        meta.get("label", path.stem),
        meta.get("support_shape"),
    )


def _render_spots(size, centers, weights, sigma):
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    out = np.zeros((size, size))
    for (cy, cx), wgt in zip(centers, weights):
        out += wgt * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma**2))
    return out


def synthetic_psf(kind: str, size: int = 64, seed: int = 0, **kw) -> PointSpreadFunction:
    """Synthetic unit-sum PSFs for simulation.

    ``diffuser``: many overlapping Gaussian blobs inside a round aperture.
    ``lenslet``: a handful of near-point foci (multi-impulse).
    ``gaussian``: one centred Gaussian of width ``sigma``.
    ``delta``: a single centred pixel.
    """
    rng = np.random.default_rng(seed)
    if kind == "delta":
        data = np.zeros((size, size))
        data[size // 2, size // 2] = 1.0
    elif kind == "gaussian":
        c = size / 2.0
        data = _render_spots(size, [(c, c)], [1.0], kw.get("sigma", size / 8.0))
    elif kind in ("diffuser", "lenslet"):
        n = kw.get("count", 40 if kind == "diffuser" else 12)
        sigma = kw.get("sigma", 1.5 if kind == "diffuser" else 0.5)
        radius = kw.get("aperture", 0.45) * size
        r = radius * np.sqrt(rng.uniform(0.0, 1.0, n))
        t = rng.uniform(0.0, 2.0 * np.pi, n)
        centers = np.stack([size / 2.0 + r * np.sin(t), size / 2.0 + r * np.cos(t)], axis=1)
        weights = rng.uniform(0.5, 1.0, n)
        data = _render_spots(size, centers, weights, sigma)
        data[data < 1e-12 * data.max()] = 0.0
    else:
        raise ValueError(f"unknown synthetic PSF kind {kind!r}")
    return make_psf(data, label=kw.get("label", kind))
