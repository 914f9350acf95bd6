"""FISTA for non-negative least squares through the lensless forward model."""
from __future__ import annotations

import csv
import dataclasses
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ShapeError, SolverError
from .imgcore import Image, PixelGrid, as_image
from .optics import ConvolutionOperator, Measurement, PointSpreadFunction, default_sensor_window

AUTO_STEP = "auto_power_iteration"


@dataclass(frozen=True)
class SolverConfig:
    max_iterations: int = 200
    step_size: str | float = AUTO_STEP
    prox: str = "nonnegativity"
    tolerance: float = 0.0
    record_history: bool = True
    power_iterations: int = 50
    step_safety: float = 0.95

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.step_size != AUTO_STEP and not (isinstance(self.step_size, (int, float)) and self.step_size > 0):
            raise ValueError("fixed step size must be a positive number")
        if self.prox not in ("nonnegativity", "identity"):
            raise ValueError(f"unknown prox {self.prox!r}")
        if self.tolerance < 0:
            raise ValueError("tolerance must be non-negative")

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SolverConfig":
        return cls(**json.loads(text))


@dataclass
class SolverResult:
    estimate: Image
    objective_history: list[float] = field(default_factory=list)
    iterations_run: int = 0
    lipschitz_estimate: float = float("nan")
    step: float = float("nan")

    def write_history_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "objective"])
            for k, v in enumerate(self.objective_history, start=1):
                w.writerow([k, repr(float(v))])


def read_history_csv(path) -> list[float]:
    with open(path, newline="") as fh:
        return [float(row["objective"]) for row in csv.DictReader(fh)]


def build_operator(psf, measurement_shape, scene_shape=None, sensor_window=None) -> ConvolutionOperator:
    """Operator for a measurement of ``measurement_shape``.

    The scene grid defaults to the full-convolution extent of the sensor
    (sensor + psf - 1) and the sensor window is centred in the extent of the
    scene grid.
    """
    ph, pw = psf.shape
    if scene_shape is None:
        scene_shape = (measurement_shape[0] + ph - 1, measurement_shape[1] + pw - 1)
    if sensor_window is None:
        sensor_window = default_sensor_window(scene_shape, psf.shape, measurement_shape)
    if sensor_window.shape != tuple(measurement_shape[:2]):
        raise ShapeError(f"measurement shape {tuple(measurement_shape[:2])} != sensor window {sensor_window.shape}")
    return ConvolutionOperator(psf, sensor_window, scene_shape)


def least_squares_objective(op: ConvolutionOperator, x: np.ndarray, b: np.ndarray) -> float:
    r = op.forward(x) - b
    return 0.5 * float(np.vdot(r, r))


def least_squares_gradient(op: ConvolutionOperator, x: np.ndarray, b: np.ndarray) -> np.ndarray:
    return op.adjoint(op.forward(x) - b)


def _power_iteration(op: ConvolutionOperator, nc: int, iters: int):
    v = np.ones(op.scene_shape + (nc,))
    v /= np.linalg.norm(v)
    trace = []
    for _ in range(iters):
        av = op.forward(v)
        trace.append(float(np.vdot(av, av)))
        w = op.adjoint(av)
        norm = np.linalg.norm(w)
        if norm == 0 or not np.isfinite(norm):
            raise SolverError("power iteration collapsed; is the PSF zero inside the sensor window?")
        v = w / norm
    return trace


def estimate_lipschitz(
    psf: PointSpreadFunction,
    sensor_window: PixelGrid,
    scene_shape,
    iters: int = 50,
    return_trace: bool = False,
):
    """Largest eigenvalue of ``A^T A`` by power iteration.

    Starts from the normalized all-ones vector and reports the Rayleigh
    quotient ``||A v||^2`` of the last iterate, which never decreases from one
    iteration to the next.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if not np.any(psf.data > 0):
        raise SolverError("zero PSF has no Lipschitz constant")
    op = ConvolutionOperator(psf, sensor_window, scene_shape)
    trace = _power_iteration(op, psf.image.channels, iters)
    return (trace[-1], trace) if return_trace else trace[-1]


def _as_array(measurement):
    if isinstance(measurement, Measurement):
        return measurement.image.data
    return as_image(measurement).data


def fista(
    measurement,
    psf: PointSpreadFunction,
    config: SolverConfig = SolverConfig(),
    scene_shape=None,
    sensor_window: PixelGrid | None = None,
    callback=None,
) -> SolverResult:
    """Accelerated projected gradient on ``0.5 * ||A x - b||^2``.

    Starts from ``x = 0``.  ``callback(k, x)`` sees every iterate.  Raises
    SolverError when iterates stop being finite, which means the step is too
    large for the operator.
    """
    b = _as_array(measurement)
    op = build_operator(psf, b.shape, scene_shape, sensor_window)
    nc = op.output_channels(b.shape[2])
    if b.shape[2] != nc:
        b = np.broadcast_to(b, b.shape[:2] + (nc,))

    if config.step_size == AUTO_STEP:
        lip = _power_iteration(op, psf.image.channels, config.power_iterations)[-1]
        if lip <= 0:
            raise SolverError("zero PSF inside the sensor window")
        step = config.step_safety / lip
    else:
        lip = float("nan")
        step = float(config.step_size)

    nonneg = config.prox == "nonnegativity"
    x = np.zeros(op.scene_shape + (nc,))
    ax = np.zeros(b.shape)
    y, ay = x, ax
    t = 1.0
    history = []
    prev = None
    k = 0
    for k in range(1, config.max_iterations + 1):
        x_new = y - step * op.adjoint(ay - b)
        if nonneg:
            np.maximum(x_new, 0.0, out=x_new)
        ax_new = op.forward(x_new)
        r = ax_new - b
        obj = 0.5 * float(np.vdot(r, r))
        if not math.isfinite(obj):
            raise SolverError(f"non-finite objective at iteration {k}; step size {step:g} is too large")
        t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        beta = (t - 1.0) / t_new
        y = x_new + beta * (x_new - x)
        # A is linear, so A y follows from the two forward products already computed
        ay = ax_new + beta * (ax_new - ax)
        x, ax, t = x_new, ax_new, t_new
        if callback is not None:
            callback(k, x)
        if config.record_history:
            history.append(obj)
        if config.tolerance > 0 and prev is not None:
            if abs(prev - obj) <= config.tolerance * max(abs(prev), np.finfo(float).tiny):
                break
        prev = obj

    if isinstance(measurement, Measurement):
        est = measurement.image.with_data(x)
    else:
        est = Image(x)
    return SolverResult(est, history, k, lip, step)


def reconstruct_pair(
    measurements: dict,
    psfs: dict,
    config: SolverConfig = SolverConfig(),
    scene_shapes: dict | None = None,
    max_workers: int = 1,
) -> dict:
    """Independent :func:`fista` runs keyed by camera id.

    Threads may be used; results do not depend on ``max_workers``.
    """
    for cam in measurements:
        if cam not in psfs:
            raise KeyError(f"no PSF for camera {cam!r}")
    scene_shapes = scene_shapes or {}
    cams = list(measurements)

    def run(cam):
        return fista(measurements[cam], psfs[cam], config, scene_shapes.get(cam))

    if max_workers > 1 and len(cams) > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            results = list(pool.map(run, cams))
    else:
        results = [run(c) for c in cams]
    return dict(zip(cams, results))
