"""Radial-tangential lens distortion: model, image remaps and calibration."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares
from scipy.spatial.transform import Rotation

from .. import _kernels
from ..errors import ConvergenceError, DegenerateConfigurationError, GeometryError
from ..imgcore import Image, as_image
from .homography import Homography, apply_homography, estimate_homography_dlt

COEFFS = ("k1", "k2", "k3", "p1", "p2")


@dataclass(frozen=True)
class DistortionModel:
    fx: float
    fy: float
    cx: float
    cy: float
    k1: float = 0.0
    k2: float = 0.0
    k3: float = 0.0
    p1: float = 0.0
    p2: float = 0.0
    rms: float | None = None  # reprojection RMS (px) when produced by calibration

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    @classmethod
    def pinhole(cls, shape, focal=None, **coeffs) -> "DistortionModel":
        """Camera centred on an image of ``shape`` (rows, cols)."""
        h, w = shape
        f = float(focal if focal is not None else max(h, w))
        return cls(f, f, w / 2.0, h / 2.0, **coeffs)

    @property
    def coefficients(self) -> np.ndarray:
        return np.array([self.k1, self.k2, self.k3, self.p1, self.p2])

    def camera_matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def to_dict(self) -> dict:
        return {
            "focal": [self.fx, self.fy],
            "principal_point": [self.cx, self.cy],
            "radial": {"k1": self.k1, "k2": self.k2, "k3": self.k3},
            "tangential": {"p1": self.p1, "p2": self.p2},
            "rms_reprojection_px": self.rms,
        }

    @classmethod
    def from_dict(cls, d) -> "DistortionModel":
        return cls(
            d["focal"][0], d["focal"][1], d["principal_point"][0], d["principal_point"][1],
            d["radial"]["k1"], d["radial"]["k2"], d["radial"]["k3"],
            d["tangential"]["p1"], d["tangential"]["p2"], d.get("rms_reprojection_px"),
        )


def distort_normalized(points, model: DistortionModel) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    x, y = p[:, 0], p[:, 1]
    r2 = x * x + y * y
    radial = 1.0 + r2 * (model.k1 + r2 * (model.k2 + r2 * model.k3))
    xd = x * radial + 2.0 * model.p1 * x * y + model.p2 * (r2 + 2.0 * x * x)
    yd = y * radial + model.p1 * (r2 + 2.0 * y * y) + 2.0 * model.p2 * x * y
    return np.stack([xd, yd], axis=1)


def distort(points, model: DistortionModel) -> np.ndarray:
    """Normalized image coordinates to distorted pixel coordinates."""
    d = distort_normalized(points, model)
    return np.stack([model.fx * d[:, 0] + model.cx, model.fy * d[:, 1] + model.cy], axis=1)


def undistort_points(pixels, model: DistortionModel, max_iter: int = 20, tol: float = 1e-9) -> np.ndarray:
    """Distorted pixels to undistorted normalized coordinates (Newton)."""
    p = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    xd = (p[:, 0] - model.cx) / model.fx
    yd = (p[:, 1] - model.cy) / model.fy
    x, y, ok = _kernels.undistort_normalized(xd, yd, model.k1, model.k2, model.k3, model.p1, model.p2, max_iter, tol)
    if not np.all(ok):
        bad = int(np.argmin(ok))
        raise ConvergenceError(f"Newton undistortion diverged at pixel ({p[bad, 0]:.3f}, {p[bad, 1]:.3f})")
    return np.stack([x, y], axis=1)


def _pixel_centres(shape):
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w]
    return np.stack([xs.ravel() + 0.5, ys.ravel() + 0.5], axis=1)


def undistort_image(img, model: DistortionModel, output_model: DistortionModel | None = None, out_shape=None) -> Image:
    """Remove lens distortion.

    Each output pixel is an ideal pinhole pixel of ``output_model`` (default:
    same intrinsics, no distortion); it samples the input at the pixel where
    the lens maps that ray.  Samples falling outside the input are 0.
    """
    img = as_image(img)
    out_shape = img.shape if out_shape is None else tuple(out_shape)
    om = output_model or model
    p = _pixel_centres(out_shape)
    norm = np.stack([(p[:, 0] - om.cx) / om.fx, (p[:, 1] - om.cy) / om.fy], axis=1)
    src = distort(norm, model)
    vals, _ = _kernels.bilinear_sample(img.data, src[:, 0] - 0.5, src[:, 1] - 0.5)
    return img.with_data(vals.reshape(out_shape + (img.channels,)))


def distort_image(img, model: DistortionModel, plane_to_pinhole: Homography | None = None, out_shape=None) -> Image:
    """Render what a distorting lens records of a flat source image.

    Each output pixel is undistorted by Newton iteration to its pinhole
    pixel, mapped back through ``plane_to_pinhole`` (source image to ideal
    pinhole pixels, default identity) and sampled bilinearly.  Raises
    ConvergenceError naming the first pixel where Newton fails.
    """
    img = as_image(img)
    out_shape = img.shape if out_shape is None else tuple(out_shape)
    p = _pixel_centres(out_shape)
    und = undistort_points(p, model)
    pin = np.stack([model.fx * und[:, 0] + model.cx, model.fy * und[:, 1] + model.cy], axis=1)
    if plane_to_pinhole is not None:
        pin = apply_homography(np.linalg.inv(plane_to_pinhole.matrix), pin)
    vals, _ = _kernels.bilinear_sample(img.data, pin[:, 0] - 0.5, pin[:, 1] - 0.5)
    return img.with_data(vals.reshape(out_shape + (img.channels,)))


# ---------------------------------------------------------------------------
# planar calibration


def project_points(world, model: DistortionModel, rvec, tvec) -> np.ndarray:
    """Pixel coordinates of 3-D points seen from pose ``(rvec, tvec)``."""
    world = np.asarray(world, dtype=np.float64).reshape(-1, 3)
    cam = Rotation.from_rotvec(rvec).apply(world) + np.asarray(tvec, dtype=np.float64)
    if np.any(cam[:, 2] <= 0):
        raise GeometryError("points behind the camera")
    return distort(cam[:, :2] / cam[:, 2:3], model)


def _v(h, i, j):
    return np.array([
        h[0, i] * h[0, j],
        h[0, i] * h[1, j] + h[1, i] * h[0, j],
        h[1, i] * h[1, j],
        h[2, i] * h[0, j] + h[0, i] * h[2, j],
        h[2, i] * h[1, j] + h[1, i] * h[2, j],
        h[2, i] * h[2, j],
    ])


def _closed_form_intrinsics(homographies):
    V = []
    for h in homographies:
        V.append(_v(h, 0, 1))
        V.append(_v(h, 0, 0) - _v(h, 1, 1))
    V = np.array(V)
    _, s, vt = np.linalg.svd(V)
    if s[-2] <= 1e-9 * s[0]:
        raise DegenerateConfigurationError("calibration views are degenerate (camera motion too constrained)")
    b = vt[-1]
    b11, b12, b22, b13, b23, b33 = b
    den = b11 * b22 - b12 * b12
    if b11 == 0 or den == 0:
        raise DegenerateConfigurationError("calibration views are degenerate")
    v0 = (b12 * b13 - b11 * b23) / den
    lam = b33 - (b13 * b13 + v0 * (b12 * b13 - b11 * b23)) / b11
    if lam / b11 <= 0 or lam * b11 / den <= 0:
        raise DegenerateConfigurationError("calibration views are degenerate (no valid intrinsics)")
    alpha = np.sqrt(lam / b11)
    beta = np.sqrt(lam * b11 / den)
    gamma = -b12 * alpha * alpha * beta / lam
    u0 = gamma * v0 / beta - b13 * alpha * alpha / lam
    return alpha, beta, u0, v0


def _pose_from_homography(K, h):
    kinv = np.linalg.inv(K)
    a = kinv @ h
    lam = 1.0 / np.linalg.norm(a[:, 0])
    if (lam * a[:, 2])[2] < 0:
        lam = -lam
    r1, r2, t = lam * a[:, 0], lam * a[:, 1], lam * a[:, 2]
    R = np.stack([r1, r2, np.cross(r1, r2)], axis=1)
    u, _, vt = np.linalg.svd(R)
    R = u @ vt
    if np.linalg.det(R) < 0:
        R = -R
    return Rotation.from_matrix(R).as_rotvec(), t


def calibrate_distortion(detections, spec, max_iterations: int = 200, fix_k3: bool = False) -> DistortionModel:
    """Planar-target calibration from circle-grid detections.

    Per-view homographies seed a closed-form intrinsic estimate; intrinsics,
    distortion and per-view poses are then refined jointly by
    Levenberg-Marquardt on the reprojection error.  The RMS error in pixels
    is stored on the returned model.
    """
    from .grid import generate_grid_points

    views = [np.asarray(d, dtype=np.float64).reshape(-1, 2) for d in detections]
    world = generate_grid_points(spec)
    if len(views) < 3:
        raise DegenerateConfigurationError(f"need at least 3 views, got {len(views)}")
    for k, v in enumerate(views):
        if len(v) != len(world):
            raise GeometryError(f"view {k} has {len(v)} points, expected {len(world)}")

    # condition the closed form by working in units of the detection extent
    scale = max(float(np.max(np.abs(np.concatenate(views)))), 1.0)
    N = np.diag([1.0 / scale, 1.0 / scale, 1.0])
    hs = [N @ estimate_homography_dlt(world[:, :2], v).matrix for v in views]
    alpha, beta, u0, v0 = _closed_form_intrinsics(hs)
    K = np.linalg.inv(N) @ np.array([[alpha, 0, u0], [0, beta, v0], [0, 0, 1.0]])
    poses = [_pose_from_homography(K, np.linalg.inv(N) @ h) for h in hs]

    n_dist = 4 if fix_k3 else 5
    x0 = [K[0, 0], K[1, 1], K[0, 2], K[1, 2]] + [0.0] * n_dist
    for r, t in poses:
        x0.extend(r)
        x0.extend(t)
    x0 = np.array(x0)
    obs = np.concatenate(views)

    def unpack(x):
        k1, k2, p1, p2 = x[4:8]
        k3 = 0.0 if fix_k3 else x[8]
        return DistortionModel(*(float(v) for v in (x[0], x[1], x[2], x[3], k1, k2, k3, p1, p2)))

    def residuals(x):
        if x[0] <= 0 or x[1] <= 0:
            return np.full(obs.size, 1e6)
        m = unpack(x)
        off = 4 + n_dist
        out = []
        for k in range(len(views)):
            rv = x[off + 6 * k : off + 6 * k + 3]
            tv = x[off + 6 * k + 3 : off + 6 * k + 6]
            cam = Rotation.from_rotvec(rv).apply(world) + tv
            out.append(distort(cam[:, :2] / cam[:, 2:3], m))
        return (np.concatenate(out) - obs).ravel()

    sol = least_squares(
        residuals, x0, method="lm", x_scale="jac",
        ftol=1e-15, xtol=1e-15, gtol=1e-15, max_nfev=max_iterations * (len(x0) + 1),
    )
    if sol.status == 0 or not np.all(np.isfinite(sol.x)):
        raise ConvergenceError(f"Levenberg-Marquardt did not converge within {max_iterations} iterations")
    rms = float(np.sqrt(np.mean(sol.fun.reshape(-1, 2) ** 2) * 2))
    return dataclasses.replace(unpack(sol.x), rms=rms)
