"""Projective maps between image planes: estimation, warping, refinement.

Points are ``(x, y)`` in continuous pixel coordinates (pixel centres at
half-integers).  A homography ``H`` maps source points to destination
points; ``warp(img, H)`` therefore samples ``img`` at ``H^-1 p``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .. import _kernels
from ..errors import ConvergenceError, DegenerateConfigurationError, GeometryError, ShapeError
from ..imgcore import Image, as_image


class SingularHomographyError(GeometryError):
    pass


@dataclass(frozen=True, eq=False)
class Homography:
    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64, copy=True).reshape(3, 3)
        if not np.all(np.isfinite(m)):
            raise SingularHomographyError("homography has non-finite entries")
        if abs(m[2, 2]) > 1e-12:
            m = m / m[2, 2]
        if abs(np.linalg.det(m)) <= 1e-12:
            raise SingularHomographyError("homography is singular")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    @classmethod
    def translation(cls, tx: float, ty: float) -> "Homography":
        return cls(np.array([[1.0, 0, tx], [0, 1.0, ty], [0, 0, 1.0]]))

    @classmethod
    def scaling(cls, s: float) -> "Homography":
        return cls(np.diag([s, s, 1.0]))

    def __matmul__(self, other: "Homography") -> "Homography":
        return Homography(self.matrix @ other.matrix)

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.matrix))

    def apply(self, points) -> np.ndarray:
        return apply_homography(self.matrix, points)

    def corner_displacement(self, shape) -> float:
        """Largest corner movement of a ``shape`` image frame under this map."""
        h, w = shape
        corners = np.array([[0.0, 0.0], [w, 0.0], [0.0, h], [w, h]])
        return float(np.max(np.linalg.norm(self.apply(corners) - corners, axis=1)))

    def to_dict(self) -> dict:
        return {"matrix": [[float(v) for v in row] for row in self.matrix]}

    @classmethod
    def from_dict(cls, d) -> "Homography":
        return cls(np.array(d["matrix"], dtype=np.float64))

    def __repr__(self):
        return f"Homography({np.array2string(self.matrix, precision=6)})"


def apply_homography(m, points) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    q = p @ m[:, :2].T + m[:, 2]
    return q[:, :2] / q[:, 2:3]


def _hartley(points):
    c = points.mean(axis=0)
    d = np.sqrt(((points - c) ** 2).sum(axis=1)).mean()
    if d <= 0:
        raise DegenerateConfigurationError("all points coincide")
    s = math.sqrt(2.0) / d
    return np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])


def _dlt(src, dst):
    ts, td = _hartley(src), _hartley(dst)
    a = apply_homography(ts, src)
    b = apply_homography(td, dst)
    n = len(a)
    rows = np.zeros((2 * n, 9))
    x, y = a[:, 0], a[:, 1]
    u, v = b[:, 0], b[:, 1]
    rows[0::2, 0:3] = np.stack([-x, -y, -np.ones(n)], axis=1)
    rows[0::2, 6:9] = np.stack([u * x, u * y, u], axis=1)
    rows[1::2, 3:6] = np.stack([-x, -y, -np.ones(n)], axis=1)
    rows[1::2, 6:9] = np.stack([v * x, v * y, v], axis=1)
    _, s, vt = np.linalg.svd(rows)
    if s[7] <= 1e-10 * s[0]:
        raise DegenerateConfigurationError("correspondences are degenerate (rank-deficient DLT system)")
    hn = vt[-1].reshape(3, 3)
    return np.linalg.inv(td) @ hn @ ts


def _collinear(p, tol=1e-9):
    scale = max(np.ptp(p[:, 0]), np.ptp(p[:, 1]), 1e-300) ** 2
    for i in range(4):
        for j in range(i + 1, 4):
            for k in range(j + 1, 4):
                d1, d2 = p[j] - p[i], p[k] - p[i]
                if abs(d1[0] * d2[1] - d1[1] * d2[0]) <= tol * scale:
                    return True
    return False


def reprojection_errors(h, src, dst) -> np.ndarray:
    m = h.matrix if isinstance(h, Homography) else np.asarray(h)
    return np.linalg.norm(apply_homography(m, src) - np.asarray(dst, dtype=np.float64), axis=1)


def estimate_homography_dlt(src, dst, ransac: bool = False, **ransac_kw) -> Homography:
    """Hartley-normalized DLT from >= 4 correspondences.

    With ``ransac=True`` the estimate is refit on the consensus set of
    :func:`ransac_homography`.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    if len(src) != len(dst):
        raise ShapeError("src and dst must have the same length")
    if len(src) < 4:
        raise DegenerateConfigurationError("need at least 4 correspondences")
    if ransac:
        return ransac_homography(src, dst, **ransac_kw)[0]
    if len(src) == 4 and (_collinear(src) or _collinear(dst)):
        raise DegenerateConfigurationError("three of the four points are collinear")
    return Homography(_dlt(src, dst))


def ransac_homography(src, dst, threshold: float = 1.0, confidence: float = 0.999, max_iterations: int = 5000, seed: int = 0):
    """Robust DLT; returns ``(homography, inlier_mask)``."""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    n = len(src)
    if n < 4:
        raise DegenerateConfigurationError("need at least 4 correspondences")
    rng = np.random.default_rng(seed)
    best = None
    best_count = 0
    needed = max_iterations
    it = 0
    while it < min(needed, max_iterations):
        it += 1
        idx = rng.choice(n, 4, replace=False)
        if _collinear(src[idx]) or _collinear(dst[idx]):
            continue
        try:
            m = _dlt(src[idx], dst[idx])
            err = reprojection_errors(m, src, dst)
        except (DegenerateConfigurationError, np.linalg.LinAlgError, FloatingPointError):
            continue
        inl = err < threshold
        count = int(inl.sum())
        if count > best_count:
            best, best_count = inl, count
            w = count / n
            if w >= 1.0:
                needed = 0
            else:
                needed = math.ceil(math.log(1 - confidence) / math.log(1 - w**4)) if w > 0 else max_iterations
    if best is None or best_count < 4:
        raise DegenerateConfigurationError("RANSAC found no consensus set")
    h = Homography(_dlt(src[best], dst[best]))
    inl = reprojection_errors(h, src, dst) < threshold
    if inl.sum() >= 4 and not np.array_equal(inl, best):
        h = Homography(_dlt(src[inl], dst[inl]))
    return h, inl


def warp(img, h, out_shape=None, return_mask: bool = False):
    """Inverse-mapped bilinear warp; samples outside the source are 0."""
    img = as_image(img)
    if not isinstance(h, Homography):
        h = Homography(h)
    out_shape = img.shape if out_shape is None else (int(out_shape[0]), int(out_shape[1]))
    g = np.linalg.inv(h.matrix)
    data, valid = _kernels.warp_homography(img.data, g, out_shape[0], out_shape[1])
    out = img.with_data(data)
    return (out, valid) if return_mask else out


# ---------------------------------------------------------------------------
# photometric refinement


@dataclass
class PhotometricResult:
    homography: Homography
    residual: float
    initial_residual: float
    iterations: int
    valid_fraction: float


def _downsample(a):
    h, w = a.shape[0] // 2 * 2, a.shape[1] // 2 * 2
    a = a[:h, :w]
    return 0.25 * (a[0::2, 0::2] + a[1::2, 0::2] + a[0::2, 1::2] + a[1::2, 1::2])


def _stack(a):
    gy, gx = np.gradient(a)
    return np.stack([a, gx, gy], axis=2)


def _evaluate(stack, fixed, g, mask=None):
    warped, valid = _kernels.warp_homography(stack, g, fixed.shape[0], fixed.shape[1])
    if mask is not None:
        valid &= mask
    r = warped[:, :, 0] - fixed
    n = int(valid.sum())
    mse = float(np.mean(r[valid] ** 2)) if n else math.inf
    return warped, valid, r, mse


def _level_scale(g, level):
    s = 0.5**level
    S = np.diag([s, s, 1.0])
    Si = np.diag([1 / s, 1 / s, 1.0])
    out = S @ g @ Si
    return out / out[2, 2]


def _step(g, delta, t):
    out = g.copy()
    out[0, :] += t * delta[0:3]
    out[1, :] += t * delta[3:6]
    out[2, :2] += t * delta[6:8]
    return out


def _overlap(valid, mask):
    return valid.sum() / (mask.sum() if mask is not None else valid.size)


def _gn_level(stack, fixed, g, iters, tol, min_valid, mask=None, settle=0.05):
    h, w = fixed.shape
    ys, xs = np.mgrid[0:h, 0:w]
    px = xs.ravel() + 0.5
    py = ys.ravel() + 0.5
    corners = np.array([[0.0, 0.0], [w, 0.0], [0.0, h], [w, h]])

    warped, valid, r, mse = _evaluate(stack, fixed, g, mask)
    best_g, best_mse = g, mse
    increases = 0
    it = 0
    for it in range(1, iters + 1):
        frac = _overlap(valid, mask)
        if frac < min_valid:
            raise GeometryError(f"only {frac:.1%} of pixels overlap; need at least {min_valid:.0%}")
        m = valid.ravel()
        x, y = px[m], py[m]
        gx = warped[:, :, 1].ravel()[m]
        gy = warped[:, :, 2].ravel()[m]
        res = r.ravel()[m]
        den = g[2, 0] * x + g[2, 1] * y + 1.0
        wx = (g[0, 0] * x + g[0, 1] * y + g[0, 2]) / den
        wy = (g[1, 0] * x + g[1, 1] * y + g[1, 2]) / den
        J = np.empty((len(x), 8))
        J[:, 0] = gx * x / den
        J[:, 1] = gx * y / den
        J[:, 2] = gx / den
        J[:, 3] = gy * x / den
        J[:, 4] = gy * y / den
        J[:, 5] = gy / den
        J[:, 6] = -(gx * wx + gy * wy) * x / den
        J[:, 7] = -(gx * wx + gy * wy) * y / den
        scale = np.linalg.norm(J, axis=0)
        scale[scale == 0] = 1.0
        delta, *_ = np.linalg.lstsq(J / scale, -res, rcond=None)
        delta /= scale
        full = _step(g, delta, 1.0)
        moved = np.max(np.linalg.norm(apply_homography(full, corners) - apply_homography(g, corners), axis=1))
        # damped step: halve until the residual does not grow
        for t in (1.0, 0.5, 0.25, 0.125):
            g_new = _step(g, delta, t)
            ev = _evaluate(stack, fixed, g_new, mask)
            if not math.isfinite(ev[3]):
                raise ConvergenceError("photometric refinement left the image")
            if ev[3] <= mse:
                break
        if ev[3] > mse:
            if moved < settle:
                # no descent along a sub-pixel step: converged to within noise
                break
            # a large step that cannot reduce the residual: take it and count
            g_new = full
            ev = _evaluate(stack, fixed, g_new, mask)
            increases += 1
            if increases >= 5:
                raise ConvergenceError("photometric residual increased for 5 consecutive iterations")
        else:
            increases = 0
        g = g_new
        warped, valid, r, mse = ev
        if mse < best_mse:
            best_g, best_mse = g, mse
        if moved < tol:
            break
    return best_g, it


def refine_homography_photometric(
    moving,
    fixed,
    init: Homography | None = None,
    iters: int = 50,
    levels: int = 3,
    tol: float = 1e-4,
    min_valid: float = 0.25,
    smooth: float = 0.0,
    mask=None,
) -> PhotometricResult:
    """Gauss-Newton on the 8 free entries of a homography, coarse to fine.

    Minimizes the mean squared difference between ``warp(moving, H)`` and
    ``fixed`` over pixels where the warp is defined.  With ``smooth > 0`` both
    images are blurred by a Gaussian of that many pixels first, so that
    finite-difference gradients track the interpolated image on noisy input.
    The blur extends edges, which biases clean images near the border, so
    it is off by default.
    The returned homography is the best iterate seen, so the final residual
    never exceeds the residual at ``init``.

    ``mask`` (boolean, shape of ``fixed``) restricts the loss to trusted
    pixels of ``fixed``; the overlap test is then relative to the mask.
    """
    mov = as_image(moving).gray()
    fix = as_image(fixed).gray()
    if smooth > 0:
        mov = ndimage.gaussian_filter(mov, smooth, mode="nearest")
        fix = ndimage.gaussian_filter(fix, smooth, mode="nearest")
    init = Homography.identity() if init is None else init
    g0 = np.linalg.inv(init.matrix)
    g0 = g0 / g0[2, 2]

    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != fix.shape:
            raise ShapeError(f"mask shape {mask.shape} does not match fixed image {fix.shape}")
        if not mask.any():
            raise GeometryError("mask selects no pixels")

    movs, fixs, masks = [mov], [fix], [mask]
    for _ in range(levels - 1):
        if min(movs[-1].shape) < 16 or min(fixs[-1].shape) < 16:
            break
        movs.append(_downsample(movs[-1]))
        fixs.append(_downsample(fixs[-1]))
        # a coarse pixel is trusted only when all four children are
        masks.append(None if mask is None else _downsample(masks[-1].astype(np.float64)) == 1.0)
    stacks = [_stack(m) for m in movs]

    _, valid0, _, initial = _evaluate(stacks[0], fixs[0], g0, mask)
    if _overlap(valid0, mask) < min_valid:
        raise GeometryError(
            f"only {_overlap(valid0, mask):.1%} of pixels overlap; need at least {min_valid:.0%}"
        )
    g = g0
    total = 0
    for lvl in range(len(stacks) - 1, -1, -1):
        gl = _level_scale(g, lvl)
        gl, n = _gn_level(stacks[lvl], fixs[lvl], gl, iters, tol * 0.5**lvl, min_valid, masks[lvl])
        total += n
        g = _level_scale(gl, -lvl)
    _, valid, _, final = _evaluate(stacks[0], fixs[0], g, mask)
    if final > initial:
        g, final = g0, initial
        valid = valid0
    return PhotometricResult(Homography(np.linalg.inv(g)), final, initial, total, float(_overlap(valid, mask)))
