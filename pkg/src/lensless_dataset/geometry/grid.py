"""Asymmetric circles grid: layout, rendering and detection."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from skimage.filters import threshold_otsu

from ..errors import GridDetectionError
from ..imgcore import Image, as_image
from .homography import Homography, apply_homography


@dataclass(frozen=True)
class CirclesGridSpec:
    """``rows`` x ``cols`` circles; odd rows are offset by half a spacing."""

    rows: int = 4
    cols: int = 11
    diagonal_spacing: float = 1.0
    radius_fraction: float = 0.25

    def __post_init__(self):
        if self.rows < 2 or self.cols < 2:
            raise ValueError("grid needs at least 2 rows and 2 columns")
        if self.diagonal_spacing <= 0:
            raise ValueError("spacing must be positive")
        if not 0 < self.radius_fraction < 0.35:
            raise ValueError("radius_fraction must keep neighbouring circles apart (< 0.35)")

    @property
    def count(self) -> int:
        return self.rows * self.cols

    @property
    def radius(self) -> float:
        return self.radius_fraction * self.diagonal_spacing

    @property
    def extent(self) -> tuple[float, float]:
        """Width and height spanned by circle centres."""
        s = self.diagonal_spacing
        return (2 * (self.cols - 1) + 1) * s / 2, (self.rows - 1) * s / 2


def generate_grid_points(spec: CirclesGridSpec) -> np.ndarray:
    """World coordinates ``((2c + r % 2) s / 2, r s / 2, 0)`` in row-major order."""
    s = spec.diagonal_spacing
    r, c = np.divmod(np.arange(spec.count), spec.cols)
    return np.stack([(2 * c + r % 2) * s / 2.0, r * s / 2.0, np.zeros(spec.count)], axis=1)


def fit_grid_homography(spec: CirclesGridSpec, shape, margin: float = 0.1, angle_deg: float = 0.0) -> Homography:
    """Similarity placing the grid centred in an image of ``shape``."""
    h, w = shape
    ew, eh = spec.extent
    pad = 2 * spec.radius
    scale = min(w * (1 - 2 * margin) / (ew + pad), h * (1 - 2 * margin) / (eh + pad))
    a = math.radians(angle_deg)
    ca, sa = math.cos(a) * scale, math.sin(a) * scale
    m = np.array([[ca, -sa, 0.0], [sa, ca, 0.0], [0.0, 0.0, 1.0]])
    cx, cy = ew / 2, eh / 2
    centre = m @ np.array([cx, cy, 1.0])
    m[0, 2] = w / 2 - centre[0]
    m[1, 2] = h / 2 - centre[1]
    return Homography(m)


def _inside(spec, X, Y):
    s = spec.diagonal_spacing
    half = s / 2.0
    rad2 = spec.radius**2
    r0 = np.rint(Y / half).astype(np.int64)
    hit = np.zeros(X.shape, dtype=bool)
    for dr in (-1, 0, 1):
        r = np.clip(r0 + dr, 0, spec.rows - 1)
        c = np.clip(np.rint((X - (r % 2) * half) / s), 0, spec.cols - 1)
        cxw = (2 * c + r % 2) * half
        cyw = r * half
        hit |= (X - cxw) ** 2 + (Y - cyw) ** 2 <= rad2
    return hit


def render_grid(
    spec: CirclesGridSpec,
    shape,
    plane_to_pixel: Homography | None = None,
    pixel_to_plane=None,
    supersample: int = 4,
    foreground: float = 0.0,
    background: float = 1.0,
) -> Image:
    """Anti-aliased rendering of dark circles on a light background.

    Give either a plane-to-pixel homography or a ``pixel_to_plane(points)``
    callable for non-projective cameras.
    """
    h, w = int(shape[0]), int(shape[1])
    if pixel_to_plane is None:
        hom = plane_to_pixel if plane_to_pixel is not None else fit_grid_homography(spec, shape)
        inv = np.linalg.inv(hom.matrix)

        def pixel_to_plane(pts):
            return apply_homography(inv, pts)

    ss = int(supersample)
    offs = (np.arange(ss) + 0.5) / ss
    ys = (np.arange(h)[:, None] + offs[None, :]).ravel()
    xs = (np.arange(w)[:, None] + offs[None, :]).ravel()
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    plane = pixel_to_plane(np.stack([xx.ravel(), yy.ravel()], axis=1))
    cover = _inside(spec, plane[:, 0], plane[:, 1]).reshape(h, ss, w, ss).mean(axis=(1, 3))
    return Image(background + (foreground - background) * cover)


def detect_grid(img, spec: CirclesGridSpec, min_area: int = 4, max_angle_deg: float = 30.0) -> np.ndarray:
    """Centroids of the grid's circles in canonical row-major order.

    Otsu threshold, connected components (those touching the image border
    are dropped, e.g. zero fill from a remap), area filter (median +/- 50%),
    darkness-weighted sub-pixel centroids, then ordering along the grid's
    principal axes.
    """
    gray = as_image(img).gray()
    thr = threshold_otsu(gray)
    dark = gray < thr
    labels, n = ndimage.label(dark)
    if n == 0:
        raise GridDetectionError("no dark blobs found")
    edge = np.unique(np.concatenate([labels[0], labels[-1], labels[:, 0], labels[:, -1]]))
    idx = np.setdiff1d(np.arange(1, n + 1), edge)
    areas = np.bincount(labels.ravel(), minlength=n + 1).astype(np.float64)
    cand = idx[areas[idx] >= min_area]
    if cand.size == 0:
        raise GridDetectionError("no blobs above the minimum area")
    med = np.median(areas[cand])
    keep = [k for k in cand if 0.5 * med <= areas[k] <= 1.5 * med]
    if len(keep) != spec.count:
        raise GridDetectionError(f"found {len(keep)} circles after area filtering, expected {spec.count}")

    bg = float(np.median(gray[~dark])) if np.any(~dark) else float(gray.max())
    weight = np.clip(bg - gray, 0.0, None)
    slices = ndimage.find_objects(labels)
    cents = []
    for k in keep:
        sl = slices[k - 1]
        r0 = max(sl[0].start - 2, 0)
        c0 = max(sl[1].start - 2, 0)
        r1 = min(sl[0].stop + 2, gray.shape[0])
        c1 = min(sl[1].stop + 2, gray.shape[1])
        lab = labels[r0:r1, c0:c1]
        own = ndimage.binary_dilation(lab == k, iterations=2) & ((lab == 0) | (lab == k))
        wts = weight[r0:r1, c0:c1] * own
        tot = wts.sum()
        rr, cc = np.mgrid[r0:r1, c0:c1]
        cents.append(((wts * (cc + 0.5)).sum() / tot, (wts * (rr + 0.5)).sum() / tot))
    pts = np.array(cents)
    return _order(pts, spec, max_angle_deg)


def _order(pts, spec, max_angle_deg):
    centred = pts - pts.mean(axis=0)
    evals, evecs = np.linalg.eigh(centred.T @ centred)
    u = evecs[:, np.argmax(evals)]
    if u[0] < 0:
        u = -u
    angle = math.degrees(math.atan2(u[1], u[0]))
    if abs(angle) > max_angle_deg:
        raise GridDetectionError(f"grid rotated by {angle:.1f} deg; ordering is ambiguous beyond +/-{max_angle_deg:g} deg")
    v = np.array([-u[1], u[0]])
    pu, pv = centred @ u, centred @ v
    order = np.argsort(pv, kind="stable")
    rows = [order[i * spec.cols : (i + 1) * spec.cols] for i in range(spec.rows)]
    spreads = [np.ptp(pv[r]) for r in rows]
    gaps = [pv[rows[i + 1]].min() - pv[rows[i]].max() for i in range(spec.rows - 1)]
    if min(gaps) <= 0 or max(spreads) >= min(gaps):
        raise GridDetectionError("cannot separate grid rows")
    rows = [r[np.argsort(pu[r], kind="stable")] for r in rows]
    if pu[rows[0][0]] >= pu[rows[1][0]]:
        raise GridDetectionError("grid parity does not match the asymmetric layout")
    return pts[np.concatenate(rows)]
