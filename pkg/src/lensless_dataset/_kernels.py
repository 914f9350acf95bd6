"""Inner-loop kernels with a numba path and a pure-numpy path.

The numba path is used when numba imports and ``LENSLESS_DATASET_NUMBA`` is
not set to ``0``.  Both paths implement identical arithmetic; the test suite
checks them against each other and ``benchmarks/bench_kernels.py`` times them.

Coordinates handed to the samplers are *index* coordinates: the centre of
pixel ``(r, c)`` is at ``(x, y) == (c, r)``.
"""
import math
import os

import numpy as np

# slack for round-off when a mapped coordinate lands on the last pixel centre
EDGE_EPS = 1e-6

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

USE_NUMBA = numba is not None and os.environ.get("LENSLESS_DATASET_NUMBA", "1") != "0"
BACKEND = "numba" if USE_NUMBA else "numpy"


# --------------------------------------------------------------------------
# numpy implementations


def _bilinear_sample_np(img, xs, ys):
    h, w, nc = img.shape
    xs = np.asarray(xs, dtype=np.float64).ravel()
    ys = np.asarray(ys, dtype=np.float64).ravel()
    valid = (xs >= -EDGE_EPS) & (xs <= w - 1 + EDGE_EPS) & (ys >= -EDGE_EPS) & (ys <= h - 1 + EDGE_EPS)
    x = np.clip(xs, 0.0, w - 1.0)
    y = np.clip(ys, 0.0, h - 1.0)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    top = img[y0, x0] * (1.0 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1.0 - fx) + img[y1, x1] * fx
    out = top * (1.0 - fy) + bot * fy
    out[~valid] = 0.0
    return out, valid


def _homography_coords_np(g, out_h, out_w):
    rr, cc = np.meshgrid(np.arange(out_h, dtype=np.float64), np.arange(out_w, dtype=np.float64), indexing="ij")
    px = cc.ravel() + 0.5
    py = rr.ravel() + 0.5
    den = g[2, 0] * px + g[2, 1] * py + g[2, 2]
    xs = (g[0, 0] * px + g[0, 1] * py + g[0, 2]) / den - 0.5
    ys = (g[1, 0] * px + g[1, 1] * py + g[1, 2]) / den - 0.5
    return xs, ys


def _warp_homography_np(img, g, out_h, out_w):
    xs, ys = _homography_coords_np(g, out_h, out_w)
    vals, valid = _bilinear_sample_np(img, xs, ys)
    return vals.reshape(out_h, out_w, img.shape[2]), valid.reshape(out_h, out_w)


def _undistort_np(xd, yd, k1, k2, k3, p1, p2, max_iter, tol):
    xd = np.asarray(xd, dtype=np.float64).ravel()
    yd = np.asarray(yd, dtype=np.float64).ravel()
    x = xd.copy()
    y = yd.copy()
    for _ in range(max_iter):
        r2 = x * x + y * y
        radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3))
        dr = k1 + r2 * (2.0 * k2 + 3.0 * k3 * r2)
        fx = x * radial + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x) - xd
        fy = y * radial + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y - yd
        j11 = radial + 2.0 * x * x * dr + 2.0 * p1 * y + 6.0 * p2 * x
        j12 = 2.0 * x * y * dr + 2.0 * p1 * x + 2.0 * p2 * y
        j22 = radial + 2.0 * y * y * dr + 6.0 * p1 * y + 2.0 * p2 * x
        det = j11 * j22 - j12 * j12
        with np.errstate(divide="ignore", invalid="ignore"):
            sx = (j22 * fx - j12 * fy) / det
            sy = (j11 * fy - j12 * fx) / det
        x = x - sx
        y = y - sy
        if np.all(np.abs(sx) + np.abs(sy) < tol * 1e-3):
            break
    r2 = x * x + y * y
    radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3))
    fx = x * radial + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x) - xd
    fy = y * radial + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y - yd
    ok = np.isfinite(x) & np.isfinite(y) & (np.abs(fx) + np.abs(fy) < tol)
    return x, y, ok


def _radial_bins_np(img, cy, cx, bin_width, nbins):
    h, w = img.shape
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    r = np.hypot(rr - cy, cc - cx)
    idx = np.floor(r / bin_width + 0.5).astype(np.int64).ravel()
    keep = idx < nbins
    sums = np.bincount(idx[keep], weights=img.ravel()[keep], minlength=nbins)
    counts = np.bincount(idx[keep], minlength=nbins).astype(np.float64)
    return sums, counts


# --------------------------------------------------------------------------
# numba implementations

if numba is not None:

    @numba.njit(cache=True)
    def _bilinear_sample_nb(img, xs, ys):
        h, w, nc = img.shape
        n = xs.shape[0]
        out = np.zeros((n, nc))
        valid = np.zeros(n, dtype=np.bool_)
        for i in range(n):
            x = xs[i]
            y = ys[i]
            if x < -EDGE_EPS or x > w - 1 + EDGE_EPS or y < -EDGE_EPS or y > h - 1 + EDGE_EPS:
                continue
            if not (x == x and y == y):
                continue
            valid[i] = True
            x = min(max(x, 0.0), w - 1.0)
            y = min(max(y, 0.0), h - 1.0)
            x0 = int(math.floor(x))
            y0 = int(math.floor(y))
            x1 = min(x0 + 1, w - 1)
            y1 = min(y0 + 1, h - 1)
            fx = x - x0
            fy = y - y0
            for c in range(nc):
                top = img[y0, x0, c] * (1.0 - fx) + img[y0, x1, c] * fx
                bot = img[y1, x0, c] * (1.0 - fx) + img[y1, x1, c] * fx
                out[i, c] = top * (1.0 - fy) + bot * fy
        return out, valid

    @numba.njit(cache=True)
    def _warp_homography_nb(img, g, out_h, out_w):
        h, w, nc = img.shape
        out = np.zeros((out_h, out_w, nc))
        valid = np.zeros((out_h, out_w), dtype=np.bool_)
        for r in range(out_h):
            py = r + 0.5
            for c in range(out_w):
                px = c + 0.5
                den = g[2, 0] * px + g[2, 1] * py + g[2, 2]
                x = (g[0, 0] * px + g[0, 1] * py + g[0, 2]) / den - 0.5
                y = (g[1, 0] * px + g[1, 1] * py + g[1, 2]) / den - 0.5
                if x < -EDGE_EPS or x > w - 1 + EDGE_EPS or y < -EDGE_EPS or y > h - 1 + EDGE_EPS:
                    continue
                if not (x == x and y == y):
                    continue
                valid[r, c] = True
                x = min(max(x, 0.0), w - 1.0)
                y = min(max(y, 0.0), h - 1.0)
                x0 = int(math.floor(x))
                y0 = int(math.floor(y))
                x1 = min(x0 + 1, w - 1)
                y1 = min(y0 + 1, h - 1)
                fx = x - x0
                fy = y - y0
                for k in range(nc):
                    top = img[y0, x0, k] * (1.0 - fx) + img[y0, x1, k] * fx
                    bot = img[y1, x0, k] * (1.0 - fx) + img[y1, x1, k] * fx
                    out[r, c, k] = top * (1.0 - fy) + bot * fy
        return out, valid

    @numba.njit(cache=True)
    def _undistort_nb(xd, yd, k1, k2, k3, p1, p2, max_iter, tol):
        n = xd.shape[0]
        xo = np.empty(n)
        yo = np.empty(n)
        ok = np.zeros(n, dtype=np.bool_)
        for i in range(n):
            x = xd[i]
            y = yd[i]
            for _ in range(max_iter):
                r2 = x * x + y * y
                radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3))
                dr = k1 + r2 * (2.0 * k2 + 3.0 * k3 * r2)
                fx = x * radial + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x) - xd[i]
                fy = y * radial + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y - yd[i]
                j11 = radial + 2.0 * x * x * dr + 2.0 * p1 * y + 6.0 * p2 * x
                j12 = 2.0 * x * y * dr + 2.0 * p1 * x + 2.0 * p2 * y
                j22 = radial + 2.0 * y * y * dr + 6.0 * p1 * y + 2.0 * p2 * x
                det = j11 * j22 - j12 * j12
                sx = (j22 * fx - j12 * fy) / det
                sy = (j11 * fy - j12 * fx) / det
                x -= sx
                y -= sy
                if abs(sx) + abs(sy) < tol * 1e-3:
                    break
            r2 = x * x + y * y
            radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3))
            fx = x * radial + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x) - xd[i]
            fy = y * radial + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y - yd[i]
            xo[i] = x
            yo[i] = y
            ok[i] = math.isfinite(x) and math.isfinite(y) and abs(fx) + abs(fy) < tol
        return xo, yo, ok

    @numba.njit(cache=True)
    def _radial_bins_nb(img, cy, cx, bin_width, nbins):
        h, w = img.shape
        sums = np.zeros(nbins)
        counts = np.zeros(nbins)
        for r in range(h):
            for c in range(w):
                d = math.sqrt((r - cy) ** 2 + (c - cx) ** 2)
                k = int(math.floor(d / bin_width + 0.5))
                if k < nbins:
                    sums[k] += img[r, c]
                    counts[k] += 1.0
        return sums, counts


# --------------------------------------------------------------------------
# dispatch


def bilinear_sample(img, xs, ys):
    """Sample a ``(H, W, C)`` array at index coordinates.

    Returns ``(values[N, C], valid[N])``; samples outside the pixel-centre
    hull are zero and flagged invalid.
    """
    img = np.ascontiguousarray(img, dtype=np.float64)
    xs = np.ascontiguousarray(np.ravel(xs), dtype=np.float64)
    ys = np.ascontiguousarray(np.ravel(ys), dtype=np.float64)
    if USE_NUMBA:
        return _bilinear_sample_nb(img, xs, ys)
    return _bilinear_sample_np(img, xs, ys)


def warp_homography(img, g, out_h, out_w):
    """Inverse-map warp: output pixel centre ``p`` samples ``img`` at ``g @ p``.

    ``g`` acts on continuous coordinates (pixel centres at half-integers).
    """
    img = np.ascontiguousarray(img, dtype=np.float64)
    g = np.ascontiguousarray(g, dtype=np.float64)
    if USE_NUMBA:
        return _warp_homography_nb(img, g, int(out_h), int(out_w))
    return _warp_homography_np(img, g, int(out_h), int(out_w))


def undistort_normalized(xd, yd, k1, k2, k3, p1, p2, max_iter=20, tol=1e-9):
    """Newton inversion of the radial-tangential model on normalized coordinates."""
    xd = np.ascontiguousarray(np.ravel(xd), dtype=np.float64)
    yd = np.ascontiguousarray(np.ravel(yd), dtype=np.float64)
    args = (float(k1), float(k2), float(k3), float(p1), float(p2), int(max_iter), float(tol))
    if USE_NUMBA:
        return _undistort_nb(xd, yd, *args)
    with np.errstate(over="ignore", invalid="ignore"):
        return _undistort_np(xd, yd, *args)


def radial_bins(img, cy, cx, bin_width, nbins):
    img = np.ascontiguousarray(img, dtype=np.float64)
    if USE_NUMBA:
        return _radial_bins_nb(img, float(cy), float(cx), float(bin_width), int(nbins))
    return _radial_bins_np(img, float(cy), float(cx), float(bin_width), int(nbins))


numpy_impl = {
    "bilinear_sample": _bilinear_sample_np,
    "warp_homography": _warp_homography_np,
    "undistort_normalized": _undistort_np,
    "radial_bins": _radial_bins_np,
}
numba_impl = {} if numba is None else {
    "bilinear_sample": _bilinear_sample_nb,
    "warp_homography": _warp_homography_nb,
    "undistort_normalized": _undistort_nb,
    "radial_bins": _radial_bins_nb,
}
