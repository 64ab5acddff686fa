"""Dense double-precision kernels shared by every other module.

Matrices and spatial maps are plain ``float64`` numpy arrays.  The only
kernel that does not defer to numpy is :func:`matmul`, which fixes the
reduction order so results are bit-identical regardless of the BLAS build or
thread count.
"""

import math

import numpy as np

from .errors import ConvergenceError, ShapeError

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

PCA_TOL = 1e-10
PCA_MAX_ITER = 10_000


def as_matrix(x, name="matrix"):
    """Return ``x`` as a finite 2-D float64 array, raising on anything else."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")
    return arr


def _matmul_loop(a, b, out):
    for k in range(a.shape[-1]):
        out += a[:, :, k, None] * b[:, None, k, :]
    return out


if numba is not None:

    @numba.njit(cache=True)
    def _matmul_kernel(a, b, out):
        for s in range(a.shape[0]):
            for i in range(a.shape[1]):
                for k in range(a.shape[2]):
                    aik = a[s, i, k]
                    for j in range(b.shape[2]):
                        out[s, i, j] += aik * b[s, k, j]
        return out

else:  # pragma: no cover
    _matmul_kernel = _matmul_loop


def matmul(a, b):
    """Matrix product with a fixed k-major accumulation order.

    Each output element is accumulated as ``((a0*b0 + a1*b1) + a2*b2) + ...``
    exactly like the textbook triple loop, so an element depends only on its
    own row of ``a`` and column of ``b``.  Leading batch dimensions broadcast.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    m, kk, n = a.shape[-2], a.shape[-1], b.shape[-1]
    a3 = np.ascontiguousarray(np.broadcast_to(a, batch + (m, kk))).reshape(-1, m, kk)
    b3 = np.ascontiguousarray(np.broadcast_to(b, batch + (kk, n))).reshape(-1, kk, n)
    out = np.zeros((a3.shape[0], m, n))
    return _matmul_kernel(a3, b3, out).reshape(batch + (m, n))


def row_softmax(logits, scale=1.0):
    """Softmax along the last axis of ``scale * logits`` with per-row max subtraction."""
    if not scale > 0:
        raise ValueError(f"softmax scale must be positive, got {scale}")
    z = np.asarray(logits, dtype=np.float64) * scale
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def covariance(data):
    """Sample covariance of the rows of ``data`` (unbiased, ``n - 1``)."""
    data = as_matrix(data, "data")
    centered = data - data.mean(axis=0)
    return matmul(centered.T, centered) / (data.shape[0] - 1)


def pca_top_k(data, k, tol=PCA_TOL, max_iter=PCA_MAX_ITER):
    """Top-``k`` principal directions of the rows of ``data``.

    Runs power iteration on the covariance matrix, deflating after each
    component and re-orthogonalising every iterate against the components
    already found.  Directions of a numerically zero residual get variance 0
    and an arbitrary unit vector orthogonal to the earlier ones.

    Returns ``(components, variances)`` with components as rows.
    """
    data = as_matrix(data, "data")
    rows, cols = data.shape
    if rows < 2:
        raise ShapeError("pca_top_k needs at least two rows")
    if not 0 <= k <= min(rows, cols):
        raise ShapeError(f"k={k} outside [0, {min(rows, cols)}]")
    cov = covariance(data)
    scale = float(np.trace(cov))
    residual = cov.copy()
    components = np.zeros((k, cols))
    variances = []

    for j in range(k):
        prev = components[:j]
        if scale <= 0 or np.linalg.norm(residual) <= 1e-12 * scale:
            v = _orthogonal_unit(prev, cols)
        else:
            v = _power_iterate(residual, prev, tol, max_iter, j)
        lam = float(v @ matmul(cov, v[:, None])[:, 0])
        lam = max(lam, 0.0)
        components[j] = v
        variances.append(lam)
        residual = residual - lam * np.outer(v, v)
    return components, variances


def _orthogonalize(v, basis):
    for u in basis:
        v = v - (u @ v) * u
    return v


def _orthogonal_unit(basis, n):
    for i in range(n):
        e = np.zeros(n)
        e[i] = 1.0
        e = _orthogonalize(_orthogonalize(e, basis), basis)
        norm = np.linalg.norm(e)
        if norm > 1e-6:
            return e / norm
    raise ShapeError("no orthogonal direction left")


def _power_iterate(mat, basis, tol, max_iter, index):
    # start from the largest column of the residual: it lies in its range
    start = mat[:, int(np.argmax(np.linalg.norm(mat, axis=0)))]
    v = _orthogonalize(start, basis)
    norm = np.linalg.norm(v)
    if norm == 0.0:
        return _orthogonal_unit(basis, mat.shape[0])
    v = v / norm
    for it in range(1, max_iter + 1):
        w = _orthogonalize(matmul(mat, v[:, None])[:, 0], basis)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return _orthogonal_unit(basis, mat.shape[0])
        w = w / norm
        if w @ v < 0:
            w = -w
        done = np.linalg.norm(w - v) < tol
        v = w
        if done:
            return v
    raise ConvergenceError(f"power iteration for component {index} did not converge", max_iter)


def gaussian_kernel(sigma):
    """Normalised 1-D Gaussian taps of radius ``ceil(3 * sigma)``."""
    radius = int(math.ceil(3 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    taps = np.exp(-(x**2) / (2 * sigma**2))
    return taps / taps.sum()


def _blur_axis(values, taps, axis):
    radius = len(taps) // 2
    pad = [(0, 0)] * values.ndim
    pad[axis] = (radius, radius)
    padded = np.pad(values, pad, mode="edge")
    n = values.shape[axis]
    out = np.zeros_like(values)
    for j, w in enumerate(taps):
        out += w * np.take(padded, np.arange(j, j + n), axis=axis)
    return out


def gaussian_blur(spatial, sigma):
    """Separable Gaussian blur with clamp-to-edge borders; ``sigma=0`` is the identity."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    spatial = np.asarray(spatial, dtype=np.float64)
    if sigma == 0:
        return spatial.copy()
    taps = gaussian_kernel(sigma)
    return _blur_axis(_blur_axis(spatial, taps, 0), taps, 1)


def threshold(spatial, theta):
    """Binary map: 1 where ``spatial > theta`` (strict), else 0."""
    return (np.asarray(spatial, dtype=np.float64) > theta).astype(np.float64)


def minmax_normalize(spatial):
    """Rescale to [0, 1]; a constant map becomes all zeros."""
    spatial = np.asarray(spatial, dtype=np.float64)
    lo, hi = spatial.min(), spatial.max()
    if hi - lo <= 0:
        return np.zeros_like(spatial)
    return (spatial - lo) / (hi - lo)
