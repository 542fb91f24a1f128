"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and the environment
variable ``LDLMIX_DISABLE_NUMBA`` is unset (or set to ``0``). Both paths are
always importable under the ``*_numpy`` / ``*_numba`` names so they can be
benchmarked and cross-checked against each other.
"""
from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return wrap


USE_NUMBA = HAVE_NUMBA and os.environ.get("LDLMIX_DISABLE_NUMBA", "0") in ("", "0")


# ---------------------------------------------------------------------------
# 3x3 cross-correlation, stride 1, zero padding 1, on a batch of 1-channel maps
# ---------------------------------------------------------------------------

def conv3x3_forward_numpy(x: np.ndarray, kernel: np.ndarray, bias: float) -> np.ndarray:
    b, h, w = x.shape
    xp = np.zeros((b, h + 2, w + 2))
    xp[:, 1:-1, 1:-1] = x
    out = np.full((b, h, w), float(bias))
    for a in range(3):
        for c in range(3):
            out += kernel[a, c] * xp[:, a:a + h, c:c + w]
    return out


def conv3x3_backward_numpy(x: np.ndarray, kernel: np.ndarray, grad: np.ndarray):
    """Return (dx, dkernel, dbias) for upstream gradient ``grad``."""
    b, h, w = x.shape
    xp = np.zeros((b, h + 2, w + 2))
    xp[:, 1:-1, 1:-1] = x
    gp = np.zeros((b, h + 2, w + 2))
    dk = np.empty((3, 3))
    for a in range(3):
        for c in range(3):
            gp[:, a:a + h, c:c + w] += kernel[a, c] * grad
            dk[a, c] = np.sum(xp[:, a:a + h, c:c + w] * grad)
    return gp[:, 1:-1, 1:-1].copy(), dk, float(np.sum(grad))


@njit(cache=True)
def conv3x3_forward_numba(x, kernel, bias):
    b, h, w = x.shape
    out = np.empty((b, h, w))
    for n in range(b):
        for i in range(h):
            for j in range(w):
                acc = bias
                for a in range(3):
                    ii = i + a - 1
                    if ii < 0 or ii >= h:
                        continue
                    for c in range(3):
                        jj = j + c - 1
                        if jj < 0 or jj >= w:
                            continue
                        acc += kernel[a, c] * x[n, ii, jj]
                out[n, i, j] = acc
    return out


@njit(cache=True)
def conv3x3_backward_numba(x, kernel, grad):
    b, h, w = x.shape
    dx = np.zeros((b, h, w))
    dk = np.zeros((3, 3))
    db = 0.0
    for n in range(b):
        for i in range(h):
            for j in range(w):
                g = grad[n, i, j]
                db += g
                for a in range(3):
                    ii = i + a - 1
                    if ii < 0 or ii >= h:
                        continue
                    for c in range(3):
                        jj = j + c - 1
                        if jj < 0 or jj >= w:
                            continue
                        dx[n, ii, jj] += kernel[a, c] * g
                        dk[a, c] += x[n, ii, jj] * g
    return dx, dk, db


# ---------------------------------------------------------------------------
# Cyclic Jacobi eigendecomposition of a real symmetric matrix
# ---------------------------------------------------------------------------

def _rotation(app: float, aqq: float, apq: float):
    tau = (aqq - app) / (2.0 * apq)
    if tau >= 0.0:
        t = 1.0 / (tau + np.sqrt(1.0 + tau * tau))
    else:
        t = -1.0 / (-tau + np.sqrt(1.0 + tau * tau))
    c = 1.0 / np.sqrt(1.0 + t * t)
    return c, t * c


def jacobi_eigh_numpy(a: np.ndarray, tol: float = 1e-14, max_sweeps: int = 100):
    """Eigenvalues and column eigenvectors of symmetric ``a`` (unsorted)."""
    a = np.array(a, dtype=np.float64, copy=True)
    d = a.shape[0]
    v = np.eye(d)
    scale = np.sqrt(np.sum(a * a))
    if scale == 0.0:
        return np.zeros(d), v
    for _ in range(max_sweeps):
        off = np.sqrt(max(np.sum(a * a) - np.sum(np.diag(a) ** 2), 0.0))
        if off <= tol * scale:
            break
        for p in range(d - 1):
            row = a[p]
            # rotations with a negligible pivot are skipped; whole rows often are
            cand = np.nonzero(np.abs(row[p + 1:]) > tol * scale * 1e-3)[0]
            for q in cand + p + 1:
                apq = a[p, q]
                if abs(apq) <= tol * scale * 1e-3:
                    continue
                c, s = _rotation(a[p, p], a[q, q], apq)
                colp = a[:, p].copy()
                colq = a[:, q]
                a[:, p] = c * colp - s * colq
                a[:, q] = s * colp + c * colq
                rowp = a[p, :].copy()
                rowq = a[q, :]
                a[p, :] = c * rowp - s * rowq
                a[q, :] = s * rowp + c * rowq
                a[p, q] = 0.0
                a[q, p] = 0.0
                vp = v[:, p].copy()
                vq = v[:, q]
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    return np.diag(a).copy(), v


@njit(cache=True)
def jacobi_eigh_numba(a, tol=1e-14, max_sweeps=100):
    a = a.copy()
    d = a.shape[0]
    vt = np.eye(d)   # eigenvectors as rows so every rotation touches contiguous memory
    scale = np.sqrt(np.sum(a * a))
    if scale == 0.0:
        return np.zeros(d), vt
    skip = tol * scale * 1e-3
    for _ in range(max_sweeps):
        off = 0.0
        for i in range(d):
            for j in range(d):
                if i != j:
                    off += a[i, j] * a[i, j]
        if np.sqrt(off) <= tol * scale:
            break
        for p in range(d - 1):
            for q in range(p + 1, d):
                apq = a[p, q]
                if abs(apq) <= skip:
                    continue
                app = a[p, p]
                aqq = a[q, q]
                tau = (aqq - app) / (2.0 * apq)
                if tau >= 0.0:
                    t = 1.0 / (tau + np.sqrt(1.0 + tau * tau))
                else:
                    t = -1.0 / (-tau + np.sqrt(1.0 + tau * tau))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                # rows p, q of J^T A; off the 2x2 block these equal J^T A J,
                # and symmetry gives the columns
                for k in range(d):
                    apk = a[p, k]
                    aqk = a[q, k]
                    a[p, k] = c * apk - s * aqk
                    a[q, k] = s * apk + c * aqk
                for k in range(d):
                    a[k, p] = a[p, k]
                    a[k, q] = a[q, k]
                a[p, p] = app - t * apq
                a[q, q] = aqq + t * apq
                a[p, q] = 0.0
                a[q, p] = 0.0
                for k in range(d):
                    vp = vt[p, k]
                    vq = vt[q, k]
                    vt[p, k] = c * vp - s * vq
                    vt[q, k] = s * vp + c * vq
    return np.diag(a).copy(), vt.T.copy()


if USE_NUMBA:
    conv3x3_forward = conv3x3_forward_numba
    conv3x3_backward = conv3x3_backward_numba
    jacobi_eigh = jacobi_eigh_numba
else:
    conv3x3_forward = conv3x3_forward_numpy
    conv3x3_backward = conv3x3_backward_numpy
    jacobi_eigh = jacobi_eigh_numpy
