"""Hot loops: stencil application, the Laplacian CG loop, masked correlation.

Each kernel has a numba implementation and a pure numpy one with the same
signature.  The numba path is used when numba imports and the environment
variable ``ELLIPTIC_CONTINUATION_NUMBA`` is not set to ``0``/``false``/``off``.
The choice is made once at import time; both families stay importable as
``numba_kernels`` / ``numpy_kernels`` for benchmarking and cross-checks.
"""
from __future__ import annotations

import os
from types import SimpleNamespace

import numpy as np

ENV_FLAG = "ELLIPTIC_CONTINUATION_NUMBA"

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None


def _numba_requested() -> bool:
    return os.environ.get(ENV_FLAG, "1").strip().lower() not in ("0", "false", "off", "no")


# -- numpy reference implementations ------------------------------------------


def _np_laplacian(u: np.ndarray, h: float) -> np.ndarray:
    """Standard (2 dim + 1)-point negative Laplacian with zero boundary values."""
    out = 2.0 * u.ndim * u
    p = np.pad(u, 1)
    inner = tuple(slice(1, -1) for _ in range(u.ndim))
    for ax in range(u.ndim):
        for shift in (-1, 1):
            sl = list(inner)
            sl[ax] = slice(1 + shift, p.shape[ax] - 1 + shift)
            out = out - p[tuple(sl)]
    return out / (h * h)


def _np_centered(u: np.ndarray, h: float, axis: int) -> np.ndarray:
    p = np.moveaxis(u, axis, 0)
    out = np.zeros_like(p)
    out[:-1] += p[1:]
    out[1:] -= p[:-1]
    return np.moveaxis(out, 0, axis) / (2.0 * h)


def _np_div_form(u, faces, mixed, q, h):
    """``-div(a grad u) + q u`` in flux form.

    ``faces[i]`` holds ``a_ii`` at the n+1 face midpoints along axis i;
    ``mixed`` maps ``(i, j), i < j`` to ``a_ij`` at the nodes.
    """
    out = q * u
    for ax in range(u.ndim):
        flux = faces[ax] * np.diff(np.pad(u, [(1, 1) if k == ax else (0, 0) for k in range(u.ndim)]), axis=ax)
        out = out - np.diff(flux, axis=ax) / (h * h)
    for (i, j), a in mixed.items():
        out = out - _np_centered(a * _np_centered(u, h, j), h, i)
        out = out - _np_centered(a * _np_centered(u, h, i), h, j)
    return out


def _np_cg_laplacian(b, x, h, rtol, maxiter):
    """Conjugate gradients for the constant-coefficient Laplacian, in place on ``x``."""
    bnorm = np.sqrt(np.dot(b.ravel(), b.ravel()))
    if bnorm == 0.0:
        x[...] = 0.0
        return 0, 0.0
    r = b - _np_laplacian(x, h)
    p = r.copy()
    rr = np.dot(r.ravel(), r.ravel())
    it = 0
    while np.sqrt(rr) > rtol * bnorm and it < maxiter:
        ap = _np_laplacian(p, h)
        alpha = rr / np.dot(p.ravel(), ap.ravel())
        x += alpha * p
        r -= alpha * ap
        rr_new = np.dot(r.ravel(), r.ravel())
        p = r + (rr_new / rr) * p
        rr = rr_new
        it += 1
    return it, float(np.sqrt(rr) / bnorm)


def _np_correlate_masked(a, kernel, mask):
    """``out[x] = sum_o kernel[o] a[x + o]`` on masked nodes, zero elsewhere."""
    r = kernel.shape[0] // 2
    p = np.pad(a, r)
    out = np.zeros_like(a)
    n = a.shape
    for off in zip(*np.nonzero(kernel)):
        sl = tuple(slice(o, o + n[k]) for k, o in enumerate(off))
        out += kernel[off] * p[sl]
    return np.where(mask, out, 0.0)


numpy_kernels = SimpleNamespace(
    laplacian=_np_laplacian,
    div_form=_np_div_form,
    cg_laplacian=_np_cg_laplacian,
    correlate_masked=_np_correlate_masked,
    backend="numpy",
)


# -- numba implementations -------------------------------------------------------

numba_kernels = None

if numba is not None:
    njit = numba.njit(cache=True, fastmath=False)

    @njit
    def _nb_lap_flat(u, n, dim, inv_h2, out):
        nz = n if dim == 3 else 1
        diag = 2.0 * dim
        for i in range(n):
            for j in range(n):
                for k in range(nz):
                    idx = (i * n + j) * nz + k
                    s = diag * u[idx]
                    if i > 0:
                        s -= u[idx - n * nz]
                    if i < n - 1:
                        s -= u[idx + n * nz]
                    if j > 0:
                        s -= u[idx - nz]
                    if j < n - 1:
                        s -= u[idx + nz]
                    if dim == 3:
                        if k > 0:
                            s -= u[idx - 1]
                        if k < n - 1:
                            s -= u[idx + 1]
                    out[idx] = s * inv_h2

    @njit
    def _nb_dot(a, b):
        s = 0.0
        for i in range(a.size):
            s += a[i] * b[i]
        return s

    @njit
    def _nb_cg_flat(b, x, n, dim, h, rtol, maxiter):
        inv_h2 = 1.0 / (h * h)
        m = b.size
        bnorm = np.sqrt(_nb_dot(b, b))
        if bnorm == 0.0:
            for i in range(m):
                x[i] = 0.0
            return 0, 0.0
        ap = np.empty(m)
        _nb_lap_flat(x, n, dim, inv_h2, ap)
        r = b - ap
        p = r.copy()
        rr = _nb_dot(r, r)
        it = 0
        while np.sqrt(rr) > rtol * bnorm and it < maxiter:
            _nb_lap_flat(p, n, dim, inv_h2, ap)
            alpha = rr / _nb_dot(p, ap)
            for i in range(m):
                x[i] += alpha * p[i]
                r[i] -= alpha * ap[i]
            rr_new = _nb_dot(r, r)
            beta = rr_new / rr
            for i in range(m):
                p[i] = r[i] + beta * p[i]
            rr = rr_new
            it += 1
        return it, np.sqrt(rr) / bnorm

    @njit
    def _nb_div_form3(u, ax, ay, az, axy, axz, ayz, q, h, has_mixed, out):
        n0, n1, n2 = u.shape
        inv_h2 = 1.0 / (h * h)
        for i in range(n0):
            for j in range(n1):
                for k in range(n2):
                    c = u[i, j, k]
                    um = u[i - 1, j, k] if i > 0 else 0.0
                    up = u[i + 1, j, k] if i < n0 - 1 else 0.0
                    s = ax[i + 1, j, k] * (up - c) - ax[i, j, k] * (c - um)
                    um = u[i, j - 1, k] if j > 0 else 0.0
                    up = u[i, j + 1, k] if j < n1 - 1 else 0.0
                    s += ay[i, j + 1, k] * (up - c) - ay[i, j, k] * (c - um)
                    um = u[i, j, k - 1] if k > 0 else 0.0
                    up = u[i, j, k + 1] if k < n2 - 1 else 0.0
                    s += az[i, j, k + 1] * (up - c) - az[i, j, k] * (c - um)
                    out[i, j, k] = q[i, j, k] * c - s * inv_h2
        if not has_mixed:
            return
        # centered derivatives, then the symmetric cross terms
        inv_2h = 0.5 / h
        gx = np.zeros_like(u)
        gy = np.zeros_like(u)
        gz = np.zeros_like(u)
        for i in range(n0):
            for j in range(n1):
                for k in range(n2):
                    gx[i, j, k] = ((u[i + 1, j, k] if i < n0 - 1 else 0.0) - (u[i - 1, j, k] if i > 0 else 0.0)) * inv_2h
                    gy[i, j, k] = ((u[i, j + 1, k] if j < n1 - 1 else 0.0) - (u[i, j - 1, k] if j > 0 else 0.0)) * inv_2h
                    gz[i, j, k] = ((u[i, j, k + 1] if k < n2 - 1 else 0.0) - (u[i, j, k - 1] if k > 0 else 0.0)) * inv_2h
        for i in range(n0):
            for j in range(n1):
                for k in range(n2):
                    s = 0.0
                    # -d_x(a_xy d_y u + a_xz d_z u)
                    if i < n0 - 1:
                        s += axy[i + 1, j, k] * gy[i + 1, j, k] + axz[i + 1, j, k] * gz[i + 1, j, k]
                    if i > 0:
                        s -= axy[i - 1, j, k] * gy[i - 1, j, k] + axz[i - 1, j, k] * gz[i - 1, j, k]
                    # -d_y(a_xy d_x u + a_yz d_z u)
                    if j < n1 - 1:
                        s += axy[i, j + 1, k] * gx[i, j + 1, k] + ayz[i, j + 1, k] * gz[i, j + 1, k]
                    if j > 0:
                        s -= axy[i, j - 1, k] * gx[i, j - 1, k] + ayz[i, j - 1, k] * gz[i, j - 1, k]
                    # -d_z(a_xz d_x u + a_yz d_y u)
                    if k < n2 - 1:
                        s += axz[i, j, k + 1] * gx[i, j, k + 1] + ayz[i, j, k + 1] * gy[i, j, k + 1]
                    if k > 0:
                        s -= axz[i, j, k - 1] * gx[i, j, k - 1] + ayz[i, j, k - 1] * gy[i, j, k - 1]
                    out[i, j, k] -= s * inv_2h

    @njit
    def _nb_correlate3(a, offsets, weights, mask, out):
        # offsets outer, nodes inner: each pass is a shifted axpy over contiguous rows
        n0, n1, n2 = a.shape
        out[:] = 0.0
        for m in range(weights.shape[0]):
            di, dj, dk = offsets[m, 0], offsets[m, 1], offsets[m, 2]
            w = weights[m]
            for i in range(max(0, -di), min(n0, n0 - di)):
                for j in range(max(0, -dj), min(n1, n1 - dj)):
                    for k in range(max(0, -dk), min(n2, n2 - dk)):
                        out[i, j, k] += w * a[i + di, j + dj, k + dk]
        for i in range(n0):
            for j in range(n1):
                for k in range(n2):
                    if not mask[i, j, k]:
                        out[i, j, k] = 0.0

    def _nb_laplacian(u, h):
        u = np.ascontiguousarray(u, dtype=np.float64)
        out = np.empty(u.size)
        _nb_lap_flat(u.reshape(-1), u.shape[0], u.ndim, 1.0 / (h * h), out)
        return out.reshape(u.shape)

    def _nb_div_form(u, faces, mixed, q, h):
        u = np.ascontiguousarray(u, dtype=np.float64)
        c = np.ascontiguousarray
        if u.ndim == 2:
            # 2D runs as a 3D slab with a leading singleton axis carrying zero coefficients
            n = u.shape[0]
            zero = np.zeros((1, n, n))
            ax = np.zeros((2, n, n))
            ay, az = (c(f)[None] for f in faces)
            axy = axz = zero
            ayz = c(mixed[(0, 1)])[None] if (0, 1) in mixed else zero
            u3, q3 = u[None], c(q)[None]
        else:
            zero = np.zeros(u.shape)
            ax, ay, az = (c(f) for f in faces)
            axy = c(mixed[(0, 1)]) if (0, 1) in mixed else zero
            axz = c(mixed[(0, 2)]) if (0, 2) in mixed else zero
            ayz = c(mixed[(1, 2)]) if (1, 2) in mixed else zero
            u3, q3 = u, c(q)
        out = np.empty(u3.shape)
        _nb_div_form3(u3, ax, ay, az, axy, axz, ayz, q3, h, bool(mixed), out)
        return out.reshape(u.shape)

    def _nb_cg_laplacian(b, x, h, rtol, maxiter):
        b = np.ascontiguousarray(b, dtype=np.float64)
        xf = x.reshape(-1)
        if not np.shares_memory(xf, x):  # pragma: no cover - x is always contiguous here
            raise ValueError("x must be contiguous")
        it, rel = _nb_cg_flat(b.reshape(-1), xf, b.shape[0], b.ndim, float(h), float(rtol), int(maxiter))
        return int(it), float(rel)

    def _lead3(a):
        # singleton axis in front keeps the innermost loop long in 2D
        return a if a.ndim == 3 else a[None]

    def _nb_correlate_masked(a, kernel, mask):
        a = np.ascontiguousarray(a, dtype=np.float64)
        k3 = _lead3(np.asarray(kernel, dtype=np.float64))
        nz = np.argwhere(k3 != 0.0)
        weights = k3[tuple(nz.T)].copy()
        offsets = (nz - np.array(k3.shape) // 2).astype(np.int64)
        out = np.empty(_lead3(a).shape)
        _nb_correlate3(_lead3(a), offsets, weights, _lead3(np.ascontiguousarray(mask)), out)
        return out.reshape(a.shape)

    numba_kernels = SimpleNamespace(
        laplacian=_nb_laplacian,
        div_form=_nb_div_form,
        cg_laplacian=_nb_cg_laplacian,
        correlate_masked=_nb_correlate_masked,
        backend="numba",
    )


USE_NUMBA = numba_kernels is not None and _numba_requested()
kernels = numba_kernels if USE_NUMBA else numpy_kernels
