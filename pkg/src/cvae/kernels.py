"""Hot numeric kernels, each with a numba loop and a numpy twin.

Both variants evaluate the same arithmetic in the same order where that is
cheap to guarantee (the distance sums are bitwise identical across
backends); the texture interpolation may differ in the last ulp.
"""

import math

import numpy as np

from ._accel import dispatch, njit

# --------------------------------------------------------------------------
# per-point, per-label sums of Euclidean distances (silhouette inner loop)


@njit
def _label_distance_sums_numba(points, codes, n_labels):
    n, dim = points.shape
    sums = np.zeros((n, n_labels))
    for i in range(n):
        for j in range(n):
            acc = 0.0
            for c in range(dim):
                diff = points[i, c] - points[j, c]
                acc += diff * diff
            sums[i, codes[j]] += math.sqrt(acc)
    return sums


def _label_distance_sums_numpy(points, codes, n_labels):
    n = points.shape[0]
    sums = np.zeros((n, n_labels))
    for i in range(n):
        diff = points[i] - points
        dist = np.sqrt((diff * diff).sum(axis=1))
        sums[i] = np.bincount(codes, weights=dist, minlength=n_labels)
    return sums


@dispatch(_label_distance_sums_numba, _label_distance_sums_numpy)
def label_distance_sums(points, codes, n_labels):
    """``sums[i, c]`` = total distance from point ``i`` to every point labelled ``c``.

    ``codes`` must be int64 in ``[0, n_labels)``; ``points`` float64 C-contiguous.
    """


# --------------------------------------------------------------------------
# smooth value-noise upsampling of coarse random lattices


@njit
def _lattice_upsample_numba(lattices, height, width):
    m, gh, gw = lattices.shape
    out = np.empty((m, height, width))
    sy = (gh - 1) / height
    sx = (gw - 1) / width
    for k in range(m):
        for y in range(height):
            u = (y + 0.5) * sy
            i0 = int(u)
            if i0 > gh - 2:
                i0 = gh - 2
            fy = u - i0
            ty = fy * fy * (3.0 - 2.0 * fy)
            for x in range(width):
                w = (x + 0.5) * sx
                j0 = int(w)
                if j0 > gw - 2:
                    j0 = gw - 2
                fx = w - j0
                tx = fx * fx * (3.0 - 2.0 * fx)
                top = lattices[k, i0, j0] + tx * (lattices[k, i0, j0 + 1] - lattices[k, i0, j0])
                bot = lattices[k, i0 + 1, j0] + tx * (lattices[k, i0 + 1, j0 + 1] - lattices[k, i0 + 1, j0])
                out[k, y, x] = top + ty * (bot - top)
    return out


def _lattice_upsample_numpy(lattices, height, width):
    _, gh, gw = lattices.shape
    u = (np.arange(height) + 0.5) * ((gh - 1) / height)
    w = (np.arange(width) + 0.5) * ((gw - 1) / width)
    i0 = np.minimum(u.astype(np.int64), gh - 2)
    j0 = np.minimum(w.astype(np.int64), gw - 2)
    fy = u - i0
    fx = w - j0
    ty = (fy * fy * (3.0 - 2.0 * fy))[None, :, None]
    tx = (fx * fx * (3.0 - 2.0 * fx))[None, None, :]
    a = lattices[:, i0[:, None], j0[None, :]]
    b = lattices[:, i0[:, None], j0[None, :] + 1]
    c = lattices[:, i0[:, None] + 1, j0[None, :]]
    d = lattices[:, i0[:, None] + 1, j0[None, :] + 1]
    top = a + tx * (b - a)
    bot = c + tx * (d - c)
    return top + ty * (bot - top)


@dispatch(_lattice_upsample_numba, _lattice_upsample_numpy)
def lattice_upsample(lattices, height, width):
    """Smoothstep-bilinear upsampling of ``(m, gh, gw)`` lattices to ``(m, height, width)``."""


# --------------------------------------------------------------------------
# fused in-place Adam update


@njit
def _adam_update_numba(param, grad, m, v, lr, beta1, beta2, eps, step):
    p = param.ravel()
    g = grad.ravel()
    mf = m.ravel()
    vf = v.ravel()
    bc1 = 1.0 - beta1**step
    bc2 = 1.0 - beta2**step
    for i in range(p.size):
        mf[i] = beta1 * mf[i] + (1.0 - beta1) * g[i]
        vf[i] = beta2 * vf[i] + (1.0 - beta2) * (g[i] * g[i])
        m_hat = mf[i] / bc1
        v_hat = vf[i] / bc2
        p[i] -= lr * m_hat / (math.sqrt(v_hat) + eps)


def _adam_update_numpy(param, grad, m, v, lr, beta1, beta2, eps, step):
    bc1 = 1.0 - beta1**step
    bc2 = 1.0 - beta2**step
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * (grad * grad)
    param -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


@dispatch(_adam_update_numba, _adam_update_numpy)
def adam_update(param, grad, m, v, lr, beta1, beta2, eps, step):
    """In-place Adam update of ``param``, ``m`` and ``v`` (all C-contiguous float64)."""
