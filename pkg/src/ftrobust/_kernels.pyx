# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels; see ``_pykernels`` for the reference semantics."""

import numpy as np
cimport numpy as cnp
from cpython.pycapsule cimport PyCapsule_GetPointer, PyCapsule_IsValid
from libc.math cimport exp, sqrt
from numpy.random cimport bitgen_t
from numpy.random.c_distributions cimport random_standard_normal, random_standard_uniform

cnp.import_array()

cdef double GELU_C = 0.7978845608028654
cdef double GELU_A = 0.044715


def gelu_fwd(x):
    cdef cnp.ndarray[cnp.float64_t, ndim=1] flat = np.ascontiguousarray(x, dtype=np.float64).reshape(-1)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty_like(flat)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] der = np.empty_like(flat)
    cdef double[::1] xv = flat
    cdef double[::1] ov = out
    cdef double[::1] dv = der
    cdef Py_ssize_t i, n = flat.shape[0]
    cdef double v, v2, t
    with nogil:
        for i in range(n):
            v = xv[i]
            v2 = v * v
            t = 1.0 - 2.0 / (1.0 + exp(2.0 * GELU_C * (v + GELU_A * v2 * v)))
            ov[i] = 0.5 * v * (1.0 + t)
            dv[i] = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v2)
    shape = np.shape(x)
    return out.reshape(shape), der.reshape(shape)


def layer_norm_fwd(x, gain, bias, double eps):
    cdef double[:, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t rows = xv.shape[0], cols = xv.shape[1], i, j
    out = np.empty((rows, cols))
    xhat = np.empty((rows, cols))
    inv = np.empty(rows)
    cdef double[:, ::1] ov = out
    cdef double[:, ::1] hv = xhat
    cdef double[::1] iv = inv
    cdef double[::1] gv = np.ascontiguousarray(gain, dtype=np.float64) if gain is not None else np.ones(cols)
    cdef double[::1] bv = np.ascontiguousarray(bias, dtype=np.float64) if bias is not None else np.zeros(cols)
    cdef double mu, var, s, c
    with nogil:
        for i in range(rows):
            mu = 0.0
            for j in range(cols):
                mu += xv[i, j]
            mu /= cols
            var = 0.0
            for j in range(cols):
                c = xv[i, j] - mu
                var += c * c
            s = 1.0 / sqrt(var / cols + eps)
            iv[i] = s
            for j in range(cols):
                c = (xv[i, j] - mu) * s
                hv[i, j] = c
                ov[i, j] = c * gv[j] + bv[j]
    return out, xhat, inv


def layer_norm_bwd(g, xhat, inv, gain):
    cdef double[:, ::1] gv = np.ascontiguousarray(g, dtype=np.float64)
    cdef double[:, ::1] hv = np.ascontiguousarray(xhat, dtype=np.float64)
    cdef double[::1] iv = np.ascontiguousarray(inv, dtype=np.float64)
    cdef Py_ssize_t rows = gv.shape[0], cols = gv.shape[1], i, j
    cdef double[::1] wv = np.ascontiguousarray(gain, dtype=np.float64) if gain is not None else np.ones(cols)
    dx = np.empty((rows, cols))
    dgain = np.zeros(cols)
    dbias = np.zeros(cols)
    cdef double[:, ::1] dxv = dx
    cdef double[::1] dgv = dgain
    cdef double[::1] dbv = dbias
    cdef double m1, m2, d
    with nogil:
        for i in range(rows):
            m1 = 0.0
            m2 = 0.0
            for j in range(cols):
                d = gv[i, j] * wv[j]
                m1 += d
                m2 += d * hv[i, j]
                dgv[j] += gv[i, j] * hv[i, j]
                dbv[j] += gv[i, j]
            m1 /= cols
            m2 /= cols
            for j in range(cols):
                dxv[i, j] = iv[i] * (gv[i, j] * wv[j] - m1 - hv[i, j] * m2)
    return dx, dgain, dbias


def gaussian_linear_mc(rng, w, double eta, double p, Py_ssize_t n, Py_ssize_t chunk=65536):
    cdef double[::1] wv = np.ascontiguousarray(w, dtype=np.float64)
    cdef Py_ssize_t d = wv.shape[0] - 1
    capsule = rng.bit_generator.capsule
    if not PyCapsule_IsValid(capsule, "BitGenerator"):
        raise ValueError("invalid bit generator capsule")
    cdef bitgen_t *bg = <bitgen_t *> PyCapsule_GetPointer(capsule, "BitGenerator")
    cdef double[::1] ys = np.empty(chunk)
    cdef double[::1] x1s = np.empty(chunk)
    cdef Py_ssize_t done = 0, c, i, j, correct = 0
    cdef double y, s
    with rng.bit_generator.lock, nogil:
        while done < n:
            c = chunk if n - done > chunk else n - done
            for i in range(c):
                ys[i] = 1.0 if random_standard_uniform(bg) < 0.5 else -1.0
            for i in range(c):
                x1s[i] = ys[i] if random_standard_uniform(bg) < p else -ys[i]
            for i in range(c):
                y = ys[i]
                s = wv[0] * x1s[i]
                for j in range(d):
                    s += wv[j + 1] * (eta * y + random_standard_normal(bg))
                if s * y > 0:
                    correct += 1
            done += c
    return int(correct)


def pareto_mask(acc, rob):
    a = np.ascontiguousarray(acc, dtype=np.float64)
    r = np.ascontiguousarray(rob, dtype=np.float64)
    cdef cnp.int64_t[::1] order = np.lexsort((np.arange(a.shape[0]), -r, -a)).astype(np.int64)
    mask = np.zeros(a.shape[0], dtype=np.uint8)
    cdef unsigned char[::1] mv = mask
    cdef double[::1] rv = r
    cdef Py_ssize_t k, i
    cdef double best = -1e308
    cdef bint first = True
    with nogil:
        for k in range(order.shape[0]):
            i = order[k]
            if first or rv[i] > best:
                mv[i] = 1
                best = rv[i]
                first = False
    return mask.astype(bool)


def frontier_auc(acc, rob):
    cdef double[::1] a = np.ascontiguousarray(acc, dtype=np.float64)
    cdef double[::1] r = np.ascontiguousarray(rob, dtype=np.float64)
    cdef Py_ssize_t i, n = a.shape[0]
    cdef double area
    if n == 0:
        return 0.0
    area = a[0] * r[0]
    for i in range(1, n):
        area += (a[i] - a[i - 1]) * (r[i] + r[i - 1]) * 0.5
    return area
