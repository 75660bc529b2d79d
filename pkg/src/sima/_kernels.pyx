# cython: language_level=3, cdivision=True
"""Compiled elementwise attention kernels.

Same contracts as ``sima._kernels_py``; inputs may be float32 or float64 and
arbitrarily strided, outputs are fresh C-contiguous arrays of the input dtype.
"""
import numpy as np

cimport cython
from cython cimport floating
from libc.math cimport exp, expf, fabs, fabsf

NAME = "cython"


cdef inline floating _exp(floating v) noexcept nogil:
    if floating is float:
        return expf(v)
    else:
        return exp(v)


cdef inline floating _abs(floating v) noexcept nogil:
    if floating is float:
        return fabsf(v)
    else:
        return fabs(v)


@cython.boundscheck(False)
@cython.wraparound(False)
def _softmax_2d(floating[:, ::1] x, floating[:, ::1] out):
    cdef Py_ssize_t i, j
    cdef Py_ssize_t m = x.shape[0], n = x.shape[1]
    cdef floating mx, s, v
    with nogil:
        for i in range(m):
            mx = x[i, 0]
            for j in range(1, n):
                if x[i, j] > mx:
                    mx = x[i, j]
            s = 0
            for j in range(n):
                v = _exp(x[i, j] - mx)
                out[i, j] = v
                s += v
            for j in range(n):
                out[i, j] = out[i, j] / s


cdef void _l1_block(const floating* x, Py_ssize_t row_stride, Py_ssize_t m, Py_ssize_t n,
                    floating* out, floating* denom, floating floor) noexcept nogil:
    # x rows are row_stride elements apart, channels are unit stride
    cdef Py_ssize_t i, j
    cdef const floating* row
    cdef floating* orow
    for j in range(n):
        denom[j] = 0
    for i in range(m):
        row = x + i * row_stride
        for j in range(n):
            denom[j] += _abs(row[j])
    for j in range(n):
        if denom[j] < floor:
            denom[j] = floor
        denom[j] = 1 / denom[j]
    for i in range(m):
        row = x + i * row_stride
        orow = out + i * n
        for j in range(n):
            orow[j] = row[j] * denom[j]


@cython.boundscheck(False)
@cython.wraparound(False)
def _l1_columns_3d(floating[:, :, :] x, floating[:, :, ::1] out,
                   floating[::1] denom, double eps):
    cdef Py_ssize_t b, i, j
    cdef Py_ssize_t nb = x.shape[0], m = x.shape[1], n = x.shape[2]
    cdef Py_ssize_t item = sizeof(floating)
    cdef floating floor = <floating>eps
    cdef bint unit = x.strides[2] == item and x.strides[1] % item == 0
    cdef Py_ssize_t row_stride = x.strides[1] // item
    with nogil:
        for b in range(nb):
            if unit:
                _l1_block(&x[b, 0, 0], row_stride, m, n, &out[b, 0, 0], &denom[0], floor)
                continue
            for j in range(n):
                denom[j] = 0
            for i in range(m):
                for j in range(n):
                    denom[j] += _abs(x[b, i, j])
            for j in range(n):
                if denom[j] < floor:
                    denom[j] = floor
            for i in range(m):
                for j in range(n):
                    out[b, i, j] = x[b, i, j] / denom[j]


@cython.boundscheck(False)
@cython.wraparound(False)
def _elu_2d(floating[:, :] x, floating[:, ::1] out):
    cdef Py_ssize_t i, j, neg = 0
    cdef floating v
    with nogil:
        for i in range(x.shape[0]):
            for j in range(x.shape[1]):
                v = x[i, j]
                if v < 0:
                    out[i, j] = _exp(v)
                    neg += 1
                else:
                    out[i, j] = v + 1
    return neg


def _as_float(x):
    x = np.asarray(x)
    if x.dtype != np.float32 and x.dtype != np.float64:
        x = x.astype(np.float64)
    return x


def _rows_view(x):
    # collapses leading axes; copies only when the layout forces it
    if x.ndim == 1:
        return x.reshape(1, -1)
    return x.reshape(-1, x.shape[-1])


def softmax_rows(x):
    x = _as_float(x)
    x2 = np.ascontiguousarray(_rows_view(x))
    out = np.empty(x2.shape, dtype=x.dtype)
    if x2.shape[0] and x2.shape[1]:
        _softmax_2d(x2, out)
    return out.reshape(x.shape)


def l1_normalize_columns(x, eps):
    x = _as_float(x)
    if x.ndim < 2:
        raise ValueError(f"l1_normalize_columns needs rank >= 2, got shape {x.shape}")
    x3 = x.reshape(-1, x.shape[-2], x.shape[-1])
    out = np.empty(x3.shape, dtype=x.dtype)
    denom = np.empty(x.shape[-1], dtype=x.dtype)
    if x3.size:
        _l1_columns_3d(x3, out, denom, eps)
    return out.reshape(x.shape)


def elu_feature(x):
    x = _as_float(x)
    x2 = _rows_view(x)
    out = np.empty(x2.shape, dtype=x.dtype)
    neg = 0
    if x2.size:
        neg = _elu_2d(x2, out)
    return out.reshape(x.shape), int(neg)
