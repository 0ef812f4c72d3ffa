# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled dense kernels.

Every output element is reduced over the inner index in ascending order,
starting from 0.0, with a separate multiply and add per term. The module is
built with ``-ffp-contract=off`` so no fused multiply-add changes rounding;
results are bit-identical to :mod:`dynlora._fallback`.
"""

from libc.stdlib cimport malloc, free
from libc.string cimport memcpy

import numpy as np
cimport numpy as cnp

cnp.import_array()


cdef extern from "_acc.h" nogil:
    void dl_acc(double *tgt, Py_ssize_t ldt, const double *a, Py_ssize_t lda,
                const double *b, Py_ssize_t ldb, Py_ssize_t p, Py_ssize_t rows,
                Py_ssize_t cols, double sign, double *buf)
    void dl_matvec(double *y, Py_ssize_t ldy, const double *a, Py_ssize_t m,
                   Py_ssize_t p, const double *x, Py_ssize_t ldx)


cdef int _matmul(const double[:, ::1] a, const double[:, ::1] b,
                 double[:, ::1] out) noexcept nogil:
    cdef Py_ssize_t m = a.shape[0], p = a.shape[1], n = b.shape[1]
    cdef Py_ssize_t i, j
    cdef double *buf
    if m == 0 or n == 0:
        return 0
    if p == 0:
        for i in range(m):
            for j in range(n):
                out[i, j] = 0.0
        return 0
    if n == 1:
        dl_matvec(&out[0, 0], 1, &a[0, 0], m, p, &b[0, 0], 1)
        return 0
    # 0.0 + 1.0 * s == s for every sum s an ascending reduction from 0.0 can produce
    for i in range(m):
        for j in range(n):
            out[i, j] = 0.0
    buf = <double *> malloc(4 * n * sizeof(double))
    if buf == NULL:
        return -1
    dl_acc(&out[0, 0], n, &a[0, 0], p, &b[0, 0], n, p, m, n, 1.0, buf)
    free(buf)
    return 0


cdef inline void _acc_ptr(double *tgt, Py_ssize_t ldt, const double *a, Py_ssize_t lda,
                          const double *b, Py_ssize_t ldb, Py_ssize_t p,
                          Py_ssize_t rows, Py_ssize_t cols, double sign, double *buf) noexcept nogil:
    # buf holds 4 * cols doubles
    dl_acc(tgt, ldt, a, lda, b, ldb, p, rows, cols, sign, buf)


cdef int _accumulate_block(double[:, ::1] target, const double[:, ::1] a,
                           const double[:, ::1] b, double sign,
                           Py_ssize_t tr0, Py_ssize_t tc0,
                           Py_ssize_t ar0, Py_ssize_t bc0,
                           Py_ssize_t rows, Py_ssize_t cols) noexcept nogil:
    if rows <= 0 or cols <= 0 or target.shape[1] == 0:
        return 0
    cdef double *row = <double *> malloc(4 * cols * sizeof(double))
    if row == NULL:
        return -1
    cdef const double *bp = &b[0, 0] + bc0 if b.shape[0] > 0 else NULL
    cdef const double *ap = &a[ar0, 0] if a.shape[1] > 0 else NULL
    _acc_ptr(&target[tr0, tc0], target.shape[1], ap, a.shape[1],
             bp, b.shape[1], a.shape[1], rows, cols, sign, row)
    free(row)
    return 0


def matmul_into(const double[:, ::1] a, const double[:, ::1] b, double[:, ::1] out):
    cdef int rc
    with nogil:
        rc = _matmul(a, b, out)
    if rc != 0:
        raise MemoryError("matmul: scratch allocation failed")


def matmul(const double[:, ::1] a, const double[:, ::1] b):
    out = np.empty((a.shape[0], b.shape[1]), dtype=np.float64)
    cdef double[:, ::1] ov = out
    cdef int rc
    with nogil:
        rc = _matmul(a, b, ov)
    if rc != 0:
        raise MemoryError("matmul: scratch allocation failed")
    return out


def accumulate(double[:, ::1] target, const double[:, ::1] a,
               const double[:, ::1] b, double sign):
    cdef int rc
    with nogil:
        rc = _accumulate_block(target, a, b, sign, 0, 0, 0, 0,
                               target.shape[0], target.shape[1])
    if rc != 0:
        raise MemoryError("accumulate: scratch allocation failed")


def accumulate_tile(double[:, ::1] target, const double[:, ::1] a,
                    const double[:, ::1] b, Py_ssize_t tr0, Py_ssize_t tc0,
                    Py_ssize_t ar0, Py_ssize_t bc0, Py_ssize_t rows, Py_ssize_t cols):
    """Add one ``rows x cols`` output tile of ``a @ b`` into ``target``.

    ``ar0``/``bc0`` locate the tile's operands inside ``a``/``b``; they equal
    ``tr0``/``tc0`` for full operands and 0 for staged copies.
    """
    cdef int rc
    with nogil:
        rc = _accumulate_block(target, a, b, 1.0, tr0, tc0, ar0, bc0, rows, cols)
    if rc != 0:
        raise MemoryError("accumulate_tile: scratch allocation failed")


cdef double *_f64_data(object arr, Py_ssize_t *rows, Py_ssize_t *cols) except NULL:
    # pointer into a C-contiguous float64 matrix, without a buffer acquisition
    if not cnp.PyArray_Check(arr):
        raise TypeError("fill_fused: factors must be numpy arrays")
    cdef cnp.ndarray m = <cnp.ndarray> arr
    if cnp.PyArray_NDIM(m) != 2 or cnp.PyArray_TYPE(m) != cnp.NPY_FLOAT64 or not cnp.PyArray_IS_C_CONTIGUOUS(m):
        raise ValueError("fill_fused: factors must be C-contiguous float64 matrices")
    rows[0] = cnp.PyArray_DIM(m, 0)
    cols[0] = cnp.PyArray_DIM(m, 1)
    return <double *> cnp.PyArray_DATA(m)


def fill_fused(double[::1] down_buf, double[::1] up_buf, list plan):
    """Write concatenated factor slices into packed buffers.

    ``plan`` holds ``(down_offset, up_offset, rank_rows, terms)`` per segment,
    with ``terms`` a list of ``(down, up, coef, up_sign)``. Down rows are
    scaled by ``coef``; up columns are multiplied by ``up_sign`` (+-1, exact).
    """
    cdef Py_ssize_t d_off, u_off, rank_rows, row, r, d_in, d_out, ur, uc, i, j
    cdef double *dp
    cdef double *up
    cdef double *db = &down_buf[0] if down_buf.shape[0] else NULL
    cdef double *ub = &up_buf[0] if up_buf.shape[0] else NULL
    cdef double coef, sgn
    for d_off, u_off, rank_rows, terms in plan:
        row = 0
        for down, upf, coef, sgn in terms:
            dp = _f64_data(down, &r, &d_in)
            up = _f64_data(upf, &d_out, &uc)
            if uc != r or row + r > rank_rows:
                raise ValueError("fill_fused: factor shapes do not match the segment")
            if d_off + rank_rows * d_in > down_buf.shape[0] or u_off + d_out * rank_rows > up_buf.shape[0]:
                raise ValueError("fill_fused: segment outside buffer")
            with nogil:
                for i in range(r * d_in):
                    db[d_off + row * d_in + i] = coef * dp[i]
                for i in range(d_out):
                    for j in range(r):
                        ub[u_off + i * rank_rows + row + j] = sgn * up[i * r + j]
            row += r


cdef void _stage_next(const Py_ssize_t[:, ::1] tiles, Py_ssize_t k, size_t[::1] bpv,
                      Py_ssize_t[:, ::1] dv, double *dst) noexcept nogil:
    # copy the tile's strided column slice of the down factor into dst
    cdef Py_ssize_t si = tiles[k, 0], c0 = tiles[k, 2], cols = tiles[k, 4]
    cdef Py_ssize_t p = dv[si, 1], ld = dv[si, 0], t
    cdef const double *b
    if p == 0 or cols == ld:
        return
    b = <const double *> bpv[si] + c0
    for t in range(p):
        memcpy(dst + t * cols, b + t * ld, cols * sizeof(double))


def run_tiles(list targets, list ups, list downs, const Py_ssize_t[:, ::1] tiles, bint prefetch):
    """Apply ``targets[s][tile] += ups[s][rows] @ downs[s][:, cols]`` for each tile.

    ``tiles`` rows are ``(segment, r0, c0, rows, cols)``. With ``prefetch`` the
    next tile's down-factor column slice, when strided, is copied into a
    contiguous staging buffer before the current tile is reduced; up rows are
    already contiguous and are read in place. The values are the same either way.
    """
    cdef Py_ssize_t n_seg = len(targets), n = tiles.shape[0]
    cdef Py_ssize_t s, k, si, r0, c0, rows, cols, p
    cdef Py_ssize_t max_cols = 1, max_b = 1
    if len(ups) != n_seg or len(downs) != n_seg:
        raise ValueError("run_tiles: segment lists differ in length")
    if n == 0:
        return
    if tiles.shape[1] != 5:
        raise ValueError("run_tiles: tiles must have 5 columns")
    tp = np.empty(n_seg, dtype=np.uintp)
    ap = np.empty(n_seg, dtype=np.uintp)
    bp = np.empty(n_seg, dtype=np.uintp)
    dims = np.empty((n_seg, 3), dtype=np.intp)  # ld target (= cols), rank, rows
    cdef double[:, ::1] tv
    cdef const double[:, ::1] av
    cdef const double[:, ::1] bv
    for s in range(n_seg):
        tv = targets[s]
        av = ups[s]
        bv = downs[s]
        if av.shape[0] != tv.shape[0] or bv.shape[1] != tv.shape[1] or av.shape[1] != bv.shape[0]:
            raise ValueError(f"run_tiles: segment {s} operands do not conform")
        tp[s] = <size_t> &tv[0, 0] if tv.size else 0
        ap[s] = <size_t> &av[0, 0] if av.size else 0
        bp[s] = <size_t> &bv[0, 0] if bv.size else 0
        dims[s, 0] = tv.shape[1]
        dims[s, 1] = av.shape[1]
        dims[s, 2] = tv.shape[0]
    cdef size_t[::1] tpv = tp
    cdef size_t[::1] apv = ap
    cdef size_t[::1] bpv = bp
    cdef Py_ssize_t[:, ::1] dv = dims
    for k in range(n):
        si, r0, c0, rows, cols = tiles[k, 0], tiles[k, 1], tiles[k, 2], tiles[k, 3], tiles[k, 4]
        if not (0 <= si < n_seg and rows > 0 and cols > 0 and r0 >= 0 and c0 >= 0
                and r0 + rows <= dv[si, 2] and c0 + cols <= dv[si, 0]):
            raise ValueError(f"run_tiles: tile {k} outside its segment")
        max_cols = max(max_cols, cols)
        max_b = max(max_b, dv[si, 1] * cols)

    cdef double *row = <double *> malloc(4 * max_cols * sizeof(double))
    cdef double *stage = <double *> malloc(2 * max_b * sizeof(double))
    if row == NULL or stage == NULL:
        free(row)
        free(stage)
        raise MemoryError("run_tiles: scratch allocation failed")
    cdef const double *a
    cdef const double *b
    cdef Py_ssize_t ld, ldb
    with nogil:
        if prefetch:
            _stage_next(tiles, 0, bpv, dv, stage)
        for k in range(n):
            si, r0, c0, rows, cols = tiles[k, 0], tiles[k, 1], tiles[k, 2], tiles[k, 3], tiles[k, 4]
            p = dv[si, 1]
            ld = dv[si, 0]
            a = <const double *> apv[si] + r0 * p
            b = <const double *> bpv[si] + c0
            ldb = ld
            if prefetch:
                if cols < ld:
                    b = stage + (k % 2) * max_b
                    ldb = cols
                if k + 1 < n:
                    _stage_next(tiles, k + 1, bpv, dv, stage + ((k + 1) % 2) * max_b)
            if p > 0:
                _acc_ptr(<double *> tpv[si] + r0 * ld + c0, ld, a, p, b, ldb, p, rows, cols, 1.0, row)
    free(row)
    free(stage)

