/* Tile accumulation for the compiled core.
 *
 * tgt[i, j] += sign * sum_t a[i, t] * b[t, j]. Every sum starts at 0.0 and adds
 * one product at a time in ascending t; built without FMA contraction, so the
 * result matches the numpy fallback bit for bit.
 */
#ifndef DYNLORA_ACC_H
#define DYNLORA_ACC_H

#include <stddef.h>

/* four target rows share each load of b */
static inline void dl_acc_rows4(double *restrict tgt, ptrdiff_t ldt, const double *restrict a,
                                ptrdiff_t lda, const double *restrict b, ptrdiff_t ldb,
                                ptrdiff_t p, ptrdiff_t cols, double sign, double *restrict buf)
{
    double *restrict r0 = buf;
    double *restrict r1 = buf + cols;
    double *restrict r2 = buf + 2 * cols;
    double *restrict r3 = buf + 3 * cols;
    const double *a0 = a, *a1 = a + lda, *a2 = a + 2 * lda, *a3 = a + 3 * lda;
    ptrdiff_t j, t = 0;
    for (j = 0; j < cols; j++)
        r0[j] = r1[j] = r2[j] = r3[j] = 0.0;
    for (; t + 4 <= p; t += 4) {
        const double *restrict b0 = b + t * ldb;
        const double *restrict b1 = b0 + ldb;
        const double *restrict b2 = b1 + ldb;
        const double *restrict b3 = b2 + ldb;
        const double u0 = a0[t], u1 = a0[t + 1], u2 = a0[t + 2], u3 = a0[t + 3];
        const double v0 = a1[t], v1 = a1[t + 1], v2 = a1[t + 2], v3 = a1[t + 3];
        const double w0 = a2[t], w1 = a2[t + 1], w2 = a2[t + 2], w3 = a2[t + 3];
        const double z0 = a3[t], z1 = a3[t + 1], z2 = a3[t + 2], z3 = a3[t + 3];
        for (j = 0; j < cols; j++) {
            const double x0 = b0[j], x1 = b1[j], x2 = b2[j], x3 = b3[j];
            r0[j] = (((r0[j] + u0 * x0) + u1 * x1) + u2 * x2) + u3 * x3;
            r1[j] = (((r1[j] + v0 * x0) + v1 * x1) + v2 * x2) + v3 * x3;
            r2[j] = (((r2[j] + w0 * x0) + w1 * x1) + w2 * x2) + w3 * x3;
            r3[j] = (((r3[j] + z0 * x0) + z1 * x1) + z2 * x2) + z3 * x3;
        }
    }
    for (; t < p; t++) {
        const double *restrict b0 = b + t * ldb;
        const double u0 = a0[t], v0 = a1[t], w0 = a2[t], z0 = a3[t];
        for (j = 0; j < cols; j++) {
            const double x0 = b0[j];
            r0[j] = r0[j] + u0 * x0;
            r1[j] = r1[j] + v0 * x0;
            r2[j] = r2[j] + w0 * x0;
            r3[j] = r3[j] + z0 * x0;
        }
    }
    for (j = 0; j < cols; j++) {
        tgt[j] = tgt[j] + sign * r0[j];
        tgt[ldt + j] = tgt[ldt + j] + sign * r1[j];
        tgt[2 * ldt + j] = tgt[2 * ldt + j] + sign * r2[j];
        tgt[3 * ldt + j] = tgt[3 * ldt + j] + sign * r3[j];
    }
}

static inline void dl_acc_row(double *restrict tr, const double *restrict ar,
                              const double *restrict b, ptrdiff_t ldb, ptrdiff_t p,
                              ptrdiff_t cols, double sign, double *restrict row)
{
    ptrdiff_t j, t = 0;
    for (j = 0; j < cols; j++)
        row[j] = 0.0;
    for (; t + 4 <= p; t += 4) {
        const double *restrict b0 = b + t * ldb;
        const double *restrict b1 = b0 + ldb;
        const double *restrict b2 = b1 + ldb;
        const double *restrict b3 = b2 + ldb;
        const double a0 = ar[t], a1 = ar[t + 1], a2 = ar[t + 2], a3 = ar[t + 3];
        for (j = 0; j < cols; j++)
            row[j] = (((row[j] + a0 * b0[j]) + a1 * b1[j]) + a2 * b2[j]) + a3 * b3[j];
    }
    for (; t < p; t++) {
        const double *restrict b0 = b + t * ldb;
        const double a0 = ar[t];
        for (j = 0; j < cols; j++)
            row[j] = row[j] + a0 * b0[j];
    }
    for (j = 0; j < cols; j++)
        tr[j] = tr[j] + sign * row[j];
}

/* buf holds 4 * cols doubles */
static inline void dl_acc(double *tgt, ptrdiff_t ldt, const double *a, ptrdiff_t lda,
                          const double *b, ptrdiff_t ldb, ptrdiff_t p, ptrdiff_t rows,
                          ptrdiff_t cols, double sign, double *buf)
{
    ptrdiff_t i = 0;
    for (; i + 4 <= rows; i += 4)
        dl_acc_rows4(tgt + i * ldt, ldt, a + i * lda, lda, b, ldb, p, cols, sign, buf);
    for (; i < rows; i++)
        dl_acc_row(tgt + i * ldt, a + i * lda, b, ldb, p, cols, sign, buf);
}

/* y = A x with eight rows in flight, so the ascending sums do not serialize */
static inline void dl_matvec(double *restrict y, ptrdiff_t ldy, const double *restrict a,
                             ptrdiff_t m, ptrdiff_t p, const double *restrict x, ptrdiff_t ldx)
{
    ptrdiff_t i = 0, t, k;
    for (; i + 8 <= m; i += 8) {
        double s[8] = {0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0};
        const double *ai = a + i * p;
        for (t = 0; t < p; t++) {
            const double xt = x[t * ldx];
            for (k = 0; k < 8; k++)
                s[k] = s[k] + ai[k * p + t] * xt;
        }
        for (k = 0; k < 8; k++)
            y[(i + k) * ldy] = s[k];
    }
    for (; i < m; i++) {
        double acc = 0.0;
        for (t = 0; t < p; t++)
            acc = acc + a[i * p + t] * x[t * ldx];
        y[i * ldy] = acc;
    }
}

#endif
