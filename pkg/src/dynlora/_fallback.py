"""Pure-Python (numpy) kernels with the same reduction order as the compiled core.

Each product is built as a running sum of rank-1 updates in ascending inner
index, so every output element sees exactly the summation sequence the
compiled loops perform. numpy multiplies and adds in separate ufuncs, which
keeps the rounding identical as well.
"""

from __future__ import annotations

import numpy as np


def matmul_into(a: np.ndarray, b: np.ndarray, out: np.ndarray) -> None:
    out[...] = 0.0
    if b.shape[1] == 1:
        col = out[:, 0]
        for t in range(a.shape[1]):
            col += a[:, t] * b[t, 0]
        return
    for t in range(a.shape[1]):
        out += a[:, t : t + 1] * b[t : t + 1, :]


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.empty((a.shape[0], b.shape[1]), dtype=np.float64)
    matmul_into(a, b, out)
    return out


def accumulate(target: np.ndarray, a: np.ndarray, b: np.ndarray, sign: float) -> None:
    prod = matmul(a, b)
    target += sign * prod


def accumulate_tile(
    target: np.ndarray,
    a: np.ndarray,
    b: np.ndarray,
    tr0: int,
    tc0: int,
    ar0: int,
    bc0: int,
    rows: int,
    cols: int,
) -> None:
    if rows <= 0 or cols <= 0:
        return
    prod = matmul(a[ar0 : ar0 + rows], np.ascontiguousarray(b[:, bc0 : bc0 + cols]))
    target[tr0 : tr0 + rows, tc0 : tc0 + cols] += prod


def fill_fused(down_buf: np.ndarray, up_buf: np.ndarray, plan: list) -> None:
    for d_off, u_off, rank_rows, terms in plan:
        row = 0
        for down, up, coef, sgn in terms:
            r, d_in = down.shape
            d_out = up.shape[0]
            if up.shape[1] != r or row + r > rank_rows:
                raise ValueError("fill_fused: factor shapes do not match the segment")
            if d_off + rank_rows * d_in > down_buf.size or u_off + d_out * rank_rows > up_buf.size:
                raise ValueError("fill_fused: segment outside buffer")
            dv = down_buf[d_off : d_off + rank_rows * d_in].reshape(rank_rows, d_in)
            uv = up_buf[u_off : u_off + d_out * rank_rows].reshape(d_out, rank_rows)
            np.multiply(coef, down, out=dv[row : row + r])
            np.multiply(sgn, up, out=uv[:, row : row + r])
            row += r


def run_tiles(targets: list, ups: list, downs: list, tiles: np.ndarray, prefetch: bool) -> None:
    if not len(ups) == len(downs) == len(targets):
        raise ValueError("run_tiles: segment lists differ in length")
    for k, (si, r0, c0, rows, cols) in enumerate(tiles.tolist()):
        if not (0 <= si < len(targets) and rows > 0 and cols > 0 and r0 >= 0 and c0 >= 0
                and r0 + rows <= targets[si].shape[0] and c0 + cols <= targets[si].shape[1]):
            raise ValueError(f"run_tiles: tile {k} outside its segment")

    def stage(k):
        # only a strided column slice of the down factor is worth copying
        si, _, c0, _, cols = (int(v) for v in tiles[k])
        if cols == downs[si].shape[1]:
            return None
        return np.ascontiguousarray(downs[si][:, c0 : c0 + cols])

    n = len(tiles)
    nxt = stage(0) if prefetch and n else None
    for k in range(n):
        si, r0, c0, rows, cols = (int(v) for v in tiles[k])
        b, bc0 = downs[si], c0
        if prefetch:
            staged, nxt = nxt, (stage(k + 1) if k + 1 < n else None)
            if staged is not None:
                b, bc0 = staged, 0
        accumulate_tile(targets[si], ups[si], b, r0, c0, r0, bc0, rows, cols)
