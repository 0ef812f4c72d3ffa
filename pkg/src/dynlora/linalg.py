"""Dense float64 linear algebra with a fixed, ascending reduction order.

Matrices are C-contiguous 2-D ``numpy.float64`` arrays. The heavy loops run in
the compiled ``_kernels`` extension when it is importable, otherwise in the
numpy fallback; both produce bit-identical results. Set
``DYNLORA_BACKEND=python`` to force the fallback.
"""

from __future__ import annotations

import contextlib
import os
from types import ModuleType
from typing import Iterator, Sequence

import numpy as np

from . import _fallback


class ShapeError(ValueError):
    """Operands do not conform."""


def _load_compiled() -> ModuleType | None:
    if os.environ.get("DYNLORA_BACKEND", "").lower() == "python":
        return None
    try:
        from . import _kernels
    except ImportError:
        return None
    return _kernels


_compiled = _load_compiled()
_impl: ModuleType = _compiled if _compiled is not None else _fallback


def backend() -> str:
    return "compiled" if _impl is _compiled else "python"


def available_backends() -> list[str]:
    return ["compiled", "python"] if _compiled is not None else ["python"]


def set_backend(name: str) -> None:
    global _impl
    if name == "python":
        _impl = _fallback
    elif name == "compiled":
        if _compiled is None:
            raise RuntimeError("compiled kernels are not built; run `pip install -e .`")
        _impl = _compiled
    else:
        raise ValueError(f"unknown backend {name!r}")


@contextlib.contextmanager
def using_backend(name: str) -> Iterator[None]:
    prev = backend()
    set_backend(name)
    try:
        yield
    finally:
        set_backend(prev)


def as_matrix(x) -> np.ndarray:
    """Coerce to a C-contiguous float64 matrix (no copy when already one)."""
    m = np.ascontiguousarray(x, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(-1, 1)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def zeros(rows: int, cols: int) -> np.ndarray:
    return np.zeros((rows, cols), dtype=np.float64)


def _check(m: np.ndarray, name: str) -> None:
    if m.dtype != np.float64 or m.ndim != 2 or not m.flags.c_contiguous:
        raise ShapeError(f"{name} must be a C-contiguous float64 matrix")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b`` with each element summed in ascending inner index."""
    _check(a, "a")
    _check(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}")
    return _impl.matmul(a, b)


def accumulate(target: np.ndarray, a: np.ndarray, b: np.ndarray, sign: int = 1) -> None:
    """In place ``target += sign * (a @ b)``.

    The product is fully reduced before it is added, so the result is
    bit-identical to ``target + sign * matmul(a, b)``.
    """
    if sign not in (1, -1):
        raise ValueError(f"sign must be +1 or -1, got {sign}")
    _check(target, "target")
    _check(a, "a")
    _check(b, "b")
    if a.shape[1] != b.shape[0] or target.shape != (a.shape[0], b.shape[1]):
        raise ShapeError(
            f"accumulate: target {target.shape[0]}x{target.shape[1]} does not conform to "
            f"{a.shape[0]}x{a.shape[1]} @ {b.shape[0]}x{b.shape[1]}"
        )
    if target.shape[0] == 0 or target.shape[1] == 0:
        return
    _impl.accumulate(target, a, b, float(sign))


def accumulate_tile(target, a, b, tr0, tc0, ar0, bc0, rows, cols) -> None:
    """Unchecked tile update used by the segmented batched multiply."""
    _impl.accumulate_tile(target, a, b, tr0, tc0, ar0, bc0, rows, cols)


def run_tiles(targets: list, ups: list, downs: list, tiles: np.ndarray, prefetch: bool = True) -> None:
    """Tile loop of the segmented batched multiply; ``tiles`` rows are ``(seg, r0, c0, rows, cols)``."""
    _impl.run_tiles(targets, ups, downs, np.ascontiguousarray(tiles, dtype=np.intp), prefetch)


def fill_fused(down_buf: np.ndarray, up_buf: np.ndarray, plan: list) -> None:
    """Write scaled factor slices into packed buffers (see ``_kernels.fill_fused``)."""
    _impl.fill_fused(down_buf, up_buf, plan)


def concat_rank(
    parts_down: Sequence[np.ndarray],
    parts_up: Sequence[np.ndarray],
    d_in: int | None = None,
    d_out: int | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Stack low-rank factors along the rank axis.

    Returns ``(down_c, up_c)`` with ``up_c @ down_c == sum(up_i @ down_i)``.
    ``d_in``/``d_out`` are needed only to shape the result of an empty list.
    """
    if len(parts_down) != len(parts_up):
        raise ShapeError(f"concat_rank: {len(parts_down)} down parts vs {len(parts_up)} up parts")
    if not parts_down:
        if d_in is None or d_out is None:
            raise ShapeError("concat_rank: empty input needs d_in and d_out")
        return zeros(0, d_in), zeros(d_out, 0)
    d_in = parts_down[0].shape[1] if d_in is None else d_in
    d_out = parts_up[0].shape[0] if d_out is None else d_out
    for i, (dn, up) in enumerate(zip(parts_down, parts_up)):
        if dn.shape[1] != d_in:
            raise ShapeError(f"concat_rank: down part {i} has d_in {dn.shape[1]}, expected {d_in}")
        if up.shape[0] != d_out:
            raise ShapeError(f"concat_rank: up part {i} has d_out {up.shape[0]}, expected {d_out}")
        if up.shape[1] != dn.shape[0]:
            raise ShapeError(f"concat_rank: part {i} rank mismatch ({up.shape[1]} vs {dn.shape[0]})")
    return np.vstack(parts_down), np.ascontiguousarray(np.hstack(parts_up))
