"""Top-k softmax routing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import linalg
from .model import Model, Router, Routing


class GatingError(ValueError):
    pass


@dataclass(frozen=True)
class GatingDecision:
    indices: tuple[int, ...]  # descending weight, ties toward the lower index
    weights: tuple[float, ...]
    token_step: int = 0

    @property
    def k(self) -> int:
        return len(self.indices)

    def same_selection(self, other: "GatingDecision | None") -> bool:
        """True when ``other`` selects the same experts with bit-identical weights."""
        return other is not None and self.indices == other.indices and self.weights == other.weights


def top_k_softmax(logits: np.ndarray, k: int) -> tuple[tuple[int, ...], tuple[float, ...]]:
    """Select the ``k`` largest logits and softmax over just those.

    Unselected logits are masked out of the normalization. This is the single
    place that fixes mask-then-normalize ordering.
    """
    z = np.asarray(logits, dtype=np.float64).ravel()
    n = z.shape[0]
    if not 1 <= k <= n:
        raise GatingError(f"top_k={k} out of range for {n} experts")
    if not np.all(np.isfinite(z)):
        raise GatingError("non-finite router logits")
    # stable sort on -z keeps the lower index first among ties
    order = np.argsort(-z, kind="stable")[:k]
    sel = z[order]
    e = np.exp(sel - sel[0])
    w = e / e.sum()
    return tuple(int(i) for i in order), tuple(float(v) for v in w)


def router_logits(router: Router, x: np.ndarray) -> np.ndarray:
    return linalg.matmul(router.w_g, x)


def gate(router: Router, x: np.ndarray, k: int, t: int = 0) -> GatingDecision:
    n = router.w_g.shape[0]
    if not 1 <= k <= n:
        raise GatingError(f"top_k={k} out of range for {n} experts")
    indices, weights = top_k_softmax(router_logits(router, x), k)
    return GatingDecision(indices, weights, t)


def pre_gate(model: Model, x1: np.ndarray, t: int = 0) -> GatingDecision:
    """The one decision shared by every adapted site for token ``t``."""
    if model.config.routing is not Routing.PRE_GATED:
        raise GatingError(f"pre_gate requires PreGated routing, model uses {model.config.routing.value}")
    return gate(model.routers[0], x1, model.config.top_k, t)
