"""Token decode and prefill across the five execution modes.

All modes run the same :func:`~dynlora.model.block_forward` topology and
differ only in how each linear site is evaluated:

* ``NaivePerSite`` / ``NaivePerBlock``: backbone product plus separate
  expert products, routed per site / per block (latency baselines).
* ``PreGatedNaive``: one decision per token from the first adapted site's
  input, experts still evaluated as separate products.
* ``SimpleMerge``: pre-gated; merge each site's experts right before its
  forward and unmerge them all after the token.
* ``FusedSwitch``: pre-gated; one fused switch of every site through
  :func:`~dynlora.switching.sgmm`, then a plain backbone forward.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import linalg, switching
from .gating import GatingDecision, gate, pre_gate
from .model import AdapterSite, Model, Routing, block_forward
from .profiler import DispatchKind, ExecMode, Profiler, gemm_flops

__all__ = ["ExecMode", "DecodeSession", "NonFiniteError", "PRE_GATED_MODES"]

PRE_GATED_MODES = (ExecMode.PRE_GATED_NAIVE, ExecMode.SIMPLE_MERGE, ExecMode.FUSED_SWITCH)


class NonFiniteError(FloatingPointError):
    pass


def backbone_product(site: AdapterSite, u: np.ndarray, prof: Profiler | None) -> np.ndarray:
    if prof is not None:
        prof.record(DispatchKind.BACKBONE, gemm_flops(site.d_out, 1, site.d_in), site.site_id)
    return linalg.matmul(site.weight, u)


def adapter_sum(
    site: AdapterSite,
    u: np.ndarray,
    y: np.ndarray,
    d: GatingDecision,
    scale: float,
    prof: Profiler | None,
    tape: list | None = None,
) -> np.ndarray:
    """``y + sum_j (scale * w_j) * up_j @ (down_j @ u)`` with experts as separate products.

    ``tape`` receives ``(expert_index, coef, down_u, up_down_u)`` per expert.
    """
    for idx, w in zip(d.indices, d.weights):
        e = site.experts[idx]
        if prof is not None:
            prof.record(DispatchKind.ADAPTER, gemm_flops(e.down.shape[0], 1, site.d_in), site.site_id)
            prof.record(DispatchKind.ADAPTER, gemm_flops(site.d_out, 1, e.down.shape[0]), site.site_id)
        coef = scale * w
        du = linalg.matmul(e.down, u)
        v = linalg.matmul(e.up, du)
        y = y + coef * v
        if tape is not None:
            tape.append((idx, coef, du, v))
    return y


def pre_gated_router(model: Model):
    return model.routers_for(Routing.PRE_GATED)[0]


def _decide_pre_gated(model: Model, x1: np.ndarray, t: int, prof: Profiler | None) -> GatingDecision:
    router = pre_gated_router(model)
    if prof is not None:
        prof.record(DispatchKind.ROUTER, gemm_flops(router.w_g.shape[0], 1, router.w_g.shape[1]))
    if model.config.routing is Routing.PRE_GATED:
        return pre_gate(model, x1, t)
    return gate(router, x1, model.config.top_k, t)


def _check_finite(v: np.ndarray, site: AdapterSite) -> np.ndarray:
    if not np.isfinite(v).all():
        raise NonFiniteError(f"non-finite activation at block {site.block} site {site.name}")
    return v


def pre_gated_naive_forward(
    model: Model,
    x: np.ndarray,
    t: int,
    prof: Profiler | None,
    tape: list | None = None,
):
    """Hidden state after all blocks, plus the decision and first-site input.

    Shared by decode, prefill and training so the arithmetic is identical.
    ``tape`` collects ``(site, input, output, expert_terms)`` in forward order.
    """
    cfg = model.config
    scale = cfg.scale
    first = model.first_adapted_site()
    ctx: dict = {}

    def site_eval(site: AdapterSite, u: np.ndarray) -> np.ndarray:
        if site is first and "d" not in ctx:
            ctx["x1"] = u
            ctx["d"] = _decide_pre_gated(model, u, t, prof)
        y = backbone_product(site, u, prof)
        terms = [] if tape is not None else None
        if site.adapted:
            y = adapter_sum(site, u, y, ctx["d"], scale, prof, terms)
        if tape is not None:
            tape.append((site, u, y, terms))
        return _check_finite(y, site)

    h = x
    for block in model.blocks:
        h = block_forward(block, h, site_eval)
    return h, ctx["d"], ctx["x1"]


@dataclass
class DecodeSession:
    """One model, one mode, one token at a time."""

    model: Model
    mode: ExecMode
    profiler: Profiler | None = None
    switcher: switching.Switcher = field(default_factory=switching.Switcher)
    seed: int = 0
    state: switching.SwitchState = field(default_factory=switching.SwitchState)
    tokens: list[int] = field(default_factory=list)
    decisions: list[GatingDecision] = field(default_factory=list)
    step: int = 0
    fault_skip_unmerge_at: int | None = None  # SimpleMerge fault injection: leave this step merged

    def __post_init__(self):
        self._merged_now: list[tuple[AdapterSite, np.ndarray, np.ndarray]] = []

    def _embed(self, token_id: int) -> np.ndarray:
        vocab = self.model.config.vocab
        if not 0 <= token_id < vocab:
            raise ValueError(f"token id {token_id} out of range [0, {vocab})")
        return np.ascontiguousarray(self.model.embedding[token_id].reshape(-1, 1))

    def _logits(self, h: np.ndarray) -> np.ndarray:
        return linalg.matmul(self.model.head, h)

    def decode_token(self, token_id: int) -> np.ndarray:
        x = self._embed(token_id)
        t = self.step
        prof = self.profiler
        if prof is not None:
            prof.token_step = t
            prof.phase = "decode"
        if self.mode is ExecMode.PRE_GATED_NAIVE:
            h, d, _ = pre_gated_naive_forward(self.model, x, t, prof)
            self.decisions.append(d)
        elif self.mode in (ExecMode.NAIVE_PER_SITE, ExecMode.NAIVE_PER_BLOCK):
            h = self._naive_local(x, t)
        elif self.mode is ExecMode.SIMPLE_MERGE:
            h = self._simple_merge(x, t)
        else:
            h = self._fused(x, t)
        self.tokens.append(token_id)
        self.step += 1
        return self._logits(h)

    def _naive_local(self, x: np.ndarray, t: int) -> np.ndarray:
        model, prof = self.model, self.profiler
        cfg = model.config
        per_site = self.mode is ExecMode.NAIVE_PER_SITE
        routers = model.routers_for(Routing.PER_SITE if per_site else Routing.PER_BLOCK)
        router_of_site = {}
        if per_site:
            router_of_site = {s.site_id: r for s, r in zip(model.adapted_sites(), routers)}
        block_decision: dict = {}

        def decide(router, u):
            if prof is not None:
                prof.record(DispatchKind.ROUTER, gemm_flops(router.w_g.shape[0], 1, router.w_g.shape[1]))
            return gate(router, u, cfg.top_k, t)

        def site_eval(site: AdapterSite, u: np.ndarray) -> np.ndarray:
            y = backbone_product(site, u, prof)
            if site.adapted:
                d = decide(router_of_site[site.site_id], u) if per_site else block_decision["d"]
                y = adapter_sum(site, u, y, d, cfg.scale, prof)
            return _check_finite(y, site)

        h = x
        for b, block in enumerate(model.blocks):
            if not per_site:
                block_decision["d"] = decide(routers[b], h)
            h = block_forward(block, h, site_eval)
        return h

    def _simple_merge(self, x: np.ndarray, t: int) -> np.ndarray:
        model, prof = self.model, self.profiler
        cfg = model.config
        first = model.first_adapted_site()
        ctx: dict = {}
        merged = self._merged_now = []

        def site_eval(site: AdapterSite, u: np.ndarray) -> np.ndarray:
            if site.adapted:
                if site is first and "d" not in ctx:
                    ctx["d"] = _decide_pre_gated(model, u, t, prof)
                down_c, up_c = switching.build_concat(site, ctx["d"], cfg.scale)
                if prof is not None:
                    prof.record(DispatchKind.MERGE, gemm_flops(site.d_out, site.d_in, down_c.shape[0]), site.site_id)
                switching.merge(site, down_c, up_c)
                merged.append((site, down_c, up_c))
            return _check_finite(backbone_product(site, u, prof), site)

        h = x
        try:
            for block in model.blocks:
                h = block_forward(block, h, site_eval)
        finally:
            self._unmerge_simple()
        self.decisions.append(ctx["d"])
        return h

    def _unmerge_simple(self) -> None:
        prof = self.profiler
        merged, self._merged_now = self._merged_now, []
        if self.fault_skip_unmerge_at is not None and self.fault_skip_unmerge_at == self.step:
            return
        for site, down_c, up_c in merged:
            if prof is not None:
                prof.record(DispatchKind.MERGE, gemm_flops(site.d_out, site.d_in, down_c.shape[0]), site.site_id)
            switching.unmerge(site, down_c, up_c)

    def _fused(self, x: np.ndarray, t: int) -> np.ndarray:
        model, prof = self.model, self.profiler
        first = model.first_adapted_site()
        ctx: dict = {}

        def site_eval(site: AdapterSite, u: np.ndarray) -> np.ndarray:
            if site is first and "d" not in ctx:
                d = ctx["d"] = _decide_pre_gated(model, u, t, prof)
                # every adapted site sits at or after the first one, so no
                # already-evaluated weight changes here
                switching.switch_all(model, self.state, d, prof, self.switcher)
            return _check_finite(backbone_product(site, u, prof), site)

        h = x
        for block in model.blocks:
            h = block_forward(block, h, site_eval)
        self.decisions.append(ctx["d"])
        return h

    def prefill(self, token_ids: Sequence[int]) -> list[np.ndarray]:
        """Per-position logits through the pre-gated naive path, whatever the mode.

        Any merged adapters are unmerged first, and the session is left unmerged.
        """
        if len(token_ids) == 0:
            raise ValueError("prefill needs at least one token")
        prof = self.profiler
        if prof is not None:
            prof.phase = "prefill"
        try:
            self.restore()
            out = []
            for pos, tok in enumerate(token_ids):
                if prof is not None:
                    prof.token_step = pos
                h, _, _ = pre_gated_naive_forward(self.model, self._embed(tok), pos, prof)
                out.append(self._logits(h))
        finally:
            if prof is not None:
                prof.phase = "decode"
        return out

    def restore(self) -> None:
        """Unmerge any adapters still merged into the backbone."""
        if self._merged_now:
            self._unmerge_simple()
        switching.restore(self.model, self.state, self.profiler, self.switcher)

    def generate(self, prompt_ids: Sequence[int], n_new: int) -> list[int]:
        """Greedy continuation: prefill all but the last prompt token, then decode.

        Each new token costs one decode step, so ``n_new`` tokens log ``n_new``
        decode steps. Ties in argmax go to the lower token id.
        """
        if n_new < 1:
            raise ValueError("n_new must be >= 1")
        if len(prompt_ids) == 0:
            raise ValueError("prompt must contain at least one token")
        if len(prompt_ids) > 1:
            self.prefill(prompt_ids[:-1])
        out = []
        tok = int(prompt_ids[-1])
        for _ in range(n_new):
            logits = self.decode_token(tok)
            tok = int(np.argmax(logits[:, 0]))
            out.append(tok)
        return out
