"""Adapter and router fine-tuning on a synthetic routing task.

The backbone, embedding and head stay frozen; only expert factors and the
shared pre-gate router move. Gradients are exact reverse-mode derivatives of
the pre-gated forward, with the top-k selection held fixed.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .engine import NonFiniteError, pre_gated_naive_forward
from .gating import GatingDecision
from .model import Model, Routing
from . import linalg


class TrainingDiverged(FloatingPointError):
    pass


class StaleCacheError(RuntimeError):
    pass


@dataclass(frozen=True)
class SyntheticClasses:
    n_classes: int = 2
    tokens_per_class: int = 16


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 4
    learning_rate: float = 3e-4
    router_lr_scale: float = 1.0  # router step = learning_rate * router_lr_scale
    seed: int = 0
    task: SyntheticClasses = field(default_factory=SyntheticClasses)

    def validate(self, model: Model) -> None:
        problems = []
        if self.steps < 0:
            problems.append(f"steps: must be >= 0, got {self.steps}")
        if self.batch_size < 1:
            problems.append(f"batch_size: must be positive, got {self.batch_size}")
        if not self.learning_rate >= 0:
            problems.append(f"learning_rate: must be >= 0, got {self.learning_rate}")
        t = self.task
        if t.n_classes < 1 or t.n_classes > model.config.n_experts:
            problems.append(f"task.n_classes: must be in [1, n_experts={model.config.n_experts}]")
        if t.tokens_per_class < 1 or t.n_classes * t.tokens_per_class > model.config.vocab:
            problems.append("task.tokens_per_class: classes do not fit in the vocabulary")
        if problems:
            raise ValueError("invalid train config:\n  " + "\n  ".join(problems))


class SyntheticTask:
    """Vocabulary split into contiguous class ranges.

    Class ``c`` owns ``[c*V/n, (c+1)*V/n)``. Its first ``tokens_per_class``
    tokens are the inputs, and each maps to a target inside the same
    subrange through a seeded per-class permutation.
    """

    def __init__(self, vocab: int, spec: SyntheticClasses, seed: int):
        self.spec = spec
        self.span = vocab // spec.n_classes
        rng = np.random.default_rng([seed, 11])
        self.perms = [rng.permutation(spec.tokens_per_class) for _ in range(spec.n_classes)]
        self.tokens = np.array(
            [c * self.span + j for c in range(spec.n_classes) for j in range(spec.tokens_per_class)]
        )

    def class_of(self, token: int) -> int:
        return int(token) // self.span

    def label(self, token: int) -> int:
        c = self.class_of(token)
        return c * self.span + int(self.perms[c][int(token) - c * self.span])


@dataclass
class TrainCache:
    token: int
    logits: np.ndarray
    hidden: np.ndarray
    decision: GatingDecision
    x1: np.ndarray
    tape: list
    version: int


@dataclass
class Gradients:
    """Keyed by site id: arrays shaped like the expert bank (N, ...)."""

    down: dict[int, np.ndarray]
    up: dict[int, np.ndarray]
    router: np.ndarray

    @classmethod
    def zeros_like(cls, model: Model) -> "Gradients":
        down = {s.site_id: np.zeros((len(s.experts), *s.experts[0].down.shape)) for s in model.adapted_sites()}
        up = {s.site_id: np.zeros((len(s.experts), *s.experts[0].up.shape)) for s in model.adapted_sites()}
        return cls(down, up, np.zeros_like(_router(model).w_g))

    def add_(self, other: "Gradients", scale: float = 1.0) -> None:
        for k in self.down:
            self.down[k] += scale * other.down[k]
            self.up[k] += scale * other.up[k]
        self.router += scale * other.router


def _router(model: Model):
    return model.routers_for(Routing.PRE_GATED)[0]


def forward_train(model: Model, token: int) -> tuple[np.ndarray, TrainCache]:
    """Pre-gated forward (experts as separate products) with a cache for :func:`backward`."""
    if model.config.routing is not Routing.PRE_GATED:
        raise ValueError("training needs a PreGated model")
    x = np.ascontiguousarray(model.embedding[token].reshape(-1, 1))
    tape: list = []
    h, d, x1 = pre_gated_naive_forward(model, x, 0, None, tape)
    logits = linalg.matmul(model.head, h)
    return logits, TrainCache(token, logits, h, d, x1, tape, model.param_version)


def cross_entropy(logits: np.ndarray, label: int) -> tuple[float, np.ndarray]:
    z = logits[:, 0]
    m = z.max()
    e = np.exp(z - m)
    s = e.sum()
    loss = float(np.log(s) + m - z[label])
    g = e / s
    g[label] -= 1.0
    return loss, g.reshape(-1, 1)


def _site_backward(site, u, terms, g_out, grads: Gradients, grad_w: np.ndarray, scale: float) -> np.ndarray:
    g_u = site.weight.T @ g_out
    if terms:
        gd, gu = grads.down[site.site_id], grads.up[site.site_id]
        for j, (idx, coef, du, v) in enumerate(terms):
            e = site.experts[idx]
            grad_w[j] += scale * float(g_out[:, 0] @ v[:, 0])
            t = e.up.T @ g_out
            gu[idx] += coef * (g_out @ du.T)
            gd[idx] += coef * (t @ u.T)
            g_u += coef * (e.down.T @ t)
    return g_u


def backward(model: Model, cache: TrainCache, grad_logits: np.ndarray) -> Gradients:
    """Reverse-mode gradients for expert factors and the pre-gate router.

    Unselected experts get exactly zero; the top-k index set is treated as a
    constant.
    """
    if cache.version != model.param_version:
        raise StaleCacheError("cache was produced before the last parameter update")
    cfg = model.config
    scale = cfg.scale
    grads = Gradients.zeros_like(model)
    grad_w = np.zeros(len(cache.decision.weights))

    g = model.head.T @ grad_logits
    tape = cache.tape
    for b in reversed(range(cfg.n_blocks)):
        mix_in, mix_out, gate, up, down = tape[5 * b : 5 * b + 5]
        # down(tanh(gate(h)) * up(h)) + h
        g_z = _site_backward(down[0], down[1], down[3], g, grads, grad_w, scale)
        tg = np.tanh(gate[2])
        g_gate = g_z * up[2] * (1.0 - tg * tg)
        g_up = g_z * tg
        g_h = g.copy()
        g_h += _site_backward(gate[0], gate[1], gate[3], g_gate, grads, grad_w, scale)
        g_h += _site_backward(up[0], up[1], up[3], g_up, grads, grad_w, scale)
        # h = x + mix_out(tanh(mix_in(x)))
        ta = mix_out[1]
        g_ta = _site_backward(mix_out[0], ta, mix_out[3], g_h, grads, grad_w, scale)
        g_a = g_ta * (1.0 - ta * ta)
        g = g_h + _site_backward(mix_in[0], mix_in[1], mix_in[3], g_a, grads, grad_w, scale)

    # renormalized softmax over the selected logits
    w = np.array(cache.decision.weights)
    g_sel = w * (grad_w - float(w @ grad_w))
    for j, idx in enumerate(cache.decision.indices):
        grads.router[idx] += g_sel[j] * cache.x1[:, 0]
    return grads


def loss_and_grads(model: Model, token: int, label: int) -> tuple[float, Gradients]:
    logits, cache = forward_train(model, token)
    loss, g = cross_entropy(logits, label)
    return loss, backward(model, cache, g)


def task_loss(model: Model, task: SyntheticTask) -> float:
    losses = [cross_entropy(forward_train(model, int(t))[0], task.label(int(t)))[0] for t in task.tokens]
    return float(np.mean(losses))


def apply_sgd(model: Model, grads: Gradients, lr: float, router_lr: float | None = None) -> None:
    for site in model.adapted_sites():
        gd, gu = grads.down[site.site_id], grads.up[site.site_id]
        for i, e in enumerate(site.experts):
            e.down -= lr * gd[i]
            e.up -= lr * gu[i]
    _router(model).w_g -= (lr if router_lr is None else router_lr) * grads.router
    model.param_version += 1


def routing_histogram(model: Model, task: SyntheticTask) -> dict[int, list[float]]:
    """Per class, the share of its tokens whose top expert is each expert."""
    n = model.config.n_experts
    hist = {}
    for c in range(task.spec.n_classes):
        counts = np.zeros(n)
        toks = [t for t in task.tokens if task.class_of(t) == c]
        for t in toks:
            _, cache = forward_train(model, int(t))
            counts[cache.decision.indices[0]] += 1
        hist[c] = list(counts / len(toks))
    return hist


@dataclass
class TrainReport:
    loss_curve: list[float]
    initial_loss: float
    final_loss: float
    routing_histogram: dict[int, list[float]]
    top_k_tag: str
    steps: int

    def dominant_shares(self) -> dict[int, float]:
        return {c: max(h) for c, h in self.routing_histogram.items()}

    def to_json(self) -> str:
        d = asdict(self)
        d["routing_histogram"] = {str(k): v for k, v in self.routing_histogram.items()}
        d["dominant_shares"] = {str(k): v for k, v in self.dominant_shares().items()}
        return json.dumps(d, indent=2)


def train(model: Model, config: TrainConfig) -> TrainReport:
    """Plain SGD on the synthetic task; mutates the adapter/router tensors of ``model``."""
    config.validate(model)
    task = SyntheticTask(model.config.vocab, config.task, config.seed)
    rng = np.random.default_rng([config.seed, 13])
    initial = task_loss(model, task)
    curve = []
    for step in range(config.steps):
        batch = rng.choice(task.tokens, size=config.batch_size)
        total = Gradients.zeros_like(model)
        batch_loss = 0.0
        # index-ordered reduction keeps the run deterministic
        for tok in batch:
            try:
                loss, grads = loss_and_grads(model, int(tok), task.label(int(tok)))
            except NonFiniteError as exc:
                raise TrainingDiverged(f"step {step}: {exc}") from exc
            batch_loss += loss
            total.add_(grads)
        batch_loss /= config.batch_size
        if not np.isfinite(batch_loss):
            raise TrainingDiverged(f"loss became non-finite at step {step}")
        curve.append(batch_loss)
        step_lr = config.learning_rate / config.batch_size
        apply_sgd(model, total, step_lr, step_lr * config.router_lr_scale)
    try:
        final = task_loss(model, task)
        hist = routing_histogram(model, task)
    except NonFiniteError as exc:
        raise TrainingDiverged(f"after step {config.steps - 1}: {exc}") from exc
    return TrainReport(
        loss_curve=curve,
        initial_loss=initial,
        final_loss=final,
        routing_histogram=hist,
        top_k_tag=f"Top-{model.config.top_k}",
        steps=config.steps,
    )
