"""Toy layered backbone with LoRA expert banks, routers and a binary file format."""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from . import linalg

SITE_NAMES = ("mix_in", "mix_out", "gate", "up", "down")
MLP_SITES = frozenset({"gate", "up", "down"})

MAGIC = b"LSWM"
VERSION = 1


class Placement(enum.Enum):
    ALL_LINEAR = "AllLinear"
    MLP_ONLY = "MlpOnly"


class Routing(enum.Enum):
    PER_SITE = "PerSite"
    PER_BLOCK = "PerBlock"
    PRE_GATED = "PreGated"


class ConfigError(ValueError):
    pass


class ModelFormatError(ValueError):
    pass


_PLACEMENT_CODES = {Placement.ALL_LINEAR: 0, Placement.MLP_ONLY: 1}
_ROUTING_CODES = {Routing.PER_SITE: 0, Routing.PER_BLOCK: 1, Routing.PRE_GATED: 2}


@dataclass(frozen=True)
class ModelConfig:
    n_blocks: int = 4
    d_model: int = 64
    d_hidden: int = 128
    vocab: int = 256
    n_experts: int = 8
    rank: int = 8
    alpha: float = 16.0
    top_k: int = 2
    placement: Placement = Placement.ALL_LINEAR
    routing: Routing = Routing.PRE_GATED
    seed: int = 0

    @property
    def scale(self) -> float:
        """LoRA scaling ``alpha / rank``."""
        return self.alpha / self.rank

    @property
    def total_sites(self) -> int:
        return len(SITE_NAMES) * self.n_blocks

    @property
    def adapted_per_block(self) -> int:
        return len(SITE_NAMES) if self.placement is Placement.ALL_LINEAR else len(MLP_SITES)

    @property
    def adapted_sites(self) -> int:
        return self.adapted_per_block * self.n_blocks

    def validate(self) -> None:
        problems = []
        for name in ("n_blocks", "d_model", "d_hidden", "vocab", "n_experts", "rank", "top_k"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 1:
                problems.append(f"{name}: must be a positive integer, got {v!r}")
        if not (isinstance(self.alpha, (int, float)) and self.alpha > 0 and np.isfinite(self.alpha)):
            problems.append(f"alpha: must be a positive number, got {self.alpha!r}")
        if isinstance(self.top_k, int) and isinstance(self.n_experts, int) and self.top_k > self.n_experts:
            problems.append(f"top_k: {self.top_k} exceeds n_experts {self.n_experts}")
        if isinstance(self.rank, int) and isinstance(self.d_model, int) and isinstance(self.d_hidden, int):
            if self.rank > min(self.d_model, self.d_hidden):
                problems.append(f"rank: {self.rank} exceeds min(d_model, d_hidden)={min(self.d_model, self.d_hidden)}")
        if not isinstance(self.placement, Placement):
            problems.append(f"placement: expected Placement, got {self.placement!r}")
        if not isinstance(self.routing, Routing):
            problems.append(f"routing: expected Routing, got {self.routing!r}")
        if not isinstance(self.seed, (int, np.integer)) or not 0 <= self.seed < 2**64:
            problems.append(f"seed: must be an unsigned 64-bit integer, got {self.seed!r}")
        if problems:
            raise ConfigError("invalid model config:\n  " + "\n  ".join(problems))

    def with_(self, **changes) -> "ModelConfig":
        return replace(self, **changes)


@dataclass
class LoraExpert:
    down: np.ndarray  # rank x d_in
    up: np.ndarray  # d_out x rank


@dataclass
class AdapterSite:
    site_id: int
    block: int
    name: str
    weight: np.ndarray  # d_out x d_in, live (possibly merged)
    experts: list[LoraExpert]
    adapted: bool
    pristine: np.ndarray | None = None

    @property
    def d_out(self) -> int:
        return self.weight.shape[0]

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]


@dataclass
class Block:
    mix_in: AdapterSite
    mix_out: AdapterSite
    gate: AdapterSite
    up: AdapterSite
    down: AdapterSite

    @property
    def sites(self) -> tuple[AdapterSite, ...]:
        return (self.mix_in, self.mix_out, self.gate, self.up, self.down)


@dataclass
class Router:
    w_g: np.ndarray  # n_experts x d_in


@dataclass
class Model:
    config: ModelConfig
    embedding: np.ndarray
    blocks: list[Block]
    head: np.ndarray
    routers: list[Router]
    _baseline_routers: dict = field(default_factory=dict, repr=False, compare=False)
    param_version: int = field(default=0, repr=False, compare=False)  # bumped by trainer updates

    def sites(self) -> Iterator[AdapterSite]:
        for block in self.blocks:
            yield from block.sites

    def adapted_sites(self) -> list[AdapterSite]:
        return [s for s in self.sites() if s.adapted]

    def first_adapted_site(self) -> AdapterSite:
        """The site whose input feeds the shared pre-gate router."""
        return next(s for s in self.blocks[0].sites if s.adapted)

    def routers_for(self, routing: Routing) -> list[Router]:
        """Routers for ``routing``.

        A model stores only the routers of its configured policy; the other
        policies get seeded routers on demand so every execution mode can run
        on any model file.
        """
        if routing is self.config.routing:
            return self.routers
        if routing not in self._baseline_routers:
            self._baseline_routers[routing] = _generate_routers(self.config, routing)
        return self._baseline_routers[routing]

    def enable_audit(self) -> None:
        """Keep a pristine copy of every adapted weight for drift checks."""
        for s in self.adapted_sites():
            if s.pristine is None:
                s.pristine = s.weight.copy()

    def copy(self) -> "Model":
        return Model(
            config=self.config,
            embedding=self.embedding.copy(),
            blocks=[
                Block(*[
                    AdapterSite(
                        s.site_id, s.block, s.name, s.weight.copy(),
                        [LoraExpert(e.down.copy(), e.up.copy()) for e in s.experts],
                        s.adapted, None if s.pristine is None else s.pristine.copy(),
                    )
                    for s in b.sites
                ])
                for b in self.blocks
            ],
            head=self.head.copy(),
            routers=[Router(r.w_g.copy()) for r in self.routers],
        )


def site_dims(cfg: ModelConfig, name: str) -> tuple[int, int]:
    """(d_out, d_in) of a named site."""
    if name in ("mix_in", "mix_out"):
        return cfg.d_model, cfg.d_model
    if name in ("gate", "up"):
        return cfg.d_hidden, cfg.d_model
    if name == "down":
        return cfg.d_model, cfg.d_hidden
    raise KeyError(name)


def is_adapted(cfg: ModelConfig, name: str) -> bool:
    return cfg.placement is Placement.ALL_LINEAR or name in MLP_SITES


def router_inputs(cfg: ModelConfig, routing: Routing) -> list[int]:
    """Input width of each router under ``routing``."""
    if routing is Routing.PRE_GATED:
        first = next(n for n in SITE_NAMES if is_adapted(cfg, n))
        return [site_dims(cfg, first)[1]]
    if routing is Routing.PER_BLOCK:
        return [cfg.d_model] * cfg.n_blocks
    return [site_dims(cfg, n)[1] for _ in range(cfg.n_blocks) for n in SITE_NAMES if is_adapted(cfg, n)]


def _gaussian(rng: np.random.Generator, rows: int, cols: int, std: float) -> np.ndarray:
    return np.ascontiguousarray(rng.standard_normal((rows, cols)) * std)


_ROUTER_STREAM = {Routing.PER_SITE: 1, Routing.PER_BLOCK: 2, Routing.PRE_GATED: 3}


def _generate_routers(cfg: ModelConfig, routing: Routing) -> list[Router]:
    # separate stream per policy so baseline routers never perturb the stored ones
    rng = np.random.default_rng([cfg.seed, _ROUTER_STREAM[routing]])
    return [
        Router(_gaussian(rng, cfg.n_experts, d_in, 1.0 / np.sqrt(d_in)))
        for d_in in router_inputs(cfg, routing)
    ]


def generate(cfg: ModelConfig) -> Model:
    """Seeded model: Gaussian backbone, zero expert up factors, Gaussian routers."""
    cfg.validate()
    rng = np.random.default_rng([cfg.seed, 0])
    embedding = _gaussian(rng, cfg.vocab, cfg.d_model, 1.0)
    blocks = []
    for b in range(cfg.n_blocks):
        sites = []
        for pos, name in enumerate(SITE_NAMES):
            d_out, d_in = site_dims(cfg, name)
            weight = _gaussian(rng, d_out, d_in, 1.0 / np.sqrt(d_in))
            adapted = is_adapted(cfg, name)
            experts = []
            if adapted:
                for _ in range(cfg.n_experts):
                    down = _gaussian(rng, cfg.rank, d_in, 1.0 / np.sqrt(d_in))
                    experts.append(LoraExpert(down, linalg.zeros(d_out, cfg.rank)))
            sites.append(AdapterSite(b * len(SITE_NAMES) + pos, b, name, weight, experts, adapted))
        blocks.append(Block(*sites))
    head = _gaussian(rng, cfg.vocab, cfg.d_model, 1.0 / np.sqrt(cfg.d_model))
    return Model(cfg, embedding, blocks, head, _generate_routers(cfg, cfg.routing))


def randomize_up_factors(model: Model, seed: int, std: float = 0.05) -> None:
    """Give every expert a nonzero seeded up factor, as after fine-tuning."""
    rng = np.random.default_rng([seed, 7])
    for site in model.adapted_sites():
        for e in site.experts:
            e.up[...] = rng.standard_normal(e.up.shape) * std


def block_forward(
    block: Block,
    x: np.ndarray,
    site_eval: Callable[[AdapterSite, np.ndarray], np.ndarray],
) -> np.ndarray:
    """One residual block: token mixer then tanh-gated MLP.

    Every linear layer is evaluated through ``site_eval`` so execution modes
    share the same topology.
    """
    mixed = site_eval(block.mix_out, np.tanh(site_eval(block.mix_in, x)))
    h = x + mixed
    hidden = np.tanh(site_eval(block.gate, h)) * site_eval(block.up, h)
    return h + site_eval(block.down, hidden)


# -- serialization ------------------------------------------------------------

_CONFIG_STRUCT = struct.Struct("<7I2IQd")


def _pack_config(cfg: ModelConfig) -> bytes:
    return _CONFIG_STRUCT.pack(
        cfg.n_blocks, cfg.d_model, cfg.d_hidden, cfg.vocab, cfg.n_experts, cfg.rank, cfg.top_k,
        _PLACEMENT_CODES[cfg.placement], _ROUTING_CODES[cfg.routing], cfg.seed, float(cfg.alpha),
    )


def _tensors(model: Model) -> Iterator[np.ndarray]:
    yield model.embedding
    for site in model.sites():
        yield site.weight
        for e in site.experts:
            yield e.down
            yield e.up
    for r in model.routers:
        yield r.w_g
    yield model.head


def to_bytes(model: Model) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION), _pack_config(model.config)]
    for t in _tensors(model):
        parts.append(struct.pack("<II", t.shape[0], t.shape[1]))
        parts.append(np.ascontiguousarray(t, dtype="<f8").tobytes())
    return b"".join(parts)


def save(model: Model, path: str | Path) -> None:
    Path(path).write_bytes(to_bytes(model))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise ModelFormatError(
                f"truncated {what} at offset {self.pos}: need {n} bytes, {len(self.buf) - self.pos} left"
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def tensor(self, rows: int, cols: int, label: str) -> np.ndarray:
        start = self.pos
        r, c = struct.unpack("<II", self.take(8, f"shape header of {label}"))
        if (r, c) != (rows, cols):
            raise ModelFormatError(
                f"shape header of {label} at offset {start} says {r}x{c}, expected {rows}x{cols}"
            )
        raw = self.take(8 * r * c, f"tensor payload of {label}")
        return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(r, c)


def from_bytes(buf: bytes) -> Model:
    rd = _Reader(buf)
    if rd.take(4, "magic") != MAGIC:
        raise ModelFormatError("bad magic: not a model file")
    (version,) = struct.unpack("<I", rd.take(4, "version"))
    if version != VERSION:
        raise ModelFormatError(f"version mismatch: file has {version}, reader supports {VERSION}")
    fields = _CONFIG_STRUCT.unpack(rd.take(_CONFIG_STRUCT.size, "config"))
    placement = {v: k for k, v in _PLACEMENT_CODES.items()}.get(fields[7])
    routing = {v: k for k, v in _ROUTING_CODES.items()}.get(fields[8])
    if placement is None or routing is None:
        raise ModelFormatError(f"unknown placement/routing code {fields[7]}/{fields[8]}")
    cfg = ModelConfig(
        n_blocks=fields[0], d_model=fields[1], d_hidden=fields[2], vocab=fields[3],
        n_experts=fields[4], rank=fields[5], alpha=fields[10], top_k=fields[6],
        placement=placement, routing=routing, seed=fields[9],
    )
    try:
        cfg.validate()
    except ConfigError as exc:
        raise ModelFormatError(str(exc)) from exc

    embedding = rd.tensor(cfg.vocab, cfg.d_model, "embedding")
    blocks = []
    for b in range(cfg.n_blocks):
        sites = []
        for pos, name in enumerate(SITE_NAMES):
            d_out, d_in = site_dims(cfg, name)
            label = f"block {b} {name}"
            weight = rd.tensor(d_out, d_in, label)
            adapted = is_adapted(cfg, name)
            experts = []
            if adapted:
                for i in range(cfg.n_experts):
                    down = rd.tensor(cfg.rank, d_in, f"{label} expert {i} down")
                    up = rd.tensor(d_out, cfg.rank, f"{label} expert {i} up")
                    experts.append(LoraExpert(down, up))
            sites.append(AdapterSite(b * len(SITE_NAMES) + pos, b, name, weight, experts, adapted))
        blocks.append(Block(*sites))
    routers = [
        Router(rd.tensor(cfg.n_experts, d_in, f"router {i}"))
        for i, d_in in enumerate(router_inputs(cfg, cfg.routing))
    ]
    head = rd.tensor(cfg.vocab, cfg.d_model, "head")
    if rd.pos != len(buf):
        raise ModelFormatError(f"{len(buf) - rd.pos} trailing bytes after offset {rd.pos}")
    model = Model(cfg, embedding, blocks, head, routers)
    for t in _tensors(model):
        if not np.all(np.isfinite(t)):
            raise ModelFormatError("non-finite values in tensor payload")
    return model


def load(path: str | Path) -> Model:
    return from_bytes(Path(path).read_bytes())
