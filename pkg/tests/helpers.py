import numpy as np

from dynlora.model import ModelConfig, Placement, generate, randomize_up_factors

PLACEMENTS = [Placement.ALL_LINEAR, Placement.MLP_ONLY]


def small_config(**kw) -> ModelConfig:
    base = dict(n_blocks=2, d_model=16, d_hidden=24, vocab=40, n_experts=4, rank=4, top_k=2, seed=5)
    base.update(kw)
    return ModelConfig(**base)


def trained_like(cfg: ModelConfig, up_seed: int = 1, std: float = 0.05):
    m = generate(cfg)
    randomize_up_factors(m, up_seed, std)
    return m


def rand(rng, *shape):
    return np.ascontiguousarray(rng.uniform(-1.0, 1.0, shape))


def rel_err(a, b) -> float:
    a = np.asarray(a)
    b = np.asarray(b)
    den = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if den == 0 else float(np.linalg.norm(a - b) / den)
