"""Synthetic scenes: a bag of feature tokens standing in for encoder output.

Each object contributes one token ``E @ [cx, cy, w, h, onehot(label), 1] + noise``
where ``E`` is a fixed random orthonormal embedding shared by every scene of
a dataset. Distractor tokens carry a random box but no class and no
objectness flag. Token order is shuffled so position leaks nothing.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from ..errors import ConfigError
from ..matching import GroundTruthSet

MIN_SIZE = 0.08
MAX_SIZE = 0.35


@dataclass(frozen=True)
class SyntheticScene:
    tokens: np.ndarray
    truth: GroundTruthSet
    seed: int


@lru_cache(maxsize=16)
def embedding_matrix(d: int, C: int, encoder_seed: int = 0) -> np.ndarray:
    k = 4 + C + 1
    if d < k:
        raise ConfigError(f"token dimension d={d} must be >= 5 + C = {k}")
    a = np.random.default_rng(encoder_seed).standard_normal((d, k))
    q, _ = np.linalg.qr(a)
    q = q * np.sqrt(d / k)
    q.setflags(write=False)
    return q


def _random_boxes(rng: np.random.Generator, count: int) -> np.ndarray:
    wh = rng.uniform(MIN_SIZE, MAX_SIZE, size=(count, 2))
    c = rng.uniform(wh / 2, 1 - wh / 2)
    return np.concatenate([c, wh], axis=1)


def generate_scene(
    seed: int,
    m_range: tuple[int, int] = (1, 8),
    C: int = 5,
    d: int = 32,
    distractor_count: int = 8,
    noise: float = 0.05,
    encoder_seed: int = 0,
) -> SyntheticScene:
    lo, hi = m_range
    if not (0 <= lo <= hi <= 16):
        raise ConfigError(f"m_range must satisfy 0 <= lo <= hi <= 16, got {m_range}")
    if C < 2:
        raise ConfigError("need at least two classes")
    if distractor_count < 0 or noise < 0:
        raise ConfigError("distractor_count and noise must be nonnegative")
    E = embedding_matrix(d, C, encoder_seed)
    rng = np.random.default_rng(seed)
    m = int(rng.integers(lo, hi + 1))
    boxes = _random_boxes(rng, m)
    labels = rng.integers(0, C, size=m)

    feats = np.zeros((m + distractor_count, 4 + C + 1))
    feats[:m, :4] = boxes
    feats[np.arange(m), 4 + labels] = 1.0
    feats[:m, -1] = 1.0
    feats[m:, :4] = _random_boxes(rng, distractor_count)
    tokens = feats @ E.T + noise * rng.standard_normal((len(feats), d))
    tokens = tokens[rng.permutation(len(tokens))]
    return SyntheticScene(tokens, GroundTruthSet(boxes, labels, C), seed)


def generate_dataset(seed: int, count: int, **kwargs) -> list[SyntheticScene]:
    """``count`` scenes with per-scene seeds spawned from ``seed``."""
    children = np.random.SeedSequence(seed).generate_state(count, dtype=np.uint64)
    return [generate_scene(int(s), **kwargs) for s in children]
