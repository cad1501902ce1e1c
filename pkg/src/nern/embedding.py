"""Sinusoidal positional embeddings for kernel coordinates."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

SMOOTH_BASE = 0.76
NON_SMOOTH_BASE = 1.25
DEFAULT_NUM_FREQUENCIES = 40  # 3 coordinates x 2N = 240 embedding entries


class EmbeddingError(ValueError):
    pass


class KernelCoordinate(NamedTuple):
    layer: int
    filter: int
    channel: int


@dataclass(frozen=True)
class EmbeddingConfig:
    base: float = SMOOTH_BASE
    num_frequencies: int = DEFAULT_NUM_FREQUENCIES
    regime: str = "smooth"

    def __post_init__(self):
        if self.base <= 0:
            raise EmbeddingError(f"base must be positive, got {self.base}")
        if self.num_frequencies < 1:
            raise EmbeddingError(f"num_frequencies must be >= 1, got {self.num_frequencies}")
        if self.regime not in ("smooth", "non_smooth"):
            raise EmbeddingError(f"unknown regime {self.regime!r}")

    @classmethod
    def for_regime(cls, regime: str, num_frequencies: int = DEFAULT_NUM_FREQUENCIES) -> "EmbeddingConfig":
        base = SMOOTH_BASE if regime == "smooth" else NON_SMOOTH_BASE
        return cls(base=base, num_frequencies=num_frequencies, regime=regime)

    @property
    def dim(self) -> int:
        return 6 * self.num_frequencies

    def frequencies(self) -> np.ndarray:
        return np.pi * self.base ** np.arange(self.num_frequencies, dtype=np.float64)


def gamma(v, cfg: EmbeddingConfig) -> np.ndarray:
    """Interleaved ``[sin(b^n pi v), cos(b^n pi v)]`` for n = 0..N-1.

    ``v`` may be a scalar or an array of coordinates; the result gains a
    trailing axis of length 2N.
    """
    v = np.asarray(v, dtype=np.float64)
    phase = v[..., None] * cfg.frequencies()
    out = np.empty(v.shape + (2 * cfg.num_frequencies,), dtype=np.float64)
    out[..., 0::2] = np.sin(phase)
    out[..., 1::2] = np.cos(phase)
    return out


def embed(coord, cfg: EmbeddingConfig) -> np.ndarray:
    l, f, c = coord
    return np.concatenate([gamma(l, cfg), gamma(f, cfg), gamma(c, cfg)])


def embed_many(coords: np.ndarray, cfg: EmbeddingConfig) -> np.ndarray:
    """Embed an [n, 3] array of (l, f, c) rows into an [n, 6N] matrix."""
    coords = np.asarray(coords)
    return np.concatenate([gamma(coords[:, i], cfg) for i in range(3)], axis=1)


def raw_similarity(a, b, cfg: EmbeddingConfig) -> float:
    ga, gb = gamma(a, cfg), gamma(b, cfg)
    return float(ga @ gb / (np.linalg.norm(ga) * np.linalg.norm(gb)))


def similarity_profile(anchor: int, size: int, cfg: EmbeddingConfig) -> np.ndarray:
    """Cosine similarity of gamma(v) to gamma(anchor) for v in [0, size), min-max normalized."""
    if not 0 <= anchor < size:
        raise EmbeddingError(f"anchor {anchor} outside [0, {size})")
    g = gamma(np.arange(size), cfg)
    ref = g[anchor]
    sims = g @ ref / (np.linalg.norm(g, axis=1) * np.linalg.norm(ref))
    lo, hi = sims.min(), sims.max()
    if hi - lo <= 1e-15:
        raise EmbeddingError("degenerate profile: all similarities are equal")
    return (sims - lo) / (hi - lo)


def write_profile_csv(path, profile: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "similarity"])
        for i, s in enumerate(profile):
            w.writerow([i, f"{s:.9f}"])
