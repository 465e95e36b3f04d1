"""Span masking: sample the masked index set and apply the corruption."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError


@dataclass
class MaskSpec:
    span: int = 10
    start_prob: float = 0.065

    def __post_init__(self):
        if self.span < 1:
            raise DataError(f"mask span must be >= 1, got {self.span}")
        if not (0.0 <= self.start_prob <= 1.0):
            raise DataError(f"mask start_prob {self.start_prob} outside [0, 1]")


@dataclass
class MaskSet:
    indices: np.ndarray  # sorted strictly increasing ints in [0, T)

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)

    def __len__(self) -> int:
        return int(self.indices.size)


def effective_span(span: int, T: int) -> int:
    """Desk scaling of the span length: min(span, max(1, T // 5))."""
    return min(span, max(1, T // 5))


def sample_mask(T: int, spec: MaskSpec, rng: np.random.Generator) -> MaskSet:
    """Each index is a span start with prob p; spans of length l are unioned."""
    if T < 1:
        raise DataError(f"cannot mask a sequence of length {T}")
    l = effective_span(spec.span, T)
    starts = np.flatnonzero(rng.random(T) < spec.start_prob)
    masked = np.zeros(T, dtype=bool)
    for s in starts:
        masked[s : min(s + l, T)] = True
    return MaskSet(np.flatnonzero(masked))


def corrupt(frames: np.ndarray, mask: MaskSet, mask_embedding: np.ndarray) -> np.ndarray:
    """Replace rows in the mask set with the mask embedding (value semantics)."""
    T = frames.shape[0]
    if mask.indices.size and int(mask.indices.max()) >= T:
        raise DataError(f"mask index {int(mask.indices.max())} out of range for T={T}")
    out = frames.copy()
    out[mask.indices] = mask_embedding
    return out
