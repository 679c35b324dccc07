from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

COSINE_OFFSET = 0.008
MIN_ALPHA_BAR = 1e-5


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal retention alpha_bar[0..T] of the forward process."""

    T: int
    alpha_bar: np.ndarray = field(repr=False)

    def __post_init__(self):
        a = self.alpha_bar
        if a.shape != (self.T + 1,):
            raise ValueError(f"alpha_bar must have T+1={self.T + 1} entries, got {a.shape}")
        if a[0] != 1.0 or np.any(np.diff(a) >= 0) or not (0 < a[-1] <= 1e-3):
            raise ValueError("alpha_bar must start at 1, strictly decrease and end in (0, 1e-3]")
        a.setflags(write=False)

    def __eq__(self, other):
        return isinstance(other, NoiseSchedule) and self.T == other.T and np.array_equal(
            self.alpha_bar, other.alpha_bar)

    def __hash__(self):
        return hash((self.T, self.alpha_bar.tobytes()))

    def grid(self, n_steps: int | None = None) -> list[int]:
        """Uniform decreasing grid of ``n_steps`` steps from T to 0."""
        n = self.T if n_steps is None else n_steps
        if n < 1 or n > self.T:
            raise ValueError(f"n_steps must lie in [1, {self.T}], got {n}")
        pts = np.round(np.linspace(self.T, 0, n + 1)).astype(int)
        if np.any(np.diff(pts) >= 0):
            raise ValueError(f"{n} steps do not form a strictly decreasing grid on T={self.T}")
        return [int(t) for t in pts]


def cosine_alpha_bar(t: float, T: int, s: float = COSINE_OFFSET) -> float:
    return math.cos((t / T + s) / (1 + s) * math.pi / 2) ** 2


def build_schedule(T: int) -> NoiseSchedule:
    """Cosine schedule normalized so alpha_bar[0] = 1, floored at 1e-5."""
    if T < 2:
        raise ValueError(f"T must be >= 2, got {T}")
    f0 = cosine_alpha_bar(0, T)
    a = np.array([cosine_alpha_bar(t, T) / f0 for t in range(T + 1)])
    a[0] = 1.0
    a = np.maximum(a, MIN_ALPHA_BAR)
    return NoiseSchedule(T, a)
