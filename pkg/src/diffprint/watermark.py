"""Analytic spread-spectrum watermark codec.

Bits ride on k orthonormal secret patterns. Embedding first removes the
carrier's component in the pattern span, so a clean anchor decodes with
logits of exactly +/- kappa*beta.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as F
from ._linalg import seeded_orthonormal
from .errors import DimensionError


@dataclass(frozen=True, eq=False)
class WatermarkKey:
    seed: int
    k: int
    D: int
    beta: float = 0.5
    kappa: float = 8.0
    patterns: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not 1 <= self.k <= self.D:
            raise ValueError(f"need 1 <= k <= D, got k={self.k}, D={self.D}")
        if self.beta <= 0 or self.kappa <= 0:
            raise ValueError("beta and kappa must be positive")
        object.__setattr__(self, "patterns", seeded_orthonormal(self.seed, self.k, self.D))

    def to_dict(self) -> dict:
        return {"seed": self.seed, "k": self.k, "D": self.D, "beta": self.beta, "kappa": self.kappa}

    @classmethod
    def from_dict(cls, d: dict) -> "WatermarkKey":
        return cls(int(d["seed"]), int(d["k"]), int(d["D"]), float(d["beta"]), float(d["kappa"]))


def make_key(seed: int, k: int, D: int, beta: float = 0.5, kappa: float = 8.0) -> WatermarkKey:
    return WatermarkKey(seed, k, D, beta, kappa)


def _check_dim(x, key: WatermarkKey) -> None:
    if F.value(x).shape != (key.D,):
        raise DimensionError(f"latent shape {F.value(x).shape} does not match key dimension {key.D}")


def random_message(k: int, rng: np.random.Generator) -> np.ndarray:
    return rng.integers(0, 2, size=k).astype(np.int8)


def bits_to_str(m) -> str:
    return "".join(str(int(b)) for b in m)


def str_to_bits(s: str) -> np.ndarray:
    if not s or set(s) - {"0", "1"}:
        raise ValueError(f"not a bit string: {s!r}")
    return np.array([int(c) for c in s], dtype=np.int8)


def embed(carrier: np.ndarray, m, key: WatermarkKey) -> np.ndarray:
    """I_w = carrier - P^T P carrier + beta * P^T (2m - 1)."""
    carrier = np.asarray(carrier, dtype=np.float64)
    m = np.asarray(m)
    _check_dim(carrier, key)
    if m.shape != (key.k,) or not np.all((m == 0) | (m == 1)):
        raise ValueError(f"message must be {key.k} binary entries")
    P = key.patterns
    whitened = carrier - P.T @ (P @ carrier)
    return whitened + key.beta * (P.T @ (2.0 * m - 1.0))


def decode_soft(image, key: WatermarkKey):
    """Logits kappa * <I, p_j>; differentiable when ``image`` is on a tape."""
    _check_dim(image, key)
    return F.matvec(key.kappa * key.patterns, image)


def decode_hard(image, key: WatermarkKey) -> np.ndarray:
    # zero logit decodes to 0
    return (F.value(decode_soft(F.value(image), key)) > 0).astype(np.int8)


def bce_loss(logits, m):
    """Mean binary cross-entropy of sigmoid(logits) against bits, via softplus((1-2m) * logits)."""
    m = np.asarray(m, dtype=np.float64)
    if F.value(logits).shape != m.shape:
        raise DimensionError(f"logits {F.value(logits).shape} vs message {m.shape}")
    per_bit = F.softplus(F.multiply(logits, 1.0 - 2.0 * m))
    return F.scale(F.inner(per_bit, np.ones(m.shape)), 1.0 / m.size)


@dataclass(frozen=True, eq=False)
class Anchor:
    carrier: np.ndarray
    image: np.ndarray  # watermarked latent I_w
    message: np.ndarray
    key: WatermarkKey

    def to_dict(self) -> dict:
        return {
            "carrier": self.carrier.tolist(),
            "image": self.image.tolist(),
            "message": bits_to_str(self.message),
            "key": self.key.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Anchor":
        key = WatermarkKey.from_dict(d["key"])
        return cls(np.array(d["carrier"], dtype=np.float64), np.array(d["image"], dtype=np.float64),
                   str_to_bits(d["message"]), key)


def make_anchor(carrier: np.ndarray, m, key: WatermarkKey) -> Anchor:
    carrier = np.array(carrier, dtype=np.float64)
    m = np.array(m, dtype=np.int8)
    return Anchor(carrier, embed(carrier, m, key), m, key)
