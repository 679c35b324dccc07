from __future__ import annotations

from dataclasses import dataclass

from .. import autodiff as F
from .._linalg import seeded_orthonormal


@dataclass(frozen=True, eq=False)
class LatentCodec:
    """Fixed orthogonal latent<->image map standing in for a VAE; identity when ``seed`` is None."""

    D: int
    seed: int | None = None

    def __post_init__(self):
        basis = None if self.seed is None else seeded_orthonormal(self.seed, self.D, self.D)
        object.__setattr__(self, "_basis", basis)

    def encode(self, image):
        return image if self._basis is None else F.matvec(self._basis.T, image)

    def decode(self, latent):
        return latent if self._basis is None else F.matvec(self._basis, latent)

    def to_dict(self) -> dict:
        return {"D": self.D, "seed": self.seed}
