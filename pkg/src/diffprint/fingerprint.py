"""Fingerprint-noise synthesis: invert the anchor, then optimize the input noise.

The objective ties both ends of the generation trajectory: the output must
decode to the message and match the anchor (reconstruction term), and the
input must stay near the inverted trajectory origin (regularizer).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np

from . import autodiff as F
from ._linalg import seeded_orthonormal
from .diffusion import DenoiserModel, LatentCodec, invert, sample
from .errors import DimensionError
from .optim import Adam
from .watermark import Anchor, bce_loss, decode_hard, decode_soft


class FingerprintError(RuntimeError):
    pass


@dataclass(frozen=True)
class OptimConfig:
    iterations: int = 200
    lr: float = 0.1
    lambda_rec: float = 0.6
    lambda_reg: float = 0.05
    gamma: float = 0.2
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    segment_length: int = 1
    seed: int = 0
    perceptual_seed: int = 0
    early_stop: float = 1e-4

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.lr < 0:
            raise ValueError("learning rate must be >= 0")
        if min(self.lambda_rec, self.lambda_reg, self.gamma) < 0:
            raise ValueError("loss weights must be >= 0")
        if self.segment_length < 1:
            raise ValueError("segment_length must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@lru_cache(maxsize=16)
def perceptual_operator(D: int, seed: int = 0) -> np.ndarray:
    """First differences of a fixed seeded orthogonal rotation: (D-1) x D."""
    Q = seeded_orthonormal(seed, D, D)
    diff = np.eye(D)[1:] - np.eye(D)[:-1]
    op = diff @ Q
    op.setflags(write=False)
    return op


def rec_loss(generated, target: np.ndarray, gamma: float, perceptual_seed: int = 0):
    """|g - I_w|^2 + gamma * |G (g - I_w)|^2 with G the perceptual proxy operator."""
    target = np.asarray(target, dtype=np.float64)
    if F.value(generated).shape != target.shape:
        raise DimensionError(f"generated {F.value(generated).shape} vs anchor {target.shape}")
    r = F.subtract(generated, target)
    l2 = F.sq_norm(r)
    if gamma == 0:
        return l2
    G = perceptual_operator(target.size, perceptual_seed)
    return F.add(l2, F.scale(F.sq_norm(F.matvec(G, r)), gamma))


def reg_loss(z, origin: np.ndarray):
    origin = np.asarray(origin, dtype=np.float64)
    if F.value(z).shape != origin.shape:
        raise DimensionError(f"z {F.value(z).shape} vs origin {origin.shape}")
    return F.sq_norm(F.subtract(z, origin))


def total_loss(model: DenoiserModel, z, anchor: Anchor, config: OptimConfig, origin: np.ndarray,
               codec: LatentCodec | None = None, steps=None):
    """Weighted objective and its parts {"w", "rec", "reg"}."""
    x0 = sample(model, z, steps, segment_length=config.segment_length if isinstance(z, F.Var) else None)
    image = codec.decode(x0) if codec is not None else x0
    parts = {
        "w": bce_loss(decode_soft(image, anchor.key), anchor.message),
        "rec": rec_loss(image, anchor.image, config.gamma, config.perceptual_seed),
        "reg": reg_loss(z, origin),
    }
    total = F.add(F.add(parts["w"], F.scale(parts["rec"], config.lambda_rec)),
                  F.scale(parts["reg"], config.lambda_reg))
    return total, parts


@dataclass
class FingerprintRecord:
    model_id: str
    anchor: Anchor
    origin: np.ndarray  # x_T, or the random draw for the baseline
    z: np.ndarray  # optimized fingerprint noise z*
    trace: list = field(default_factory=list)  # rows: iteration, L_w, L_rec, L_reg, L_total
    bit_accuracy: float = float("nan")
    config: OptimConfig = field(default_factory=OptimConfig)
    baseline: bool = False
    codec_seed: int | None = None
    record_id: str = ""
    meta: dict = field(default_factory=dict)  # provenance: config hash, seeds, variant

    @property
    def config_hash(self) -> str:
        return self.config.hash

    @property
    def iterations_run(self) -> int:
        return len(self.trace) - 1

    def to_dict(self) -> dict:
        return {
            "record_id": self.record_id,
            "model_id": self.model_id,
            "baseline": self.baseline,
            "anchor": self.anchor.to_dict(),
            "origin": self.origin.tolist(),
            "z": self.z.tolist(),
            "bit_accuracy": self.bit_accuracy,
            "config": self.config.to_dict(),
            "config_hash": self.config_hash,
            "codec_seed": self.codec_seed,
            "trace": self.trace,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FingerprintRecord":
        return cls(
            model_id=d["model_id"],
            anchor=Anchor.from_dict(d["anchor"]),
            origin=np.array(d["origin"], dtype=np.float64),
            z=np.array(d["z"], dtype=np.float64),
            trace=[dict(r) for r in d["trace"]],
            bit_accuracy=float(d["bit_accuracy"]),
            config=OptimConfig(**d["config"]),
            baseline=bool(d["baseline"]),
            codec_seed=d.get("codec_seed"),
            record_id=d.get("record_id", ""),
            meta=dict(d.get("meta", {})),
        )

    def trace_csv(self) -> str:
        lines = ["iteration,L_w,L_rec,L_reg,L_total"]
        for r in self.trace:
            lines.append(f"{r['iteration']},{r['L_w']!r},{r['L_rec']!r},{r['L_reg']!r},{r['L_total']!r}")
        return "\n".join(lines) + "\n"


def _trace_row(i: int, total, parts) -> dict:
    return {"iteration": i, "L_w": float(F.value(parts["w"])), "L_rec": float(F.value(parts["rec"])),
            "L_reg": float(F.value(parts["reg"])), "L_total": float(F.value(total))}


def optimize(model: DenoiserModel, anchor: Anchor, config: OptimConfig, z0: np.ndarray, origin: np.ndarray,
             codec: LatentCodec | None = None, steps=None) -> tuple[np.ndarray, list]:
    """Adam on the joint objective from ``z0``; model parameters are only read."""
    z = np.array(z0, dtype=np.float64)
    opt = Adam(config.lr, config.beta1, config.beta2, config.eps_adam)
    trace = []
    for i in range(config.iterations + 1):
        tape = F.Tape()
        try:
            zv = tape.leaf(z)
            total, parts = total_loss(model, zv, anchor, config, origin, codec, steps)
        except F.AutodiffError as e:
            # overflow inside the sampler or the loss surfaces as a non-finite value
            raise FingerprintError(f"non-finite loss at iteration {i}: {e}") from None
        if not np.isfinite(total.value):
            raise FingerprintError(f"non-finite loss at iteration {i}")
        trace.append(_trace_row(i, total, parts))
        if i == config.iterations or total.value < config.early_stop:
            break
        (grad,) = tape.backward(total, [zv])
        (z,) = opt.step([z], [grad])
    return z, trace


def _finish(model, anchor, config, z, origin, trace, codec, steps, baseline) -> FingerprintRecord:
    x0 = sample(model, z, steps)
    image = codec.decode(x0) if codec is not None else x0
    m_hat = decode_hard(image, anchor.key)
    ba = 1.0 - float(np.mean(np.abs(anchor.message.astype(int) - m_hat.astype(int))))
    return FingerprintRecord(model.model_id, anchor, np.asarray(origin), z, trace, ba, config, baseline,
                             codec.seed if codec is not None else None)


def _check(model: DenoiserModel, anchor: Anchor) -> None:
    if anchor.image.shape != (model.D,):
        raise DimensionError(f"anchor dimension {anchor.image.shape[0]} != model D={model.D}")


def synthesize(model: DenoiserModel, anchor: Anchor, config: OptimConfig = OptimConfig(),
               codec: LatentCodec | None = None, steps=None) -> FingerprintRecord:
    """Trajectory-origin initialization z = x_T = Psi^{-1}(E(I_w)), then joint optimization."""
    _check(model, anchor)
    x0 = codec.encode(anchor.image) if codec is not None else anchor.image
    x_T = invert(model, x0, None if steps is None else list(steps)[::-1])
    z, trace = optimize(model, anchor, config, x_T, x_T, codec, steps)
    return _finish(model, anchor, config, z, x_T, trace, codec, steps, baseline=False)


def synthesize_random_baseline(model: DenoiserModel, anchor: Anchor, config: OptimConfig = OptimConfig(),
                               codec: LatentCodec | None = None, steps=None) -> FingerprintRecord:
    """Trajectory-agnostic control: seeded N(0, I) start, regularizer anchored to that draw."""
    _check(model, anchor)
    z0 = np.random.default_rng(config.seed).standard_normal(model.D)
    z, trace = optimize(model, anchor, config, z0, z0, codec, steps)
    return _finish(model, anchor, config, z, z0, trace, codec, steps, baseline=True)
