"""Post-processing attacks on a suspect model: fine-tuning proxy, magnitude pruning, quantization.

Every attack is pure. The returned model records its source model_id and the
attack spec in ``provenance``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .diffusion import DenoiserModel, GMMDenoiser, MLPDenoiser
from .diffusion.training import dataset_from_spec, fit
from .errors import DimensionError


class UnsupportedAttackError(TypeError):
    pass


def _provenance(model: DenoiserModel, spec: dict) -> dict:
    return {"source_model_id": model.model_id, "attack": spec, "source_provenance": dict(model.provenance)}


def shift_vector(shift, D: int, seed: int) -> np.ndarray:
    """A scalar shift is a norm along a seeded random direction; a vector is used as given."""
    v = np.asarray(shift, dtype=np.float64)
    if v.ndim == 0:
        d = np.random.default_rng(seed).standard_normal(D)
        return float(v) * d / np.linalg.norm(d)
    if v.shape != (D,):
        raise DimensionError(f"shift has shape {v.shape}, model D={D}")
    return v


def finetune_proxy(model: DenoiserModel, steps: int, lr: float, shift, seed: int,
                   dataset: GMMDenoiser | None = None, batch: int = 256) -> DenoiserModel:
    """Distribution-shift fine-tuning.

    MLP: ``steps`` Adam steps on the denoising loss over its training
    distribution with every mean moved by the shift. GMM: the means move by the
    shift directly (there is nothing to train).
    """
    if steps < 0:
        raise ValueError(f"steps must be >= 0, got {steps}")
    v = shift_vector(shift, model.D, seed)
    spec = {"kind": "finetune", "steps": steps, "lr": lr, "shift": v.tolist(), "seed": seed}
    if isinstance(model, GMMDenoiser):
        params = dict(model.params(), means=model.means + v)
        return model.with_params(params, _provenance(model, spec))
    if not isinstance(model, MLPDenoiser):
        raise UnsupportedAttackError(f"finetune_proxy does not support kind {model.kind!r}")
    if dataset is None:
        if "dataset" not in model.provenance:
            raise ValueError("MLP provenance lacks its training distribution; pass dataset explicitly")
        dataset = dataset_from_spec(model.provenance["dataset"], model.schedule)
    shifted = dataset.with_params(dict(dataset.params(), means=dataset.means + v))
    if steps == 0:
        tuned = model
    else:
        tuned = fit(model, shifted, steps, lr, np.random.default_rng(seed), batch)
    return model.with_params(tuned.params(), _provenance(model, spec))


def prune(model: DenoiserModel, ratio: float) -> DenoiserModel:
    """Zero the ``ratio`` fraction of smallest-magnitude weights, ranked globally; biases exempt."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"ratio must lie in [0, 1], got {ratio}")
    if not isinstance(model, MLPDenoiser):
        raise UnsupportedAttackError(f"prune needs trainable weight matrices; kind {model.kind!r} has none")
    flat = np.concatenate([W.ravel() for W in model.weights])
    n = math.floor(ratio * flat.size + 1e-9)
    # stable sort: equal magnitudes go in parameter order
    drop = np.argsort(np.abs(flat), kind="stable")[:n]
    keep = np.ones(flat.size, dtype=bool)
    keep[drop] = False
    flat = np.where(keep, flat, 0.0)
    params = dict(model.params())
    start = 0
    for i, W in enumerate(model.weights):
        params[f"W{i}"] = flat[start:start + W.size].reshape(W.shape)
        start += W.size
    return model.with_params(params, _provenance(model, {"kind": "prune", "ratio": ratio}))


def round_mantissa(x: np.ndarray, bits: int) -> np.ndarray:
    """Nearest value with ``bits`` explicit mantissa bits, ties to even."""
    if bits < 1:
        raise ValueError(f"mantissa bits must be >= 1, got {bits}")
    x = np.asarray(x, dtype=np.float64)
    frac, exp = np.frexp(x)  # x = frac * 2^exp, 0.5 <= |frac| < 1
    # np.round is half-to-even; scaling by a power of two is exact
    return np.ldexp(np.round(np.ldexp(frac, bits + 1)), exp - bits - 1)


def quantize(model: DenoiserModel, mantissa_bits: int) -> DenoiserModel:
    """Round every stored parameter; inference stays in float64."""
    params = {name: round_mantissa(p, mantissa_bits) for name, p in model.params().items()}
    if isinstance(model, GMMDenoiser):
        # keep the mixture weights a valid distribution
        params["weights"] = params["weights"] / params["weights"].sum()
    return model.with_params(params, _provenance(model, {"kind": "quantize", "mantissa_bits": mantissa_bits}))


@dataclass(frozen=True)
class AttackSpec:
    kind: str  # finetune | prune | quantize
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        p = self.params
        if self.kind == "prune":
            if not 0.0 <= p.get("ratio", -1) <= 1.0:
                raise ValueError("prune needs ratio in [0, 1]")
        elif self.kind == "quantize":
            if int(p.get("mantissa_bits", 0)) < 1:
                raise ValueError("quantize needs mantissa_bits >= 1")
        elif self.kind == "finetune":
            if int(p.get("steps", -1)) < 0:
                raise ValueError("finetune needs steps >= 0")
        else:
            raise ValueError(f"unknown attack kind {self.kind!r}")

    @property
    def label(self) -> str:
        if self.kind == "prune":
            return f"prune-{self.params['ratio']:g}"
        if self.kind == "quantize":
            return f"quantize-{self.params['mantissa_bits']}b"
        return f"finetune-{self.params['steps']}s-shift{self.params.get('shift', 0.1)}"

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": dict(self.params), "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "AttackSpec":
        return cls(d["kind"], dict(d.get("params", {})), int(d.get("seed", 0)))

    def apply(self, model: DenoiserModel) -> DenoiserModel:
        p = self.params
        if self.kind == "prune":
            return prune(model, float(p["ratio"]))
        if self.kind == "quantize":
            return quantize(model, int(p["mantissa_bits"]))
        return finetune_proxy(model, int(p["steps"]), float(p.get("lr", 1e-3)), p.get("shift", 0.1), self.seed)
