"""Experiment configuration and per-purpose seed derivation."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace

from ..attacks import AttackSpec
from ..fingerprint import OptimConfig
from ..io import read_json


class ConfigError(ValueError):
    pass


def derive_seed(master: int, purpose: str, *parts) -> int:
    """32-bit seed from sha256("master/purpose/part/..."); stable across platforms."""
    label = "/".join([str(int(master)), purpose, *(str(p) for p in parts)])
    return int.from_bytes(hashlib.sha256(label.encode()).digest()[:4], "big")


@dataclass(frozen=True)
class ModelSpec:
    """One zoo entry. GMM means: offset * u + spread * N(0, I) per component, u ~ N(0, I) shared.

    An MLP is trained on the GMM described by the same geometry fields.
    """

    kind: str  # gmm | mlp
    name: str
    seed: int | None = None  # None: derived from the master seed and the zoo index
    components: int = 4
    sigma2: float = 0.25
    spread: float = 0.5
    offset: float = 2.0
    hidden: int = 64
    depth: int = 2
    train_steps: int = 3000
    train_lr: float = 1e-3
    train_batch: int = 1024

    def __post_init__(self):
        if self.kind not in ("gmm", "mlp"):
            raise ConfigError(f"model {self.name!r}: kind must be gmm or mlp, got {self.kind!r}")
        if self.components < 1 or self.sigma2 < 0 or self.spread < 0 or self.offset < 0:
            raise ConfigError(f"model {self.name!r}: invalid mixture geometry")
        if self.kind == "mlp" and (self.hidden < 1 or self.depth < 1 or self.train_steps < 0 or self.train_lr <= 0
                                 or self.train_batch < 1):
            raise ConfigError(f"model {self.name!r}: invalid MLP settings")


def default_zoo() -> tuple:
    return tuple([ModelSpec("gmm", f"gmm-{i}") for i in range(3)] + [ModelSpec("mlp", f"mlp-{i}") for i in range(2)])


@dataclass(frozen=True)
class KeySpec:
    k: int = 16
    beta: float = 0.5
    kappa: float = 8.0
    seed: int | None = None

    def __post_init__(self):
        if self.k < 1 or self.beta <= 0 or self.kappa <= 0:
            raise ConfigError("key needs k >= 1, beta > 0, kappa > 0")


def default_attacks() -> tuple:
    return (
        AttackSpec("quantize", {"mantissa_bits": 10}),
        AttackSpec("quantize", {"mantissa_bits": 7}),
        AttackSpec("prune", {"ratio": 0.1}),
        AttackSpec("prune", {"ratio": 0.2}),
        AttackSpec("finetune", {"steps": 500, "lr": 1e-3, "shift": 0.1}),
    )


@dataclass(frozen=True)
class ExperimentConfig:
    master_seed: int = 0
    T: int = 25
    D: int = 16
    zoo: tuple = field(default_factory=default_zoo)
    key: KeySpec = field(default_factory=KeySpec)
    optim: OptimConfig = field(default_factory=lambda: OptimConfig(segment_length=25))
    attacks: tuple = field(default_factory=default_attacks)
    alpha: float = 1e-3
    two_sided: bool = False
    records: int = 10
    output_dir: str = "runs/default"

    def __post_init__(self):
        if self.T < 2 or self.D < 1 or self.records < 1:
            raise ConfigError("need T >= 2, D >= 1, records >= 1")
        if not 0 < self.alpha < 1:
            raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.key.k > self.D:
            raise ConfigError(f"watermark length k={self.key.k} exceeds D={self.D}")
        names = [m.name for m in self.zoo]
        if not names or len(set(names)) != len(names):
            raise ConfigError("zoo needs at least one model and unique names")

    def model_seed(self, index: int) -> int:
        spec = self.zoo[index]
        return spec.seed if spec.seed is not None else derive_seed(self.master_seed, "model", index)

    def key_seed(self) -> int:
        return self.key.seed if self.key.seed is not None else derive_seed(self.master_seed, "key")

    def record_seed(self, model_index: int, record_index: int) -> int:
        return derive_seed(self.master_seed, "record", model_index, record_index)

    def attack_seed(self, attack_index: int, model_index: int) -> int:
        return derive_seed(self.master_seed, "attack", attack_index, model_index)

    def with_seed(self, master_seed: int) -> "ExperimentConfig":
        return replace(self, master_seed=int(master_seed))

    def to_dict(self) -> dict:
        return {
            "master_seed": self.master_seed,
            "T": self.T,
            "D": self.D,
            "zoo": [asdict(m) for m in self.zoo],
            "key": asdict(self.key),
            "optim": self.optim.to_dict(),
            "attacks": [a.to_dict() for a in self.attacks],
            "alpha": self.alpha,
            "two_sided": self.two_sided,
            "records": self.records,
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        kw = dict(d)
        try:
            if "zoo" in kw:
                kw["zoo"] = tuple(ModelSpec(**m) for m in kw["zoo"])
            if "key" in kw:
                kw["key"] = KeySpec(**kw["key"])
            if "optim" in kw:
                kw["optim"] = OptimConfig(**kw["optim"])
            if "attacks" in kw:
                kw["attacks"] = tuple(AttackSpec.from_dict(a) for a in kw["attacks"])
            return cls(**kw)
        except (TypeError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(str(e)) from None

    @property
    def hash(self) -> str:
        """sha256 of the canonical (key-sorted) JSON, output_dir excluded."""
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def load_config(path) -> ExperimentConfig:
    return ExperimentConfig.from_dict(read_json(path))
