from .config import ConfigError, ExperimentConfig, KeySpec, ModelSpec, derive_seed, load_config
from .runs import Run, build_model, build_zoo, fingerprint

__all__ = ["ConfigError", "ExperimentConfig", "KeySpec", "ModelSpec", "derive_seed", "load_config", "Run",
           "build_model", "build_zoo", "fingerprint"]
