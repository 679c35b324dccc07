"""Black-box ownership verification: one generation call per fingerprint, bit accuracy, t-test."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .diffusion import DenoiserModel, LatentCodec, sample
from .errors import DimensionError
from .fingerprint import FingerprintRecord
from .stats import student_t_sf
from .watermark import decode_hard

DEFAULT_ALPHA = 1e-3


def bit_accuracy(m, m_hat) -> float:
    m = np.asarray(m, dtype=np.int64)
    m_hat = np.asarray(m_hat, dtype=np.int64)
    if m.shape != m_hat.shape or m.ndim != 1:
        raise DimensionError(f"message lengths differ: {m.shape} vs {m_hat.shape}")
    return 1.0 - float(np.mean(np.abs(m - m_hat)))


@dataclass(frozen=True)
class TTest:
    t: float
    p: float
    mean: float
    std: float
    n: int


def t_test(ba_samples: Sequence[float], mu0: float = 0.5, two_sided: bool = False) -> TTest:
    """One-sample t-test of mean BA against chance.

    Default p is the upper tail (only BA above chance evidences infringement).
    Zero spread: t = +/-inf with p = 0 or 1, or t = 0 and p = 0.5 at mu0.
    """
    x = np.asarray(ba_samples, dtype=np.float64)
    n = x.size
    if x.ndim != 1 or n < 2:
        raise ValueError(f"t_test needs at least 2 samples, got {n}")
    mean = float(np.mean(x))
    std = float(np.std(x, ddof=1))
    if std == 0.0:  # identical samples, or a spread that underflows
        if mean == mu0:
            t, p = 0.0, 0.5
        else:
            t = math.copysign(math.inf, mean - mu0)
            p = 0.0 if mean > mu0 else 1.0
    else:
        t = (mean - mu0) / (std / math.sqrt(n))
        p = student_t_sf(t, n - 1)
    if two_sided:
        p = min(1.0, 2.0 * min(p, 1.0 - p))
    return TTest(t, p, mean, std, n)


class BlackBox:
    """Atomic-inference access to a suspect: noise in, latent out, nothing else.

    Counts calls so callers can confirm one generation per query.
    """

    def __init__(self, generate: Callable[[np.ndarray], np.ndarray], model_id: str, D: int):
        self._generate = generate
        self.model_id = model_id
        self.D = D
        self.calls = 0

    def __call__(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if z.shape != (self.D,):
            raise DimensionError(f"query noise has shape {z.shape}, suspect takes ({self.D},)")
        self.calls += 1
        return np.asarray(self._generate(z), dtype=np.float64)


def black_box(model: DenoiserModel, steps=None, codec: LatentCodec | None = None) -> BlackBox:
    def generate(z):
        x0 = sample(model, z, steps)
        return codec.decode(x0) if codec is not None else x0

    return BlackBox(generate, model.model_id, model.D)


@dataclass
class VerificationReport:
    suspect_model_id: str
    record_ids: list
    source_model_ids: list
    bit_accuracies: list
    mean: float
    std: float
    t: float
    p: float
    alpha: float
    n: int
    two_sided: bool = False
    verdict: str = field(init=False)

    def __post_init__(self):
        self.verdict = "infringing" if self.p < self.alpha else "not-proven"

    def to_dict(self) -> dict:
        return {
            "suspect_model_id": self.suspect_model_id,
            "record_ids": list(self.record_ids),
            "source_model_ids": list(self.source_model_ids),
            "bit_accuracies": list(self.bit_accuracies),
            "mean": self.mean,
            "std": self.std,
            "t": self.t,
            "p": self.p,
            "alpha": self.alpha,
            "n": self.n,
            "two_sided": self.two_sided,
            "verdict": self.verdict,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VerificationReport":
        return cls(d["suspect_model_id"], list(d["record_ids"]), list(d["source_model_ids"]),
                   [float(b) for b in d["bit_accuracies"]], float(d["mean"]), float(d["std"]), float(d["t"]),
                   float(d["p"]), float(d["alpha"]), int(d["n"]), bool(d.get("two_sided", False)))


def verify(suspect: BlackBox | DenoiserModel, records: Sequence[FingerprintRecord], alpha: float = DEFAULT_ALPHA,
           two_sided: bool = False) -> VerificationReport:
    """Query the suspect once per record with z*, decode, and test mean BA against 0.5."""
    if not records:
        raise ValueError("verify needs at least one fingerprint record")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    if isinstance(suspect, DenoiserModel):
        suspect = black_box(suspect)
    bas = []
    for rec in records:
        if rec.z.shape != (suspect.D,):
            raise DimensionError(f"record {rec.record_id or '?'} has D={rec.z.shape[0]}, suspect D={suspect.D}")
        image = suspect(rec.z)
        bas.append(bit_accuracy(rec.anchor.message, decode_hard(image, rec.anchor.key)))
    if len(bas) >= 2:
        tt = t_test(bas, two_sided=two_sided)
        t, p, std = tt.t, tt.p, tt.std
    else:
        # a single query supports no test
        t, p, std = float("nan"), 1.0, float("nan")
    return VerificationReport(suspect.model_id, [r.record_id for r in records], [r.model_id for r in records],
                              bas, float(np.mean(bas)), std, t, p, alpha, len(bas), two_sided)


@dataclass
class CrossMatrix:
    """cells[i][j]: verifier i (row) queried with source j's fingerprints (column)."""

    model_ids: list
    cells: list

    def ba(self) -> np.ndarray:
        return np.array([[c.mean for c in row] for row in self.cells])

    def p(self) -> np.ndarray:
        return np.array([[c.p for c in row] for row in self.cells])

    def to_csv(self) -> str:
        head = ["verifier\\source"]
        for mid in self.model_ids:
            head += [f"{mid}:BA", f"{mid}:p"]
        lines = [",".join(head)]
        for mid, row in zip(self.model_ids, self.cells):
            vals = [mid]
            for c in row:
                vals += [repr(c.mean), repr(c.p)]
            lines.append(",".join(vals))
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {"model_ids": list(self.model_ids), "cells": [[c.to_dict() for c in row] for row in self.cells]}

    @classmethod
    def from_dict(cls, d: dict) -> "CrossMatrix":
        return cls(list(d["model_ids"]), [[VerificationReport.from_dict(c) for c in row] for row in d["cells"]])


def cross_matrix(models: Sequence[DenoiserModel], record_sets: Sequence[Sequence[FingerprintRecord]],
                 alpha: float = DEFAULT_ALPHA, two_sided: bool = False, steps=None) -> CrossMatrix:
    if len(models) != len(record_sets):
        raise ValueError(f"{len(models)} models but {len(record_sets)} record sets")
    cells = [[verify(black_box(verifier, steps), recs, alpha, two_sided) for recs in record_sets]
             for verifier in models]
    return CrossMatrix([m.model_id for m in models], cells)
