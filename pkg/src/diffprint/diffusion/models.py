"""Noise-prediction models eps(x, t): an exact Gaussian-mixture posterior and a tanh MLP."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .. import autodiff as F
from .schedule import NoiseSchedule, build_schedule
from ..errors import DimensionError


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


def parameter_hash(kind: str, params: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256(kind.encode())
    for name in sorted(params):
        p = np.ascontiguousarray(params[name], dtype="<f8")
        h.update(f"|{name}:{p.shape}|".encode())
        h.update(p.tobytes())
    return h.hexdigest()[:16]


class DenoiserModel:
    """Immutable eps-predictor; its parameters are the fingerprinted identity.

    The schedule only selects the sampling discretization and is not part of
    ``model_id``.
    """

    kind: str
    schedule: NoiseSchedule
    provenance: dict

    @property
    def D(self) -> int:
        raise NotImplementedError

    def params(self) -> dict[str, np.ndarray]:
        raise NotImplementedError

    def with_params(self, params: dict[str, np.ndarray], provenance: dict | None = None):
        raise NotImplementedError

    def with_schedule(self, T: int):
        return replace(self, schedule=build_schedule(T))

    @property
    def model_id(self) -> str:
        return parameter_hash(self.kind, self.params())

    @property
    def invertible(self) -> bool:
        return True

    def eps(self, x, t: int):
        raise NotImplementedError

    def alpha_bar(self, t: int) -> float:
        return float(self.schedule.alpha_bar[t])


@dataclass(frozen=True, eq=False)
class GMMDenoiser(DenoiserModel):
    """Exact E[eps | x_t] for data drawn from sum_i w_i N(mu_i, sigma2 I)."""

    weights: np.ndarray
    means: np.ndarray
    sigma2: float
    schedule: NoiseSchedule = field(default_factory=lambda: build_schedule(25))
    provenance: dict = field(default_factory=dict)
    kind: str = field(default="gmm", init=False)

    def __post_init__(self):
        w = _frozen(self.weights)
        mu = _frozen(self.means)
        if mu.ndim != 2 or w.shape != (mu.shape[0],):
            raise ValueError(f"weights {w.shape} and means {mu.shape} disagree")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must be nonnegative and sum to 1")
        if self.sigma2 < 0 or not np.all(np.isfinite(mu)):
            raise ValueError("sigma2 must be >= 0 and means finite")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "sigma2", float(self.sigma2))

    @property
    def D(self) -> int:
        return self.means.shape[1]

    @property
    def invertible(self) -> bool:
        return self.sigma2 > 0

    def params(self):
        return {"weights": self.weights, "means": self.means, "sigma2": np.array([self.sigma2])}

    def with_params(self, params, provenance=None):
        return GMMDenoiser(params["weights"], params["means"], float(np.asarray(params["sigma2"]).ravel()[0]),
                           self.schedule, provenance if provenance is not None else dict(self.provenance))

    def _coefficients(self, t: int):
        cache = self.__dict__.setdefault("_coef_cache", {})
        if t not in cache:
            a2 = self.alpha_bar(t)
            a = math.sqrt(a2)
            var = a2 * self.sigma2 + 1.0 - a2
            keep = self.weights > 0
            mu = self.means[keep]
            # responsibilities are shift-invariant, so the |x|^2 term drops out
            logit_w = (a / var) * mu
            logit_b = -(a2 / (2 * var)) * np.sum(mu * mu, axis=1) + np.log(self.weights[keep])
            cache[t] = (logit_w, logit_b, a * mu.T, math.sqrt(1.0 - a2) / var)
        return cache[t]

    def eps(self, x, t):
        logit_w, logit_b, center_map, out_scale = self._coefficients(t)
        logits = F.add(F.matvec(logit_w, x), logit_b)
        resp = F.exp(F.subtract(logits, F.log_sum_exp(logits)))
        center = F.matvec(center_map, resp)
        return F.scale(F.subtract(x, center), out_scale)


def time_embedding(t: int, T: int) -> np.ndarray:
    phase = 2 * math.pi * t / T
    return np.array([t / T, math.sin(phase), math.cos(phase)])


@dataclass(frozen=True, eq=False)
class MLPDenoiser(DenoiserModel):
    """eps = c (x - sqrt(a) m) - c sqrt(a) net(x, t), c = sqrt(1-a) / (a v + 1 - a), a = alpha_bar_t.

    net(x, t) = W_L tanh(... tanh(W_1 [x, emb(t)] + b_1) ...) + b_L.

    With net = 0 this is the exact noise prediction for N(m, v I) data
    (m = data_mean, v = data_var), so the network only learns the deviation
    of the posterior mean of x_0 from m. The sqrt(a) factor on the network
    term keeps its errors from being amplified by 1/sqrt(alpha_bar_T) in the
    first sampling step.
    """

    weights: tuple
    biases: tuple
    schedule: NoiseSchedule = field(default_factory=lambda: build_schedule(25))
    provenance: dict = field(default_factory=dict)
    data_var: float = 1.0
    data_mean: np.ndarray | None = None  # None: zeros
    kind: str = field(default="mlp", init=False)

    def __post_init__(self):
        Ws = tuple(_frozen(W) for W in self.weights)
        bs = tuple(_frozen(b) for b in self.biases)
        if len(Ws) != len(bs) or not Ws:
            raise ValueError("need one bias per weight matrix")
        for i, (W, b) in enumerate(zip(Ws, bs)):
            if W.ndim != 2 or b.shape != (W.shape[0],):
                raise ValueError(f"layer {i}: weight {W.shape} and bias {b.shape} disagree")
            if i and W.shape[1] != Ws[i - 1].shape[0]:
                raise ValueError(f"layer {i} input width {W.shape[1]} != {Ws[i - 1].shape[0]}")
        if Ws[0].shape[1] != Ws[-1].shape[0] + 3:
            raise ValueError("first layer must take [x, 3-dim time embedding]")
        if not self.data_var > 0:
            raise ValueError(f"data_var must be positive, got {self.data_var}")
        object.__setattr__(self, "weights", Ws)
        object.__setattr__(self, "biases", bs)
        object.__setattr__(self, "data_var", float(self.data_var))
        D = Ws[-1].shape[0]
        m = _frozen(np.zeros(D) if self.data_mean is None else self.data_mean)
        if m.shape != (D,):
            raise ValueError(f"data_mean has shape {m.shape}, expected ({D},)")
        object.__setattr__(self, "data_mean", m)

    @property
    def D(self) -> int:
        return self.weights[-1].shape[0]

    def params(self):
        out = {}
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            out[f"W{i}"] = W
            out[f"b{i}"] = b
        out["data_var"] = np.array([self.data_var])
        out["data_mean"] = self.data_mean
        return out

    def with_params(self, params, provenance=None):
        n = len(self.weights)
        return MLPDenoiser(tuple(params[f"W{i}"] for i in range(n)), tuple(params[f"b{i}"] for i in range(n)),
                           self.schedule, provenance if provenance is not None else dict(self.provenance),
                           float(np.asarray(params.get("data_var", self.data_var)).ravel()[0]),
                           params.get("data_mean", self.data_mean))

    def eps(self, x, t):
        net = mlp_forward(self.weights, self.biases, x, time_embedding(t, self.schedule.T))
        a = self.alpha_bar(t)
        c = skip_coefficient(a, self.data_var)
        skip = F.subtract(F.scale(x, c), c * math.sqrt(a) * self.data_mean)
        return F.subtract(skip, F.scale(net, c * math.sqrt(a)))


def skip_coefficient(alpha_bar, data_var: float):
    return np.sqrt(1.0 - alpha_bar) / (alpha_bar * data_var + 1.0 - alpha_bar)


def gaussian_skip(x, alpha_bar, data_mean, data_var):
    """Exact E[eps | x_t] for N(data_mean, data_var I) data, and the net's output scale; numpy, batched."""
    c = skip_coefficient(alpha_bar, data_var)
    return c * (x - np.sqrt(alpha_bar) * data_mean), c * np.sqrt(alpha_bar)


def mlp_forward(weights, biases, x, emb):
    """Shared by inference (single x) and training (batched x with per-row emb)."""
    emb = np.asarray(emb)
    if F.value(x).ndim == 2 and emb.ndim == 1:
        emb = np.broadcast_to(emb, (F.value(x).shape[0], 3))
    h = F.concat([x, emb], axis=-1)
    last = len(weights) - 1
    for i, (W, b) in enumerate(zip(weights, biases)):
        h = F.add(F.matvec(W, h), b)
        if i < last:
            h = F.tanh(h)
    return h


def init_mlp(D: int, hidden: int, depth: int, rng: np.random.Generator,
             schedule: NoiseSchedule | None = None, provenance: dict | None = None,
             data_var: float = 1.0, data_mean: np.ndarray | None = None) -> MLPDenoiser:
    widths = [D + 3] + [hidden] * depth + [D]
    Ws, bs = [], []
    for n_in, n_out in zip(widths[:-1], widths[1:]):
        Ws.append(rng.normal(0.0, math.sqrt(2.0 / (n_in + n_out)), size=(n_out, n_in)))
        bs.append(np.zeros(n_out))
    return MLPDenoiser(tuple(Ws), tuple(bs), schedule or build_schedule(25), provenance or {}, data_var, data_mean)


def predict_noise(model: DenoiserModel, x, t: int):
    """eps-hat(x, t); records on the tape when ``x`` is a Var."""
    if not 1 <= t <= model.schedule.T:
        raise ValueError(f"timestep {t} outside [1, {model.schedule.T}]")
    if F.value(x).shape[-1] != model.D:
        raise DimensionError(f"latent dimension {F.value(x).shape[-1]} != model D={model.D}")
    return model.eps(x, t)
