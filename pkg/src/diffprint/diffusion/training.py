"""Denoising-objective training for the MLP family."""

from __future__ import annotations

import math

import numpy as np

from .. import autodiff as F
from ..optim import Adam
from .models import GMMDenoiser, MLPDenoiser, gaussian_skip, init_mlp, mlp_forward, time_embedding


def dataset_spec(gmm: GMMDenoiser) -> dict:
    """JSON form of a training distribution, kept in MLP provenance for later fine-tuning."""
    return {"weights": gmm.weights.tolist(), "means": gmm.means.tolist(), "sigma2": gmm.sigma2}


def dataset_from_spec(spec: dict, schedule=None) -> GMMDenoiser:
    gmm = GMMDenoiser(spec["weights"], spec["means"], spec["sigma2"])
    return gmm if schedule is None else gmm.with_schedule(schedule.T)


def dataset_moments(gmm: GMMDenoiser) -> tuple[np.ndarray, float]:
    """Mixture mean and average per-coordinate variance."""
    center = gmm.weights @ gmm.means
    spread = gmm.weights @ np.sum((gmm.means - center) ** 2, axis=1) / gmm.D
    return center, float(gmm.sigma2 + spread)


def sample_gmm(gmm: GMMDenoiser, n: int, rng: np.random.Generator) -> np.ndarray:
    comp = rng.choice(len(gmm.weights), size=n, p=gmm.weights)
    return gmm.means[comp] + math.sqrt(gmm.sigma2) * rng.standard_normal((n, gmm.D))


def denoising_batch(dataset: GMMDenoiser, schedule, batch: int, rng: np.random.Generator,
                    data_mean: np.ndarray | None = None, data_var: float = 1.0):
    x0 = sample_gmm(dataset, batch, rng)
    t = rng.integers(1, schedule.T + 1, size=batch)
    a = schedule.alpha_bar[t][:, None]
    noise = rng.standard_normal(x0.shape)
    xt = np.sqrt(a) * x0 + np.sqrt(1 - a) * noise
    emb = np.stack([time_embedding(int(s), schedule.T) for s in t])
    skip, out_scale = gaussian_skip(xt, a, np.zeros(dataset.D) if data_mean is None else data_mean, data_var)
    return xt, emb, noise, skip, out_scale


def fit(model: MLPDenoiser, dataset: GMMDenoiser, steps: int, lr: float, rng: np.random.Generator,
        batch: int = 256) -> MLPDenoiser:
    """Adam on E|eps - eps_theta(x_t, t)|^2 starting from ``model``'s parameters."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if steps < 0:
        raise ValueError(f"steps must be >= 0, got {steps}")
    params = [np.array(p) for W, b in zip(model.weights, model.biases) for p in (W, b)]
    opt = Adam(lr)
    for _ in range(steps):
        xt, emb, noise, skip, out_scale = denoising_batch(dataset, model.schedule, batch, rng, model.data_mean,
                                                  model.data_var)
        tape = F.Tape()
        leaves = [tape.leaf(p) for p in params]
        pred = mlp_forward(leaves[0::2], leaves[1::2], xt, emb)
        # same eps-space loss as the model's eps(): skip - out_scale * net
        loss = F.scale(F.sq_norm(F.subtract(F.multiply(pred, -out_scale), noise - skip)), 1.0 / batch)
        params = opt.step(params, tape.backward(loss, leaves))
    return MLPDenoiser(tuple(params[0::2]), tuple(params[1::2]), model.schedule, dict(model.provenance),
                       model.data_var, model.data_mean)


def train_mlp_denoiser(dataset: GMMDenoiser, seed: int, steps: int, lr: float, hidden: int = 64,
                       depth: int = 2, batch: int = 256) -> MLPDenoiser:
    """Seeded init then ``steps`` Adam steps; same seed gives the same model_id.

    The skip term's Gaussian is moment-matched to the dataset (mean and
    per-coordinate variance).
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if steps < 0:
        raise ValueError(f"steps must be >= 0, got {steps}")
    rng = np.random.default_rng(seed)
    provenance = {"train_seed": seed, "train_steps": steps, "lr": lr, "dataset": dataset_spec(dataset)}
    mean, var = dataset_moments(dataset)
    model = init_mlp(dataset.D, hidden, depth, rng, dataset.schedule, provenance, var, mean)
    return fit(model, dataset, steps, lr, rng, batch)
