"""Deterministic DDIM sampling and its inversion."""

from __future__ import annotations

import math
from functools import partial
from typing import Sequence

import numpy as np

from .. import autodiff as F
from .models import DenoiserModel, predict_noise


class DegenerateModelError(ValueError):
    pass


def _check_grid(model: DenoiserModel, steps: Sequence[int], descending: bool) -> list[int]:
    steps = [int(s) for s in steps]
    if len(steps) < 2:
        raise ValueError("step grid needs at least two points")
    seq = steps if descending else steps[::-1]
    if any(b >= a for a, b in zip(seq, seq[1:])):
        raise ValueError(f"step grid must be strictly {'de' if descending else 'in'}creasing: {steps}")
    if seq[-1] != 0:
        raise ValueError(f"step grid must {'end' if descending else 'start'} at 0: {steps}")
    if seq[0] > model.schedule.T:
        raise ValueError(f"step grid exceeds schedule T={model.schedule.T}")
    return steps


def ddim_step(model: DenoiserModel, x_t, t: int, t_prev: int):
    """One deterministic update x_t -> x_{t_prev} (eta = 0)."""
    if t <= t_prev or t_prev < 0:
        raise ValueError(f"need t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    a_t = model.alpha_bar(t)
    a_p = model.alpha_bar(t_prev)
    eps = predict_noise(model, x_t, t)
    x0 = F.scale(F.subtract(x_t, F.scale(eps, math.sqrt(1.0 - a_t))), 1.0 / math.sqrt(a_t))
    return F.add(F.scale(x0, math.sqrt(a_p)), F.scale(eps, math.sqrt(1.0 - a_p)))


def step_functions(model: DenoiserModel, steps: Sequence[int] | None = None) -> list:
    steps = model.schedule.grid() if steps is None else _check_grid(model, steps, descending=True)
    return [partial(ddim_step, model, t=t, t_prev=tp) for t, tp in zip(steps, steps[1:])]


def sample(model: DenoiserModel, z, steps: Sequence[int] | None = None, segment_length: int | None = None):
    """x_0 = Psi(z). With ``segment_length`` the chain is checkpointed on the tape."""
    fns = step_functions(model, steps)
    if segment_length is not None:
        return F.with_checkpointing(segment_length, fns, z)
    x = z
    for fn in fns:
        x = fn(x)
    return x


def sample_stochastic(model: DenoiserModel, z: np.ndarray, rng: np.random.Generator, eta: float = 1.0,
                      steps: Sequence[int] | None = None) -> np.ndarray:
    """DDIM with fresh seeded noise injected each step (eta > 0); control for non-ODE samplers."""
    steps = model.schedule.grid() if steps is None else _check_grid(model, steps, descending=True)
    x = np.asarray(z, dtype=np.float64)
    for t, tp in zip(steps, steps[1:]):
        a_t, a_p = model.alpha_bar(t), model.alpha_bar(tp)
        eps = predict_noise(model, x, t)
        x0 = (x - math.sqrt(1 - a_t) * eps) / math.sqrt(a_t)
        sigma = eta * math.sqrt((1 - a_p) / (1 - a_t)) * math.sqrt(1 - a_t / a_p)
        x = math.sqrt(a_p) * x0 + math.sqrt(max(1 - a_p - sigma ** 2, 0.0)) * eps
        if tp > 0:
            x = x + sigma * rng.standard_normal(x.shape)
    return x


def _inverse_step(model, x, s, t):
    a_s, a_t = model.alpha_bar(s), model.alpha_bar(t)
    eps = predict_noise(model, x, t)
    x0 = (x - math.sqrt(1 - a_s) * eps) / math.sqrt(a_s)
    return math.sqrt(a_t) * x0 + math.sqrt(1 - a_t) * eps


def _refine_inverse_step(model, x_s, s, t, x_t, iterations):
    """Solve ddim_step(x_t, t -> s) = x_s for x_t.

    The map is x_t = sqrt(a_t) x0 + sqrt(1-a_t) eps(x_t) with x0 taken from x_s.
    Its eps coefficient c approaches 1 on the final high-noise steps, so the
    plain iteration crawls; the update is preconditioned by 1/(1 - c*lam)
    with lam = sqrt(1-a_t), the eps Jacobian scale of a pure-noise input.
    """
    a_s, a_t = model.alpha_bar(s), model.alpha_bar(t)
    c = math.sqrt(1 - a_t) - math.sqrt(a_t * (1 - a_s) / a_s)
    damp = 1.0 / (1.0 - c * math.sqrt(1 - a_t))
    for _ in range(iterations):
        eps = predict_noise(model, x_t, t)
        x0 = (x_s - math.sqrt(1 - a_s) * eps) / math.sqrt(a_s)
        target = math.sqrt(a_t) * x0 + math.sqrt(1 - a_t) * eps
        x_t = x_t + damp * (target - x_t)
    return x_t


def invert(model: DenoiserModel, x0, steps: Sequence[int] | None = None, refine: int = 0) -> np.ndarray:
    """x_T = Psi^{-1}(x_0) with eps evaluated at the current (earlier-time) state.

    ``refine`` > 0 adds up to 5 fixed-point iterations per step; diagnostic only.
    Not differentiable.
    """
    if not model.invertible:
        raise DegenerateModelError("model has a degenerate (point-mass) manifold and is not invertible")
    if not 0 <= refine <= 5:
        raise ValueError(f"refine must lie in [0, 5], got {refine}")
    steps = model.schedule.grid()[::-1] if steps is None else _check_grid(model, steps, descending=False)
    x = np.array(F.value(x0), dtype=np.float64)
    for s, t in zip(steps, steps[1:]):
        x_next = _inverse_step(model, x, s, t)
        if refine:
            x_next = _refine_inverse_step(model, x, s, t, x_next, refine)
        x = x_next
    return x
