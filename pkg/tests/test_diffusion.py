import math
from dataclasses import dataclass, field

import numpy as np
import pytest

from diffprint import autodiff as F
from diffprint.diffusion import (DegenerateModelError, DenoiserModel, GMMDenoiser, LatentCodec, MLPDenoiser,
                                 build_schedule, ddim_step, invert, predict_noise, sample, train_mlp_denoiser)
from diffprint.diffusion.models import init_mlp
from diffprint.errors import DimensionError

from conftest import toy_gmm

# independent high-precision evaluation of the normalized cosine formula (mpmath, 30 digits)
ABAR_T25 = {1: 0.99456997823790632146, 12: 0.52500453325964365299, 24: 0.0038809998422168547629}


@dataclass(frozen=True, eq=False)
class NullModel(DenoiserModel):
    D_: int = 4
    schedule: object = field(default_factory=lambda: build_schedule(25))
    provenance: dict = field(default_factory=dict)
    kind: str = "null"

    @property
    def D(self):
        return self.D_

    def params(self):
        return {"zero": np.zeros(1)}

    def eps(self, x, t):
        return F.scale(x, 0.0)


def gaussian(mean, sigma2=0.25, T=25):
    mean = np.atleast_2d(np.asarray(mean, dtype=np.float64))
    return GMMDenoiser(np.ones(1), mean, sigma2, build_schedule(T))


# ---- schedule --------------------------------------------------------------------------------------

def test_schedule_endpoints_and_monotonicity():
    s = build_schedule(25)
    assert s.alpha_bar[0] == 1.0
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert 0 < s.alpha_bar[-1] <= 1e-3
    assert np.all((s.alpha_bar > 0) & (s.alpha_bar <= 1))


@pytest.mark.parametrize("t", sorted(ABAR_T25))
def test_schedule_matches_closed_form(t):
    assert build_schedule(25).alpha_bar[t] == pytest.approx(ABAR_T25[t], rel=1e-13)


def test_schedule_floor_applies_at_T():
    # the raw cosine value at t = T is ~7e-63
    assert build_schedule(25).alpha_bar[-1] == 1e-5


def test_schedule_depends_on_t_over_T_only():
    a25, a50 = build_schedule(25).alpha_bar, build_schedule(50).alpha_bar
    np.testing.assert_allclose(a50[::2], a25, rtol=1e-14)


def test_schedule_rejects_short_T():
    with pytest.raises(ValueError):
        build_schedule(1)


def test_grid_subsampling():
    s = build_schedule(50)
    assert s.grid(25) == list(range(50, -1, -2))
    assert s.grid() == list(range(50, -1, -1))
    with pytest.raises(ValueError):
        s.grid(51)


# ---- predict_noise ---------------------------------------------------------------------------------

def test_single_standard_gaussian_monte_carlo():
    """E[eps | x_t] for x_0 ~ N(0, 1) is linear; its slope is estimated by least squares on 10^6 draws."""
    rng = np.random.default_rng(11)
    n = 1_000_000
    model = gaussian(np.zeros(1), sigma2=1.0)
    for t in (3, 12, 22):
        a = model.alpha_bar(t)
        x0, eps = rng.standard_normal(n), rng.standard_normal(n)
        xt = math.sqrt(a) * x0 + math.sqrt(1 - a) * eps
        slope = np.dot(xt, eps) / np.dot(xt, xt)
        resid = eps - slope * xt
        se = math.sqrt(np.mean(resid ** 2) / np.dot(xt, xt))
        analytic = float(predict_noise(model, np.ones(1), t)[0])
        assert analytic == pytest.approx(math.sqrt(1 - a), rel=1e-14)
        assert abs(slope - analytic) <= 3 * se


def test_gmm_posterior_matches_importance_sampling_oracle():
    """Self-normalized importance sampling over prior draws of x_0, 20 probes, 3 standard errors."""
    rng = np.random.default_rng(12)
    D = 2
    means = rng.normal(0, 1.5, (3, D))
    w = np.array([0.5, 0.3, 0.2])
    model = GMMDenoiser(w, means, 0.3)
    n = 400_000
    comp = rng.choice(3, size=n, p=w)
    x0 = means[comp] + math.sqrt(0.3) * rng.standard_normal((n, D))
    for _ in range(20):
        t = int(rng.integers(5, 26))
        a = model.alpha_bar(t)
        x = math.sqrt(a) * means[rng.integers(3)] + rng.normal(0, 0.8, D)
        eps = (x - math.sqrt(a) * x0) / math.sqrt(1 - a)
        logw = -np.sum(eps ** 2, axis=1) / 2
        wts = np.exp(logw - logw.max())
        wts /= wts.sum()
        est = wts @ eps
        se = np.sqrt(wts ** 2 @ (eps - est) ** 2)
        got = predict_noise(model, x, t)
        assert np.all(np.abs(got - est) <= 3 * se), (t, got, est, se)


def test_point_mass_noise_prediction():
    c = np.array([0.5, -1.0, 2.0])
    model = gaussian(c, sigma2=0.0)
    x = np.array([0.1, 0.2, -0.3])
    for t in (1, 10, 25):
        a = model.alpha_bar(t)
        np.testing.assert_allclose(predict_noise(model, x, t), (x - math.sqrt(a) * c) / math.sqrt(1 - a), rtol=1e-12)


def test_symmetric_pair_predicts_zero_at_origin():
    mu = np.array([1.0, -2.0, 0.5])
    model = GMMDenoiser([0.5, 0.5], np.stack([mu, -mu]), 0.25)
    for t in (1, 12, 25):
        np.testing.assert_allclose(predict_noise(model, np.zeros(3), t), 0.0, atol=1e-15)


def test_predict_noise_rejects_bad_timestep_and_dimension(gmm):
    with pytest.raises(ValueError):
        predict_noise(gmm, np.zeros(16), 0)
    with pytest.raises(ValueError):
        predict_noise(gmm, np.zeros(16), 26)
    with pytest.raises(DimensionError):
        predict_noise(gmm, np.zeros(3), 5)


def test_predict_noise_output_shape(gmm):
    x = np.random.default_rng(0).standard_normal(16)
    assert predict_noise(gmm, x, 7).shape == (16,)


# ---- DDIM ------------------------------------------------------------------------------------------

def test_point_mass_final_step_returns_data_point():
    c = np.array([0.3, -0.7])
    model = gaussian(c, sigma2=0.0)
    x = np.array([1.5, 2.0])
    np.testing.assert_allclose(ddim_step(model, x, 1, 0), c, atol=1e-12)
    for z in np.random.default_rng(0).standard_normal((5, 2)):
        np.testing.assert_allclose(sample(model, z), c, atol=1e-12)


def test_null_model_is_pure_rescaling():
    m = NullModel()
    x = np.array([1.0, -2.0, 0.5, 3.0])
    a = m.schedule.alpha_bar
    np.testing.assert_allclose(ddim_step(m, x, 10, 4), math.sqrt(a[4] / a[10]) * x, rtol=1e-14)
    np.testing.assert_allclose(sample(m, x), x / math.sqrt(a[-1]), rtol=1e-12)
    np.testing.assert_allclose(invert(m, x), x * math.sqrt(a[-1]), rtol=1e-12)


def test_ddim_step_matches_recomputation():
    rng = np.random.default_rng(3)
    model = gaussian(rng.standard_normal(16), sigma2=0.4)
    x = rng.standard_normal(16)
    a = model.schedule.alpha_bar
    t, tp = 14, 9
    v, mu = 0.4, model.means[0]
    eps = math.sqrt(1 - a[t]) * (x - math.sqrt(a[t]) * mu) / (a[t] * v + 1 - a[t])
    x0 = (x - math.sqrt(1 - a[t]) * eps) / math.sqrt(a[t])
    expected = math.sqrt(a[tp]) * x0 + math.sqrt(1 - a[tp]) * eps
    np.testing.assert_allclose(ddim_step(model, x, t, tp), expected, rtol=1e-12)


def test_ddim_step_rejects_non_decreasing_times(gmm):
    with pytest.raises(ValueError):
        ddim_step(gmm, np.zeros(16), 5, 5)


@pytest.mark.parametrize("grid", [[25, 10, 10, 0], [25, 10, 3], [0, 10, 25], [30, 0], [25]])
def test_sample_rejects_bad_grids(gmm, grid):
    with pytest.raises(ValueError):
        sample(gmm, np.zeros(16), grid)


def test_models_differing_in_one_mean_diverge():
    a = toy_gmm(0)
    means = np.array(a.means)
    means[2] += 0.5
    b = GMMDenoiser(a.weights, means, a.sigma2)
    z = np.random.default_rng(9).standard_normal(16)
    assert abs(np.linalg.norm(sample(a, z)) - np.linalg.norm(sample(b, z))) > 1e-3


def test_distinct_models_give_distinct_outputs():
    a, b = toy_gmm(0), toy_gmm(1)
    assert a.model_id != b.model_id
    for s in range(100):
        z = np.random.default_rng(s).standard_normal(16)
        assert np.linalg.norm(sample(a, z) - sample(b, z)) > 0


# ---- inversion -------------------------------------------------------------------------------------

def roundtrip(model, x0, refine=0):
    return np.linalg.norm(sample(model, invert(model, x0, refine=refine)) - x0) / np.linalg.norm(x0)


@pytest.mark.parametrize("sigma2", [0.1, 0.25, 0.5])
def test_single_gaussian_refined_roundtrip(sigma2):
    rng = np.random.default_rng(int(sigma2 * 100))
    mean = rng.standard_normal(16)
    x0 = mean + math.sqrt(sigma2) * rng.standard_normal(16)
    errs = {T: roundtrip(gaussian(mean, sigma2, T), x0, refine=2) for T in (25, 50)}
    assert 0 < errs[25] <= 1e-3
    assert 0 < errs[50] <= 3e-4
    assert errs[50] < errs[25]


def test_plain_inversion_residual_shrinks_with_T():
    rng = np.random.default_rng(0)
    mean = rng.standard_normal(16)
    x0 = mean + 0.5 * rng.standard_normal(16)
    errs = [roundtrip(gaussian(mean, 0.25, T), x0) for T in (25, 50, 100)]
    assert 0 < errs[2] < errs[1] < errs[0]


def test_inversion_is_deterministic(gmm):
    x0 = np.random.default_rng(1).standard_normal(16)
    assert np.array_equal(invert(gmm, x0), invert(gmm, x0))


def test_refinement_reduces_roundtrip_error(gmm):
    x0 = gmm.means[1] + 0.5 * np.random.default_rng(2).standard_normal(16)
    plain, refined = roundtrip(gmm, x0), roundtrip(gmm, x0, refine=5)
    assert refined < plain
    with pytest.raises(ValueError):
        invert(gmm, x0, refine=6)


def test_degenerate_model_cannot_be_inverted():
    with pytest.raises(DegenerateModelError):
        invert(gaussian(np.zeros(3), 0.0), np.ones(3))


# ---- models and training ---------------------------------------------------------------------------

def test_model_is_immutable_and_id_tracks_parameters(gmm):
    with pytest.raises(ValueError):
        gmm.means[0, 0] = 1.0
    same = gmm.with_params(gmm.params())
    assert same.model_id == gmm.model_id
    p = {k: np.array(v) for k, v in gmm.params().items()}
    p["means"][0, 0] += 1e-12
    assert gmm.with_params(p).model_id != gmm.model_id


def test_schedule_is_not_part_of_identity(gmm):
    assert gmm.with_schedule(50).model_id == gmm.model_id


def test_gmm_validation():
    with pytest.raises(ValueError):
        GMMDenoiser([0.5, 0.6], np.zeros((2, 3)), 0.1)
    with pytest.raises(ValueError):
        GMMDenoiser([1.0], np.zeros((2, 3)), 0.1)


def test_mlp_zero_network_is_gaussian_posterior():
    rng = np.random.default_rng(4)
    m = rng.standard_normal(4)
    mlp = init_mlp(4, 8, 2, rng, data_var=0.7, data_mean=m)
    zeroed = mlp.with_params({k: (v if k.startswith("data") else np.zeros_like(v)) for k, v in mlp.params().items()})
    ref = gaussian(m, 0.7)
    x = rng.standard_normal(4)
    for t in (1, 13, 25):
        np.testing.assert_allclose(predict_noise(zeroed, x, t), predict_noise(ref, x, t), rtol=1e-12)


def test_training_zero_steps_returns_initialization():
    data = gaussian(np.ones(4), 0.25)
    a = train_mlp_denoiser(data, 3, 0, 1e-3, hidden=8)
    b = init_mlp(4, 8, 2, np.random.default_rng(3), data_var=0.25, data_mean=np.ones(4))
    for k in b.params():
        assert np.array_equal(a.params()[k], b.params()[k])


def test_training_is_seeded():
    data = gaussian(np.ones(4), 0.25)
    a = train_mlp_denoiser(data, 5, 20, 1e-3, hidden=8)
    b = train_mlp_denoiser(data, 5, 20, 1e-3, hidden=8)
    c = train_mlp_denoiser(data, 6, 20, 1e-3, hidden=8)
    assert a.model_id == b.model_id != c.model_id


def test_training_rejects_bad_learning_rate():
    with pytest.raises(ValueError):
        train_mlp_denoiser(gaussian(np.ones(4)), 0, 1, 0.0)


def test_training_approaches_analytic_posterior():
    """Mean |eps_mlp - eps_exact| on held-out points falls after training on a two-component mixture."""
    rng = np.random.default_rng(8)
    data = GMMDenoiser([0.5, 0.5], np.stack([np.full(4, 1.0), np.full(4, -1.0)]), 0.2)
    init = train_mlp_denoiser(data, 1, 0, 3e-3, hidden=32)
    trained = train_mlp_denoiser(data, 1, 400, 3e-3, hidden=32)

    def err(model):
        total = 0.0
        for _ in range(50):
            t = int(rng.integers(1, 26))
            x = rng.standard_normal(4)
            total += np.linalg.norm(predict_noise(model, x, t) - predict_noise(data, x, t))
        return total / 50

    assert err(trained) < err(init)


def test_latent_codec_is_orthogonal():
    c = LatentCodec(6, seed=3)
    x = np.random.default_rng(0).standard_normal(6)
    np.testing.assert_allclose(c.decode(c.encode(x)), x, atol=1e-13)
    assert np.linalg.norm(c.encode(x)) == pytest.approx(np.linalg.norm(x))
    assert LatentCodec(6).encode(x) is x
