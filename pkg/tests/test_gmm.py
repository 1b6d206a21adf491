"""Gaussian-mixture prior: sampling, marginals, velocities, densities.

The velocity closed form was derived independently from joint-Gaussian
conditioning of (x_t, x1) and (x_t, x0) per component; these tests pin it
against boundary identities, a kernel-weighted Monte-Carlo oracle, and a
discretized continuity equation.
"""

import json

import numpy as np
import pytest
from helpers import mc_velocity_oracle, scalar_gmm

from restoraflow.gmm import (
    GmmPrior,
    GmmVelocityField,
    gmm_log_density,
    gmm_marginal,
    gmm_sample,
    gmm_sample_batch,
    gmm_velocity,
    load_gmm_spec,
    save_gmm_spec,
)
from restoraflow.tensors import ImageTensor, SeededRng


@pytest.fixture
def two_mode():
    return scalar_gmm([0.5, 0.5], [-2.0, 2.0], [0.25, 0.25])


class TestPriorValidation:
    def test_weights_must_sum_to_one(self):
        with pytest.raises(ValueError, match="sum to 1"):
            scalar_gmm([0.6, 0.6], [0.0, 1.0], [1.0, 1.0])

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            scalar_gmm([1.5, -0.5], [0.0, 1.0], [1.0, 1.0])

    def test_zero_variance_rejected(self):
        with pytest.raises(ValueError):
            scalar_gmm([1.0], [0.0], [0.0])

    def test_mean_shape_mismatch(self):
        with pytest.raises(ValueError):
            GmmPrior([1.0], np.zeros((2, 1, 1, 1)), [1.0])


class TestSampling:
    def test_single_component_is_standard_normal_stream(self):
        prior = scalar_gmm([1.0], [0.0], [1.0])
        rng = SeededRng(3)
        draws = np.array([gmm_sample(prior, rng).data.item() for _ in range(2000)])
        assert abs(draws.mean()) < 0.08
        assert abs(draws.var() - 1.0) < 0.1

    def test_zero_weight_component_never_drawn(self):
        prior = scalar_gmm([1.0, 0.0], [5.0, -5.0], [0.01, 0.01])
        rng = SeededRng(4)
        for _ in range(200):
            assert gmm_sample(prior, rng).data.item() > 0

    def test_balanced_mixture_statistics(self):
        # 1e5 draws: mean within 0.03 of 0 (~4.7 SE), mode fraction within
        # 0.01 of 0.5 (~6 SE); drawn through the vectorized sampler.
        prior = scalar_gmm([0.5, 0.5], [-2.0, 2.0], [0.01, 0.01])
        xs = gmm_sample_batch(prior, 100000, SeededRng(5)).ravel()
        assert abs(xs.mean()) < 0.03
        assert abs(np.mean(np.abs(xs - 2.0) < 1.0) - 0.5) < 0.01

    def test_sample_determinism(self, two_mode):
        a = gmm_sample(two_mode, SeededRng(9))
        b = gmm_sample(two_mode, SeededRng(9))
        assert a.equal(b)


class TestMarginal:
    def test_t_zero_is_standard_normal(self, two_mode):
        for mean, var, _ in gmm_marginal(two_mode, 0.0):
            assert np.all(mean == 0.0)
            assert var == 1.0

    def test_t_one_recovers_prior(self, two_mode):
        params = gmm_marginal(two_mode, 1.0)
        assert params[0][0].item() == -2.0
        assert params[1][0].item() == 2.0
        assert params[0][1] == 0.25

    def test_half_time_variance(self):
        prior = scalar_gmm([1.0], [1.0], [1.0])
        _, var, _ = gmm_marginal(prior, 0.5)[0]
        assert var == pytest.approx(0.5, abs=1e-15)


class TestVelocity:
    def test_single_component_symmetry_zero(self):
        prior = scalar_gmm([1.0], [0.0], [1.0])
        for x in (-1.3, 0.0, 2.4):
            v = gmm_velocity(prior, ImageTensor([[[x]]]), 0.5)
            assert v.data.item() == pytest.approx(0.0, abs=1e-14)

    def test_t_zero_is_mean_pull(self):
        # v(x, 0) = sum_k w_k mu_k - x: all components share the t=0 marginal
        prior = scalar_gmm([0.25, 0.75], [-1.0, 3.0], [1.0, 0.5])
        for x in (-0.7, 0.4):
            v = gmm_velocity(prior, ImageTensor([[[x]]]), 0.0)
            assert v.data.item() == pytest.approx(0.25 * -1.0 + 0.75 * 3.0 - x, abs=1e-12)

    def test_matches_monte_carlo_oracle(self, two_mode):
        v = gmm_velocity(two_mode, ImageTensor([[[0.3]]]), 0.6).data.item()
        est, se = mc_velocity_oracle(two_mode, 0.3, 0.6, seed=77)
        assert abs(v - est) <= 3.0 * se

    def test_near_one_boundary_identity(self, two_mode):
        # as t -> 1 the field approaches v(x) = x
        for x in (-2.1, 0.7, 1.9):
            v = gmm_velocity(two_mode, ImageTensor([[[x]]]), 1.0 - 1e-6).data.item()
            assert abs(v - x) < 1e-3

    def test_defined_at_t_exactly_one(self, two_mode):
        v = gmm_velocity(two_mode, ImageTensor([[[0.7]]]), 1.0).data.item()
        assert v == pytest.approx(0.7, abs=1e-9)

    def test_shape_and_domain_checks(self, two_mode):
        with pytest.raises(ValueError):
            gmm_velocity(two_mode, ImageTensor([[[0.0, 0.0]]]), 0.5)
        with pytest.raises(ValueError):
            gmm_velocity(two_mode, ImageTensor([[[0.0]]]), 1.5)

    def test_batch_field_matches_pointwise(self, two_mode):
        field = GmmVelocityField(two_mode)
        xs = np.linspace(-3, 3, 7).reshape(7, 1, 1, 1)
        batch = field.evaluate_batch(xs, 0.4)
        for i in range(7):
            single = gmm_velocity(two_mode, ImageTensor(xs[i]), 0.4).data
            assert np.allclose(batch[i], single, atol=1e-12)

    def test_no_underflow_for_separated_components_at_large_t(self):
        prior = scalar_gmm([0.5, 0.5], [-40.0, 40.0], [0.01, 0.01])
        v = gmm_velocity(prior, ImageTensor([[[39.0]]]), 0.99)
        assert np.isfinite(v.data).all()

    def test_continuity_equation_second_order(self, two_mode):
        # d/dt p + d/dx (p v) = 0; the centered-difference residual must
        # shrink ~4x when the grid is refined 2x.
        def residual(h):
            xs = np.arange(-3.0, 3.0 + h / 2, h)
            t0, dt = 0.5, h / 4

            def dens(t):
                return np.array(
                    [np.exp(gmm_log_density(two_mode, ImageTensor([[[x]]]), t)) for x in xs]
                )

            def flux(t):
                p = dens(t)
                v = np.array(
                    [gmm_velocity(two_mode, ImageTensor([[[x]]]), t).data.item() for x in xs]
                )
                return p * v

            dp_dt = (dens(t0 + dt) - dens(t0 - dt)) / (2 * dt)
            f = flux(t0)
            dflux_dx = (f[2:] - f[:-2]) / (2 * h)
            return np.max(np.abs(dp_dt[1:-1] + dflux_dx))

        coarse, fine = residual(0.08), residual(0.04)
        assert fine < coarse / 2.5


class TestLogDensity:
    def test_single_gaussian_formula(self):
        prior = scalar_gmm([1.0], [0.0], [1.0])
        for t in (0.0, 0.3, 0.9):
            s2 = (1 - t) ** 2 + t**2
            got = gmm_log_density(prior, ImageTensor([[[0.0]]]), t)
            assert got == pytest.approx(-0.5 * np.log(2 * np.pi * s2), abs=1e-12)

    def test_t_zero_is_standard_normal_for_any_prior(self, two_mode):
        x = 0.83
        got = gmm_log_density(two_mode, ImageTensor([[[x]]]), 0.0)
        assert got == pytest.approx(-0.5 * np.log(2 * np.pi) - x**2 / 2, abs=1e-12)

    def test_matches_direct_component_sum(self, two_mode):
        x, t = 0.4, 0.35
        direct = sum(
            w * np.exp(-((x - m.item()) ** 2) / (2 * var)) / np.sqrt(2 * np.pi * var)
            for m, var, w in gmm_marginal(two_mode, t)
        )
        got = gmm_log_density(two_mode, ImageTensor([[[x]]]), t)
        assert got == pytest.approx(np.log(direct), abs=1e-12)


class TestSpecFile:
    def test_round_trip(self, tmp_path, two_mode):
        path = tmp_path / "prior.json"
        save_gmm_spec(two_mode, path)
        back = load_gmm_spec(path)
        assert np.array_equal(back.weights, two_mode.weights)
        assert np.array_equal(back.means, two_mode.means)
        assert np.array_equal(back.variances, two_mode.variances)
        assert back.shape == two_mode.shape

    def test_shape_field_respected(self, tmp_path):
        path = tmp_path / "img.json"
        spec = {
            "weights": [1.0],
            "means": [[0.0] * 12],
            "variances": [1.0],
            "shape": [3, 2, 2],
        }
        path.write_text(json.dumps(spec))
        assert load_gmm_spec(path).shape == (3, 2, 2)

    def test_missing_field_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"weights": [1.0]}))
        with pytest.raises(ValueError):
            load_gmm_spec(path)

    def test_shape_mismatch_rejected(self, tmp_path):
        path = tmp_path / "mis.json"
        spec = {"weights": [1.0], "means": [[0.0, 0.0]], "variances": [1.0], "shape": [1, 1, 3]}
        path.write_text(json.dumps(spec))
        with pytest.raises(ValueError, match="shape"):
            load_gmm_spec(path)
