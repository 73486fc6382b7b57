"""Conjugate toy posterior, weighted PDE posterior, and kernel density."""

import math
from types import SimpleNamespace

import numpy as np
import pytest

from rbcv import bayes, cv, kl, rng, thermal
from rbcv.errors import (
    DegenerateLikelihoodError,
    InvalidParameterError,
)


@pytest.fixture(scope="module")
def fin():
    return thermal.build_fin_problem(refinement=6)


@pytest.fixture(scope="module")
def fin_observations(fin):
    return bayes.synthetic_observations(fin, (2.0, 0.5), 3, seed=777)


def toy(observations, noise_std=0.5, prior_mean=0.9, prior_std=0.4):
    return bayes.GaussianToyModel(
        theta0=1.0,
        noise_std=noise_std,
        prior_mean=prior_mean,
        prior_std=prior_std,
        observations=np.asarray(observations, dtype=float),
    )


class TestAnalyticToyPosterior:
    def test_closed_form_variance_example(self):
        post = bayes.analytic_mmse(toy(np.ones(10)))
        # sigma^2 lambda^2/J / (sigma^2 + lambda^2/J) = 0.16*0.025/0.185
        assert math.isclose(post.post_var, 0.004 / 0.185, rel_tol=1e-14)
        assert math.isclose(post.post_var, 0.021621621621621623, rel_tol=1e-14)

    def test_observations_at_prior_mean_are_a_fixed_point(self):
        post = bayes.analytic_mmse(toy(np.full(7, 0.9), prior_mean=0.9))
        assert math.isclose(post.mmse, 0.9, rel_tol=1e-14)

    def test_flat_prior_limit_recovers_sample_mean(self):
        obs = np.array([0.2, 1.4, 0.9, 1.1])
        post = bayes.analytic_mmse(toy(obs, prior_std=1e9))
        assert math.isclose(post.mmse, obs.mean(), rel_tol=1e-9)

    def test_mmse_lies_between_prior_mean_and_sample_mean(self):
        stream = rng.RandomStream(404, stream_id=0)
        for k in range(20):
            obs = bayes.toy_observations(1.0, 0.5, 5 + k % 7, stream.advanced(20 * k))
            mu = 0.5 + 0.1 * k
            post = bayes.analytic_mmse(toy(obs, prior_mean=mu))
            lo, hi = sorted((mu, float(obs.mean())))
            assert lo - 1e-12 <= post.mmse <= hi + 1e-12

    def test_more_observations_never_inflate_posterior_variance(self):
        stream = rng.RandomStream(405, stream_id=0)
        obs = bayes.toy_observations(1.0, 0.5, 40, stream)
        var_j = bayes.analytic_mmse(toy(obs[:10])).post_var
        var_2j = bayes.analytic_mmse(toy(obs[:20])).post_var
        var_4j = bayes.analytic_mmse(toy(obs)).post_var
        assert var_4j < var_2j < var_j

    def test_rejects_degenerate_inputs(self):
        with pytest.raises(InvalidParameterError):
            bayes.analytic_mmse(toy(np.array([])))
        with pytest.raises(InvalidParameterError):
            bayes.analytic_mmse(toy(np.ones(3), noise_std=0.0))
        with pytest.raises(InvalidParameterError):
            bayes.analytic_mmse(toy(np.ones(3), prior_std=-0.1))


class TestToyMonteCarlo:
    def test_matches_analytic_within_clt(self):
        obs = bayes.toy_observations(1.0, 0.5, 10, rng.RandomStream(500, stream_id=0))
        model = toy(obs)
        post = bayes.analytic_mmse(model)
        m = 20_000
        est = bayes.mc_mmse_toy(model, seed=7, m=m)
        halfwidth = rng.normal_quantile(0.95) * math.sqrt(post.post_var / m)
        assert abs(est - post.mmse) <= 3 * halfwidth

    def test_vanishing_noise_returns_sample_mean(self):
        obs = np.array([1.02, 0.97, 1.01])
        model = toy(obs, noise_std=1e-8)
        est = bayes.mc_mmse_toy(model, seed=7, m=100)
        assert abs(est - obs.mean()) <= 1e-6

    def test_same_seed_reproduces_exactly(self):
        obs = np.array([1.02, 0.97, 1.01])
        a = bayes.mc_mmse_toy(toy(obs), seed=11, m=500)
        b = bayes.mc_mmse_toy(toy(obs), seed=11, m=500)
        assert a == b
        assert a != bayes.mc_mmse_toy(toy(obs), seed=12, m=500)

    def test_requires_two_samples(self):
        with pytest.raises(InvalidParameterError):
            bayes.mc_mmse_toy(toy(np.ones(3)), seed=0, m=1)

    def test_conjugacy_oracle_on_hyperparameter_grid(self):
        # (prior mean, prior std) x noise std x observation set, 125 cells
        mus = np.linspace(0.5, 1.5, 5)
        sigmas = np.linspace(0.1, 0.9, 5)
        lams = np.linspace(0.1, 0.9, 5)
        m = 4000
        quantile = rng.normal_quantile(0.95)
        failures = 0
        cell = 0
        for i in range(5):
            obs = bayes.toy_observations(
                1.0, 0.5, 10, rng.RandomStream(500 + i, stream_id=0)
            )
            for mu, sigma in zip(mus, sigmas):
                for lam in lams:
                    model = toy(obs, noise_std=lam, prior_mean=mu, prior_std=sigma)
                    post = bayes.analytic_mmse(model)
                    est = bayes.mc_mmse_toy(model, seed=cell, m=m)
                    halfwidth = quantile * math.sqrt(post.post_var / m)
                    failures += abs(est - post.mmse) > 3 * halfwidth
                    cell += 1
        assert failures <= 1

    def test_posterior_draws_shared_across_points(self):
        sets = {0: np.array([1.1, 0.9, 1.0]), 1: np.array([0.2, 0.4])}
        model = bayes.ToyPosteriorModel(observation_sets=sets, seed=3)
        idx = np.arange(64)
        points = [(0.5, 0.9, 0.4, 0), (0.2, 1.3, 0.7, 1)]
        standardized = []
        for point in points:
            vals = model.realize_block(point, idx)
            post = bayes.analytic_mmse(
                toy(sets[point[3]], noise_std=point[0], prior_mean=point[1], prior_std=point[2])
            )
            standardized.append((vals - post.mmse) / math.sqrt(post.post_var))
        np.testing.assert_allclose(standardized[0], standardized[1], rtol=0, atol=1e-12)

    def test_sweep_variance_collapses_with_one_variate(self):
        # the family is affine in one shared standard normal, so a single
        # centered variate removes essentially all variance
        sets = {
            i: bayes.toy_observations(1.0, 0.5, 10, rng.RandomStream(500 + i, stream_id=0))
            for i in range(3)
        }
        model = bayes.ToyPosteriorModel(observation_sets=sets, seed=9)
        points = [
            (lam, mu, sigma, sid)
            for lam in (0.1, 0.5, 0.9)
            for mu, sigma in ((0.5, 0.1), (1.0, 0.5), (1.5, 0.9))
            for sid in range(3)
        ]
        config = cv.WeakGreedyConfig(tol=1e-30, i_max=10, m_large=4000)
        basis = cv.weak_greedy(model, points, config)
        assert len(basis.variates) <= 10
        plain = max(
            cv.reduced_estimate(model, [], p, m_small=10, m_test=10).reduced_variance
            for p in points
        )
        reduced = max(
            cv.reduced_estimate(model, basis, p, m_small=10, m_test=10).reduced_variance
            for p in points
        )
        assert reduced <= 1e-6 * plain


class TestSyntheticObservations:
    def test_three_distinct_values(self, fin_observations):
        values = fin_observations.values
        assert len(values) == 3
        assert len(np.unique(values)) == 3
        assert fin_observations.lambda0 == (2.0, 0.5)

    def test_zero_field_amplitude_gives_identical_observations(self):
        calm = thermal.build_fin_problem(refinement=4, upsilon=0.0)
        obs = bayes.synthetic_observations(calm, (2.0, 0.5), 5, seed=3)
        assert np.ptp(obs.values) == 0.0

    def test_large_sample_mean_matches_forward_mc(self, fin):
        big = bayes.synthetic_observations(fin, (2.0, 0.5), 10_000, seed=21)
        forward = thermal.FinOutputModel(problem=fin, seed=88, output="o")
        ref = forward.realize_block((2.0, 0.5), np.arange(10_000))
        spread = math.sqrt(big.values.var(ddof=1) / 1e4 + ref.var(ddof=1) / 1e4)
        assert abs(big.values.mean() - ref.mean()) <= 3 * spread

    def test_requires_at_least_one_observation(self, fin):
        with pytest.raises(InvalidParameterError):
            bayes.synthetic_observations(fin, (2.0, 0.5), 0, seed=3)


class TestWeightedPosterior:
    def test_weights_live_in_unit_interval(self, fin_observations):
        o_values = np.linspace(0.0, 1.0, 50)
        logs = bayes.log_weights(o_values, fin_observations.values, zeta=1e-2)
        assert np.all(logs <= 0.0)
        w = np.exp(logs)
        assert np.all(w > 0.0) and np.all(w <= 1.0)

    def test_flat_likelihood_recovers_prior_mean(self, fin, fin_observations):
        sigma2 = 5e-4
        post = bayes.PdePosterior(
            prior_variances=np.full(fin.k_trunc, sigma2),
            zeta=1e12,
            observations=fin_observations.values,
            lam=(2.0, 0.5),
        )
        result = bayes.pde_posterior_expectation(post, fin, seed=11, m=4000)
        amps = kl.sample_amplitudes(
            fin.kl_basis, fin.k_trunc, fin.upsilon, seed=11,
            indices=np.arange(4000), sigmas=np.full(fin.k_trunc, math.sqrt(sigma2)),
        )
        s_vals, _ = bayes._solve_outputs(fin.space, 2.0, 0.5, amps)
        assert math.isclose(result.ratio, s_vals.mean(), rel_tol=1e-12)
        assert math.isclose(result.denominator, 1.0, rel_tol=1e-9)
        assert result.ess >= 0.999 * result.m

    def test_observations_at_lambda_contract_posterior(self, fin, fin_observations):
        sigma2 = 1e-2
        post = bayes.PdePosterior(
            prior_variances=np.full(fin.k_trunc, sigma2),
            zeta=1e-5,
            observations=fin_observations.values,
            lam=(2.0, 0.5),
        )
        result = bayes.pde_posterior_expectation(post, fin, seed=11, m=4000)
        amps = kl.sample_amplitudes(
            fin.kl_basis, fin.k_trunc, fin.upsilon, seed=11,
            indices=np.arange(4000), sigmas=np.full(fin.k_trunc, math.sqrt(sigma2)),
        )
        s_vals, _ = bayes._solve_outputs(fin.space, 2.0, 0.5, amps)
        prior_var = float(np.var(s_vals, ddof=1))
        assert result.posterior_variance <= 0.8 * prior_var
        assert 1.0 <= result.ess <= result.m

    def test_matches_one_dimensional_conjugate_oracle(self):
        # linear toy outputs o = c z, s = c1 z with a single KL mode make the
        # weighted-sampling ratio analytically solvable
        basis = kl.KLBasis(
            eigenvalues=np.array([1.0]),
            modes=np.array([[0.4], [0.4]]),
            boundary_nodes=np.array([0, 1]),
            weights=np.array([0.5, 0.5]),
            delta=0.5,
            trace_renormalization=1.0,
            gamma_b_length=1.0,
        )
        fake = SimpleNamespace(kl_basis=basis, k_trunc=1, upsilon=1.0, space=None)
        c, c1 = 2.0, 3.0
        sigma2, zeta = 0.0025, 1e-3
        obs = np.array([0.08, 0.11, 0.10])
        post = bayes.PdePosterior(
            prior_variances=np.array([sigma2]), zeta=zeta, observations=obs,
            lam=(2.0, 0.5),
        )
        result = bayes.pde_posterior_expectation(
            post, fake, seed=19, m=200_000,
            outputs_fn=lambda amps: (c1 * amps[:, 0], c * amps[:, 0]),
        )
        # Gaussian conjugacy: posterior precision 2 J c^2 / zeta + 1 / sigma^2
        v = 1.0 / (2.0 * len(obs) * c**2 / zeta + 1.0 / sigma2)
        exact = c1 * v * (2.0 * c * obs.sum() / zeta)
        assert abs(result.ratio - exact) <= 3 * result.halfwidth
        assert math.isclose(result.posterior_variance, c1**2 * v, rel_tol=0.05)

    def test_incompatible_observations_raise(self, fin):
        post = bayes.PdePosterior(
            prior_variances=np.full(fin.k_trunc, 5e-4),
            zeta=1e-6,
            observations=np.array([50.0, 51.0, 49.5]),
            lam=(2.0, 0.5),
        )
        with pytest.raises(DegenerateLikelihoodError):
            bayes.pde_posterior_expectation(post, fin, seed=11, m=64)

    def test_validates_inputs(self, fin, fin_observations):
        good = bayes.PdePosterior(
            prior_variances=np.full(fin.k_trunc, 5e-4),
            zeta=1e-4,
            observations=fin_observations.values,
            lam=(2.0, 0.5),
        )
        with pytest.raises(InvalidParameterError):
            bayes.pde_posterior_expectation(good, fin, seed=11, m=1)
        short = bayes.PdePosterior(
            prior_variances=np.array([5e-4]),
            zeta=1e-4,
            observations=fin_observations.values,
            lam=(2.0, 0.5),
        )
        with pytest.raises(InvalidParameterError):
            bayes.pde_posterior_expectation(short, fin, seed=11, m=64)
        negative = bayes.PdePosterior(
            prior_variances=np.full(fin.k_trunc, -5e-4),
            zeta=1e-4,
            observations=fin_observations.values,
            lam=(2.0, 0.5),
        )
        with pytest.raises(InvalidParameterError):
            bayes.pde_posterior_expectation(negative, fin, seed=11, m=64)


class TestPosteriorModel:
    def test_views_share_realizations(self, fin, fin_observations):
        sets = {0: fin_observations}
        numerator = bayes.PdePosteriorModel(
            problem=fin, observation_sets=sets, zeta=1.0, seed=31
        )
        denominator = numerator.view("denominator")
        point = (2.0, 0.5, 5e-4, 0)
        idx = np.arange(128)
        num_vals = numerator.realize_block(point, idx)
        assert len(numerator._cache) == 1
        den_vals = denominator.realize_block(point, idx)
        assert len(numerator._cache) == 1
        amps = kl.sample_amplitudes(
            fin.kl_basis, fin.k_trunc, fin.upsilon, seed=31,
            indices=idx, sigmas=np.full(fin.k_trunc, math.sqrt(5e-4)),
        )
        s_vals, _ = bayes._solve_outputs(fin.space, 2.0, 0.5, amps)
        np.testing.assert_allclose(num_vals / den_vals, s_vals, rtol=1e-12)

    def test_variance_reduction_on_both_views(self, fin, fin_observations):
        sets = {0: fin_observations}
        numerator = bayes.PdePosteriorModel(
            problem=fin, observation_sets=sets, zeta=12.0, seed=31
        )
        denominator = numerator.view("denominator")
        sigma2 = 5e-4
        points = [
            (k2, e, sigma2, 0)
            for k2 in (0.5, 2.0, 8.0)
            for e in (0.2, 0.5, 0.9)
        ]
        config = cv.WeakGreedyConfig(tol=1e-30, i_max=3, m_large=500)
        query = (1.3, 0.4, sigma2, 0)
        ratios = []
        for model in (numerator, denominator):
            basis = cv.weak_greedy(model, points, config)
            reduced = cv.reduced_estimate(model, basis, query, m_small=10, m_test=10)
            plain = cv.reduced_estimate(model, [], query, m_small=10, m_test=10)
            assert reduced.reduced_variance <= 1e-2 * plain.reduced_variance
            ratios.append(reduced)
        ratio, halfwidth = bayes.ratio_of_estimates(*ratios)
        assert np.isfinite(ratio) and halfwidth >= 0.0

    def test_degenerate_point_raises(self, fin, fin_observations):
        model = bayes.PdePosteriorModel(
            problem=fin, observation_sets={0: fin_observations}, zeta=1e-6, seed=31
        )
        with pytest.raises(DegenerateLikelihoodError):
            model.realize_block((9.0, 0.9, 5e-4, 0), np.arange(8))

    def test_cache_is_bounded(self, fin, fin_observations):
        model = bayes.PdePosteriorModel(
            problem=fin, observation_sets={0: fin_observations}, zeta=1.0,
            seed=31, cache_size=4,
        )
        for k, k2 in enumerate(np.linspace(1.0, 3.0, 9)):
            model.realize_block((float(k2), 0.5, 5e-4, 0), np.arange(16))
        assert len(model._cache) <= 4

    def test_invalid_output_name_rejected(self, fin, fin_observations):
        from rbcv.errors import ConfigurationError

        with pytest.raises(ConfigurationError):
            bayes.PdePosteriorModel(
                problem=fin, observation_sets={0: fin_observations},
                zeta=1.0, output="quotient",
            )


class TestRatioOfEstimates:
    @staticmethod
    def estimate(mean, variance, m_test=100):
        return cv.ReducedEstimate(
            point=(0.0,),
            mean=mean,
            reduced_variance=variance,
            coefficients=np.zeros(0),
            dropped=[],
            interval=rng.ConfidenceInterval(
                center=mean,
                halfwidth=rng.normal_quantile(0.95) * math.sqrt(variance / m_test),
                level=0.95,
                num_samples=m_test,
            ),
            bias_halfwidths=np.zeros(0),
            m_test=m_test,
        )

    def test_delta_method_halfwidth(self):
        numerator = self.estimate(2.0, 0.04)
        denominator = self.estimate(0.5, 0.01)
        ratio, halfwidth = bayes.ratio_of_estimates(numerator, denominator)
        assert math.isclose(ratio, 4.0, rel_tol=1e-15)
        var = (0.04 + 16.0 * 0.01) / (0.25 * 100)
        assert math.isclose(
            halfwidth, rng.normal_quantile(0.95) * math.sqrt(var), rel_tol=1e-12
        )
        # positive covariance between numerator and denominator tightens it
        _, tighter = bayes.ratio_of_estimates(numerator, denominator, covariance=0.01)
        assert tighter < halfwidth

    def test_zero_denominator_raises(self):
        with pytest.raises(DegenerateLikelihoodError):
            bayes.ratio_of_estimates(self.estimate(1.0, 0.01), self.estimate(0.0, 0.01))


class TestKernelPdf:
    def test_single_sample_peak_value(self):
        pdf = bayes.KernelPdf(samples=np.array([1.3]), bandwidth=0.5, window=0.01)
        assert bayes.kernel_pdf_eval(pdf, 1.3) == 1.0

    def test_zero_beyond_window(self):
        pdf = bayes.KernelPdf(
            samples=np.array([0.0, 1.0, 2.0]), bandwidth=0.5, window=0.01
        )
        assert bayes.kernel_pdf_eval(pdf, 0.5) == 0.0

    def test_profile_matches_direct_summation(self):
        stream = rng.RandomStream(606, stream_id=0)
        samples = 0.5 + 0.1 * rng.standard_normal(stream, 10_000)
        pdf = bayes.KernelPdf(samples=samples, bandwidth=0.5, window=0.01)
        for s in np.linspace(0.2, 0.8, 50):
            direct = sum(
                math.exp(-((s - sm) ** 2) / (2 * 0.5**2))
                for sm in samples
                if abs(s - sm) < 0.01
            )
            assert abs(bayes.kernel_pdf_eval(pdf, float(s)) - direct) <= 1e-12 * max(
                direct, 1.0
            )

    def test_rejects_nonpositive_hyperparameters(self):
        with pytest.raises(InvalidParameterError):
            bayes.kernel_pdf_eval(
                bayes.KernelPdf(samples=np.ones(3), bandwidth=0.0, window=0.01), 1.0
            )
        with pytest.raises(InvalidParameterError):
            bayes.kernel_pdf_eval(
                bayes.KernelPdf(samples=np.ones(3), bandwidth=0.5, window=-1.0), 1.0
            )


class TestObservationCsv:
    def test_round_trip_is_exact(self, tmp_path, fin_observations):
        stream = rng.RandomStream(707, stream_id=0)
        sets = {
            2: fin_observations,
            0: bayes.ObservationSet(
                values=rng.standard_normal(stream, 4), lambda0=(1.0, 0.3)
            ),
        }
        path = bayes.write_observation_sets(tmp_path / "obs.csv", sets)
        back = bayes.read_observation_sets(path)
        assert sorted(back) == [0, 2]
        for set_id, obs in sets.items():
            np.testing.assert_array_equal(back[set_id].values, obs.values)
            assert back[set_id].lambda0 == obs.lambda0

    def test_header_and_sorted_rows(self, tmp_path, fin_observations):
        path = bayes.write_observation_sets(
            tmp_path / "obs.csv", {5: fin_observations, 1: fin_observations}
        )
        lines = path.read_text().splitlines()
        assert lines[0] == "set_id,j,value,lambda0_k2,lambda0_Ebar"
        ids = [int(line.split(",")[0]) for line in lines[1:]]
        assert ids == sorted(ids)
