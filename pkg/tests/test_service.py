"""HTTP service endpoints against in-process oracles."""

import numpy as np
import pytest
from fastapi.testclient import TestClient

import rbcv
from rbcv import bayes, cv, fem, kl, thermal
from rbcv.service import create_app

TRAIN = dict(refinement=4, n_k2=3, n_ebar=3, m_large=300, i_max=4, variance_tol=1e-5)
QUERY = dict(k2=1.7, ebar=0.4, m_small=10, m_test=50)


@pytest.fixture(scope="module")
def client():
    with TestClient(create_app()) as c:
        yield c


@pytest.fixture(scope="module")
def trained(client):
    response = client.post("/sessions/train", json=TRAIN)
    assert response.status_code == 200, response.text
    return response.json()


@pytest.fixture(scope="module")
def twin():
    """The same training run performed directly against the library."""
    problem = thermal.build_fin_problem(refinement=TRAIN["refinement"])
    model = thermal.FinOutputModel(problem=problem, seed=0)
    grid = thermal.parameter_grid((0.1, 10.0), (0.1, 1.0), TRAIN["n_k2"], TRAIN["n_ebar"])
    basis = cv.weak_greedy(
        model,
        grid,
        cv.WeakGreedyConfig(
            tol=TRAIN["variance_tol"], i_max=TRAIN["i_max"], m_large=TRAIN["m_large"]
        ),
    )
    return model, basis


class TestPlainEndpoints:
    def test_health(self, client):
        body = client.get("/health").json()
        assert body == {"status": "ok", "version": rbcv.__version__}

    def test_breakeven_matches_direct_computation(self, client):
        request = dict(
            c=100.0, m=10_000, m_test=10, m_small=10, m_large=10_000, i=3, card=100
        )
        body = client.post("/breakeven", json=request).json()
        report = cv.breakeven_report(cv.BreakevenInputs(**request))
        assert body["naive_cost_per_query"] == report.naive_cost_per_query
        assert body["cv_cost_per_query"] == report.cv_cost_per_query
        assert body["greedy_cost"] == report.greedy_cost
        assert body["per_query_gain"] == report.per_query_gain
        assert body["min_queries"] == report.min_queries
        assert isinstance(body["min_queries"], int)

    def test_breakeven_without_gain_reports_null(self, client):
        request = dict(c=1.0, m=10, m_test=10, m_small=10, m_large=10_000, i=5, card=100)
        body = client.post("/breakeven", json=request).json()
        report = cv.breakeven_report(cv.BreakevenInputs(**request))
        assert report.min_queries is None
        assert body["min_queries"] is None

    def test_toy_mmse_matches_analytic_and_mc(self, client):
        request = dict(
            observations=[1.2, 0.7, 1.0],
            noise_std=0.5,
            prior_mean=0.9,
            prior_std=0.4,
            seed=3,
            m=20_000,
        )
        body = client.post("/toy/mmse", json=request).json()
        model = bayes.GaussianToyModel(
            theta0=0.0,
            noise_std=0.5,
            prior_mean=0.9,
            prior_std=0.4,
            observations=np.array([1.2, 0.7, 1.0]),
        )
        post = bayes.analytic_mmse(model)
        assert body["analytic_mmse"] == post.mmse
        assert body["analytic_post_var"] == post.post_var
        assert body["mc_mmse"] == bayes.mc_mmse_toy(model, seed=3, m=20_000)
        assert abs(body["mc_mmse"] - body["analytic_mmse"]) <= 3 * body["clt_halfwidth_95"]

    def test_kl_spectrum_matches_library_truncation(self, client):
        body = client.post(
            "/kl/spectrum", json={"refinement": 4, "delta": 0.5, "tol": 1e-2}
        ).json()
        mesh = fem.generate_fin_mesh(4)
        basis = kl.build_kl(mesh, 0.5)
        assert body["k_trunc"] == kl.truncate(basis, 1e-2)
        assert body["eigenvalues"] == [float(v) for v in basis.eigenvalues]
        assert np.all(np.diff(body["eigenvalues"]) <= 0)


class TestSessionFlow:
    def test_train_reports_trace_and_dimensions(self, trained, twin):
        _, basis = twin
        assert trained["k_trunc"] == 10
        assert trained["rb_tol_met"] is True
        assert trained["cv_tol_met"] is True
        assert trained["n_variates"] == len(basis)
        assert trained["trace"][-1]["anchor"] is None
        assert trained["trace"][-1]["sigma"] <= TRAIN["variance_tol"]
        sigmas = [entry["sigma"] for entry in trained["trace"]]
        assert sigmas == [rec.sigma for rec in basis.trace]

    def test_status_round_trips(self, client, trained):
        body = client.get(f"/sessions/{trained['session_id']}").json()
        assert body == trained

    def test_estimate_equals_in_process_computation(self, client, trained, twin):
        model, basis = twin
        response = client.post(
            f"/sessions/{trained['session_id']}/estimate", json=QUERY
        )
        assert response.status_code == 200, response.text
        body = response.json()
        direct = cv.reduced_estimate(
            model,
            basis,
            (QUERY["k2"], QUERY["ebar"]),
            m_small=QUERY["m_small"],
            m_test=QUERY["m_test"],
        )
        assert body["mean"] == direct.mean
        assert body["reduced_variance"] == direct.reduced_variance
        assert body["halfwidth_95"] == direct.interval.halfwidth
        assert body["bias_halfwidth"] == float(direct.bias_halfwidths.sum())
        assert body["total_halfwidth"] == direct.total_halfwidth
        assert body["i_used"] == direct.n_variates
        assert body["m_test"] == QUERY["m_test"]

    def test_unknown_session_is_404(self, client):
        assert client.get("/sessions/999").status_code == 404
        assert client.post("/sessions/999/estimate", json=QUERY).status_code == 404

    def test_schema_violations_are_422(self, client):
        bad = [
            ("/breakeven", dict(c=-1, m=1, m_test=1, m_small=1, m_large=1, i=0, card=1)),
            ("/toy/mmse", dict(observations=[], noise_std=0.5, prior_mean=0, prior_std=1)),
            ("/kl/spectrum", dict(refinement=12)),
            ("/sessions/train", dict(refinement=9)),
        ]
        for path, body in bad:
            assert client.post(path, json=body).status_code == 422, path

    def test_underdetermined_fit_is_400(self, client, trained):
        response = client.post(
            f"/sessions/{trained['session_id']}/estimate",
            json=dict(k2=1.7, ebar=0.4, m_small=1, m_test=10),
        )
        assert response.status_code == 400
        assert "m_small" in response.json()["detail"]
