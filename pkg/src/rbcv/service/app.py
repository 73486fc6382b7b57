"""FastAPI wrapper around the core estimators.

Sessions hold a trained fin problem plus its variate basis in process
memory; training is synchronous (desk-scale sizes are capped by the
request schema), after which estimates at new parameter points are
online-cost queries.
"""

from __future__ import annotations

import itertools
import math
import threading
from dataclasses import dataclass

import numpy as np
from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import JSONResponse

from .. import __version__, bayes, cv, fem, kl, rng, thermal
from ..errors import (
    ConfigurationError,
    DegenerateLikelihoodError,
    InsufficientSamplesError,
    InvalidParameterError,
    NumericalDefectError,
)
from . import schemas


@dataclass
class Session:
    problem: thermal.FinProblem
    model: thermal.FinOutputModel
    basis: cv.VariateBasis


class SessionStore:
    def __init__(self):
        self._lock = threading.Lock()
        self._ids = itertools.count(1)
        self._sessions: dict[str, Session] = {}

    def add(self, session: Session) -> str:
        with self._lock:
            session_id = str(next(self._ids))
            self._sessions[session_id] = session
        return session_id

    def get(self, session_id: str) -> Session:
        session = self._sessions.get(session_id)
        if session is None:
            raise HTTPException(status_code=404, detail=f"unknown session {session_id!r}")
        return session


def _session_response(session_id: str, session: Session) -> schemas.SessionResponse:
    return schemas.SessionResponse(
        session_id=session_id,
        k_trunc=session.problem.k_trunc,
        rb_dimension=session.problem.space.n,
        rb_tol_met=session.problem.space.tol_met,
        n_variates=len(session.basis),
        cv_tol_met=session.basis.tol_met,
        trace=[
            schemas.TraceEntry(
                n_variates=rec.n_variates,
                sigma=rec.sigma,
                anchor=None if rec.anchor is None else (rec.anchor[0], rec.anchor[1]),
            )
            for rec in session.basis.trace
        ],
    )


def create_app() -> FastAPI:
    app = FastAPI(title="rbcv", version=__version__)
    store = SessionStore()

    @app.exception_handler(ConfigurationError)
    @app.exception_handler(InvalidParameterError)
    @app.exception_handler(InsufficientSamplesError)
    async def _bad_request(request: Request, exc: Exception) -> JSONResponse:
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    @app.exception_handler(NumericalDefectError)
    @app.exception_handler(DegenerateLikelihoodError)
    async def _defect(request: Request, exc: Exception) -> JSONResponse:
        return JSONResponse(status_code=409, content={"detail": str(exc)})

    @app.get("/health", response_model=schemas.HealthResponse)
    def health() -> schemas.HealthResponse:
        return schemas.HealthResponse(status="ok", version=__version__)

    @app.post("/breakeven", response_model=schemas.BreakevenResponse)
    def breakeven(body: schemas.BreakevenRequest) -> schemas.BreakevenResponse:
        report = cv.breakeven_report(cv.BreakevenInputs(**body.model_dump()))
        return schemas.BreakevenResponse(**report.__dict__)

    @app.post("/toy/mmse", response_model=schemas.ToyMmseResponse)
    def toy_mmse(body: schemas.ToyMmseRequest) -> schemas.ToyMmseResponse:
        model = bayes.GaussianToyModel(
            theta0=0.0,
            noise_std=body.noise_std,
            prior_mean=body.prior_mean,
            prior_std=body.prior_std,
            observations=np.asarray(body.observations, dtype=float),
        )
        post = bayes.analytic_mmse(model)
        estimate = bayes.mc_mmse_toy(model, seed=body.seed, m=body.m)
        halfwidth = rng.normal_quantile(0.95) * math.sqrt(post.post_var / body.m)
        return schemas.ToyMmseResponse(
            analytic_mmse=post.mmse,
            analytic_post_var=post.post_var,
            mc_mmse=estimate,
            clt_halfwidth_95=halfwidth,
        )

    @app.post("/kl/spectrum", response_model=schemas.KlSpectrumResponse)
    def kl_spectrum(body: schemas.KlSpectrumRequest) -> schemas.KlSpectrumResponse:
        mesh = fem.generate_fin_mesh(body.refinement)
        basis = kl.build_kl(mesh, body.delta)
        return schemas.KlSpectrumResponse(
            eigenvalues=[float(v) for v in basis.eigenvalues],
            k_trunc=kl.truncate(basis, body.tol),
        )

    @app.post("/sessions/train", response_model=schemas.SessionResponse)
    def train(body: schemas.TrainRequest) -> schemas.SessionResponse:
        problem = thermal.build_fin_problem(
            refinement=body.refinement,
            delta=body.delta,
            upsilon=body.upsilon,
            kl_tol=body.kl_tol,
            rb_tol=body.rb_tol,
        )
        model = thermal.FinOutputModel(problem=problem, seed=body.seed)
        grid = thermal.parameter_grid((0.1, 10.0), (0.1, 1.0), body.n_k2, body.n_ebar)
        basis = cv.weak_greedy(
            model,
            grid,
            cv.WeakGreedyConfig(
                tol=body.variance_tol,
                i_max=body.i_max,
                m_large=body.m_large,
                m_small=body.m_small,
                m_test=body.m_test,
            ),
        )
        session = Session(problem=problem, model=model, basis=basis)
        return _session_response(store.add(session), session)

    @app.get("/sessions/{session_id}", response_model=schemas.SessionResponse)
    def session_status(session_id: str) -> schemas.SessionResponse:
        return _session_response(session_id, store.get(session_id))

    @app.post("/sessions/{session_id}/estimate", response_model=schemas.EstimateResponse)
    def estimate(session_id: str, body: schemas.EstimateRequest) -> schemas.EstimateResponse:
        session = store.get(session_id)
        result = cv.reduced_estimate(
            session.model,
            session.basis,
            (body.k2, body.ebar),
            m_small=body.m_small,
            m_test=body.m_test,
        )
        return schemas.EstimateResponse(
            k2=body.k2,
            ebar=body.ebar,
            mean=result.mean,
            reduced_variance=result.reduced_variance,
            halfwidth_95=result.interval.halfwidth,
            bias_halfwidth=float(result.bias_halfwidths.sum()),
            total_halfwidth=result.total_halfwidth,
            i_used=result.n_variates,
            m_test=result.m_test,
        )

    return app
