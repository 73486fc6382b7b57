"""Request and response bodies for the HTTP service."""

from __future__ import annotations

from pydantic import BaseModel, Field


class HealthResponse(BaseModel):
    status: str
    version: str


class BreakevenRequest(BaseModel):
    c: float = Field(gt=0, description="cost of one realization in multiply units")
    m: int = Field(ge=1, description="naive MC sample size at equal accuracy")
    m_test: int = Field(ge=1)
    m_small: int = Field(ge=0)
    m_large: int = Field(ge=1)
    i: int = Field(ge=0, description="number of control variates")
    card: int = Field(ge=1, description="training-set cardinality")


class BreakevenResponse(BaseModel):
    naive_cost_per_query: float
    cv_cost_per_query: float
    greedy_cost: float
    per_query_gain: float
    min_queries: int | None


class ToyMmseRequest(BaseModel):
    observations: list[float] = Field(min_length=1)
    noise_std: float = Field(gt=0)
    prior_mean: float
    prior_std: float = Field(gt=0)
    seed: int = 0
    m: int = Field(10_000, ge=2, le=1_000_000)


class ToyMmseResponse(BaseModel):
    analytic_mmse: float
    analytic_post_var: float
    mc_mmse: float
    clt_halfwidth_95: float


class KlSpectrumRequest(BaseModel):
    refinement: int = Field(5, ge=1, le=8)
    delta: float = Field(0.5, gt=0)
    tol: float = Field(1e-2, gt=0, lt=1)


class KlSpectrumResponse(BaseModel):
    eigenvalues: list[float]
    k_trunc: int


class TrainRequest(BaseModel):
    seed: int = 0
    refinement: int = Field(5, ge=1, le=7)
    delta: float = Field(0.5, gt=0)
    upsilon: float = Field(0.1, ge=0)
    kl_tol: float = Field(1e-2, gt=0, lt=1)
    rb_tol: float = Field(1e-2, gt=0)
    n_k2: int = Field(5, ge=1, le=10)
    n_ebar: int = Field(5, ge=1, le=10)
    variance_tol: float = Field(1e-5, gt=0)
    i_max: int = Field(8, ge=1, le=16)
    m_large: int = Field(2000, ge=2, le=200_000)
    m_small: int = Field(10, ge=1)
    m_test: int = Field(10, ge=2)


class TraceEntry(BaseModel):
    n_variates: int
    sigma: float
    anchor: tuple[float, float] | None


class SessionResponse(BaseModel):
    session_id: str
    k_trunc: int
    rb_dimension: int
    rb_tol_met: bool
    n_variates: int
    cv_tol_met: bool
    trace: list[TraceEntry]


class EstimateRequest(BaseModel):
    k2: float = Field(gt=0)
    ebar: float = Field(gt=0)
    m_small: int = Field(10, ge=1)
    m_test: int = Field(100, ge=2, le=100_000)


class EstimateResponse(BaseModel):
    k2: float
    ebar: float
    mean: float
    reduced_variance: float
    halfwidth_95: float
    bias_halfwidth: float
    total_halfwidth: float
    i_used: int
    m_test: int
