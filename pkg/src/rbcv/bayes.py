"""Bayesian MMSE estimation on top of the control-variate machinery.

Two settings share the toolkit. The conjugate Gaussian toy model has a
closed-form posterior, so its MC estimator samples the posterior directly
and the analytic answer doubles as an oracle. The PDE setting infers the
field amplitudes behind observed top temperatures o_j: the prior over the
KL coordinates is an i.i.d. Gaussian truncated by the same field-coercivity
rejection as the forward sampler, the likelihood is a Gaussian kernel in
the observation mismatch, and posterior expectations of the compliance are
self-normalized weighted means. Numerator (w * s) and denominator (w) are
exposed as ParametrizedModel views over shared realizations, so the
variance of each is reduced with common random numbers and the final ratio
carries a delta-method halfwidth.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field as dataclass_field, replace
from pathlib import Path

import numpy as np
from scipy.special import ndtri

from . import cv, kl, rb, rng, thermal
from .errors import ConfigurationError, DegenerateLikelihoodError, InvalidParameterError

# weights jointly below this underflow floor mean the observations are
# incompatible with the sampled prior
WEIGHT_FLOOR = 1e-300


# ---------------------------------------------------------------------------
# conjugate Gaussian toy model


@dataclass(frozen=True)
class GaussianToyModel:
    """Gaussian observations of an unknown mean with a Gaussian prior.

    theta0 is the truth used to synthesize observations; the posterior
    depends only on (noise_std, prior, observations).
    """

    theta0: float
    noise_std: float
    prior_mean: float
    prior_std: float
    observations: np.ndarray

    @property
    def j(self) -> int:
        return len(self.observations)


@dataclass(frozen=True)
class ToyPosterior:
    mmse: float
    post_var: float


def analytic_mmse(model: GaussianToyModel) -> ToyPosterior:
    """Closed-form posterior mean and variance of the conjugate pair.

    The posterior mean shrinks the sample mean toward the prior mean by
    sigma^2 / (sigma^2 + lambda^2 / J); the posterior variance is the
    parallel combination (sigma^2 * lambda^2/J) / (sigma^2 + lambda^2/J).
    """
    if model.j < 1:
        raise InvalidParameterError("need at least one observation")
    if model.noise_std <= 0 or model.prior_std <= 0:
        raise InvalidParameterError(
            f"noise_std and prior_std must be positive, got "
            f"{model.noise_std}, {model.prior_std}"
        )
    lam2_j = model.noise_std**2 / model.j
    s2 = model.prior_std**2
    shrink = s2 / (s2 + lam2_j)
    mean = shrink * float(np.mean(model.observations)) + (1.0 - shrink) * model.prior_mean
    return ToyPosterior(mmse=mean, post_var=s2 * lam2_j / (s2 + lam2_j))


def toy_observations(
    theta0: float, noise_std: float, count: int, stream: rng.RandomStream
) -> np.ndarray:
    """count i.i.d. draws from Normal(theta0, noise_std^2)."""
    if count < 1:
        raise InvalidParameterError(f"count must be >= 1, got {count}")
    return theta0 + noise_std * rng.standard_normal(stream, count)


def _posterior_draws(model: GaussianToyModel, seed: int, indices: np.ndarray) -> np.ndarray:
    """One posterior draw per stream index, common across parameter values."""
    post = analytic_mmse(model)
    z = ndtri(rng.uniform01_streams(seed, np.asarray(indices), np.arange(1)))[:, 0]
    return post.mmse + math.sqrt(post.post_var) * z


def mc_mmse_toy(model: GaussianToyModel, seed: int, m: int) -> float:
    """Plain MC average of m posterior draws (streams 0..m-1)."""
    if m < 2:
        raise InvalidParameterError(f"m must be >= 2, got {m}")
    return float(_posterior_draws(model, seed, np.arange(m)).mean())


@dataclass
class ToyPosteriorModel(cv.ParametrizedModel):
    """Posterior-draw family over points (noise_std, prior_mean, prior_std, set_id).

    Realization m is the posterior draw driven by the standard normal of
    stream m, shared across all points, so the family is perfectly
    correlated and control variates transfer across hyperparameters,
    control parameter, and observation sets alike.
    """

    observation_sets: dict
    theta0: float = 1.0
    seed: int = 0

    def realize_block(self, point, indices: np.ndarray) -> np.ndarray:
        lam, mu, sigma, set_id = point
        model = GaussianToyModel(
            theta0=self.theta0,
            noise_std=float(lam),
            prior_mean=float(mu),
            prior_std=float(sigma),
            observations=self.observation_sets[set_id],
        )
        return _posterior_draws(model, self.seed, np.asarray(indices))


# ---------------------------------------------------------------------------
# PDE posterior over the field amplitudes


@dataclass(frozen=True)
class ObservationSet:
    """Synthetic observations of o at a control parameter lambda0."""

    values: np.ndarray
    lambda0: tuple[float, float]


@dataclass(frozen=True)
class PdePosterior:
    """Gaussian-kernel posterior over the KL coordinates at one lambda."""

    prior_variances: np.ndarray
    zeta: float
    observations: np.ndarray
    lam: tuple[float, float]


@dataclass(frozen=True)
class PosteriorExpectation:
    numerator: float
    denominator: float
    ratio: float
    ess: float
    halfwidth: float
    posterior_variance: float
    m: int


def synthetic_observations(
    problem: thermal.FinProblem,
    lambda0: tuple[float, float],
    count: int,
    seed: int,
    full_order: bool = False,
) -> ObservationSet:
    """count independent forward realizations of the top temperature o."""
    if count < 1:
        raise InvalidParameterError(f"count must be >= 1, got {count}")
    model = thermal.FinOutputModel(
        problem=problem, seed=seed, output="o", full_order=full_order
    )
    values = model.realize_block(lambda0, np.arange(count))
    return ObservationSet(values=values, lambda0=(float(lambda0[0]), float(lambda0[1])))


def log_weights(o_values: np.ndarray, observations: np.ndarray, zeta: float) -> np.ndarray:
    """log of Prod_j exp(-|o_j - o|^2 / zeta), always <= 0."""
    if zeta <= 0:
        raise InvalidParameterError(f"zeta must be positive, got {zeta}")
    mismatch = (np.asarray(observations)[None, :] - o_values[:, None]) ** 2
    return -mismatch.sum(axis=1) / zeta


def _solve_outputs(space: rb.RBSpace, k2: float, e_bar: float, amps: np.ndarray):
    thetas = np.zeros((len(amps), space.n_components))
    thetas[:, 0] = 1.0
    thetas[:, 1] = k2
    thetas[:, 2] = e_bar
    thetas[:, 3 : 3 + amps.shape[1]] = e_bar * amps
    gammas = rb.batch_solve(space, thetas)
    return gammas @ space.reduced_load, gammas @ space.reduced_output


def pde_posterior_expectation(
    post: PdePosterior,
    problem: thermal.FinProblem,
    seed: int,
    m: int,
    level: float = 0.95,
    outputs_fn=None,
) -> PosteriorExpectation:
    """Self-normalized weighted estimate of E(s | observations) at post.lam.

    Prior draws come from the truncated Gaussian over the KL coordinates
    (streams 0..m-1), both outputs are evaluated through the reduced space,
    and the ratio's halfwidth follows from the delta method with the
    numerator/denominator covariance measured on the same realizations.
    outputs_fn(amps) -> (s_values, o_values) overrides the reduced solve;
    it exists for oracle models with closed-form posteriors.
    """
    if m < 2:
        raise InvalidParameterError(f"m must be >= 2, got {m}")
    variances = np.asarray(post.prior_variances, dtype=float)
    if len(variances) != problem.k_trunc or (variances <= 0).any():
        raise InvalidParameterError(
            f"need {problem.k_trunc} positive prior variances, got {len(variances)}"
        )
    sigmas = np.sqrt(variances)
    amps = kl.sample_amplitudes(
        problem.kl_basis,
        problem.k_trunc,
        problem.upsilon,
        seed=seed,
        indices=np.arange(m),
        sigmas=sigmas,
    )
    if outputs_fn is None:
        k2, e_bar = post.lam
        s_vals, o_vals = _solve_outputs(problem.space, float(k2), float(e_bar), amps)
    else:
        s_vals, o_vals = outputs_fn(amps)
    w = np.exp(log_weights(o_vals, post.observations, post.zeta))
    if w.max() < WEIGHT_FLOOR:
        raise DegenerateLikelihoodError(
            "all posterior weights underflowed; observations sit outside "
            "the sampled prior range"
        )
    f = w * s_vals
    num, den = float(f.mean()), float(w.mean())
    ratio = num / den
    normalized = w / w.sum()
    ess = 1.0 / float((normalized**2).sum())
    post_var = max(float(normalized @ s_vals**2) - ratio**2, 0.0)
    var_f = float(np.var(f, ddof=1))
    var_w = float(np.var(w, ddof=1))
    cov = float(np.cov(f, w, ddof=1)[0, 1])
    var_ratio = (var_f - 2.0 * ratio * cov + ratio**2 * var_w) / (den**2 * m)
    halfwidth = rng.normal_quantile(level) * math.sqrt(max(var_ratio, 0.0))
    return PosteriorExpectation(
        numerator=num,
        denominator=den,
        ratio=ratio,
        ess=ess,
        halfwidth=halfwidth,
        posterior_variance=post_var,
        m=m,
    )


@dataclass
class PdePosteriorModel(cv.ParametrizedModel):
    """Weighted-output family over points (k2, Ebar, sigma2, set_id).

    output selects the numerator (w * s) or denominator (w) of the
    posterior expectation; view() returns the sibling sharing this model's
    realization cache, so each (point, block) pair is solved once. The
    prior variance sigma2 applies to every KL coordinate.
    """

    problem: thermal.FinProblem = None
    observation_sets: dict = None
    zeta: float = 1e-4
    output: str = "numerator"
    seed: int = 0
    cache_size: int = 512
    _cache: dict = dataclass_field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.problem is None or not self.observation_sets:
            raise ConfigurationError(
                "PdePosteriorModel needs a built problem and observation sets"
            )
        if self.output not in ("numerator", "denominator"):
            raise ConfigurationError(
                f"output must be 'numerator' or 'denominator', got {self.output!r}"
            )

    def view(self, output: str) -> "PdePosteriorModel":
        sibling = replace(self, output=output)
        sibling._cache = self._cache
        return sibling

    def _weighted(self, point, indices: np.ndarray):
        k2, e_bar, sigma2, set_id = point
        key = (
            float(k2),
            float(e_bar),
            float(sigma2),
            set_id,
            int(indices[0]),
            int(indices[-1]),
            len(indices),
        )
        hit = self._cache.get(key)
        if hit is not None and np.array_equal(hit[0], indices):
            return hit[1], hit[2]
        if sigma2 <= 0:
            raise InvalidParameterError(f"prior variance must be positive, got {sigma2}")
        sigmas = np.full(self.problem.k_trunc, math.sqrt(float(sigma2)))
        amps = kl.sample_amplitudes(
            self.problem.kl_basis,
            self.problem.k_trunc,
            self.problem.upsilon,
            seed=self.seed,
            indices=indices,
            sigmas=sigmas,
        )
        s_vals, o_vals = _solve_outputs(
            self.problem.space, float(k2), float(e_bar), amps
        )
        obs = self.observation_sets[set_id]
        values = obs.values if isinstance(obs, ObservationSet) else obs
        w = np.exp(log_weights(o_vals, values, self.zeta))
        if w.max() < WEIGHT_FLOOR:
            raise DegenerateLikelihoodError(
                f"all {len(w)} likelihood weights underflow at point {point}; "
                "observations are incompatible with the prior support"
            )
        if len(self._cache) >= self.cache_size:
            # oldest-first eviction; tolerate a concurrent evictor having won
            self._cache.pop(next(iter(self._cache), None), None)
        self._cache[key] = (np.array(indices), w, s_vals)
        return w, s_vals

    def realize_block(self, point, indices: np.ndarray) -> np.ndarray:
        indices = np.asarray(indices)
        w, s_vals = self._weighted(point, indices)
        return w * s_vals if self.output == "numerator" else w.copy()


def ratio_of_estimates(
    numerator: cv.ReducedEstimate,
    denominator: cv.ReducedEstimate,
    covariance: float = 0.0,
    level: float = 0.95,
) -> tuple[float, float]:
    """(ratio, halfwidth) of two reduced estimates by the delta method.

    covariance is the per-realization covariance of the two reduced
    variables (0 treats them as uncorrelated, which is not conservative;
    pass the measured value when the realizations are shared).
    """
    if denominator.mean == 0.0:
        raise DegenerateLikelihoodError("denominator estimate is exactly zero")
    ratio = numerator.mean / denominator.mean
    m = denominator.m_test
    var = (
        numerator.reduced_variance
        - 2.0 * ratio * covariance
        + ratio**2 * denominator.reduced_variance
    ) / (denominator.mean**2 * m)
    return ratio, rng.normal_quantile(level) * math.sqrt(max(var, 0.0))


# ---------------------------------------------------------------------------
# kernel density of an output sample


@dataclass(frozen=True)
class KernelPdf:
    """Windowed Gaussian kernel sum over a sample of output values."""

    samples: np.ndarray
    bandwidth: float
    window: float


def kernel_pdf_eval(pdf: KernelPdf, s: float) -> float:
    """Sum_m 1_{|s - s_m| < window} exp(-|s - s_m|^2 / (2 bandwidth^2))."""
    if pdf.bandwidth <= 0 or pdf.window <= 0:
        raise InvalidParameterError(
            f"bandwidth and window must be positive, got "
            f"{pdf.bandwidth}, {pdf.window}"
        )
    d = np.asarray(pdf.samples, dtype=float) - float(s)
    inside = np.abs(d) < pdf.window
    if not inside.any():
        return 0.0
    return float(np.exp(-(d[inside] ** 2) / (2.0 * pdf.bandwidth**2)).sum())


# ---------------------------------------------------------------------------
# observation-set CSV round trip


def write_observation_sets(path: str | Path, sets: dict) -> Path:
    """CSV rows (set_id, j, value, lambda0_k2, lambda0_Ebar), repr floats."""
    path = Path(path)
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["set_id", "j", "value", "lambda0_k2", "lambda0_Ebar"])
        for set_id in sorted(sets):
            obs = sets[set_id]
            for j, value in enumerate(obs.values):
                writer.writerow(
                    [set_id, j, repr(float(value)), repr(obs.lambda0[0]), repr(obs.lambda0[1])]
                )
    return path


def read_observation_sets(path: str | Path) -> dict:
    path = Path(path)
    grouped: dict[int, list] = {}
    lambdas: dict[int, tuple[float, float]] = {}
    with path.open(newline="") as handle:
        lines = (line for line in handle if not line.startswith("#"))
        for row in csv.DictReader(lines):
            set_id = int(row["set_id"])
            grouped.setdefault(set_id, []).append((int(row["j"]), float(row["value"])))
            lambdas[set_id] = (float(row["lambda0_k2"]), float(row["lambda0_Ebar"]))
    return {
        set_id: ObservationSet(
            values=np.array([v for _, v in sorted(rows)]), lambda0=lambdas[set_id]
        )
        for set_id, rows in grouped.items()
    }
