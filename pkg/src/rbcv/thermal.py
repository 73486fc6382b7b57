"""The assembled fin problem: mesh, field spectrum, operator, surrogate.

build_fin_problem wires the pipeline end to end (mesh -> covariance spectrum
-> truncation -> affine assembly -> greedy-trained reduced space) and
FinOutputModel exposes the resulting parametrized outputs s(lambda) or
o(lambda), lambda = (k2, Ebar), as a ParametrizedModel: realization m of the
Robin field is a pure function of (seed, m) shared across parameter points,
which is what makes sampled outputs usable as control variates.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dataclass_field

import numpy as np

from . import cv, fem, kl, rb, rng
from .errors import ConfigurationError

TRAIN_GRID = 10
TRAIN_COARSE_GRID = 5
TRAIN_CORNERS_PER_POINT = 2


def parameter_grid(
    k2_range: tuple[float, float],
    ebar_range: tuple[float, float],
    n_k2: int,
    n_ebar: int,
) -> list[tuple[float, float]]:
    """Cartesian (k2, Ebar) grid, k2 log-spaced over its decades."""
    k2s = np.geomspace(k2_range[0], k2_range[1], n_k2)
    ebars = np.linspace(ebar_range[0], ebar_range[1], n_ebar)
    return [(float(k2), float(e)) for k2 in k2s for e in ebars]


def make_training_set(
    op: fem.AffineOperator,
    scales: np.ndarray,
    seed: int,
    k2_range: tuple[float, float] = (0.1, 10.0),
    ebar_range: tuple[float, float] = (0.1, 1.0),
    train_modes: int | None = None,
) -> list[fem.FinParameters]:
    """Trial parameters for the greedy: nominal grid plus field excursions.

    The nominal 10x10 (k2, Ebar) grid carries zero field amplitudes. On a
    coarse 5x5 subgrid, every trainable field direction is pushed one at a
    time to z = +-sqrt(3) (the extreme of the amplitude range), and a few
    random corner sign patterns are added per coarse point, skipping patterns
    that violate the coercivity floor. train_modes limits the excursions to
    the leading directions (the tail stays at zero), which keeps the trial
    set small when the spectrum needs many modes.
    """
    k = len(scales) if train_modes is None else min(train_modes, len(scales))
    points = [
        fem.FinParameters(k2=k2, e_bar=e)
        for k2, e in parameter_grid(k2_range, ebar_range, TRAIN_GRID, TRAIN_GRID)
    ]
    coarse = parameter_grid(k2_range, ebar_range, TRAIN_COARSE_GRID, TRAIN_COARSE_GRID)
    full = np.sqrt(3.0)
    for which, (k2, e) in enumerate(coarse):
        for mode in range(k):
            for sign in (full, -full):
                y = np.zeros(len(scales))
                y[mode] = sign * scales[mode]
                points.append(fem.FinParameters(k2=k2, e_bar=e, y=y))
        stream = rng.RandomStream(seed, stream_id=which)
        found, attempt = 0, 0
        while found < TRAIN_CORNERS_PER_POINT and attempt < 100:
            u = stream.advanced(attempt * k).uniforms(k)
            attempt += 1
            z = np.where(u < 0.5, -full, full)
            y = np.zeros(len(scales))
            y[:k] = scales[:k] * z
            candidate = fem.FinParameters(k2=k2, e_bar=e, y=y)
            if op.field_factor(candidate).min() >= fem.MIN_FIELD_FACTOR:
                points.append(candidate)
                found += 1
    return points


@dataclass
class FinProblem:
    """Everything needed to evaluate the stochastic fin outputs at scale."""

    mesh: fem.Mesh
    kl_basis: kl.KLBasis
    k_trunc: int
    upsilon: float
    delta: float
    op: fem.AffineOperator
    space: rb.RBSpace
    scales: np.ndarray

    @property
    def rb_dimension(self) -> int:
        return self.space.n


def build_fin_problem(
    refinement: int = 6,
    delta: float = 0.5,
    upsilon: float = 0.1,
    kl_tol: float = 1e-2,
    rb_tol: float = 1e-2,
    rb_n_max: int = 30,
    train_seed: int = 2_000_000,
    train_modes: int | None = None,
    k2_range: tuple[float, float] = (0.1, 10.0),
    ebar_range: tuple[float, float] = (0.1, 1.0),
) -> FinProblem:
    """Mesh, truncated spectrum, affine operator, and trained reduced space."""
    mesh = fem.generate_fin_mesh(refinement)
    basis = kl.build_kl(mesh, delta)
    k_trunc = kl.truncate(basis, kl_tol)
    op = fem.assemble(mesh, basis, n_modes=k_trunc)
    scales = kl.amplitude_weights(basis, k_trunc, upsilon)
    training = make_training_set(
        op, scales, seed=train_seed, k2_range=k2_range, ebar_range=ebar_range,
        train_modes=train_modes,
    )
    space = rb.rb_greedy(op, training, tol=rb_tol, n_max=rb_n_max, solve_full_fn=fem.solve_full)
    return FinProblem(
        mesh=mesh,
        kl_basis=basis,
        k_trunc=k_trunc,
        upsilon=upsilon,
        delta=delta,
        op=op,
        space=space,
        scales=scales,
    )


@dataclass
class FinOutputModel(cv.ParametrizedModel):
    """Parametrized fin output as a control-variate-ready random family.

    point = (k2, Ebar); realization m draws the field amplitudes from
    RandomStream(seed, m) independently of the point, evaluates the reduced
    (or, with full_order, the full P1) model, and returns output s or o.
    With certify on, every reduced query also evaluates the a posteriori
    bound and the largest one seen is kept in max_error_bound.
    """

    problem: FinProblem = None
    seed: int = 0
    output: str = "s"
    certify: bool = False
    full_order: bool = False
    max_error_bound: float = 0.0
    _amplitude_cache: dict = dataclass_field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.problem is None:
            raise ConfigurationError("FinOutputModel needs a built FinProblem")
        if self.output not in ("s", "o"):
            raise ConfigurationError(f"output must be 's' or 'o', got {self.output!r}")

    def amplitudes(self, indices: np.ndarray) -> np.ndarray:
        key = (indices[0].item(), indices[-1].item(), len(indices)) if len(indices) else ()
        cached = self._amplitude_cache.get(key)
        if cached is not None and np.array_equal(cached[0], indices):
            return cached[1]
        amps = kl.sample_amplitudes(
            self.problem.kl_basis,
            self.problem.k_trunc,
            self.problem.upsilon,
            seed=self.seed,
            indices=indices,
        )
        if len(self._amplitude_cache) >= 8:
            # oldest-first eviction; tolerate a concurrent evictor having won
            self._amplitude_cache.pop(next(iter(self._amplitude_cache), None), None)
        self._amplitude_cache[key] = (np.array(indices), amps)
        return amps

    def realize_block(self, point, indices: np.ndarray) -> np.ndarray:
        indices = np.asarray(indices)
        k2, e_bar = float(point[0]), float(point[1])
        amps = self.amplitudes(indices)
        if self.full_order:
            outs = np.empty(len(indices))
            for j in range(len(indices)):
                params = fem.FinParameters(k2=k2, e_bar=e_bar, y=amps[j])
                u = fem.solve_full(self.op_for_full(), params)
                out = fem.outputs(self.op_for_full(), u)
                outs[j] = out.s if self.output == "s" else out.o
            return outs
        space = self.problem.space
        q = space.n_components
        thetas = np.zeros((len(indices), q))
        thetas[:, 0] = 1.0
        thetas[:, 1] = k2
        thetas[:, 2] = e_bar
        thetas[:, 3 : 3 + amps.shape[1]] = e_bar * amps
        gammas = rb.batch_solve(space, thetas)
        if self.certify:
            alphas = np.full(len(indices), min(1.0, k2, e_bar / 2.0))
            bounds = rb.batch_error_bounds(space, thetas, gammas, alphas)
            self.max_error_bound = max(self.max_error_bound, float(bounds.max()))
        vector = space.reduced_load if self.output == "s" else space.reduced_output
        return gammas @ vector

    def op_for_full(self) -> fem.AffineOperator:
        return self.problem.op
