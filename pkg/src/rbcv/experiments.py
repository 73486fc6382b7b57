"""Experiment drivers that write CSV artifacts for the command-line tool.

Every runner takes a validated ExperimentConfig, an output directory, and a
worker count, and returns the written files plus a tolerance flag. All CSVs
start with a manifest comment (seed, config hash, versions) followed by a
header row; floats are written with repr so reruns are byte-identical. The
worker count only swaps the builtin map for a thread-pool map over
independent points and never changes any output byte.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import scipy
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from . import __version__, bayes, cv, fem, kl, rb, rng, thermal
from .errors import ConfigurationError

ADMISSIBLE_K2 = (0.1, 10.0)
ADMISSIBLE_EBAR = (0.1, 1.0)

HOLDOUT_STREAM_ID = 1 << 20
TOY_OBS_STREAM_BASE = 1 << 21
PDE_OBS_SEED_OFFSET = 9_000_000


class ExperimentConfig(BaseModel):
    """Flat JSON-backed configuration shared by every command."""

    model_config = ConfigDict(extra="forbid")

    seed: int = 0
    refinement: int = Field(6, ge=1, le=9)
    delta: float = Field(0.5, gt=0)
    upsilon: float = Field(0.1, ge=0)
    kl_tol: float = Field(1e-2, gt=0, lt=1)
    rb_tol: float = Field(1e-2, gt=0)
    rb_n_max: int = Field(30, ge=1)
    train_modes: int | None = Field(None, ge=1)

    k2_min: float = 0.1
    k2_max: float = 10.0
    ebar_min: float = 0.1
    ebar_max: float = 1.0
    n_k2: int = Field(10, ge=1)
    n_ebar: int = Field(10, ge=1)

    variance_tol: float = Field(1e-5, gt=0)
    i_max: int = Field(8, ge=1)
    m_large: int = Field(10_000, ge=2)
    m_small: int = Field(10, ge=1)
    m_test: int = Field(10, ge=2)
    m_test_final: int = Field(100, ge=2)

    holdout_count: int = Field(100, ge=1)

    toy_theta0: float = 1.0
    toy_noise: float = Field(0.5, gt=0)
    toy_j: int = Field(10, ge=1)
    toy_n_sets: int = Field(5, ge=1)
    toy_mu_range: tuple[float, float] = (0.5, 1.5)
    toy_sigma_range: tuple[float, float] = (0.1, 0.9)
    toy_lambda_range: tuple[float, float] = (0.1, 0.9)
    toy_grid: int = Field(5, ge=1)
    toy_variance_rtol: float = Field(1e-8, gt=0, lt=1)
    toy_i_max: int = Field(10, ge=1)

    pde_lambda0: tuple[float, float] = (2.0, 0.5)
    pde_j_case1: int = Field(1, ge=1)
    pde_j_case2: int = Field(3, ge=1)
    pde_n_sets_case2: int = Field(10, ge=1)
    pde_zeta_case1: float = Field(0.1, gt=0)
    pde_zeta_case2: float = Field(1.0, gt=0)
    pde_sigma2_values: tuple[float, ...] = (1e-4, 1e-3)
    pde_sigma2_case2: float = Field(5e-4, gt=0)
    pde_grid_case1: int = Field(4, ge=1)
    pde_grid_case2: int = Field(6, ge=1)
    pde_i_max: int = Field(6, ge=1)
    pde_variance_rtol: float = Field(1e-4, gt=0, lt=1)

    breakeven_cost: float = Field(100.0, gt=0)

    def checks(self) -> "ExperimentConfig":
        lo_k2, hi_k2 = ADMISSIBLE_K2
        lo_e, hi_e = ADMISSIBLE_EBAR
        bounds = {
            "k2_min/k2_max": (self.k2_min, self.k2_max, lo_k2, hi_k2),
            "ebar_min/ebar_max": (self.ebar_min, self.ebar_max, lo_e, hi_e),
        }
        for name, (low, high, lo, hi) in bounds.items():
            if not lo <= low < high <= hi:
                raise ConfigurationError(
                    f"{name} must satisfy {lo} <= min < max <= {hi}, "
                    f"got ({low}, {high})"
                )
        for name, (low, high) in {
            "toy_mu_range": self.toy_mu_range,
            "toy_sigma_range": self.toy_sigma_range,
            "toy_lambda_range": self.toy_lambda_range,
        }.items():
            if not 0 < low < high:
                raise ConfigurationError(
                    f"{name} must be increasing and positive, got ({low}, {high})"
                )
        if not (lo_k2 <= self.pde_lambda0[0] <= hi_k2 and lo_e <= self.pde_lambda0[1] <= hi_e):
            raise ConfigurationError(
                f"pde_lambda0 {self.pde_lambda0} outside the admissible domain "
                f"{ADMISSIBLE_K2} x {ADMISSIBLE_EBAR}"
            )
        if any(v <= 0 for v in self.pde_sigma2_values) or not self.pde_sigma2_values:
            raise ConfigurationError(
                f"pde_sigma2_values must be positive, got {self.pde_sigma2_values}"
            )
        return self


def _key_line(text: str, key: str) -> int | None:
    for lineno, line in enumerate(text.splitlines(), 1):
        if f'"{key}"' in line:
            return lineno
    return None


def load_config(path: str | Path | None, overrides: dict | None = None) -> ExperimentConfig:
    """Parse and validate a flat JSON config; errors name the file line."""
    text = ""
    if path is None:
        data: dict = {}
        where = "<defaults>"
    else:
        where = str(path)
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigurationError(f"{where}: {exc.strerror or exc}") from exc
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(
                f"{where}:{exc.lineno}:{exc.colno}: {exc.msg}"
            ) from exc
        if not isinstance(data, dict):
            raise ConfigurationError(f"{where}:1:1: top level must be a JSON object")
    if overrides:
        data = {**data, **overrides}
    try:
        config = ExperimentConfig(**data)
    except ValidationError as exc:
        first = exc.errors()[0]
        key = ".".join(str(loc) for loc in first["loc"]) or "<root>"
        line = _key_line(text, str(first["loc"][0])) if first["loc"] else None
        at = f"{where}:{line}" if line else where
        raise ConfigurationError(f"{at}: key '{key}': {first['msg']}") from exc
    try:
        return config.checks()
    except ConfigurationError as exc:
        raise ConfigurationError(f"{where}: {exc}") from exc


def config_sha(config: ExperimentConfig) -> str:
    canonical = json.dumps(config.model_dump(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


@dataclass(frozen=True)
class RunResult:
    files: list[Path]
    tol_met: bool = True


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return str(value)


def _write_csv(
    path: Path, config: ExperimentConfig, header: Sequence[str], rows
) -> Path:
    manifest = (
        f"# manifest: seed={config.seed} config_sha256={config_sha(config)} "
        f"version={__version__} numpy={np.__version__} scipy={scipy.__version__}"
    )
    with path.open("w", newline="") as handle:
        handle.write(manifest + "\n")
        writer = csv.writer(handle)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])
    return path


def _write_config_echo(out: Path, config: ExperimentConfig) -> Path:
    path = out / "config.json"
    path.write_text(json.dumps(config.model_dump(), indent=2, sort_keys=True) + "\n")
    return path


def _pool_map(workers: int):
    """(mapper, closer) pair; the mapper preserves input order."""
    if workers <= 1:
        return map, lambda: None
    pool = ThreadPoolExecutor(max_workers=workers)
    return pool.map, pool.shutdown


def _lambda_grid(config: ExperimentConfig, n_k2: int | None = None, n_ebar: int | None = None):
    return thermal.parameter_grid(
        (config.k2_min, config.k2_max),
        (config.ebar_min, config.ebar_max),
        config.n_k2 if n_k2 is None else n_k2,
        config.n_ebar if n_ebar is None else n_ebar,
    )


def _relative_variance_tol(
    model: cv.ParametrizedModel, points: Sequence, config: ExperimentConfig, mapper, rtol: float
) -> float:
    """rtol times the largest zero-variate sweep variance over the points."""

    def plain_variance(point):
        return cv.reduced_estimate(
            model, [], point, m_small=config.m_small, m_test=config.m_test
        ).reduced_variance

    return rtol * max(mapper(plain_variance, points))


def _build_problem(config: ExperimentConfig) -> thermal.FinProblem:
    return thermal.build_fin_problem(
        refinement=config.refinement,
        delta=config.delta,
        upsilon=config.upsilon,
        kl_tol=config.kl_tol,
        rb_tol=config.rb_tol,
        rb_n_max=config.rb_n_max,
        train_modes=config.train_modes,
        k2_range=(config.k2_min, config.k2_max),
        ebar_range=(config.ebar_min, config.ebar_max),
    )


# ---------------------------------------------------------------------------
# kl-spectrum


def run_kl_spectrum(config: ExperimentConfig, out: Path, workers: int = 1) -> RunResult:
    out.mkdir(parents=True, exist_ok=True)
    mesh = fem.generate_fin_mesh(config.refinement)
    basis = kl.build_kl(mesh, config.delta)
    k_trunc = kl.truncate(basis, config.kl_tol)
    roots = np.sqrt(basis.eigenvalues)
    tails = 1.0 - np.cumsum(roots) / roots.sum()
    rows = [
        [k + 1, basis.eigenvalues[k], tails[k], int(k < k_trunc)]
        for k in range(basis.n_modes)
    ]
    files = [
        _write_csv(
            out / "kl_spectrum.csv",
            config,
            ["mode", "eigenvalue", "sqrt_tail_fraction", "selected"],
            rows,
        ),
        _write_config_echo(out, config),
    ]
    return RunResult(files=files)


# ---------------------------------------------------------------------------
# rb-train


def _rb_trace_rows(space: rb.RBSpace):
    rows = []
    for n, (params, bound) in enumerate(space.trace or [], 1):
        excursion = float(np.max(np.abs(params.y))) if len(params.y) else 0.0
        rows.append([n, params.k2, params.e_bar, excursion, bound])
    return rows


def run_rb_train(config: ExperimentConfig, out: Path, workers: int = 1) -> RunResult:
    out.mkdir(parents=True, exist_ok=True)
    problem = _build_problem(config)
    rb.save_rb(problem.space, out / "rb_space")
    files = [
        _write_csv(
            out / "rb_trace.csv",
            config,
            ["n", "snapshot_k2", "snapshot_Ebar", "snapshot_field_excursion", "max_error_bound"],
            _rb_trace_rows(problem.space),
        ),
        _write_config_echo(out, config),
        out / "rb_space",
    ]
    return RunResult(files=files, tol_met=problem.space.tol_met)


# ---------------------------------------------------------------------------
# propagate


def _estimate_rows(
    model: cv.ParametrizedModel,
    basis,
    points: Sequence,
    config: ExperimentConfig,
    mapper,
    point_columns: int,
):
    def one(point):
        reduced = cv.reduced_estimate(
            model, basis, point, m_small=config.m_small, m_test=config.m_test_final
        )
        plain = cv.reduced_estimate(
            model, [], point, m_small=config.m_small, m_test=config.m_test_final
        )
        ratio = (
            reduced.reduced_variance / plain.reduced_variance
            if plain.reduced_variance > 0
            else math.nan
        )
        return [
            *point[:point_columns],
            reduced.mean,
            reduced.reduced_variance,
            plain.reduced_variance,
            ratio,
            reduced.interval.halfwidth,
            float(reduced.bias_halfwidths.sum()),
            reduced.n_variates,
            reduced.m_test,
        ]

    return list(mapper(one, points))


ESTIMATE_COLUMNS = [
    "mean",
    "reduced_variance",
    "plain_variance",
    "variance_ratio",
    "halfwidth_95",
    "bias_halfwidth",
    "I_used",
    "M_test",
]


def run_propagate(config: ExperimentConfig, out: Path, workers: int = 1) -> RunResult:
    out.mkdir(parents=True, exist_ok=True)
    mapper, close = _pool_map(workers)
    try:
        problem = _build_problem(config)
        model = thermal.FinOutputModel(problem=problem, seed=config.seed)
        grid = _lambda_grid(config)
        greedy_config = cv.WeakGreedyConfig(
            tol=config.variance_tol,
            i_max=config.i_max,
            m_large=config.m_large,
            m_small=config.m_small,
            m_test=config.m_test,
        )
        basis = cv.weak_greedy(model, grid, greedy_config, map_fn=mapper)
        trace_header, trace_rows = cv.trace_table(basis, ["k2", "Ebar"])
        estimate_rows = _estimate_rows(model, basis, grid, config, mapper, 2)
        variate_rows = [
            [i, v.anchor[0], v.anchor[1], v.mean_estimate, v.mean_variance, v.m_large]
            for i, v in enumerate(basis.variates)
        ]
        rb.save_rb(problem.space, out / "rb_space")
        files = [
            _write_csv(out / "propagate_trace.csv", config, trace_header, trace_rows),
            _write_csv(
                out / "propagate_estimates.csv",
                config,
                ["k2", "Ebar", *ESTIMATE_COLUMNS],
                estimate_rows,
            ),
            _write_csv(
                out / "variates.csv",
                config,
                ["i", "anchor_k2", "anchor_Ebar", "mean_estimate", "mean_variance", "M_large"],
                variate_rows,
            ),
            _write_config_echo(out, config),
            out / "rb_space",
        ]
        return RunResult(files=files, tol_met=basis.tol_met)
    finally:
        close()


# ---------------------------------------------------------------------------
# holdout


def _load_trained(out: Path, config: ExperimentConfig):
    """Rebuild the fin problem around the persisted space and variate bank."""
    space_dir = out / "rb_space"
    variates_path = out / "variates.csv"
    for required in (space_dir / "manifest.json", variates_path):
        if not required.exists():
            raise ConfigurationError(
                f"missing trained artifact {required}; run propagate into {out} first"
            )
    echo = out / "config.json"
    if echo.exists():
        saved = load_config(echo)
        if config_sha(saved) != config_sha(config):
            raise ConfigurationError(
                f"config does not match the one used for training ({echo}); "
                "rerun propagate or pass the original config"
            )
    space = rb.load_rb(space_dir)
    mesh = fem.generate_fin_mesh(config.refinement)
    basis = kl.build_kl(mesh, config.delta)
    k_trunc = kl.truncate(basis, config.kl_tol)
    if k_trunc != space.n_components - 3:
        raise ConfigurationError(
            f"saved space has {space.n_components - 3} field components but the "
            f"config truncates at {k_trunc}"
        )
    problem = thermal.FinProblem(
        mesh=mesh,
        kl_basis=basis,
        k_trunc=k_trunc,
        upsilon=config.upsilon,
        delta=config.delta,
        op=fem.assemble(mesh, basis, n_modes=k_trunc),
        space=space,
        scales=kl.amplitude_weights(basis, k_trunc, config.upsilon),
    )
    variates = []
    with variates_path.open(newline="") as handle:
        lines = (line for line in handle if not line.startswith("#"))
        for row in csv.DictReader(lines):
            variates.append(
                cv.ControlVariate(
                    anchor=(float(row["anchor_k2"]), float(row["anchor_Ebar"])),
                    mean_estimate=float(row["mean_estimate"]),
                    mean_variance=float(row["mean_variance"]),
                    m_large=int(row["M_large"]),
                    stored_realizations=np.empty(0),
                )
            )
    return problem, variates


def holdout_points(config: ExperimentConfig) -> list[tuple[float, float]]:
    """Random lambdas, log-uniform in k2 and uniform in Ebar."""
    stream = rng.RandomStream(config.seed, stream_id=HOLDOUT_STREAM_ID)
    u = stream.uniforms(2 * config.holdout_count).reshape(-1, 2)
    log_lo, log_hi = math.log(config.k2_min), math.log(config.k2_max)
    return [
        (
            float(np.exp(log_lo + (log_hi - log_lo) * a)),
            float(config.ebar_min + (config.ebar_max - config.ebar_min) * b),
        )
        for a, b in u
    ]


def run_holdout(config: ExperimentConfig, out: Path, workers: int = 1) -> RunResult:
    out.mkdir(parents=True, exist_ok=True)
    mapper, close = _pool_map(workers)
    try:
        problem, variates = _load_trained(out, config)
        model = thermal.FinOutputModel(problem=problem, seed=config.seed)
        points = holdout_points(config)

        def variances(point):
            return [
                cv.reduced_estimate(
                    model,
                    variates[:i],
                    point,
                    m_small=config.m_small,
                    m_test=config.m_test_final,
                ).reduced_variance
                for i in range(len(variates) + 1)
            ]

        table = np.asarray(list(mapper(variances, points)))
        point_rows = [
            [idx, k2, ebar, i, table[idx, i]]
            for idx, (k2, ebar) in enumerate(points)
            for i in range(table.shape[1])
        ]
        curve_rows = [
            [i, table[:, i].max(), table[:, i].mean(), table[:, i].min()]
            for i in range(table.shape[1])
        ]
        files = [
            _write_csv(
                out / "holdout_points.csv",
                config,
                ["point", "k2", "Ebar", "I", "reduced_variance"],
                point_rows,
            ),
            _write_csv(
                out / "holdout_curves.csv",
                config,
                ["I", "max_variance", "mean_variance", "min_variance"],
                curve_rows,
            ),
        ]
        return RunResult(files=files)
    finally:
        close()


# ---------------------------------------------------------------------------
# bayes-toy


def toy_observation_sets(config: ExperimentConfig) -> dict[int, np.ndarray]:
    return {
        i: bayes.toy_observations(
            config.toy_theta0,
            config.toy_noise,
            config.toy_j,
            rng.RandomStream(config.seed, stream_id=TOY_OBS_STREAM_BASE + i),
        )
        for i in range(config.toy_n_sets)
    }


def toy_sweep_points(config: ExperimentConfig) -> list[tuple]:
    mus = np.linspace(*config.toy_mu_range, config.toy_grid)
    sigmas = np.linspace(*config.toy_sigma_range, config.toy_grid)
    lams = np.linspace(*config.toy_lambda_range, config.toy_grid)
    return [
        (float(lam), float(mu), float(sigma), set_id)
        for lam in lams
        for mu in mus
        for sigma in sigmas
        for set_id in range(config.toy_n_sets)
    ]


def run_bayes_toy(config: ExperimentConfig, out: Path, workers: int = 1) -> RunResult:
    out.mkdir(parents=True, exist_ok=True)
    mapper, close = _pool_map(workers)
    try:
        sets = toy_observation_sets(config)
        obs_rows = [
            [set_id, j, value]
            for set_id in sorted(sets)
            for j, value in enumerate(sets[set_id])
        ]
        model = bayes.ToyPosteriorModel(
            observation_sets=sets, theta0=config.toy_theta0, seed=config.seed
        )
        points = toy_sweep_points(config)
        greedy_config = cv.WeakGreedyConfig(
            tol=_relative_variance_tol(model, points, config, mapper, config.toy_variance_rtol),
            i_max=config.toy_i_max,
            m_large=config.m_large,
            m_small=config.m_small,
            m_test=config.m_test,
        )
        basis = cv.weak_greedy(model, points, greedy_config, map_fn=mapper)
        trace_header, trace_rows = cv.trace_table(
            basis, ["lambda", "mu", "sigma", "set"]
        )

        def one(point):
            lam, mu, sigma, set_id = point
            reduced = cv.reduced_estimate(
                model, basis, point, m_small=config.m_small, m_test=config.m_test_final
            )
            plain = cv.reduced_estimate(
                model, [], point, m_small=config.m_small, m_test=config.m_test_final
            )
            analytic = bayes.analytic_mmse(
                bayes.GaussianToyModel(
                    theta0=config.toy_theta0,
                    noise_std=lam,
                    prior_mean=mu,
                    prior_std=sigma,
                    observations=sets[set_id],
                )
            )
            return [
                lam,
                mu,
                sigma,
                set_id,
                analytic.mmse,
                reduced.mean,
                reduced.reduced_variance,
                plain.reduced_variance,
                reduced.interval.halfwidth,
                float(reduced.bias_halfwidths.sum()),
            ]

        estimate_rows = list(mapper(one, points))
        files = [
            _write_csv(
                out / "bayes_toy_observations.csv",
                config,
                ["set_id", "j", "value"],
                obs_rows,
            ),
            _write_csv(out / "bayes_toy_trace.csv", config, trace_header, trace_rows),
            _write_csv(
                out / "bayes_toy_estimates.csv",
                config,
                [
                    "lambda",
                    "mu",
                    "sigma",
                    "set_id",
                    "analytic_mmse",
                    "mean",
                    "reduced_variance",
                    "plain_variance",
                    "halfwidth_95",
                    "bias_halfwidth",
                ],
                estimate_rows,
            ),
            _write_config_echo(out, config),
        ]
        return RunResult(files=files, tol_met=basis.tol_met)
    finally:
        close()


# ---------------------------------------------------------------------------
# bayes-pde


def _pde_case_points(config: ExperimentConfig, case: int) -> list[tuple]:
    if case == 1:
        grid = _lambda_grid(config, config.pde_grid_case1, config.pde_grid_case1)
        return [
            (k2, ebar, float(s2), 0)
            for k2, ebar in grid
            for s2 in config.pde_sigma2_values
        ]
    grid = _lambda_grid(config, config.pde_grid_case2, config.pde_grid_case2)
    return [
        (k2, ebar, config.pde_sigma2_case2, set_id)
        for k2, ebar in grid
        for set_id in range(config.pde_n_sets_case2)
    ]


def _run_pde_case(
    config: ExperimentConfig,
    out: Path,
    problem: thermal.FinProblem,
    case: int,
    mapper,
) -> tuple[list[Path], bool]:
    if case == 1:
        n_sets, j_obs, zeta = 1, config.pde_j_case1, config.pde_zeta_case1
    else:
        n_sets, j_obs, zeta = (
            config.pde_n_sets_case2,
            config.pde_j_case2,
            config.pde_zeta_case2,
        )
    sets = {
        i: bayes.synthetic_observations(
            problem,
            config.pde_lambda0,
            j_obs,
            seed=config.seed + PDE_OBS_SEED_OFFSET + i,
        )
        for i in range(n_sets)
    }
    points = _pde_case_points(config, case)
    cache_size = 2 * len(points) + config.pde_i_max + 8
    numerator = bayes.PdePosteriorModel(
        problem=problem,
        observation_sets=sets,
        zeta=zeta,
        seed=config.seed,
        cache_size=cache_size,
    )
    denominator = numerator.view("denominator")
    param_names = ["k2", "Ebar", "sigma2", "set"]
    obs_rows = [
        [set_id, j, float(value), sets[set_id].lambda0[0], sets[set_id].lambda0[1]]
        for set_id in sorted(sets)
        for j, value in enumerate(sets[set_id].values)
    ]
    files = [
        _write_csv(
            out / f"bayes_pde_observations_case{case}.csv",
            config,
            ["set_id", "j", "value", "lambda0_k2", "lambda0_Ebar"],
            obs_rows,
        )
    ]
    bases = {}
    tol_met = True
    for label, view in (("numerator", numerator), ("denominator", denominator)):
        greedy_config = cv.WeakGreedyConfig(
            tol=_relative_variance_tol(view, points, config, mapper, config.pde_variance_rtol),
            i_max=config.pde_i_max,
            m_large=config.m_large,
            m_small=config.m_small,
            m_test=config.m_test,
        )
        basis = cv.weak_greedy(view, points, greedy_config, map_fn=mapper)
        bases[label] = basis
        tol_met = tol_met and basis.tol_met
        header, rows = cv.trace_table(basis, param_names)
        files.append(
            _write_csv(
                out / f"bayes_pde_trace_case{case}_{label}.csv", config, header, rows
            )
        )

    def one(point):
        num = cv.reduced_estimate(
            numerator, bases["numerator"], point,
            m_small=config.m_small, m_test=config.m_test_final,
        )
        den = cv.reduced_estimate(
            denominator, bases["denominator"], point,
            m_small=config.m_small, m_test=config.m_test_final,
        )
        plain_num = cv.reduced_estimate(
            numerator, [], point, m_small=config.m_small, m_test=config.m_test_final
        )
        plain_den = cv.reduced_estimate(
            denominator, [], point, m_small=config.m_small, m_test=config.m_test_final
        )
        ratio, halfwidth = bayes.ratio_of_estimates(num, den)
        return [
            *point,
            ratio,
            halfwidth,
            num.mean,
            den.mean,
            num.reduced_variance,
            plain_num.reduced_variance,
            den.reduced_variance,
            plain_den.reduced_variance,
        ]

    estimate_rows = list(mapper(one, points))
    files.append(
        _write_csv(
            out / f"bayes_pde_estimates_case{case}.csv",
            config,
            [
                *param_names,
                "mmse",
                "halfwidth_95",
                "numerator_mean",
                "denominator_mean",
                "numerator_reduced_variance",
                "numerator_plain_variance",
                "denominator_reduced_variance",
                "denominator_plain_variance",
            ],
            estimate_rows,
        )
    )
    return files, tol_met


def run_bayes_pde(config: ExperimentConfig, out: Path, workers: int = 1) -> RunResult:
    out.mkdir(parents=True, exist_ok=True)
    mapper, close = _pool_map(workers)
    try:
        problem = _build_problem(config)
        files: list[Path] = []
        tol_met = True
        for case in (1, 2):
            case_files, case_ok = _run_pde_case(config, out, problem, case, mapper)
            files.extend(case_files)
            tol_met = tol_met and case_ok
        files.append(_write_config_echo(out, config))
        return RunResult(files=files, tol_met=tol_met)
    finally:
        close()


# ---------------------------------------------------------------------------
# breakeven


def run_breakeven(config: ExperimentConfig, out: Path, workers: int = 1) -> RunResult:
    out.mkdir(parents=True, exist_ok=True)
    inputs = cv.BreakevenInputs(
        c=config.breakeven_cost,
        m=config.m_large,
        m_test=config.m_test_final,
        m_small=config.m_small,
        m_large=config.m_large,
        i=config.i_max,
        card=config.n_k2 * config.n_ebar,
    )
    report = cv.breakeven_report(inputs)
    row = [
        inputs.c,
        inputs.m,
        inputs.m_test,
        inputs.m_small,
        inputs.m_large,
        inputs.i,
        inputs.card,
        report.naive_cost_per_query,
        report.cv_cost_per_query,
        report.greedy_cost,
        report.per_query_gain,
        report.min_queries if report.min_queries is not None else "",
    ]
    files = [
        _write_csv(
            out / "breakeven.csv",
            config,
            [
                "c",
                "M",
                "M_test",
                "M_small",
                "M_large",
                "I",
                "card",
                "naive_cost_per_query",
                "cv_cost_per_query",
                "greedy_cost",
                "per_query_gain",
                "min_queries",
            ],
            [row],
        ),
        _write_config_echo(out, config),
    ]
    return RunResult(files=files)
