"""Karhunen-Loeve representation and sampling of the stochastic Robin field.

The field b on the exchange boundary is b = Ebar * (1 + Upsilon * sum_k
sqrt(lambda_k) Phi_k z_k) with z_k independent U(-sqrt3, sqrt3) and
(lambda_k, Phi_k) the eigencouples of a Gaussian covariance kernel
exp(-|x-y|^2/delta^2)/|Gamma_B|, restricted to each connected boundary
component (zero covariance across components). Each component is the free
boundary of a thin plate, a chain whose two endpoints sit on the post wall;
|x-y| is the station distance along the plate, the difference of arc lengths
to the nearest chain endpoint. Points facing each other across the plate
thickness are at station distance zero, so fluctuations are identical on the
two faces and the modes are constant through the thickness. The eigenproblem
is solved by a Nystrom discretization with symmetric square-root weight
scaling on one component; modes extend to the other component by the exact
mesh mirror and carry a shared amplitude, so every realization is
mirror-symmetric. Eigenvalues are renormalized to unit sum (the kernel has
normalized trace).

Realizations are accepted only when the field factor 1 + sum ... stays at or
above 1/2 (coercivity floor); a redraw advances the per-realization counter
by K per attempt, so rejection preserves the common-random-numbers layout
across parameter values exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import eigh
from scipy.special import ndtri

from . import rng
from .errors import ConfigurationError, InvalidParameterError
from .fem import EDGE_ROBIN_LEFT, EDGE_ROBIN_RIGHT, MIN_FIELD_FACTOR, Mesh, mirror_permutation

GAMMA_B_MEASURE = 9.0
MAX_REJECTIONS = 100


@dataclass
class KLBasis:
    eigenvalues: np.ndarray
    modes: np.ndarray
    boundary_nodes: np.ndarray
    weights: np.ndarray
    delta: float
    trace_renormalization: float
    gamma_b_length: float

    @property
    def n_modes(self) -> int:
        return len(self.eigenvalues)


def _component_nodes_and_weights(mesh: Mesh, label: str):
    mask = mesh.edge_labels == label
    edges = mesh.boundary_edges[mask]
    if len(edges) == 0:
        raise ConfigurationError(f"mesh has no boundary edges labeled {label!r}")
    nodes = np.unique(edges)
    pos = {int(n): i for i, n in enumerate(nodes)}
    weights = np.zeros(len(nodes))
    for a, b in edges:
        length = float(np.linalg.norm(mesh.nodes[b] - mesh.nodes[a]))
        weights[pos[int(a)]] += length / 2.0
        weights[pos[int(b)]] += length / 2.0
    return nodes, edges, weights


def _station_coordinates(mesh: Mesh, nodes: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """Arc length from each node to the nearest endpoint of the component chain.

    The component's boundary edges form a simple open chain (both endpoints
    on the post wall). Folding the arc-length parameter at the chain midpoint
    gives each node its station along the plate, identical for the two nodes
    facing each other across the plate thickness.
    """
    neighbors: dict[int, list[int]] = {}
    for a, b in edges:
        neighbors.setdefault(int(a), []).append(int(b))
        neighbors.setdefault(int(b), []).append(int(a))
    endpoints = sorted(n for n, adj in neighbors.items() if len(adj) == 1)
    if len(endpoints) != 2 or any(len(adj) > 2 for adj in neighbors.values()):
        raise ConfigurationError("boundary component is not a simple open chain")
    order = [endpoints[0]]
    while len(order) < len(neighbors):
        prev = order[-2] if len(order) > 1 else -1
        nxt = [n for n in neighbors[order[-1]] if n != prev]
        if len(nxt) != 1:
            raise ConfigurationError("boundary component is not a simple open chain")
        order.append(nxt[0])
    coords = mesh.nodes[order]
    arcs = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(coords, axis=0), axis=1))])
    stations = np.minimum(arcs, arcs[-1] - arcs)
    by_node = {n: t for n, t in zip(order, stations)}
    return np.array([by_node[int(n)] for n in nodes])


def build_kl(mesh: Mesh, delta: float) -> KLBasis:
    """Nystrom eigendecomposition of the covariance kernel on the boundary.

    Returns the full (untruncated) spectrum with strictly positive
    eigenvalues, normalized to unit sum, and modes orthonormal in the
    edge-weighted discrete L2 inner product on both boundary components.
    """
    if delta <= 0:
        raise InvalidParameterError(f"correlation length delta must be > 0, got {delta}")
    right_nodes, right_edges, w = _component_nodes_and_weights(mesh, EDGE_ROBIN_RIGHT)
    stations = _station_coordinates(mesh, right_nodes, right_edges)
    d2 = (stations[:, None] - stations[None, :]) ** 2
    kernel = np.exp(-d2 / delta**2) / GAMMA_B_MEASURE

    sqrt_w = np.sqrt(w)
    sym = kernel * np.outer(sqrt_w, sqrt_w)
    sym = 0.5 * (sym + sym.T)
    vals, vecs = eigh(sym)
    order = np.argsort(vals)[::-1]
    vals = vals[order]
    vecs = vecs[:, order]
    keep = vals > 1e-14 * vals[0]
    vals = vals[keep]
    vecs = vecs[:, keep]

    comp_modes = vecs / sqrt_w[:, None]
    # deterministic sign: largest-magnitude nodal value is positive
    for k in range(comp_modes.shape[1]):
        idx = np.argmax(np.abs(comp_modes[:, k]))
        if comp_modes[idx, k] < 0:
            comp_modes[:, k] = -comp_modes[:, k]

    perm = mirror_permutation(mesh)
    left_nodes = perm[right_nodes]
    boundary_nodes = np.concatenate([right_nodes, left_nodes])
    # shared amplitude across the two components: 1/sqrt(2) keeps modes unit-norm
    modes = np.vstack([comp_modes, comp_modes]) / np.sqrt(2.0)
    weights = np.concatenate([w, w])

    total = float(vals.sum())
    return KLBasis(
        eigenvalues=vals / total,
        modes=modes,
        boundary_nodes=boundary_nodes,
        weights=weights,
        delta=delta,
        trace_renormalization=1.0 / total,
        gamma_b_length=float(weights.sum()),
    )


def truncate(basis: KLBasis, tol: float) -> int:
    """Smallest K with sum_{k>K} sqrt(lambda_k) <= tol * sum_k sqrt(lambda_k)."""
    if not 0.0 < tol < 1.0:
        raise InvalidParameterError(f"truncation tol must be in (0, 1), got {tol}")
    roots = np.sqrt(basis.eigenvalues)
    total = roots.sum()
    tails = total - np.cumsum(roots)
    for k in range(1, len(roots) + 1):
        if tails[k - 1] <= tol * total:
            return k
    return len(roots)


@dataclass(frozen=True)
class BiotRealization:
    z: np.ndarray
    field: np.ndarray
    n_rejections: int


def amplitude_weights(basis: KLBasis, k_trunc: int, upsilon: float) -> np.ndarray:
    """Per-mode amplitude scales Upsilon * sqrt(lambda_k), k < K."""
    if not 1 <= k_trunc <= basis.n_modes:
        raise InvalidParameterError(
            f"truncation order {k_trunc} outside [1, {basis.n_modes}]"
        )
    if upsilon < 0:
        raise InvalidParameterError(f"Upsilon must be >= 0, got {upsilon}")
    return upsilon * np.sqrt(basis.eigenvalues[:k_trunc])


def sample_biot(
    basis: KLBasis, k_trunc: int, e_bar: float, upsilon: float, stream: rng.RandomStream
) -> BiotRealization:
    """One accepted field realization at the given stream.

    Draws K uniforms per attempt at consecutive counters, rejecting until the
    field factor stays at or above 1/2 everywhere. More than MAX_REJECTIONS
    consecutive rejections means Upsilon is too large for the spectrum.
    """
    scales = amplitude_weights(basis, k_trunc, upsilon)
    for attempt in range(MAX_REJECTIONS + 1):
        z = rng.uniform_pm_sqrt3(stream.advanced(attempt * k_trunc), n=k_trunc)
        factor = 1.0 + basis.modes[:, :k_trunc] @ (scales * z)
        if factor.min() >= MIN_FIELD_FACTOR:
            return BiotRealization(z=z, field=e_bar * factor, n_rejections=attempt)
    raise ConfigurationError(
        f"field rejected {MAX_REJECTIONS} consecutive times; "
        "Upsilon too large for the truncated spectrum"
    )


def sample_amplitudes(
    basis: KLBasis,
    k_trunc: int,
    upsilon: float,
    seed: int,
    indices: np.ndarray,
    sigmas: np.ndarray | None = None,
) -> np.ndarray:
    """Field amplitudes y_k = Upsilon sqrt(lambda_k) z_k for many realizations.

    Realization m (stream_id = m) draws its K coordinates at counters
    0..K-1, advancing by K per rejected attempt, exactly as sample_biot.
    With sigmas=None, z_k ~ U(-sqrt3, sqrt3); otherwise z_k ~ N(0, sigmas_k^2)
    (the truncated-Gaussian prior used by the Bayesian inversion). Rejection
    keeps realizations with field factor >= 1/2 only; acceptance depends on z
    alone, so the layout is identical across (k2, Ebar).
    """
    scales = amplitude_weights(basis, k_trunc, upsilon)
    idx = np.asarray(indices)

    def transform(u: np.ndarray) -> np.ndarray:
        if sigmas is None:
            return (2.0 * u - 1.0) * rng.SQRT3
        return ndtri(u) * sigmas

    u0 = rng.uniform01_streams(seed, idx, np.arange(k_trunc))
    z = transform(u0)
    factors = 1.0 + (scales * z) @ basis.modes[:, :k_trunc].T
    bad = np.flatnonzero(factors.min(axis=1) < MIN_FIELD_FACTOR)
    for row in bad:
        stream = rng.RandomStream(seed, int(idx[row]))
        for attempt in range(1, MAX_REJECTIONS + 1):
            u = stream.advanced(attempt * k_trunc).uniforms(k_trunc)
            z_row = transform(u)
            factor = 1.0 + basis.modes[:, :k_trunc] @ (scales * z_row)
            if factor.min() >= MIN_FIELD_FACTOR:
                z[row] = z_row
                break
        else:
            raise ConfigurationError(
                f"field rejected {MAX_REJECTIONS} consecutive times at realization {idx[row]}"
            )
    return scales * z


def spectrum_table(basis: KLBasis) -> tuple[list[str], list[list]]:
    """KL spectrum as (header, rows) for CSV export."""
    header = ["k", "lambda_k"]
    rows = [[k + 1, float(val)] for k, val in enumerate(basis.eigenvalues)]
    return header, rows
