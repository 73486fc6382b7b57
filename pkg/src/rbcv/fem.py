"""P1 finite elements for the two-region thermal-fin Robin problem.

Geometry (all lengths in post-width units): a central post [-0.5, 0.5] x [0, 3]
with conductivity k1, and two lateral subfins [-2.5, -0.5] x [2, 2.5] and
[0.5, 2.5] x [2, 2.5] with conductivity k2. A unit heat flux g enters through
the post bottom; the three free edges of each subfin exchange heat with the
surroundings through a Robin condition with spatially varying coefficient
b = Ebar * (1 + sum_k y_k Phi_k); the remaining boundary is insulated.

The operator is assembled once into affine components
A(mu) = k1*A1 + k2*A2 + Ebar*B0 + Ebar * sum_k y_k B_k, so downstream reduced
models can rebuild A(mu) at any parameter from small dense projections.

The structured triangulation lives on an integer lattice with spacing
h = 0.25/refinement and mirrored diagonals, so the mesh (and hence every
assembled matrix) is exactly symmetric under x -> -x.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConfigurationError, InvalidParameterError, NumericalDefectError

EDGE_FLUX = "flux"
EDGE_ROBIN_LEFT = "robin_left"
EDGE_ROBIN_RIGHT = "robin_right"
EDGE_INSULATED = "insulated"

ROBIN_LABELS = (EDGE_ROBIN_LEFT, EDGE_ROBIN_RIGHT)

REGION_POST = 1
REGION_FINS = 2

# field factor 1 + sum y_k Phi_k must stay above this for coercivity
MIN_FIELD_FACTOR = 0.5
SOLVE_RESIDUAL_RTOL = 1e-10


@dataclass
class Mesh:
    nodes: np.ndarray
    triangles: np.ndarray
    tri_region: np.ndarray
    boundary_edges: np.ndarray
    edge_labels: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)


def generate_fin_mesh(refinement: int) -> Mesh:
    """Structured mirror-symmetric triangulation of the canonical fin.

    Cell size is 0.25/refinement; node count grows like refinement^2
    (refinement 6 gives 3073 nodes).
    """
    if refinement < 1:
        raise ConfigurationError(f"refinement must be >= 1, got {refinement}")
    r = refinement
    h = 0.25 / r
    # lattice extents (x = i*h, y = j*h): post, left fin, right fin
    rects = [
        (-2 * r, 2 * r, 0, 12 * r, REGION_POST),
        (-10 * r, -2 * r, 8 * r, 10 * r, REGION_FINS),
        (2 * r, 10 * r, 8 * r, 10 * r, REGION_FINS),
    ]
    node_id: dict[tuple[int, int], int] = {}
    coords: list[tuple[float, float]] = []

    def nid(i: int, j: int) -> int:
        key = (i, j)
        if key not in node_id:
            node_id[key] = len(coords)
            coords.append((i * h, j * h))
        return node_id[key]

    triangles: list[tuple[int, int, int]] = []
    regions: list[int] = []
    for i0, i1, j0, j1, region in rects:
        for j in range(j0, j1):
            for i in range(i0, i1):
                sw, se = nid(i, j), nid(i + 1, j)
                ne, nw = nid(i + 1, j + 1), nid(i, j + 1)
                if i >= 0:
                    cell = [(sw, se, ne), (sw, ne, nw)]
                else:
                    cell = [(sw, se, nw), (se, ne, nw)]
                triangles.extend(cell)
                regions.extend([region, region])

    lattice = {v: k for k, v in node_id.items()}
    edge_count: dict[tuple[int, int], int] = {}
    for tri in triangles:
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            key = (min(a, b), max(a, b))
            edge_count[key] = edge_count.get(key, 0) + 1

    boundary_edges: list[tuple[int, int]] = []
    labels: list[str] = []
    for (a, b), count in sorted(edge_count.items()):
        if count != 1:
            continue
        (ia, ja), (ib, jb) = lattice[a], lattice[b]
        if ja == 0 and jb == 0:
            label = EDGE_FLUX
        elif (ja == jb and ja in (8 * r, 10 * r) and ia <= -2 * r and ib <= -2 * r) or (
            ia == ib == -10 * r
        ):
            label = EDGE_ROBIN_LEFT
        elif (ja == jb and ja in (8 * r, 10 * r) and ia >= 2 * r and ib >= 2 * r) or (
            ia == ib == 10 * r
        ):
            label = EDGE_ROBIN_RIGHT
        else:
            label = EDGE_INSULATED
        boundary_edges.append((a, b))
        labels.append(label)

    return Mesh(
        nodes=np.array(coords, dtype=float),
        triangles=np.array(triangles, dtype=np.int64),
        tri_region=np.array(regions, dtype=np.int64),
        boundary_edges=np.array(boundary_edges, dtype=np.int64),
        edge_labels=np.array(labels, dtype=object),
    )


def validate_mesh(mesh: Mesh) -> None:
    """Check conformity, orientation, and boundary-label partition."""
    counts: dict[tuple[int, int], int] = {}
    for tri in mesh.triangles:
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            key = (min(a, b), max(a, b))
            counts[key] = counts.get(key, 0) + 1
    if any(c > 2 for c in counts.values()):
        raise ConfigurationError("non-conforming mesh: an edge is shared by > 2 triangles")
    boundary = {k for k, c in counts.items() if c == 1}
    listed = {(min(a, b), max(a, b)) for a, b in mesh.boundary_edges}
    if boundary != listed:
        raise ConfigurationError("boundary edge table does not match the triangulation")
    areas = triangle_areas(mesh)
    if not np.all(areas > 0):
        raise ConfigurationError("mesh contains non-positively-oriented triangles")
    known = {EDGE_FLUX, EDGE_ROBIN_LEFT, EDGE_ROBIN_RIGHT, EDGE_INSULATED}
    if not set(mesh.edge_labels) <= known:
        raise ConfigurationError(f"unknown edge labels: {set(mesh.edge_labels) - known}")


def triangle_areas(mesh: Mesh) -> np.ndarray:
    p = mesh.nodes[mesh.triangles]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


def mirror_permutation(mesh: Mesh) -> np.ndarray:
    """Node permutation realizing x -> -x (exact, by construction)."""
    index = {(x, y): i for i, (x, y) in enumerate(map(tuple, mesh.nodes))}
    perm = np.empty(mesh.n_nodes, dtype=np.int64)
    for i, (x, y) in enumerate(mesh.nodes):
        perm[i] = index[(-x, y)]
    return perm


class Outputs(NamedTuple):
    s: float
    o: float


@dataclass(frozen=True)
class FinParameters:
    """Parameter point mu = (k1, k2, Ebar, {y_k}) of the affine operator."""

    k2: float
    e_bar: float
    y: np.ndarray = field(default_factory=lambda: np.zeros(0))
    k1: float = 1.0


@dataclass
class AffineOperator:
    """Affine components of the fin operator plus output functionals."""

    a1: sp.csr_matrix
    a2: sp.csr_matrix
    b0: sp.csr_matrix
    bks: list
    load: np.ndarray
    output_o: np.ndarray
    robin_nodes: np.ndarray
    robin_modes: np.ndarray

    @property
    def n(self) -> int:
        return len(self.load)

    @property
    def n_modes(self) -> int:
        return len(self.bks)

    def affine_components(self) -> list[tuple[str, sp.csr_matrix]]:
        tagged = [("A1", self.a1), ("A2", self.a2), ("B0", self.b0)]
        tagged += [(f"B{k + 1}", bk) for k, bk in enumerate(self.bks)]
        return tagged

    def affine_coefficients(self, params: FinParameters) -> np.ndarray:
        y = np.asarray(params.y, dtype=float)
        if len(y) > self.n_modes:
            raise ConfigurationError(
                f"parameter has {len(y)} field amplitudes but operator holds {self.n_modes} modes"
            )
        theta = np.zeros(3 + self.n_modes)
        theta[0], theta[1], theta[2] = params.k1, params.k2, params.e_bar
        theta[3 : 3 + len(y)] = params.e_bar * y
        return theta

    def system_matrix(self, params: FinParameters) -> sp.csr_matrix:
        theta = self.affine_coefficients(params)
        mats = [self.a1, self.a2, self.b0, *self.bks]
        out = theta[0] * mats[0]
        for c, m in zip(theta[1:], mats[1:]):
            if c != 0.0:
                out = out + c * m
        return out.tocsr()

    def field_factor(self, params: FinParameters) -> np.ndarray:
        """1 + sum_k y_k Phi_k at the Robin boundary nodes."""
        y = np.asarray(params.y, dtype=float)
        if len(y) == 0:
            return np.ones(len(self.robin_nodes))
        return 1.0 + self.robin_modes[:, : len(y)] @ y


def _stiffness(mesh: Mesh, tri_mask: np.ndarray) -> sp.csr_matrix:
    tris = mesh.triangles[tri_mask]
    p = mesh.nodes[tris]
    x, y = p[..., 0], p[..., 1]
    # P1 gradient coefficients: grad(lambda_i) = (b_i, c_i) / (2A)
    b = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1)
    c = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1)
    area = 0.5 * (b[:, 0] * c[:, 1] - b[:, 1] * c[:, 0])
    local = (b[:, :, None] * b[:, None, :] + c[:, :, None] * c[:, None, :]) / (
        4.0 * area[:, None, None]
    )
    rows = np.repeat(tris, 3, axis=1).ravel()
    cols = np.tile(tris, (1, 3)).ravel()
    mat = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(mesh.n_nodes, mesh.n_nodes))
    return mat.tocsr()


def _edge_mass(mesh: Mesh, edges: np.ndarray, weights: np.ndarray | None = None) -> sp.csr_matrix:
    """Boundary mass with optional piecewise-linear nodal weight.

    Uses the exact rule int psi_a^p psi_b^q ds = L * p! q! / (p+q+1)!:
    the unweighted edge block is L/6 * [[2,1],[1,2]]; with linear weight
    phi it becomes L * [[phi_a/4 + phi_b/12, (phi_a+phi_b)/12],
    [(phi_a+phi_b)/12, phi_a/12 + phi_b/4]].
    """
    rows, cols, vals = [], [], []
    for a, b in edges:
        length = float(np.linalg.norm(mesh.nodes[b] - mesh.nodes[a]))
        if weights is None:
            block = length / 6.0 * np.array([[2.0, 1.0], [1.0, 2.0]])
        else:
            wa, wb = weights[a], weights[b]
            block = length * np.array(
                [
                    [wa / 4.0 + wb / 12.0, (wa + wb) / 12.0],
                    [(wa + wb) / 12.0, wa / 12.0 + wb / 4.0],
                ]
            )
        for p, gi in enumerate((a, b)):
            for q, gj in enumerate((a, b)):
                rows.append(gi)
                cols.append(gj)
                vals.append(block[p, q])
    return sp.coo_matrix((vals, (rows, cols)), shape=(mesh.n_nodes, mesh.n_nodes)).tocsr()


def robin_edges(mesh: Mesh) -> np.ndarray:
    mask = np.isin(mesh.edge_labels, ROBIN_LABELS)
    return mesh.boundary_edges[mask]


def assemble(mesh: Mesh, kl=None, g_value: float = 1.0, n_modes: int | None = None) -> AffineOperator:
    """Build the affine components, load, and output functionals.

    kl, when given, must be a KL basis whose boundary_nodes cover every Robin
    node of this mesh; one weighted boundary-mass component B_k is produced
    per retained mode (or per the first n_modes when given). kl=None
    assembles the deterministic-field operator (no B_k components).
    """
    a1 = _stiffness(mesh, mesh.tri_region == REGION_POST)
    a2 = _stiffness(mesh, mesh.tri_region == REGION_FINS)
    r_edges = robin_edges(mesh)
    b0 = _edge_mass(mesh, r_edges)

    robin_node_ids = np.unique(r_edges)
    bks: list[sp.csr_matrix] = []
    modes_at_robin = np.zeros((len(robin_node_ids), 0))
    if kl is not None:
        pos = {int(n): i for i, n in enumerate(kl.boundary_nodes)}
        if not all(int(n) in pos for n in robin_node_ids):
            raise ConfigurationError("KL basis does not cover the Robin nodes of this mesh")
        keep = kl.modes.shape[1] if n_modes is None else min(n_modes, kl.modes.shape[1])
        modes_at_robin = kl.modes[[pos[int(n)] for n in robin_node_ids], :keep]
        for k in range(keep):
            phi = np.zeros(mesh.n_nodes)
            phi[kl.boundary_nodes] = kl.modes[:, k]
            bks.append(_edge_mass(mesh, r_edges, weights=phi))

    load = np.zeros(mesh.n_nodes)
    for (a, b), label in zip(mesh.boundary_edges, mesh.edge_labels):
        if label != EDGE_FLUX:
            continue
        length = float(np.linalg.norm(mesh.nodes[b] - mesh.nodes[a]))
        load[a] += g_value * length / 2.0
        load[b] += g_value * length / 2.0

    output_o = np.zeros(mesh.n_nodes)
    y_top = mesh.nodes[:, 1].max()
    top_length = 0.0
    for a, b in mesh.boundary_edges:
        if mesh.nodes[a, 1] == y_top and mesh.nodes[b, 1] == y_top:
            length = float(np.linalg.norm(mesh.nodes[b] - mesh.nodes[a]))
            output_o[a] += length / 2.0
            output_o[b] += length / 2.0
            top_length += length
    output_o /= top_length

    return AffineOperator(
        a1=a1,
        a2=a2,
        b0=b0,
        bks=bks,
        load=load,
        output_o=output_o,
        robin_nodes=robin_node_ids,
        robin_modes=modes_at_robin,
    )


def solve_full(op: AffineOperator, params: FinParameters) -> np.ndarray:
    """Direct sparse solve of A(mu) u = F, certified by its residual."""
    if params.k1 <= 0 or params.k2 <= 0 or params.e_bar <= 0:
        raise InvalidParameterError(
            f"conductivities and Ebar must be positive, got k1={params.k1}, "
            f"k2={params.k2}, Ebar={params.e_bar}"
        )
    factor = op.field_factor(params)
    if factor.min() < MIN_FIELD_FACTOR - 1e-12:
        raise InvalidParameterError(
            f"realized Robin field factor {factor.min():.6f} below the "
            f"coercivity floor {MIN_FIELD_FACTOR}"
        )
    rhs_norm = float(np.linalg.norm(op.load))
    if rhs_norm == 0.0:
        return np.zeros(op.n)
    mat = op.system_matrix(params).tocsc()
    u = spla.spsolve(mat, op.load)
    residual = float(np.linalg.norm(mat @ u - op.load)) / rhs_norm
    if residual > SOLVE_RESIDUAL_RTOL:
        raise NumericalDefectError(
            f"sparse solve residual {residual:.3e} exceeds {SOLVE_RESIDUAL_RTOL}"
        )
    return u


def outputs(op: AffineOperator, u: np.ndarray) -> Outputs:
    """Compliance s = F.u and averaged top temperature o."""
    return Outputs(s=float(op.load @ u), o=float(op.output_o @ u))


def write_mesh(mesh: Mesh, prefix: str | Path) -> list[Path]:
    """Export the mesh as three CSV tables sharing a path prefix."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    paths = []
    nodes_path = prefix.with_suffix(".nodes.csv")
    with open(nodes_path, "w") as f:
        f.write("id,x,y\n")
        for i, (x, y) in enumerate(mesh.nodes):
            f.write(f"{i},{float(x)!r},{float(y)!r}\n")
    paths.append(nodes_path)
    tris_path = prefix.with_suffix(".triangles.csv")
    with open(tris_path, "w") as f:
        f.write("id,n1,n2,n3,region\n")
        for i, (tri, region) in enumerate(zip(mesh.triangles, mesh.tri_region)):
            f.write(f"{i},{tri[0]},{tri[1]},{tri[2]},{region}\n")
    paths.append(tris_path)
    edges_path = prefix.with_suffix(".edges.csv")
    with open(edges_path, "w") as f:
        f.write("n1,n2,label\n")
        for (a, b), label in zip(mesh.boundary_edges, mesh.edge_labels):
            f.write(f"{a},{b},{label}\n")
    paths.append(edges_path)
    return paths


def read_mesh(prefix: str | Path) -> Mesh:
    """Load a mesh written by write_mesh."""
    prefix = Path(prefix)
    nodes_raw = np.genfromtxt(prefix.with_suffix(".nodes.csv"), delimiter=",", skip_header=1)
    nodes_raw = np.atleast_2d(nodes_raw)
    tris_raw = np.atleast_2d(
        np.genfromtxt(prefix.with_suffix(".triangles.csv"), delimiter=",", skip_header=1, dtype=np.int64)
    )
    edges, labels = [], []
    with open(prefix.with_suffix(".edges.csv")) as f:
        next(f)
        for line in f:
            a, b, label = line.strip().split(",")
            edges.append((int(a), int(b)))
            labels.append(label)
    return Mesh(
        nodes=nodes_raw[:, 1:3],
        triangles=tris_raw[:, 1:4],
        tri_region=tris_raw[:, 4],
        boundary_edges=np.array(edges, dtype=np.int64),
        edge_labels=np.array(labels, dtype=object),
    )
