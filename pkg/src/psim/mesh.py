"""Admissible 1D three-layer mesh: cells, faces, transmissibilities.

The device domain (x0, x3) splits into three layers (x0,x1), (x1,x2),
(x2,x3).  Each layer is meshed from `nodes_per_region` uniformly spaced
generating nodes including both layer endpoints; cells are the Voronoi
boxes of those nodes clipped to the layer.  Layer interfaces are
therefore faces, and each interface node generates two half-width
cells, one per side, so every cell lies in exactly one region.  Cell
centers are the box centroids (the generating node for interior cells,
node -/+ h/4 for the end half-cells), which keeps every center strictly
inside its cell and every face distance positive.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .errors import ConfigError, MeshError

__all__ = [
    "Region",
    "FaceKind",
    "Cell",
    "Face",
    "Mesh",
    "build_three_layer_mesh",
    "project_to_coarser",
]


class Region(IntEnum):
    HTL = 0
    INTRINSIC = 1
    ETL = 2


class FaceKind(IntEnum):
    INTERIOR = 0
    DIRICHLET = 1
    NEUMANN = 2


@dataclass(frozen=True)
class Cell:
    index: int
    center: float
    measure_mK: float
    region: Region
    node: float  # generating node; collocation abscissa shared across nested meshes


@dataclass(frozen=True)
class Face:
    index: int
    kind: FaceKind
    cell_K: int
    cell_L: int  # -1 on boundary faces
    position: float
    measure_msigma: float
    distance_dsigma: float
    transmissibility: float
    in_intrinsic_interior: bool


@dataclass
class Mesh:
    breakpoints: tuple
    nodes_per_region: int
    cells: list
    faces: list
    faces_of_cell: list
    regularity_xi: float = 0.0
    # flat views for vectorized assembly, built once
    cell_center: np.ndarray = field(default=None, repr=False)
    cell_measure: np.ndarray = field(default=None, repr=False)
    cell_region: np.ndarray = field(default=None, repr=False)
    cell_node: np.ndarray = field(default=None, repr=False)
    face_kind: np.ndarray = field(default=None, repr=False)
    face_cell_k: np.ndarray = field(default=None, repr=False)
    face_cell_l: np.ndarray = field(default=None, repr=False)
    face_position: np.ndarray = field(default=None, repr=False)
    face_tau: np.ndarray = field(default=None, repr=False)
    face_d: np.ndarray = field(default=None, repr=False)
    face_intr_interior: np.ndarray = field(default=None, repr=False)
    intr_cells: np.ndarray = field(default=None, repr=False)
    intr_index_of_cell: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.cell_center = np.array([c.center for c in self.cells])
        self.cell_measure = np.array([c.measure_mK for c in self.cells])
        self.cell_region = np.array([int(c.region) for c in self.cells])
        self.cell_node = np.array([c.node for c in self.cells])
        self.face_kind = np.array([int(f.kind) for f in self.faces])
        self.face_cell_k = np.array([f.cell_K for f in self.faces])
        self.face_cell_l = np.array([f.cell_L for f in self.faces])
        self.face_position = np.array([f.position for f in self.faces])
        self.face_tau = np.array([f.transmissibility for f in self.faces])
        self.face_d = np.array([f.distance_dsigma for f in self.faces])
        self.face_intr_interior = np.array([f.in_intrinsic_interior for f in self.faces])
        self.intr_cells = np.flatnonzero(self.cell_region == int(Region.INTRINSIC))
        self.intr_index_of_cell = np.full(len(self.cells), -1, dtype=int)
        self.intr_index_of_cell[self.intr_cells] = np.arange(self.intr_cells.size)
        if self.regularity_xi == 0.0:
            self.regularity_xi = self._compute_regularity()

    @property
    def n_cells(self):
        return len(self.cells)

    @property
    def n_intr(self):
        return int(self.intr_cells.size)

    @property
    def domain_length(self):
        return self.breakpoints[-1] - self.breakpoints[0]

    @property
    def intrinsic_length(self):
        return self.breakpoints[2] - self.breakpoints[1]

    def _compute_regularity(self):
        # largest xi with d_sigma >= xi diam(K) and m_K >= xi sum_sigma m_sigma d_sigma
        xi = np.inf
        for k, face_ids in enumerate(self.faces_of_cell):
            diam = self.cell_measure[k]
            d_sum = 0.0
            for j in face_ids:
                xi = min(xi, self.face_d[j] / diam)
                d_sum += self.faces[j].measure_msigma * self.face_d[j]
            xi = min(xi, self.cell_measure[k] / d_sum)
        return float(xi)

    def same_topology(self, other: "Mesh") -> bool:
        return (
            self.n_cells == other.n_cells
            and self.nodes_per_region == other.nodes_per_region
            and np.allclose(self.breakpoints, other.breakpoints)
        )


def build_three_layer_mesh(breakpoints, nodes_per_region: int) -> Mesh:
    """Mesh the three layers with `nodes_per_region` nodes each.

    Returns 3*nodes_per_region cells; Dirichlet faces at the two outer
    contacts, interior faces elsewhere (including the two layer
    interfaces).
    """
    bp = tuple(float(b) for b in breakpoints)
    if len(bp) != 4 or any(b1 <= b0 for b0, b1 in zip(bp, bp[1:])):
        raise ConfigError(f"breakpoints must be 4 strictly increasing positions, got {breakpoints}")
    n = int(nodes_per_region)
    if n < 2:
        raise ConfigError("nodes_per_region must be >= 2")

    cells = []
    for region in Region:
        a, b = bp[region], bp[region + 1]
        h = (b - a) / (n - 1)
        for i in range(n):
            x = a + i * h
            left = a if i == 0 else x - h / 2.0
            right = b if i == n - 1 else x + h / 2.0
            cells.append(
                Cell(
                    index=len(cells),
                    center=0.5 * (left + right),
                    measure_mK=right - left,
                    region=region,
                    node=x,
                )
            )

    faces = []
    faces_of_cell = [[] for _ in cells]

    def add_face(kind, k, l, position, d):
        face = Face(
            index=len(faces),
            kind=kind,
            cell_K=k,
            cell_L=l,
            position=position,
            measure_msigma=1.0,
            distance_dsigma=d,
            transmissibility=1.0 / d,
            in_intrinsic_interior=(
                kind == FaceKind.INTERIOR
                and cells[k].region == Region.INTRINSIC
                and cells[l].region == Region.INTRINSIC
            ),
        )
        faces.append(face)
        faces_of_cell[k].append(face.index)
        if l >= 0:
            faces_of_cell[l].append(face.index)

    add_face(FaceKind.DIRICHLET, 0, -1, bp[0], cells[0].center - bp[0])
    for k in range(len(cells) - 1):
        left_cell, right_cell = cells[k], cells[k + 1]
        if left_cell.region == right_cell.region:
            position = 0.5 * (left_cell.node + right_cell.node)
        else:
            position = bp[int(right_cell.region)]
        add_face(FaceKind.INTERIOR, k, k + 1, position, right_cell.center - left_cell.center)
    last = len(cells) - 1
    add_face(FaceKind.DIRICHLET, last, -1, bp[3], bp[3] - cells[last].center)

    return Mesh(
        breakpoints=bp,
        nodes_per_region=n,
        cells=cells,
        faces=faces,
        faces_of_cell=faces_of_cell,
    )


def project_to_coarser(fine: Mesh, coarse: Mesh, values_on_fine):
    """Sample a fine-mesh field at the coarse collocation points.

    Regions are interpolated independently (fields may kink or jump at
    layer interfaces).  Piecewise-linear interpolation through the fine
    collocation values is exact at shared generating nodes and for
    linear fields, matching the nested-refinement comparison used by the
    convergence study.  Accepts full-length or intrinsic-only vectors.
    """
    if not np.allclose(fine.breakpoints, coarse.breakpoints):
        raise MeshError("meshes cover different domains")
    if (fine.nodes_per_region - 1) % (coarse.nodes_per_region - 1) != 0:
        raise MeshError(
            f"not a nested refinement: {fine.nodes_per_region} vs {coarse.nodes_per_region} nodes per region"
        )
    v = np.asarray(values_on_fine, dtype=float)
    full = v.shape == (fine.n_cells,)
    if full:
        regions = list(Region)
        fine_region, coarse_region = fine.cell_region, coarse.cell_region
        fine_x, coarse_x = fine.cell_center, coarse.cell_center
        out = np.empty(coarse.n_cells)
    elif v.shape == (fine.n_intr,):
        regions = [Region.INTRINSIC]
        fine_region = fine.cell_region[fine.intr_cells]
        coarse_region = coarse.cell_region[coarse.intr_cells]
        fine_x = fine.cell_center[fine.intr_cells]
        coarse_x = coarse.cell_center[coarse.intr_cells]
        out = np.empty(coarse.n_intr)
    else:
        raise MeshError(f"field length {v.shape} matches neither cells nor intrinsic cells")
    for r in regions:
        fm = fine_region == int(r)
        cm = coarse_region == int(r)
        out[cm] = np.interp(coarse_x[cm], fine_x[fm], v[fm])
    return out
