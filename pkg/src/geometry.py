"""
Domain Geometry
Ring-structured triangular meshes of disk and thorax-like ellipse domains, boundary electrodes,
and the element <-> pixel mapping used for images
"""

import logging
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from matplotlib.tri import Triangulation
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .artifacts import load_blob, read_json, save_blob, write_json
from .errors import DimensionMismatchError, MeshError, MeshQualityError

logger = logging.getLogger(__name__)

# Angle of the first electrode's center, counterclockwise from +x
FIRST_ELECTRODE_ANGLE = -math.pi / 2
# Target tangential/radial spacing ratio of the ring construction
_TANGENTIAL_STRETCH = 1.1
MIN_ANGLE_DEG = 15.0


def _readonly(array: np.ndarray) -> np.ndarray:
    array = np.ascontiguousarray(array)
    array.setflags(write=False)
    return array


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True, eq=False)
class Mesh:
    """Triangulated 2D domain.

    Nodes are stored as (n_nodes, 2) coordinates, elements as (n_elements, 3) node indices with
    positive orientation, boundary edges as (n_boundary, 2) node pairs in counterclockwise order.
    """

    nodes: np.ndarray
    elements: np.ndarray
    boundary_edges: np.ndarray
    semi_axes: Tuple[float, float]

    def __post_init__(self):
        object.__setattr__(self, "nodes", _readonly(np.asarray(self.nodes, dtype=np.float64)))
        object.__setattr__(self, "elements", _readonly(np.asarray(self.elements, dtype=np.int64)))
        object.__setattr__(self, "boundary_edges", _readonly(np.asarray(self.boundary_edges, dtype=np.int64)))

    @property
    def n_nodes(self) -> int:
        return int(self.nodes.shape[0])

    @property
    def n_elements(self) -> int:
        return int(self.elements.shape[0])

    @cached_property
    def signed_areas(self) -> np.ndarray:
        p = self.nodes[self.elements]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return _readonly(0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]))

    @property
    def areas(self) -> np.ndarray:
        return np.abs(self.signed_areas)

    @cached_property
    def centroids(self) -> np.ndarray:
        return _readonly(self.nodes[self.elements].mean(axis=1))

    @cached_property
    def basis_gradients(self) -> np.ndarray:
        """Constant gradients of the three P1 basis functions per element, shape (n_elements, 3, 2)"""
        p = self.nodes[self.elements]
        # Gradient of the basis function at vertex i is the rotated opposite edge over twice the area
        e0 = p[:, 2] - p[:, 1]
        e1 = p[:, 0] - p[:, 2]
        e2 = p[:, 1] - p[:, 0]
        edges = np.stack([e0, e1, e2], axis=1)
        rotated = np.stack([-edges[..., 1], edges[..., 0]], axis=-1)
        return _readonly(rotated / (2.0 * self.signed_areas)[:, None, None])

    @cached_property
    def boundary_nodes(self) -> np.ndarray:
        return _readonly(np.unique(self.boundary_edges))

    @cached_property
    def element_adjacency(self) -> np.ndarray:
        """Pairs (a, b), a < b, of elements sharing an interior edge"""
        local = np.array([[0, 1], [1, 2], [2, 0]])
        edges = np.sort(self.elements[:, local].reshape(-1, 2), axis=1)
        owners = np.repeat(np.arange(self.n_elements), 3)
        order = np.lexsort((edges[:, 1], edges[:, 0]))
        edges, owners = edges[order], owners[order]
        same = np.all(edges[1:] == edges[:-1], axis=1)
        pairs = np.stack([owners[:-1][same], owners[1:][same]], axis=1)
        pairs = np.sort(pairs, axis=1)
        return _readonly(pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))])

    @cached_property
    def boundary_adjacent_elements(self) -> np.ndarray:
        """Elements with at least one node on the boundary"""
        on_boundary = np.zeros(self.n_nodes, dtype=bool)
        on_boundary[self.boundary_nodes] = True
        return _readonly(np.flatnonzero(on_boundary[self.elements].any(axis=1)))

    def min_angles(self) -> np.ndarray:
        """Smallest interior angle of every element, in degrees"""
        p = self.nodes[self.elements]
        angles = []
        for i in range(3):
            u = p[:, (i + 1) % 3] - p[:, i]
            v = p[:, (i + 2) % 3] - p[:, i]
            cos = np.einsum("ij,ij->i", u, v) / (np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1))
            angles.append(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))))
        return np.min(np.stack(angles, axis=1), axis=1)

    def is_connected(self) -> bool:
        return count_components(self, np.ones(self.n_elements, dtype=bool)) == 1

    def perimeter(self) -> float:
        return float(self.edge_lengths(np.arange(len(self.boundary_edges))).sum())

    def edge_lengths(self, edge_ids: np.ndarray) -> np.ndarray:
        e = self.boundary_edges[np.asarray(edge_ids, dtype=np.int64)]
        return np.linalg.norm(self.nodes[e[:, 1]] - self.nodes[e[:, 0]], axis=1)


@dataclass(frozen=True, eq=False)
class ElectrodeLayout:
    """E electrodes as contiguous boundary-edge index sets, counterclockwise, cyclic"""

    E: int
    electrodes: Tuple[np.ndarray, ...]
    coverage_fraction: float

    def __post_init__(self):
        object.__setattr__(
            self, "electrodes", tuple(_readonly(np.asarray(e, dtype=np.int64)) for e in self.electrodes)
        )

    def electrode(self, i: int) -> np.ndarray:
        """Edges of electrode i (0-based, taken modulo E)"""
        return self.electrodes[i % self.E]

    def electrode_nodes(self, mesh: Mesh) -> List[np.ndarray]:
        return [np.unique(mesh.boundary_edges[edges]) for edges in self.electrodes]

    def covered_length(self, mesh: Mesh) -> float:
        return float(sum(mesh.edge_lengths(edges).sum() for edges in self.electrodes))


@dataclass(frozen=True, eq=False)
class PixelGrid:
    """Square pixel grid over the domain's bounding square.

    Row 0 is the top of the image (largest y). Pixels whose center lies outside the domain have
    elem_of_pixel = -1 and are masked.
    """

    width: int
    height: int
    extent: float
    domain_mask: np.ndarray
    elem_of_pixel: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "domain_mask", _readonly(np.asarray(self.domain_mask, dtype=bool)))
        object.__setattr__(self, "elem_of_pixel", _readonly(np.asarray(self.elem_of_pixel, dtype=np.int64)))

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.height, self.width)

    def pixel_centers(self) -> Tuple[np.ndarray, np.ndarray]:
        return _pixel_centers(self.width, self.height, self.extent)


# ---------------------------------------------------------------------------
# Mesh construction
# ---------------------------------------------------------------------------


@dataclass
class _Ring:
    radius: float
    local_u: np.ndarray  # sorted angular positions within one period window, in [0, 1)
    first_index: int = 0

    @property
    def per_period(self) -> int:
        return len(self.local_u)


def _inner_ring_count(radius: float, h: float, E: int) -> int:
    return max(1, _round_half_up(2.0 * math.pi * radius / (_TANGENTIAL_STRETCH * h * E)))


def _ring_schedule(n_rings: int, E: int) -> List[Tuple[float, int]]:
    """(radius, nodes per period) from the boundary inwards, on the unit disk"""
    h = 1.0 / n_rings
    schedule = []
    r = 1.0
    while True:
        q = _inner_ring_count(r, h, E)
        schedule.append((r, q))
        if q == 1 and r <= 1.5 * h:
            break
        r -= min(h, 2.0 * math.pi * r / (q * E))
        if r <= 0.0:
            raise MeshError(f"ring schedule collapsed for n_rings={n_rings}, E={E}")
    return schedule


def _boundary_split(q_outer: int, coverage: float) -> Tuple[int, int]:
    w = max(1, _round_half_up(coverage * q_outer))
    g = max(1, q_outer - w)
    return w, g


def _count_elements(schedule: List[Tuple[float, int]], coverage: float, E: int) -> int:
    counts = [q for _, q in schedule]
    w, g = _boundary_split(counts[0], coverage)
    counts[0] = w + g
    strips = sum(E * (counts[i] + counts[i + 1]) for i in range(len(counts) - 1))
    return strips + E * counts[-1]


def _zipper(inner: _Ring, outer: _Ring, E: int) -> List[Tuple[int, int, int]]:
    """Stitch two rings with the advancing-front rule, identically in every period"""
    qi, qo = inner.per_period, outer.per_period
    ui = np.append(inner.local_u, 1.0 + inner.local_u[0])
    uo = np.append(outer.local_u, 1.0 + outer.local_u[0])
    local: List[Tuple[str, int, int]] = []
    a = b = 0
    while a < qi or b < qo:
        if a == qi:
            advance_inner = False
        elif b == qo:
            advance_inner = True
        else:
            advance_inner = ui[a + 1] <= uo[b + 1]
        if advance_inner:
            local.append(("i", a, b))
            a += 1
        else:
            local.append(("o", a, b))
            b += 1

    n_in, n_out = qi * E, qo * E
    triangles = []
    for e in range(E):
        for kind, a, b in local:
            ia = inner.first_index + (e * qi + a) % n_in
            ob = outer.first_index + (e * qo + b) % n_out
            if kind == "i":
                ia1 = inner.first_index + (e * qi + a + 1) % n_in
                triangles.append((ia, ia1, ob))
            else:
                ob1 = outer.first_index + (e * qo + b + 1) % n_out
                triangles.append((ia, ob, ob1))
    return triangles


def _build_ring_mesh(
    semi_axes: Tuple[float, float], target_elements: int, E: int, coverage_fraction: float
) -> Tuple[Mesh, ElectrodeLayout]:
    if target_elements < 100:
        raise MeshError(f"target_elements must be >= 100, got {target_elements}")
    if E < 4:
        raise MeshError(f"need at least 4 electrodes, got {E}")
    if not 0.0 < coverage_fraction < 1.0:
        raise MeshError(f"coverage_fraction must lie in (0, 1), got {coverage_fraction}")

    # Ring counts within 30% of the target, closest first
    candidates: List[Tuple[int, int]] = []
    closest: Optional[int] = None
    for n_rings in range(1, 400):
        count = _count_elements(_ring_schedule(n_rings, E), coverage_fraction, E)
        if closest is None or abs(count - target_elements) < abs(closest - target_elements):
            closest = count
        if abs(count - target_elements) <= 0.3 * target_elements:
            candidates.append((abs(count - target_elements), n_rings))
        if count > 2 * target_elements:
            break
    if not candidates:
        raise MeshError(f"cannot reach {target_elements} elements with E={E} (closest {closest})")

    best_angle = 0.0
    for _, n_rings in sorted(candidates):
        mesh, layout = _ring_mesh(n_rings, semi_axes, E, coverage_fraction)
        min_angle = float(mesh.min_angles().min())
        if min_angle > MIN_ANGLE_DEG:
            logger.info(
                f"Built ring mesh: {mesh.n_elements} elements, {mesh.n_nodes} nodes, E={E}, "
                f"{n_rings} rings, min angle {min_angle:.1f} deg"
            )
            return mesh, layout
        logger.debug(f"{n_rings} rings give min angle {min_angle:.1f} deg, trying the next ring count")
        best_angle = max(best_angle, min_angle)
    logger.error(f"No ring count near {target_elements} elements keeps angles above {MIN_ANGLE_DEG} deg (E={E})")
    raise MeshQualityError(f"mesh quality bound of {MIN_ANGLE_DEG} deg not met for E={E}", best_angle)


def _ring_mesh(
    n_rings: int, semi_axes: Tuple[float, float], E: int, coverage_fraction: float
) -> Tuple[Mesh, ElectrodeLayout]:
    schedule = _ring_schedule(n_rings, E)
    q_outer = schedule[0][1]
    if coverage_fraction * q_outer < 0.5 or (1.0 - coverage_fraction) * q_outer < 0.5:
        raise MeshError(
            f"electrode arcs would overlap or vanish at this resolution "
            f"(coverage {coverage_fraction}, {q_outer} boundary edges per electrode period)"
        )
    w, g = _boundary_split(q_outer, coverage_fraction)

    # Boundary: electrode nodes at f = j*c/w, gap nodes at c + (1-c)*j/g, centered on the electrode
    c = coverage_fraction
    f = np.concatenate([np.arange(w + 1) * c / w, c + (1.0 - c) * np.arange(1, g) / g])
    boundary_u = np.sort(np.mod(f - c / 2.0, 1.0))

    rings = [_Ring(radius=r, local_u=np.arange(q) / q) for r, q in reversed(schedule[1:])]
    rings.append(_Ring(radius=1.0, local_u=boundary_u))

    index = 1  # node 0 is the center
    for ring in rings:
        ring.first_index = index
        index += ring.per_period * E

    unit = np.zeros((index, 2))
    for ring in rings:
        periods = np.repeat(np.arange(E), ring.per_period)
        u = np.tile(ring.local_u, E)
        theta = FIRST_ELECTRODE_ANGLE + 2.0 * math.pi * (periods + u) / E
        block = slice(ring.first_index, ring.first_index + ring.per_period * E)
        unit[block, 0] = ring.radius * np.cos(theta)
        unit[block, 1] = ring.radius * np.sin(theta)

    triangles: List[Tuple[int, int, int]] = []
    innermost = rings[0]
    n_inner = innermost.per_period * E
    for k in range(n_inner):
        triangles.append((0, innermost.first_index + k, innermost.first_index + (k + 1) % n_inner))
    for inner, outer in zip(rings[:-1], rings[1:]):
        triangles.extend(_zipper(inner, outer, E))

    nodes = unit * np.asarray(semi_axes)[None, :]
    elements = np.asarray(triangles, dtype=np.int64)
    p = nodes[elements]
    signed = (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1]) - (p[:, 1, 1] - p[:, 0, 1]) * (
        p[:, 2, 0] - p[:, 0, 0]
    )
    flip = signed < 0
    elements[flip] = elements[flip][:, [0, 2, 1]]

    outer = rings[-1]
    n_b = outer.per_period * E
    ring_nodes = outer.first_index + np.arange(n_b)
    boundary_edges = np.stack([ring_nodes, np.roll(ring_nodes, -1)], axis=1)

    # Electrode e spans period coordinate t in [e - c/2, e + c/2]; its edges are matched by midpoint
    t_nodes = np.repeat(np.arange(E), outer.per_period) + np.tile(boundary_u, E)
    t_next = np.roll(t_nodes, -1)
    t_next[-1] += E
    t_mid = 0.5 * (t_nodes + t_next)
    electrodes = []
    for e in range(E):
        offset = np.mod(t_mid - (e - c / 2.0), E)
        members = np.flatnonzero(offset < c)
        electrodes.append(members[np.argsort(offset[members])])

    mesh = Mesh(nodes=nodes, elements=elements, boundary_edges=boundary_edges, semi_axes=tuple(semi_axes))
    layout = ElectrodeLayout(E=E, electrodes=tuple(electrodes), coverage_fraction=coverage_fraction)
    return mesh, layout


def build_disk_mesh(
    radius: float = 1.0, target_elements: int = 800, E: int = 16, coverage_fraction: float = 0.5
) -> Tuple[Mesh, ElectrodeLayout]:
    """Build a disk mesh with E equally spaced electrodes.

    Working coordinates use radius 1. A unit-diameter domain (radius 0.5) gives the same topology
    scaled by one half, and 2D measurement frames and sensitivities do not change under uniform scaling,
    so every pipeline stage runs on the radius-1 disk.

    Args:
        radius: Disk radius
        target_elements: Desired element count (result lies within 30%)
        E: Number of electrodes
        coverage_fraction: Fraction of the boundary covered by electrodes

    Returns:
        (mesh, electrode layout)
    """
    if radius <= 0:
        raise MeshError(f"radius must be positive, got {radius}")
    return _build_ring_mesh((radius, radius), target_elements, E, coverage_fraction)


def build_thorax_mesh(
    aspect_ratio: float = 1.3,
    target_elements: int = 800,
    E: int = 16,
    coverage_fraction: float = 0.5,
    radius: float = 1.0,
) -> Tuple[Mesh, ElectrodeLayout]:
    """Build an ellipse mesh with horizontal semi-axis radius*aspect_ratio and vertical semi-axis radius"""
    if aspect_ratio < 1.0:
        raise MeshError(f"aspect_ratio must be >= 1, got {aspect_ratio}")
    if radius <= 0:
        raise MeshError(f"radius must be positive, got {radius}")
    return _build_ring_mesh((radius * aspect_ratio, radius), target_elements, E, coverage_fraction)


# ---------------------------------------------------------------------------
# Pixel grid
# ---------------------------------------------------------------------------


def _pixel_centers(width: int, height: int, extent: float) -> Tuple[np.ndarray, np.ndarray]:
    xs = -extent + (np.arange(width) + 0.5) * (2.0 * extent / width)
    ys = extent - (np.arange(height) + 0.5) * (2.0 * extent / height)
    return np.meshgrid(xs, ys)


def build_pixel_grid(mesh: Mesh, size: int, height: Optional[int] = None) -> PixelGrid:
    """Locate every pixel center in the mesh; pixels outside the domain are masked"""
    width = size
    height = height or size
    extent = float(max(mesh.semi_axes))
    X, Y = _pixel_centers(width, height, extent)
    finder = Triangulation(mesh.nodes[:, 0], mesh.nodes[:, 1], mesh.elements).get_trifinder()
    elem = np.asarray(finder(X.ravel(), Y.ravel()), dtype=np.int64).reshape(height, width)
    return PixelGrid(width=width, height=height, extent=extent, domain_mask=elem >= 0, elem_of_pixel=elem)


def rasterize(values_per_element: np.ndarray, grid: PixelGrid, n_elements: Optional[int] = None) -> np.ndarray:
    """Paint element values onto the pixel grid; pixels outside the domain are 0"""
    values = np.asarray(values_per_element, dtype=np.float64)
    if values.ndim != 1:
        raise DimensionMismatchError("element vector rank", 1, values.ndim)
    if n_elements is not None and values.shape[0] != n_elements:
        raise DimensionMismatchError("element vector", n_elements, values.shape[0])
    if values.shape[0] <= int(grid.elem_of_pixel.max(initial=-1)):
        raise DimensionMismatchError("element vector", int(grid.elem_of_pixel.max()) + 1, values.shape[0])
    image = np.zeros(grid.shape)
    image[grid.domain_mask] = values[grid.elem_of_pixel[grid.domain_mask]]
    return image


def sample_to_elements(image: np.ndarray, grid: PixelGrid, mesh: Mesh) -> np.ndarray:
    """Average the pixels of each element; elements without a pixel center take the pixel under their centroid"""
    image = np.asarray(image, dtype=np.float64)
    if image.shape != grid.shape:
        raise DimensionMismatchError("image pixels", grid.width * grid.height, int(image.size))
    owners = grid.elem_of_pixel[grid.domain_mask]
    sums = np.bincount(owners, weights=image[grid.domain_mask], minlength=mesh.n_elements)
    counts = np.bincount(owners, minlength=mesh.n_elements)
    values = np.zeros(mesh.n_elements)
    has = counts > 0
    values[has] = sums[has] / counts[has]

    if not has.all():
        dx = 2.0 * grid.extent / grid.width
        dy = 2.0 * grid.extent / grid.height
        cx = mesh.centroids[~has, 0]
        cy = mesh.centroids[~has, 1]
        cols = np.clip(np.floor((cx + grid.extent) / dx).astype(int), 0, grid.width - 1)
        rows = np.clip(np.floor((grid.extent - cy) / dy).astype(int), 0, grid.height - 1)
        values[~has] = image[rows, cols]
    return values


def count_components(mesh: Mesh, support: np.ndarray) -> int:
    """Connected components of the element subset `support` in the element adjacency graph"""
    support = np.asarray(support, dtype=bool)
    idx = np.flatnonzero(support)
    if idx.size == 0:
        return 0
    pairs = mesh.element_adjacency
    keep = support[pairs[:, 0]] & support[pairs[:, 1]]
    remap = -np.ones(mesh.n_elements, dtype=np.int64)
    remap[idx] = np.arange(idx.size)
    a, b = remap[pairs[keep, 0]], remap[pairs[keep, 1]]
    graph = coo_matrix((np.ones(a.size), (a, b)), shape=(idx.size, idx.size))
    n, _ = connected_components(graph, directed=False)
    return int(n)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def save_mesh(directory: Union[str, Path], mesh: Mesh, layout: ElectrodeLayout, grid_size: int) -> Path:
    """Write mesh.json plus node/element/edge blobs"""
    directory = Path(directory)
    electrode_edges = np.concatenate(layout.electrodes)
    manifest = {
        "n_nodes": mesh.n_nodes,
        "n_elements": mesh.n_elements,
        "n_boundary_edges": int(len(mesh.boundary_edges)),
        "semi_axes": list(mesh.semi_axes),
        "E": layout.E,
        "coverage_fraction": layout.coverage_fraction,
        "grid_size": grid_size,
        "electrode_offsets": np.cumsum([0] + [len(e) for e in layout.electrodes]).tolist(),
        "blobs": {
            "nodes": save_blob(directory / "nodes.f8", mesh.nodes, "f8"),
            "elements": save_blob(directory / "elements.u4", mesh.elements, "u4"),
            "boundary_edges": save_blob(directory / "boundary_edges.u4", mesh.boundary_edges, "u4"),
            "electrode_edges": save_blob(directory / "electrode_edges.u4", electrode_edges, "u4"),
        },
    }
    return write_json(directory / "mesh.json", manifest)


def load_mesh(directory: Union[str, Path]) -> Tuple[Mesh, ElectrodeLayout, int]:
    """Read a mesh written by save_mesh; returns (mesh, layout, grid_size)"""
    directory = Path(directory)
    manifest = read_json(directory / "mesh.json")
    blobs = manifest["blobs"]
    mesh = Mesh(
        nodes=load_blob(directory, blobs["nodes"]),
        elements=load_blob(directory, blobs["elements"]).astype(np.int64),
        boundary_edges=load_blob(directory, blobs["boundary_edges"]).astype(np.int64),
        semi_axes=tuple(manifest["semi_axes"]),
    )
    flat = load_blob(directory, blobs["electrode_edges"]).astype(np.int64)
    offsets: Sequence[int] = manifest["electrode_offsets"]
    electrodes = tuple(flat[offsets[i] : offsets[i + 1]] for i in range(manifest["E"]))
    layout = ElectrodeLayout(E=manifest["E"], electrodes=electrodes, coverage_fraction=manifest["coverage_fraction"])
    return mesh, layout, int(manifest["grid_size"])
