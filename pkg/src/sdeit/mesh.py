"""Triangular FE meshes with electrode boundary groups.

Builds structured disk meshes with equispaced boundary electrodes, loads and
saves meshes against a JSON schema, maps node coordinates into the normalized
square [-1, 1]^2, and rasterizes nodal fields onto pixel grids.

Disk meshes are generated as concentric rings whose node counts are multiples
of the electrode count, so the mesh maps exactly onto itself under rotation by
one electrode spacing (and under reflection). Several solver symmetry
properties rely on this.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DimensionMismatchError,
    MeshInvariantError,
    MeshLayoutError,
    MeshParseError,
)

_DEGENERATE_REL_AREA = 1e-14


@dataclass
class Mesh:
    """2-D triangular mesh with per-electrode boundary edge groups.

    Attributes
    ----------
    nodes : (n_nodes, 2) float array
        Node coordinates in cm.
    elements : (n_elements, 3) int array
        Node-index triples, counter-clockwise.
    electrodes : list of (n_edges, 2) int arrays
        One boundary-edge group per electrode; edges are node-index pairs.
    domain_kind : str
        "disk" or "polygon"; informational only.
    """

    nodes: np.ndarray
    elements: np.ndarray
    electrodes: list[np.ndarray]
    domain_kind: str = "polygon"

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]

    @property
    def n_electrodes(self) -> int:
        return len(self.electrodes)

    def __eq__(self, other) -> bool:
        # Geometry and electrode groups define identity; domain_kind is derived.
        if not isinstance(other, Mesh):
            return NotImplemented
        return (
            self.nodes.shape == other.nodes.shape
            and np.array_equal(self.nodes, other.nodes)
            and np.array_equal(self.elements, other.elements)
            and len(self.electrodes) == len(other.electrodes)
            and all(np.array_equal(a, b) for a, b in zip(self.electrodes, other.electrodes))
        )


@dataclass
class NormalizedCoords:
    """Points in the normalized square [-1, 1]^2.

    source is "fe-nodes" for mesh nodes or "grid" for a row-major H x W lattice.
    """

    points: np.ndarray
    source: str


@dataclass
class GridImage:
    """H x W scalar raster over [-1, 1]^2, row-major, row i at y = -1 + (i+0.5)*2/H.

    mask is True where the pixel center lies inside the measurement domain.
    value_range records the physical (lo, hi) when values were normalized.
    """

    values: np.ndarray
    mask: np.ndarray = field(default=None)  # type: ignore[assignment]
    value_range: tuple[float, float] | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise DimensionMismatchError("grid values must be a 2-D array")
        if self.mask is None:
            self.mask = np.ones(self.values.shape, dtype=bool)
        else:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != self.values.shape:
                raise DimensionMismatchError("mask shape differs from values shape")
        if self.value_range is not None:
            lo, hi = self.value_range
            if not lo <= hi:
                raise MeshInvariantError(f"recorded range has lo > hi: ({lo}, {hi})")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


def boundary_edges(mesh: Mesh) -> set[tuple[int, int]]:
    """Undirected edges adjacent to exactly one element."""
    counts: dict[tuple[int, int], int] = {}
    for tri in mesh.elements:
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            key = (int(min(a, b)), int(max(a, b)))
            counts[key] = counts.get(key, 0) + 1
    return {e for e, c in counts.items() if c == 1}


def signed_areas(nodes: np.ndarray, elements: np.ndarray) -> np.ndarray:
    p = nodes[elements]
    return 0.5 * (
        (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
        - (p[:, 1, 1] - p[:, 0, 1]) * (p[:, 2, 0] - p[:, 0, 0])
    )


def validate_mesh(mesh: Mesh) -> None:
    """Check every Mesh invariant; raises MeshInvariantError naming the first offender."""
    nodes, elements = mesh.nodes, mesh.elements
    if nodes.ndim != 2 or nodes.shape[1] != 2:
        raise MeshInvariantError("nodes must be an (n, 2) array")
    if not np.all(np.isfinite(nodes)):
        raise MeshInvariantError("node coordinates contain non-finite values")
    if elements.ndim != 2 or elements.shape[1] != 3:
        raise MeshInvariantError("elements must be an (m, 3) array")

    n = nodes.shape[0]
    bad = np.nonzero((elements < 0) | (elements >= n))
    if bad[0].size:
        t = int(bad[0][0])
        raise MeshInvariantError(
            f"element {t} references node {int(elements[bad[0][0], bad[1][0]])} "
            f"but the mesh has {n} nodes"
        )

    areas = signed_areas(nodes, elements)
    scale = float(np.max(np.abs(nodes))) or 1.0
    small = np.nonzero(areas <= _DEGENERATE_REL_AREA * scale**2)[0]
    if small.size:
        t = int(small[0])
        raise MeshInvariantError(
            f"element {t} has non-positive area {areas[t]:.3e} (orientation or degeneracy)"
        )

    if len(mesh.electrodes) < 2:
        raise MeshInvariantError(f"mesh has {len(mesh.electrodes)} electrode groups, need >= 2")

    bedges = boundary_edges(mesh)
    seen: dict[tuple[int, int], int] = {}
    for q, group in enumerate(mesh.electrodes):
        g = np.asarray(group)
        if g.size == 0:
            raise MeshInvariantError(f"electrode {q} has no edges")
        if g.ndim != 2 or g.shape[1] != 2:
            raise MeshInvariantError(f"electrode {q} edges must be index pairs")
        for i, j in g:
            key = (int(min(i, j)), int(max(i, j)))
            if key not in bedges:
                raise MeshInvariantError(
                    f"electrode {q} edge ({int(i)}, {int(j)}) is not on the domain boundary"
                )
            if key in seen:
                raise MeshInvariantError(
                    f"electrodes {seen[key]} and {q} share edge ({key[0]}, {key[1]})"
                )
            seen[key] = q


def _stitch_rings(inner_idx, inner_ang, outer_idx, outer_ang):
    """Triangulate the strip between two angular chains (sentinel-terminated)."""
    tris = []
    i = j = 0
    m_a = len(inner_idx) - 1
    m_b = len(outer_idx) - 1
    while i < m_a or j < m_b:
        advance_inner = j == m_b or (i < m_a and inner_ang[i + 1] <= outer_ang[j + 1])
        if advance_inner:
            tris.append((inner_idx[i], outer_idx[j], inner_idx[i + 1]))
            i += 1
        else:
            tris.append((inner_idx[i], outer_idx[j], outer_idx[j + 1]))
            j += 1
    return tris


def _disk_layout(radius, n_electrodes, electrode_width, n_rings):
    """Per-ring sector node angle lists for one sector; boundary ring is electrode-aligned.

    Returns (ring_locals, boundary_span) where ring_locals[k] is the array of
    sector-local angles for ring k+1 (k = 0 .. n_rings-1) and boundary_span is
    (first_electrode_local_index, edges_per_electrode).
    """
    sector = 2.0 * np.pi / n_electrodes
    gamma = electrode_width / radius
    delta = (radius / n_rings) / radius  # target angular spacing on boundary

    ring_locals = []
    for k in range(1, n_rings):
        m_k = max(1, int(round(2.0 * np.pi * k / n_electrodes)))
        stagger = 0.5 * (k % 2)
        ring_locals.append((np.arange(m_k) + stagger) * sector / m_k)

    half_gap = 0.5 * (sector - gamma)
    n_e = max(1, int(round(gamma / delta)))
    n_g = max(1, int(round(half_gap / delta)))
    left = np.arange(n_g) * half_gap / n_g
    elec = half_gap + np.arange(n_e) * gamma / n_e
    right = half_gap + gamma + np.arange(n_g) * half_gap / n_g
    ring_locals.append(np.concatenate([left, elec, right]))
    return ring_locals, (n_g, n_e)


def _disk_element_count(n_electrodes, ring_locals):
    counts = [n_electrodes * len(loc) for loc in ring_locals]
    total = counts[0]  # center fan
    for a, b in zip(counts[:-1], counts[1:]):
        total += a + b
    return total


def make_disk_mesh(
    radius: float,
    n_electrodes: int,
    electrode_width: float,
    target_elements: int,
) -> Mesh:
    """Structured disk mesh with equispaced boundary electrodes.

    Parameters
    ----------
    radius : float
        Disk radius in cm.
    n_electrodes : int
        Number of electrodes (>= 2), equispaced on the boundary.
    electrode_width : float
        Arc width of each electrode in cm.
    target_elements : int
        Requested element count; the result lands within about 20 %.

    Raises
    ------
    MeshLayoutError
        If the electrodes cannot fit on the boundary.
    """
    if radius <= 0:
        raise MeshLayoutError(f"radius must be positive, got {radius}")
    if n_electrodes < 2:
        raise MeshLayoutError(f"need at least 2 electrodes, got {n_electrodes}")
    if electrode_width <= 0:
        raise MeshLayoutError(f"electrode width must be positive, got {electrode_width}")
    circumference = 2.0 * np.pi * radius
    if n_electrodes * electrode_width >= circumference:
        raise MeshLayoutError(
            f"total electrode width {n_electrodes * electrode_width:.3f} cm does not fit "
            f"on a boundary of length {circumference:.3f} cm"
        )

    # Pick the ring count whose element total is closest to the request.
    guess = max(1, int(round(np.sqrt(target_elements / 6.0))))
    best = None
    for n_rings in range(max(1, guess - 3), guess + 5):
        layout, _ = _disk_layout(radius, n_electrodes, electrode_width, n_rings)
        count = _disk_element_count(n_electrodes, layout)
        if best is None or abs(count - target_elements) < abs(best[1] - target_elements):
            best = (n_rings, count)
    n_rings = best[0]

    ring_locals, (n_g, n_e) = _disk_layout(radius, n_electrodes, electrode_width, n_rings)
    sector = 2.0 * np.pi / n_electrodes

    nodes = [(0.0, 0.0)]
    ring_index: list[np.ndarray] = []
    ring_angle: list[np.ndarray] = []
    for k, loc in enumerate(ring_locals, start=1):
        r_k = radius * k / n_rings
        ang = np.concatenate([loc + s * sector for s in range(n_electrodes)])
        idx = np.arange(len(nodes), len(nodes) + ang.size)
        nodes.extend(zip(r_k * np.cos(ang), r_k * np.sin(ang)))
        ring_index.append(idx)
        ring_angle.append(ang)

    tris = []
    first = ring_index[0]
    for j in range(first.size):
        tris.append((0, first[j], first[(j + 1) % first.size]))
    for k in range(len(ring_index) - 1):
        ia = np.append(ring_index[k], ring_index[k][0])
        aa = np.append(ring_angle[k], ring_angle[k][0] + 2.0 * np.pi)
        ib = np.append(ring_index[k + 1], ring_index[k + 1][0])
        ab = np.append(ring_angle[k + 1], ring_angle[k + 1][0] + 2.0 * np.pi)
        # Stitch sector by sector so connectivity is exactly N_e-periodic.
        m_a = ring_index[k].size // n_electrodes
        m_b = ring_index[k + 1].size // n_electrodes
        for s in range(n_electrodes):
            sl_a = slice(s * m_a, (s + 1) * m_a + 1)
            sl_b = slice(s * m_b, (s + 1) * m_b + 1)
            tris.extend(_stitch_rings(ia[sl_a], aa[sl_a], ib[sl_b], ab[sl_b]))

    nodes_arr = np.array(nodes, dtype=float)
    elements = np.array(tris, dtype=np.int64)
    areas = signed_areas(nodes_arr, elements)
    flip = areas < 0
    elements[flip] = elements[flip][:, [0, 2, 1]]

    m_b = ring_index[-1].size // n_electrodes
    bnd = ring_index[-1]
    electrodes = []
    for q in range(n_electrodes):
        start = q * m_b + n_g
        pairs = [(int(bnd[start + t]), int(bnd[start + t + 1])) for t in range(n_e)]
        electrodes.append(np.array(pairs, dtype=np.int64))

    mesh = Mesh(nodes_arr, elements, electrodes, domain_kind="disk")
    validate_mesh(mesh)
    return mesh


def save_mesh(mesh: Mesh, path) -> None:
    """Write the mesh JSON schema: nodes, elements, electrodes, units (cm)."""
    doc = {
        "nodes": [[float(x), float(y)] for x, y in mesh.nodes],
        "elements": [[int(a), int(b), int(c)] for a, b, c in mesh.elements],
        "electrodes": [[[int(i), int(j)] for i, j in grp] for grp in mesh.electrodes],
        "units": "cm",
    }
    Path(path).write_text(json.dumps(doc))


def load_mesh(path) -> Mesh:
    """Load and validate a mesh JSON file.

    Triangle orientation is normalized to counter-clockwise; loading, saving
    and loading again is value-identical.
    """
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise MeshParseError(f"cannot read mesh file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise MeshParseError(f"mesh file {path} is not valid JSON: {exc}") from exc

    for key in ("nodes", "elements", "electrodes", "units"):
        if key not in doc:
            raise MeshParseError(f"mesh file {path} is missing key '{key}'")
    if doc["units"] != "cm":
        raise MeshParseError(f"unsupported units {doc['units']!r}; expected 'cm'")
    try:
        nodes = np.array(doc["nodes"], dtype=float)
        elements = np.array(doc["elements"], dtype=np.int64)
        electrodes = [np.array(grp, dtype=np.int64).reshape(-1, 2) for grp in doc["electrodes"]]
    except (TypeError, ValueError) as exc:
        raise MeshParseError(f"mesh file {path} has malformed arrays: {exc}") from exc
    if elements.size and (elements.ndim != 2 or elements.shape[1] != 3):
        raise MeshParseError(f"mesh file {path}: elements must be index triples")

    if elements.size:
        valid = np.all((elements >= 0) & (elements < nodes.shape[0]))
        if valid:  # orientation fix needs in-range indices; validate reports otherwise
            areas = signed_areas(nodes, elements)
            flip = areas < 0
            elements[flip] = elements[flip][:, [0, 2, 1]]

    mesh = Mesh(nodes, elements, electrodes, domain_kind="polygon")
    validate_mesh(mesh)
    if _looks_like_disk(mesh):
        mesh.domain_kind = "disk"
    return mesh


def _looks_like_disk(mesh: Mesh) -> bool:
    bnd = sorted({i for e in boundary_edges(mesh) for i in e})
    pts = mesh.nodes[bnd]
    center = pts.mean(axis=0)
    r = np.hypot(pts[:, 0] - center[0], pts[:, 1] - center[1])
    return bool(r.max() - r.min() < 0.01 * r.mean())


def normalization_transform(mesh: Mesh) -> tuple[np.ndarray, float]:
    """Center and isotropic scale mapping the mesh bounding box into [-1, 1]^2.

    The scale is half the larger bounding-box extent, so aspect ratio is kept.
    """
    lo = mesh.nodes.min(axis=0)
    hi = mesh.nodes.max(axis=0)
    center = 0.5 * (lo + hi)
    scale = float(0.5 * np.max(hi - lo))
    if scale <= 0:
        raise MeshInvariantError("mesh bounding box has zero extent")
    return center, scale


def normalized_node_coords(mesh: Mesh) -> NormalizedCoords:
    center, scale = normalization_transform(mesh)
    pts = (mesh.nodes - center) / scale
    return NormalizedCoords(points=pts, source="fe-nodes")


def grid_coords(height: int, width: int) -> NormalizedCoords:
    """Row-major H x W lattice of pixel centers over [-1, 1]^2."""
    if height < 2 or width < 2:
        raise DimensionMismatchError("grid must be at least 2 x 2")
    xs = -1.0 + (np.arange(width) + 0.5) * 2.0 / width
    ys = -1.0 + (np.arange(height) + 0.5) * 2.0 / height
    xx, yy = np.meshgrid(xs, ys)
    return NormalizedCoords(points=np.column_stack([xx.ravel(), yy.ravel()]), source="grid")


def rasterize_field(
    mesh: Mesh,
    field_values: np.ndarray,
    width: int,
    height: int,
    background: float = 0.0,
) -> GridImage:
    """Sample a nodal field onto an H x W grid over [-1, 1]^2.

    Pixels whose centers fall inside the mesh get the barycentric interpolation
    of the nodal values; the rest get `background` and mask False.
    """
    field_values = np.asarray(field_values, dtype=float)
    if field_values.shape != (mesh.n_nodes,):
        raise DimensionMismatchError(
            f"field has {field_values.shape} values for a mesh with {mesh.n_nodes} nodes"
        )
    if width < 2 or height < 2:
        raise DimensionMismatchError("raster must be at least 2 x 2")

    pts = normalized_node_coords(mesh).points
    xs = -1.0 + (np.arange(width) + 0.5) * 2.0 / width
    ys = -1.0 + (np.arange(height) + 0.5) * 2.0 / height

    values = np.full((height, width), float(background))
    mask = np.zeros((height, width), dtype=bool)
    tol = -1e-12

    for tri in mesh.elements:
        v = pts[tri]
        jmin = max(0, int(np.floor((v[:, 0].min() + 1.0) * width / 2.0 - 0.5)))
        jmax = min(width - 1, int(np.ceil((v[:, 0].max() + 1.0) * width / 2.0 - 0.5)))
        imin = max(0, int(np.floor((v[:, 1].min() + 1.0) * height / 2.0 - 0.5)))
        imax = min(height - 1, int(np.ceil((v[:, 1].max() + 1.0) * height / 2.0 - 0.5)))
        if jmin > jmax or imin > imax:
            continue
        px, py = np.meshgrid(xs[jmin : jmax + 1], ys[imin : imax + 1])
        d = (v[1, 0] - v[0, 0]) * (v[2, 1] - v[0, 1]) - (v[2, 0] - v[0, 0]) * (v[1, 1] - v[0, 1])
        l1 = ((px - v[0, 0]) * (v[2, 1] - v[0, 1]) - (py - v[0, 1]) * (v[2, 0] - v[0, 0])) / d
        l2 = ((py - v[0, 1]) * (v[1, 0] - v[0, 0]) - (px - v[0, 0]) * (v[1, 1] - v[0, 1])) / d
        l0 = 1.0 - l1 - l2
        inside = (l0 >= tol) & (l1 >= tol) & (l2 >= tol)
        if not inside.any():
            continue
        f = l0 * field_values[tri[0]] + l1 * field_values[tri[1]] + l2 * field_values[tri[2]]
        block_v = values[imin : imax + 1, jmin : jmax + 1]
        block_m = mask[imin : imax + 1, jmin : jmax + 1]
        block_v[inside] = f[inside]
        block_m[inside] = True

    return GridImage(values=values, mask=mask)


def save_grid(grid: GridImage, path) -> None:
    doc = {
        "width": grid.width,
        "height": grid.height,
        "values": [float(v) for v in grid.values.ravel()],
        "mask": [bool(m) for m in grid.mask.ravel()],
    }
    if grid.value_range is not None:
        doc["range"] = [float(grid.value_range[0]), float(grid.value_range[1])]
    Path(path).write_text(json.dumps(doc))


def load_grid(path) -> GridImage:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise MeshParseError(f"cannot read grid file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise MeshParseError(f"grid file {path} is not valid JSON: {exc}") from exc
    try:
        h, w = int(doc["height"]), int(doc["width"])
        values = np.array(doc["values"], dtype=float).reshape(h, w)
        mask = None
        if "mask" in doc:
            mask = np.array(doc["mask"], dtype=bool).reshape(h, w)
        rng = tuple(doc["range"]) if "range" in doc else None
    except (KeyError, TypeError, ValueError) as exc:
        raise MeshParseError(f"grid file {path} is malformed: {exc}") from exc
    return GridImage(values=values, mask=mask, value_range=rng)
