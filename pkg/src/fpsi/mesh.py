"""Conforming two-subdomain triangulations with a tagged internal interface.

A mesh partitions a polygonal domain into a free-flow region ("S") and a
porous region ("P") separated by an internal interface whose facets are
tagged ``sigma``.  Interface facets must be conforming: every sigma facet
is shared by exactly one S-cell and one P-cell.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

# Subdomain tags
SUBDOMAIN_S = "S"
SUBDOMAIN_P = "P"

# Facet tags.  gamma_s_n marks a do-nothing (zero traction) part of the
# free-flow boundary used by the channel geometry; the reference geometry
# only uses gamma_s.
TAG_GAMMA_S = "gamma_s"
TAG_GAMMA_S_N = "gamma_s_n"
TAG_GAMMA_P_D = "gamma_p_d"
TAG_GAMMA_P_N = "gamma_p_n"
TAG_SIGMA = "sigma"
TAG_INTERIOR = "interior"

BOUNDARY_TAGS = (TAG_GAMMA_S, TAG_GAMMA_S_N, TAG_GAMMA_P_D, TAG_GAMMA_P_N)
ALL_TAGS = BOUNDARY_TAGS + (TAG_SIGMA, TAG_INTERIOR)


class MeshError(ValueError):
    """Raised for invalid mesh topology, geometry, or tagging."""


@dataclass(frozen=True, eq=False)
class Mesh:
    """Immutable triangulation with subdomain and facet tags.

    Attributes
    ----------
    vertices : (V, 2) float array
    cells : (C, 3) int array, counterclockwise vertex order
    cell_tags : (C,) array of "S"/"P"
    edges : (E, 2) int array of sorted vertex pairs, lexicographic order
    edge_tags : (E,) array of facet tags (``interior`` for internal edges)
    edge_cells : (E, 2) int array of adjacent cell ids (-1 when absent)
    cell_edges : (C, 3) int array; local edge k joins cell vertices k, k+1
    """

    vertices: np.ndarray
    cells: np.ndarray
    cell_tags: np.ndarray
    edges: np.ndarray
    edge_tags: np.ndarray
    edge_cells: np.ndarray
    cell_edges: np.ndarray
    _areas: np.ndarray = field(repr=False, default=None)

    @property
    def num_vertices(self):
        return self.vertices.shape[0]

    @property
    def num_cells(self):
        return self.cells.shape[0]

    @property
    def num_edges(self):
        return self.edges.shape[0]

    def cell_areas(self):
        return self._areas

    def cells_in(self, subdomain):
        """Indices of cells carrying the given subdomain tag."""
        if subdomain == "both":
            return np.arange(self.num_cells)
        return np.flatnonzero(self.cell_tags == subdomain)

    def subdomain_area(self, subdomain):
        return float(self._areas[self.cells_in(subdomain)].sum())

    def edges_with_tag(self, tag):
        return np.flatnonzero(self.edge_tags == tag)

    def h_max(self):
        """Maximum cell diameter (longest edge over all cells)."""
        p = self.vertices
        lengths = np.linalg.norm(p[self.edges[:, 0]] - p[self.edges[:, 1]], axis=1)
        return float(lengths.max())


@dataclass(frozen=True, eq=False)
class InterfaceFacetPair:
    """One conforming interface facet with its two adjacent cells.

    ``normal_s`` points out of the S-side cell, ``normal_p = -normal_s``.
    The tangent is ``normal_s`` rotated by -90 degrees so that
    (tangent, normal_s) is a right-handed frame; interface data that is
    linear in the tangent must use the same convention.
    ``z_perm`` is the tangential permeability (kappa tangent) . tangent.
    """

    edge_id: int
    vertex_ids: tuple
    h_e: float
    normal_s: np.ndarray
    normal_p: np.ndarray
    tangent: np.ndarray
    cell_s: int
    cell_p: int
    z_perm: float


def _signed_area(p0, p1, p2):
    return 0.5 * ((p1[..., 0] - p0[..., 0]) * (p2[..., 1] - p0[..., 1])
                  - (p2[..., 0] - p0[..., 0]) * (p1[..., 1] - p0[..., 1]))


def _build_mesh(vertices, cells, cell_tags, edge_tag_of):
    """Assemble a validated Mesh from raw arrays.

    ``edge_tag_of`` maps a sorted vertex pair (a, b) to a facet tag for
    every non-interior edge; interior edges may be omitted.
    """
    vertices = np.ascontiguousarray(vertices, dtype=float)
    cells = np.ascontiguousarray(cells, dtype=np.int64)
    cell_tags = np.asarray(cell_tags)
    if vertices.ndim != 2 or vertices.shape[1] != 2:
        raise MeshError("vertices must be a (V, 2) array")
    if cells.ndim != 2 or cells.shape[1] != 3:
        raise MeshError("cells must be a (C, 3) array")

    # enforce counterclockwise orientation
    p = vertices
    areas = _signed_area(p[cells[:, 0]], p[cells[:, 1]], p[cells[:, 2]])
    flipped = areas < 0
    if flipped.any():
        cells = cells.copy()
        cells[flipped, 1], cells[flipped, 2] = cells[flipped, 2], cells[flipped, 1]
        areas = np.abs(areas)
    if np.any(areas <= 1e-15):
        raise MeshError("mesh contains a degenerate (zero-area) cell")

    # edge enumeration: sorted vertex pairs, lexicographic global order
    raw = np.concatenate([cells[:, [0, 1]], cells[:, [1, 2]], cells[:, [2, 0]]])
    raw_sorted = np.sort(raw, axis=1)
    edges, inverse = np.unique(raw_sorted, axis=0, return_inverse=True)
    cell_edges = inverse.reshape(3, -1).T.copy()

    num_edges = edges.shape[0]
    edge_cells = np.full((num_edges, 2), -1, dtype=np.int64)
    for local in range(3):
        for c in range(cells.shape[0]):
            e = cell_edges[c, local]
            if edge_cells[e, 0] == -1:
                edge_cells[e, 0] = c
            elif edge_cells[e, 1] == -1:
                edge_cells[e, 1] = c
            else:
                raise MeshError(f"edge {e} shared by more than two cells")

    edge_tags = np.array([TAG_INTERIOR] * num_edges, dtype=object)
    for e in range(num_edges):
        tag = edge_tag_of(int(edges[e, 0]), int(edges[e, 1]))
        if tag is not None:
            if tag not in ALL_TAGS:
                raise MeshError(f"unknown facet tag {tag!r}")
            edge_tags[e] = tag

    mesh = Mesh(vertices=vertices, cells=cells, cell_tags=cell_tags,
                edges=edges, edge_tags=edge_tags, edge_cells=edge_cells,
                cell_edges=cell_edges, _areas=np.asarray(areas, dtype=float))
    _validate(mesh)
    return mesh


def _validate(mesh):
    exterior = mesh.edge_cells[:, 1] == -1
    for e in range(mesh.num_edges):
        tag = mesh.edge_tags[e]
        if exterior[e]:
            if tag == TAG_INTERIOR:
                raise MeshError(f"boundary facet {e} carries no boundary tag")
            if tag == TAG_SIGMA:
                raise MeshError(f"interface facet {e} lies on the domain boundary")
        else:
            c0, c1 = mesh.edge_cells[e]
            t0, t1 = mesh.cell_tags[c0], mesh.cell_tags[c1]
            if tag == TAG_SIGMA:
                if {t0, t1} != {SUBDOMAIN_S, SUBDOMAIN_P}:
                    raise MeshError(
                        f"interface facet {e} must join one S-cell and one "
                        f"P-cell, found subdomains ({t0}, {t1})")
            elif tag == TAG_INTERIOR:
                if t0 != t1:
                    raise MeshError(
                        f"facet {e} separates subdomains {t0}/{t1} but is "
                        "not tagged as interface")
            else:
                raise MeshError(f"internal facet {e} carries boundary tag {tag!r}")


def interface_pairs(mesh, kappa=None):
    """All conforming interface facets with normals, tangents, and h_E.

    ``kappa`` is the permeability: a 2x2 array, a scalar, or a callable
    ``kappa(x, y) -> 2x2 array``; it defaults to the identity.  The
    tangential permeability Z is evaluated at the facet midpoint.
    """
    pairs = []
    p = mesh.vertices
    for e in mesh.edges_with_tag(TAG_SIGMA):
        a, b = (int(v) for v in mesh.edges[e])
        c0, c1 = (int(c) for c in mesh.edge_cells[e])
        if mesh.cell_tags[c0] == SUBDOMAIN_S:
            cs, cp = c0, c1
        else:
            cs, cp = c1, c0
        vec = p[b] - p[a]
        h_e = float(np.linalg.norm(vec))
        n = np.array([vec[1], -vec[0]]) / h_e
        centroid = p[mesh.cells[cs]].mean(axis=0)
        midpoint = 0.5 * (p[a] + p[b])
        if np.dot(n, midpoint - centroid) < 0:
            n = -n
        tangent = np.array([n[1], -n[0]])
        kap = _eval_kappa(kappa, midpoint)
        z = float(tangent @ kap @ tangent)
        if z <= 0:
            raise MeshError(f"non-positive tangential permeability on facet {e}")
        pairs.append(InterfaceFacetPair(
            edge_id=int(e), vertex_ids=(a, b), h_e=h_e,
            normal_s=n, normal_p=-n, tangent=tangent,
            cell_s=cs, cell_p=cp, z_perm=z))
    return pairs


def _eval_kappa(kappa, point):
    if kappa is None:
        return np.eye(2)
    if callable(kappa):
        return np.asarray(kappa(point[0], point[1]), dtype=float)
    kap = np.asarray(kappa, dtype=float)
    if kap.ndim == 0:
        return float(kap) * np.eye(2)
    return kap


def generate_structured(nx, ny, *, x0=0.0, y0=0.0, width=1.0, height=1.0,
                        split=0.5, gamma_p_rule=None):
    """Structured triangulation of a rectangle split into S (below) and P.

    Each grid quad is cut along its lower-left to upper-right diagonal so
    refinements are reproducible.  The split ordinate must coincide with a
    horizontal grid line; for the default unit-square geometry that means
    ``ny`` even.  ``gamma_p_rule(x, y) -> tag`` may reassign porous
    boundary facets between Dirichlet and Neumann (default: all Dirichlet).
    """
    nx, ny = int(nx), int(ny)
    if nx < 1 or ny < 1:
        raise MeshError("nx and ny must be at least 1")
    if width <= 0 or height <= 0:
        raise MeshError("degenerate geometry: width and height must be positive")
    dy = height / ny
    j_split = (split - y0) / dy
    if abs(j_split - round(j_split)) > 1e-9 or not (0 < round(j_split) < ny):
        raise MeshError(
            f"split ordinate {split} is not an interior grid line; "
            f"ny={ny} must be even for a centred split")
    j_split = int(round(j_split))
    y_splits = {j_split: (SUBDOMAIN_S, SUBDOMAIN_P)}
    return _structured_layers(nx, ny, x0, y0, width, height, y_splits,
                              gamma_p_rule=gamma_p_rule)


def generate_channel(nx, ny, *, x0=0.0, y0=-0.2, width=2.0, height=1.4,
                     s_lower=0.3, s_upper=0.7):
    """Three-layer channel: porous slabs above and below a free-flow core.

    The free-flow inlet (x = x0) is tagged ``gamma_s`` and the outlet
    ``gamma_s_n`` (do-nothing); all porous exterior facets are Dirichlet.
    Both layer interfaces must coincide with horizontal grid lines.
    """
    nx, ny = int(nx), int(ny)
    if nx < 1 or ny < 2:
        raise MeshError("channel needs nx >= 1 and ny >= 2")
    dy = height / ny
    rows = {}
    for name, s in (("lower", s_lower), ("upper", s_upper)):
        j = (s - y0) / dy
        if abs(j - round(j)) > 1e-9 or not (0 < round(j) < ny):
            raise MeshError(
                f"{name} interface ordinate {s} is not an interior grid "
                f"line of the {ny}-row grid")
        rows[name] = int(round(j))
    if rows["lower"] >= rows["upper"]:
        raise MeshError("lower interface must lie below the upper interface")

    def subdomain_of_row(j):
        if rows["lower"] <= j < rows["upper"]:
            return SUBDOMAIN_S
        return SUBDOMAIN_P

    return _structured_layers(nx, ny, x0, y0, width, height, None,
                              subdomain_of_row=subdomain_of_row,
                              s_outlet_do_nothing=True)


def _structured_layers(nx, ny, x0, y0, width, height, y_splits,
                       gamma_p_rule=None, subdomain_of_row=None,
                       s_outlet_do_nothing=False):
    dx, dy = width / nx, height / ny
    xs = x0 + dx * np.arange(nx + 1)
    ys = y0 + dy * np.arange(ny + 1)
    vid = lambda i, j: j * (nx + 1) + i
    vertices = np.array([(xs[i], ys[j])
                         for j in range(ny + 1) for i in range(nx + 1)])

    if subdomain_of_row is None:
        j_split = next(iter(y_splits))
        subdomain_of_row = lambda j: SUBDOMAIN_S if j < j_split else SUBDOMAIN_P

    cells, tags = [], []
    for j in range(ny):
        sub = subdomain_of_row(j)
        for i in range(nx):
            v00, v10 = vid(i, j), vid(i + 1, j)
            v01, v11 = vid(i, j + 1), vid(i + 1, j + 1)
            cells.append((v00, v10, v11))
            cells.append((v00, v11, v01))
            tags.extend([sub, sub])
    cells = np.array(cells)
    cell_tags = np.array(tags, dtype=object)

    tol = 1e-12 * max(width, height)
    x1, y1 = x0 + width, y0 + height

    def row_of(y):
        return int(round((y - y0) / dy))

    def edge_tag_of(a, b):
        pa, pb = vertices[a], vertices[b]
        mx, my = 0.5 * (pa + pb)
        horizontal = abs(pa[1] - pb[1]) < tol
        if horizontal:
            j = row_of(pa[1])
            if 0 < j < ny:
                below, above = subdomain_of_row(j - 1), subdomain_of_row(j)
                if below != above:
                    return TAG_SIGMA
                return None
        on_left = abs(pa[0] - x0) < tol and abs(pb[0] - x0) < tol
        on_right = abs(pa[0] - x1) < tol and abs(pb[0] - x1) < tol
        on_bottom = horizontal and abs(pa[1] - y0) < tol
        on_top = horizontal and abs(pa[1] - y1) < tol
        if not (on_left or on_right or on_bottom or on_top):
            return None
        if horizontal:
            row = row_of(pa[1]) - (1 if on_top else 0)
        else:
            row = min(row_of(pa[1]), row_of(pb[1]))
        sub = subdomain_of_row(row)
        if sub == SUBDOMAIN_S:
            if s_outlet_do_nothing and on_right:
                return TAG_GAMMA_S_N
            return TAG_GAMMA_S
        if gamma_p_rule is not None:
            tag = gamma_p_rule(mx, my)
            if tag not in (TAG_GAMMA_P_D, TAG_GAMMA_P_N):
                raise MeshError(f"gamma_p_rule returned unknown tag {tag!r}")
            return tag
        return TAG_GAMMA_P_D

    return _build_mesh(vertices, cells, cell_tags, edge_tag_of)


# --- Gmsh MSH 2.2 ASCII import ------------------------------------------

_MSH_LINE = 1
_MSH_TRIANGLE = 2


def import_msh(path, tag_map):
    """Read a Gmsh MSH 2.2 ASCII file with tagged triangles and lines.

    ``tag_map`` maps physical names (or stringified physical ids when the
    file has no $PhysicalNames section) to mesh tags: "S"/"P" for surfaces
    and facet tags for lines.  Interface conformity is validated.
    """
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    lines = [ln.strip() for ln in text.splitlines()]
    if not any(ln for ln in lines):
        raise MeshError(f"{path}: empty MSH file")

    sections = _split_sections(lines, path)
    if "MeshFormat" not in sections:
        raise MeshError(f"{path}: missing $MeshFormat section")
    fmt = sections["MeshFormat"][0].split()
    if fmt[0] != "2.2":
        raise MeshError(f"{path}: unsupported MSH version {fmt[0]} (need 2.2)")

    phys_names = {}
    if "PhysicalNames" in sections:
        body = sections["PhysicalNames"]
        for ln in body[1:1 + int(body[0])]:
            parts = ln.split(maxsplit=2)
            phys_names[int(parts[1])] = parts[2].strip().strip('"')

    if "Nodes" not in sections or "Elements" not in sections:
        raise MeshError(f"{path}: missing $Nodes or $Elements section")

    known = {"MeshFormat", "PhysicalNames", "Nodes", "Elements"}
    for name in sections:
        if name not in known:
            warnings.warn(f"{path}: ignoring MSH section ${name}")

    node_body = sections["Nodes"]
    count = int(node_body[0])
    node_id_to_idx, coords = {}, []
    for ln in node_body[1:1 + count]:
        parts = ln.split()
        node_id_to_idx[int(parts[0])] = len(coords)
        coords.append((float(parts[1]), float(parts[2])))
    vertices = np.array(coords)

    def resolve(phys_id):
        name = phys_names.get(phys_id, str(phys_id))
        if name not in tag_map:
            raise MeshError(f"{path}: physical tag {name!r} missing from tag_map")
        return tag_map[name]

    elem_body = sections["Elements"]
    count = int(elem_body[0])
    cells, cell_tags, tagged_lines = [], [], {}
    for ln in elem_body[1:1 + count]:
        parts = [int(tok) for tok in ln.split()]
        etype, ntags = parts[1], parts[2]
        tags, nodes = parts[3:3 + ntags], parts[3 + ntags:]
        if etype == _MSH_TRIANGLE:
            tag = resolve(tags[0]) if tags else None
            if tag not in (SUBDOMAIN_S, SUBDOMAIN_P):
                raise MeshError(
                    f"{path}: triangle physical tag must map to S or P, got {tag!r}")
            cells.append([node_id_to_idx[n] for n in nodes])
            cell_tags.append(tag)
        elif etype == _MSH_LINE:
            tag = resolve(tags[0]) if tags else None
            if tag not in (TAG_SIGMA,) + BOUNDARY_TAGS:
                raise MeshError(
                    f"{path}: line physical tag must map to a facet tag, got {tag!r}")
            key = tuple(sorted(node_id_to_idx[n] for n in nodes))
            tagged_lines[key] = tag
        else:
            warnings.warn(f"{path}: ignoring element of type {etype}")
    if not cells:
        raise MeshError(f"{path}: no triangles found")

    cell_arr = np.array(cells)
    edge_set = set()
    for tri in cell_arr:
        for a, b in ((0, 1), (1, 2), (2, 0)):
            edge_set.add(tuple(sorted((int(tri[a]), int(tri[b])))))
    for key in tagged_lines:
        if key not in edge_set:
            raise MeshError(f"{path}: dangling facet {key} is not a cell edge")

    return _build_mesh(vertices, cell_arr, np.array(cell_tags, dtype=object),
                       lambda a, b: tagged_lines.get((a, b)))


def _split_sections(lines, path):
    sections = {}
    i = 0
    while i < len(lines):
        ln = lines[i]
        if ln.startswith("$") and not ln.startswith("$End"):
            name = ln[1:]
            end = f"$End{name}"
            j = i + 1
            body = []
            while j < len(lines) and lines[j] != end:
                body.append(lines[j])
                j += 1
            if j == len(lines):
                raise MeshError(f"{path}: unterminated section ${name}")
            sections[name] = body
            i = j + 1
        else:
            i += 1
    return sections
