"""Tagged tetrahedral meshes on a truncated free-space domain.

Meshes are unit-scale (dimensionless xi coordinates): an object of physical
size alpha is represented by a unit-sized shape here and scaled analytically
downstream.  Region tag 0 is the truncated free-space exterior; tags >= 1 are
object regions.

The structured generator covers axis-aligned box unions (the parallelepiped
family); ball meshes are produced by a measure-preserving cube-to-ball vertex
map of the same structured grid.  General shapes come in through the Gmsh MSH
2.2 ASCII subset or the native JSON schema:

    {"nodes": [[x, y, z], ...], "tets": [[i, j, k, l, tag], ...]}

with 0-based node indices.
"""

from __future__ import annotations

import gzip
import json
from dataclasses import dataclass

import numpy as np

# local node pairs of the 6 tet edges, low local index first
LOCAL_EDGES = np.array([(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)])
# face i is opposite local vertex i
LOCAL_FACES = np.array([(1, 2, 3), (0, 2, 3), (0, 1, 3), (0, 1, 2)])

# Kuhn split: one tet per axis permutation, walking from corner (0,0,0) to
# (1,1,1).  Odd permutations get their last two vertices swapped so every
# tet has positive volume.
_KUHN_PERMS = (
    ((0, 1, 2), 1), ((0, 2, 1), -1), ((1, 0, 2), -1),
    ((1, 2, 0), 1), ((2, 0, 1), 1), ((2, 1, 0), -1),
)

DEFAULT_TRUNCATION = 100.0
MIN_TRUNCATION = 10.0
DEFAULT_GRADING = 1.5


class TetMesh:
    """Immutable tagged tet mesh with derived, consistently oriented edges.

    ``edges`` holds unique node pairs in ascending node order; the global
    direction of every edge is low -> high node index.  ``tet_edge_signs``
    is +1 where a tet's local edge direction agrees with the global one.
    """

    def __init__(self, nodes, tets, tags):
        nodes = np.ascontiguousarray(nodes, dtype=float)
        tets = np.ascontiguousarray(tets, dtype=np.int64)
        tags = np.ascontiguousarray(tags, dtype=np.int64)
        if nodes.ndim != 2 or nodes.shape[1] != 3:
            raise ValueError("nodes must be an (N, 3) array")
        if tets.ndim != 2 or tets.shape[1] != 4:
            raise ValueError("tets must be an (M, 4) array")
        if tags.shape != (len(tets),):
            raise ValueError("one region tag per tet required")
        if len(tets) == 0:
            raise ValueError("mesh has no tetrahedra")
        if tets.min() < 0 or tets.max() >= len(nodes):
            raise ValueError("tet node index out of range")

        vol = _signed_volumes(nodes, tets)
        bad = np.where(vol <= 0)[0]
        if bad.size:
            raise ValueError(f"tet {bad[0]} has non-positive volume {vol[bad[0]]:.3e}")

        self.nodes = nodes
        self.tets = tets
        self.tags = tags
        self.volumes = vol

        # global edge table
        pairs = tets[:, LOCAL_EDGES]                      # (M, 6, 2)
        lo = pairs.min(axis=2)
        hi = pairs.max(axis=2)
        flat = np.stack([lo, hi], axis=2).reshape(-1, 2)
        self.edges, inv = np.unique(flat, axis=0, return_inverse=True)
        self.tet_edges = inv.reshape(-1, 6)
        self.tet_edge_signs = np.where(
            pairs[:, :, 0] < pairs[:, :, 1], 1, -1
        ).astype(np.int8)

        # boundary faces: shared by exactly one tet
        faces = np.sort(tets[:, LOCAL_FACES].reshape(-1, 3), axis=1)
        uniq, counts = np.unique(faces, axis=0, return_counts=True)
        self.boundary_faces = uniq[counts == 1]

        # edges lying in boundary faces
        bf_pairs = np.sort(
            self.boundary_faces[:, [(0, 1), (0, 2), (1, 2)]].reshape(-1, 2), axis=1
        )
        bf_pairs = np.unique(bf_pairs, axis=0)
        idx = _find_rows(self.edges, bf_pairs)
        mask = np.zeros(len(self.edges), dtype=bool)
        mask[idx] = True
        self.boundary_edge_mask = mask

        for a in (self.nodes, self.tets, self.tags, self.volumes, self.edges,
                  self.tet_edges, self.tet_edge_signs, self.boundary_faces,
                  self.boundary_edge_mask):
            a.flags.writeable = False

    @property
    def n_nodes(self):
        return len(self.nodes)

    @property
    def n_tets(self):
        return len(self.tets)

    @property
    def n_edges(self):
        return len(self.edges)

    def region_tags(self):
        return np.unique(self.tags)

    def tets_with_tag(self, tag):
        idx = np.where(self.tags == tag)[0]
        if idx.size == 0:
            raise ValueError(f"no tets carry region tag {tag}")
        return idx

    def object_surface_nodes(self):
        """Node indices on the interface between object regions and region 0."""
        faces = np.sort(self.tets[:, LOCAL_FACES].reshape(-1, 3), axis=1)
        owner_tags = np.repeat(self.tags, 4)
        order = np.lexsort(faces.T[::-1])
        faces_s = faces[order]
        tags_s = owner_tags[order]
        same = np.all(faces_s[1:] == faces_s[:-1], axis=1)
        differs = same & (tags_s[1:] != tags_s[:-1]) & (
            (tags_s[1:] == 0) | (tags_s[:-1] == 0)
        )
        iface = faces_s[:-1][differs]
        return np.unique(iface)

    def translated(self, shift):
        """New mesh with all nodes shifted by the given 3-vector."""
        return TetMesh(self.nodes + np.asarray(shift, float), self.tets, self.tags)

    def rotated(self, R):
        """New mesh with nodes rotated by the orthogonal matrix R."""
        R = np.asarray(R, float)
        if np.linalg.norm(R.T @ R - np.eye(3)) > 1e-12:
            raise ValueError("R must be orthogonal")
        nodes = self.nodes @ R.T
        tets = self.tets
        if np.linalg.det(R) < 0:
            # reflections invert orientation; swap two vertices to restore it
            tets = tets[:, [0, 1, 3, 2]]
        return TetMesh(nodes, tets, self.tags)


def _signed_volumes(nodes, tets):
    p = nodes[tets]
    d = p[:, 1:] - p[:, :1]
    return np.linalg.det(d) / 6.0


def _find_rows(sorted_rows, queries):
    """Indices of query rows inside a lexicographically sorted 2-col array."""
    keys = sorted_rows[:, 0] * (sorted_rows[:, 1].max() + 1) + sorted_rows[:, 1]
    q = queries[:, 0] * (sorted_rows[:, 1].max() + 1) + queries[:, 1]
    idx = np.searchsorted(keys, q)
    idx = np.clip(idx, 0, len(keys) - 1)
    ok = keys[idx] == q
    return idx[ok]


@dataclass(frozen=True)
class MeshQuality:
    min_dihedral_deg: float
    max_dihedral_deg: float
    min_edge_length: float
    max_edge_length: float
    tet_count: int
    edge_count: int


def mesh_quality(mesh: TetMesh) -> MeshQuality:
    """Edge-length and dihedral-angle statistics over the whole mesh."""
    p = mesh.nodes[mesh.tets]                       # (M, 4, 3)
    e = mesh.nodes[mesh.edges]
    lengths = np.linalg.norm(e[:, 1] - e[:, 0], axis=1)

    # outward face normals: face i opposite vertex i
    normals = np.empty((mesh.n_tets, 4, 3))
    for i, (a, b, c) in enumerate(LOCAL_FACES):
        n = np.cross(p[:, b] - p[:, a], p[:, c] - p[:, a])
        # orient away from the opposite vertex
        dots = np.einsum("mi,mi->m", n, p[:, i] - p[:, a])
        n = np.where(dots[:, None] > 0, -n, n)
        normals[:, i] = n / np.linalg.norm(n, axis=1)[:, None]

    # dihedral angle along edge (a, b) is between the two faces not opposite a or b
    angles = []
    for a, b in LOCAL_EDGES:
        others = [i for i in range(4) if i not in (a, b)]
        cosang = np.einsum("mi,mi->m", normals[:, others[0]], normals[:, others[1]])
        angles.append(np.degrees(np.pi - np.arccos(np.clip(cosang, -1.0, 1.0))))
    angles = np.concatenate(angles)

    return MeshQuality(
        min_dihedral_deg=float(angles.min()),
        max_dihedral_deg=float(angles.max()),
        min_edge_length=float(lengths.min()),
        max_edge_length=float(lengths.max()),
        tet_count=mesh.n_tets,
        edge_count=mesh.n_edges,
    )


def region_volume(mesh: TetMesh, tag) -> float:
    idx = mesh.tets_with_tag(tag)
    return float(mesh.volumes[idx].sum())


# ---------------------------------------------------------------------------
# structured generator
# ---------------------------------------------------------------------------

def generate_box_scene(regions, truncation_factor=DEFAULT_TRUNCATION,
                       divisions=2, grading=DEFAULT_GRADING,
                       max_exterior_layers=None):
    """Structured tet mesh of a union of axis-aligned boxes in free space.

    regions: list of ((lo, hi), tag) with lo/hi 3-vectors and tag >= 1.  The
    grid resolves every box boundary exactly; each hex is cut into 6 tets by
    the Kuhn split so neighbouring cells conform.  ``divisions`` is the cell
    count per unit length inside the object zone.  Exterior cell sizes grow
    geometrically (ratio ``grading``) out to a cube of half-width
    truncation_factor * (object bounding-box diameter); the first exterior
    layer is widened when needed so at most ``max_exterior_layers`` layers
    are used per side (accuracy of the far field degrades accordingly).
    """
    if truncation_factor < MIN_TRUNCATION:
        raise ValueError(
            f"truncation_factor must be >= {MIN_TRUNCATION} (far field unreliable), "
            f"got {truncation_factor}"
        )
    boxes = []
    for (lo, hi), tag in regions:
        lo = np.asarray(lo, float)
        hi = np.asarray(hi, float)
        if np.any(hi <= lo):
            raise ValueError(f"region {tag}: box must have positive extent")
        if tag < 1:
            raise ValueError("region tags must be >= 1")
        boxes.append((lo, hi, int(tag)))
    if not boxes:
        raise ValueError("at least one region box required")
    tags_seen = [t for _, _, t in boxes]
    if len(set(tags_seen)) != len(tags_seen):
        raise ValueError("duplicate region tags")

    for i in range(len(boxes)):
        for j in range(i + 1, len(boxes)):
            lo = np.maximum(boxes[i][0], boxes[j][0])
            hi = np.minimum(boxes[i][1], boxes[j][1])
            if np.all(hi - lo > 1e-12):
                raise ValueError(f"region boxes {tags_seen[i]} and {tags_seen[j]} overlap")

    bbox_lo = np.min([b[0] for b in boxes], axis=0)
    bbox_hi = np.max([b[1] for b in boxes], axis=0)
    diameter = float(np.linalg.norm(bbox_hi - bbox_lo))
    half_width = truncation_factor * diameter
    centre = 0.5 * (bbox_lo + bbox_hi)

    axes = []
    for ax in range(3):
        breaks = sorted({b[0][ax] for b in boxes} | {b[1][ax] for b in boxes})
        axes.append(_axis_points(breaks, divisions, centre[ax], half_width,
                                 grading, max_exterior_layers))

    return _tensor_mesh(axes, boxes)


def _axis_points(breaks, divisions, centre, half_width, grading,
                 max_exterior_layers):
    pts = [breaks[0]]
    for a, b in zip(breaks[:-1], breaks[1:]):
        n = max(1, int(np.ceil((b - a) * divisions - 1e-9)))
        pts.extend(np.linspace(a, b, n + 1)[1:])
    pts = np.asarray(pts)

    h_edge = min(pts[1] - pts[0], pts[-1] - pts[-2])
    lo_target = centre - half_width
    hi_target = centre + half_width

    def graded(start, stop):
        span = abs(stop - start)
        h0 = h_edge
        m = int(np.ceil(np.log(span / (h0 * grading) * (grading - 1) + 1)
                        / np.log(grading)))
        m = max(m, 1)
        if max_exterior_layers is not None and m > max_exterior_layers:
            m = max_exterior_layers
            # widen the first layer so m layers still reach the target
            h0 = span * (grading - 1) / (grading * (grading**m - 1))
        sizes = h0 * grading ** np.arange(1, m + 1)
        sizes *= span / sizes.sum()
        return start + np.sign(stop - start) * np.cumsum(sizes)

    left = graded(pts[0], lo_target)[::-1]
    right = graded(pts[-1], hi_target)
    return np.concatenate([left, pts, right])


def _tensor_mesh(axes, boxes):
    xs, ys, zs = axes
    nx, ny, nz = len(xs) - 1, len(ys) - 1, len(zs) - 1
    nodes = np.stack(np.meshgrid(xs, ys, zs, indexing="ij"), axis=-1).reshape(-1, 3)

    cell_tags = np.zeros((nx, ny, nz), dtype=np.int64)
    for lo, hi, tag in boxes:
        i0, i1 = np.searchsorted(xs, [lo[0], hi[0]])
        j0, j1 = np.searchsorted(ys, [lo[1], hi[1]])
        k0, k1 = np.searchsorted(zs, [lo[2], hi[2]])
        cell_tags[i0:i1, j0:j1, k0:k1] = tag

    def nid(i, j, k):
        return (i * (ny + 1) + j) * (nz + 1) + k

    I, J, K = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz),
                          indexing="ij")
    I, J, K = I.ravel(), J.ravel(), K.ravel()
    corner = {}
    for di in (0, 1):
        for dj in (0, 1):
            for dk in (0, 1):
                corner[(di, dj, dk)] = nid(I + di, J + dj, K + dk)

    tet_list = []
    for (perm, parity) in _KUHN_PERMS:
        d = np.zeros(3, dtype=int)
        path = [tuple(d)]
        for axis in perm:
            d = d.copy()
            d[axis] = 1
            path.append(tuple(d))
        v = [corner[c] for c in path]
        if parity < 0:
            v = [v[0], v[1], v[3], v[2]]
        tet_list.append(np.stack(v, axis=1))
    tets = np.concatenate(tet_list, axis=0)
    tags = np.tile(cell_tags.ravel(), 6)

    return TetMesh(nodes, tets, tags)


# ---------------------------------------------------------------------------
# cube-to-ball map
# ---------------------------------------------------------------------------

def ball_mesh(cells_per_diameter=8, truncation_factor=DEFAULT_TRUNCATION,
              grading=DEFAULT_GRADING, max_exterior_layers=8,
              blend_radius=2.0, volume_match=True, radius_scale=1.0):
    """Structured mesh of the unit ball (tag 1) in a truncated exterior.

    Built by generating the box mesh for the cube [-1, 1]^3 and applying a
    radial map that carries each concentric cube surface onto the sphere of
    the same max-norm radius; the map blends back to the identity between
    max-norm radius 1 and ``blend_radius``.  Vertices of the object surface
    end up on a sphere; with ``volume_match`` its radius is inflated so the
    polyhedral ball volume equals 4*pi/3 exactly, which removes the leading
    geometric bias of the faceted boundary.
    """
    if cells_per_diameter % 2 != 0:
        raise ValueError("cells_per_diameter must be even (grid symmetric about 0)")
    base = generate_box_scene(
        [(((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0)), 1)],
        truncation_factor=truncation_factor,
        divisions=cells_per_diameter / 2.0,
        grading=grading,
        max_exterior_layers=max_exterior_layers,
    )
    gamma = radius_scale
    mesh = _map_cube_to_ball(base, gamma, blend_radius)
    if volume_match:
        v = region_volume(mesh, 1)
        gamma = radius_scale * (4.0 * np.pi / 3.0 / v) ** (1.0 / 3.0)
        mesh = _map_cube_to_ball(base, gamma, blend_radius)
    return mesh


def _map_cube_to_ball(mesh, gamma, blend_radius):
    x = mesh.nodes
    s = np.max(np.abs(x), axis=1)
    r = np.linalg.norm(x, axis=1)
    safe_r = np.where(r > 0, r, 1.0)
    ball_factor = gamma * s / safe_r
    w = np.clip((blend_radius - s) / (blend_radius - 1.0), 0.0, 1.0)
    factor = np.where(s <= 1.0, ball_factor, w * ball_factor + (1.0 - w))
    factor = np.where(r > 0, factor, 1.0)
    return TetMesh(x * factor[:, None], mesh.tets, mesh.tags)


def cylinder_mesh(half_thickness, cells_per_diameter=8,
                  truncation_factor=DEFAULT_TRUNCATION, grading=DEFAULT_GRADING,
                  max_exterior_layers=8, blend_radius=2.0, volume_match=True):
    """Unit-radius disc/cylinder (tag 1) of the given half thickness.

    In-plane cross sections are carried from concentric squares onto circles
    (same construction as ball_mesh, acting on x-y only); z is untouched, so
    the two flat faces stay exactly plane.  volume_match inflates the
    polygonal radius so the region volume is exactly 2 pi h.
    """
    if cells_per_diameter % 2 != 0:
        raise ValueError("cells_per_diameter must be even")
    h = float(half_thickness)
    if h <= 0:
        raise ValueError("half_thickness must be > 0")
    base = generate_box_scene(
        [(((-1.0, -1.0, -h), (1.0, 1.0, h)), 1)],
        truncation_factor=truncation_factor,
        divisions=cells_per_diameter / 2.0,
        grading=grading,
        max_exterior_layers=max_exterior_layers,
    )

    def mapped(gamma):
        x = base.nodes
        s = np.max(np.abs(x[:, :2]), axis=1)
        r = np.linalg.norm(x[:, :2], axis=1)
        safe_r = np.where(r > 0, r, 1.0)
        disc = gamma * s / safe_r
        w = np.clip((blend_radius - s) / (blend_radius - 1.0), 0.0, 1.0)
        factor = np.where(s <= 1.0, disc, w * disc + (1.0 - w))
        factor = np.where(r > 0, factor, 1.0)
        nodes = x.copy()
        nodes[:, :2] *= factor[:, None]
        return TetMesh(nodes, base.tets, base.tags)

    mesh = mapped(1.0)
    if volume_match:
        v = region_volume(mesh, 1)
        mesh = mapped(np.sqrt(2.0 * np.pi * h / v))
    return mesh


def tetrahedron_mesh(vertices, cells_per_edge=6,
                     truncation_factor=DEFAULT_TRUNCATION,
                     grading=DEFAULT_GRADING, max_exterior_layers=8):
    """Exact tetrahedral object (tag 1) with the given four vertices.

    The Kuhn grid is self-similar: the cells of a uniformly split cube whose
    centroids satisfy x <= y <= z tile the reference tetrahedron with
    vertices (0,0,0), (0,0,1), (0,1,1), (1,1,1) exactly.  Those cells are
    retagged and the whole grid is pushed through the affine map carrying
    the reference tetrahedron onto the requested one.
    """
    v = np.asarray(vertices, dtype=float)
    if v.shape != (4, 3):
        raise ValueError("four 3D vertices required")
    base = generate_box_scene(
        [(((0.0, 0.0, 0.0), (1.0, 1.0, 1.0)), 1)],
        truncation_factor=truncation_factor,
        divisions=float(cells_per_edge),
        grading=grading,
        max_exterior_layers=max_exterior_layers,
    )
    cent = base.nodes[base.tets].mean(axis=1)
    inside = (base.tags == 1) & (cent[:, 0] <= cent[:, 1]) & (cent[:, 1] <= cent[:, 2])
    tags = np.where(inside, 1, 0)

    ref = np.array([(0.0, 0.0, 0.0), (0.0, 0.0, 1.0),
                    (0.0, 1.0, 1.0), (1.0, 1.0, 1.0)])
    tgt = v.copy()
    F = _affine_from_simplices(ref, tgt)
    if np.linalg.det(F) < 0:
        tgt = tgt[[1, 0, 2, 3]]
        F = _affine_from_simplices(ref, tgt)
    nodes = (base.nodes - ref[0]) @ F.T + tgt[0]
    return TetMesh(nodes, base.tets, tags)


def _affine_from_simplices(ref, tgt):
    R = (ref[1:] - ref[0]).T
    T = (tgt[1:] - tgt[0]).T
    return T @ np.linalg.inv(R)


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------

def save_mesh(mesh: TetMesh, path):
    """Write the native JSON schema (0-based indices, tag appended per tet)."""
    path = str(path)
    tets = np.concatenate([mesh.tets, mesh.tags[:, None]], axis=1)
    doc = {"nodes": mesh.nodes.tolist(), "tets": tets.tolist()}
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "wt") as f:
        json.dump(doc, f)


def load_mesh(path, require_exterior=True) -> TetMesh:
    """Read a native JSON mesh or the documented Gmsh MSH 2.2 ASCII subset.

    Raises ValueError for inverted tets (naming the tet), unknown element
    types, and (by default) a missing exterior region 0.
    """
    path = str(path)
    name = path[:-3] if path.endswith(".gz") else path
    if name.endswith(".msh"):
        nodes, tets, tags = _parse_msh22(path)
    elif name.endswith(".json"):
        opener = gzip.open if path.endswith(".gz") else open
        with opener(path, "rt") as f:
            doc = json.load(f)
        nodes = np.asarray(doc["nodes"], dtype=float)
        raw = np.asarray(doc["tets"], dtype=np.int64)
        if raw.ndim != 2 or raw.shape[1] != 5:
            raise ValueError("native mesh JSON expects rows [i, j, k, l, tag]")
        tets, tags = raw[:, :4], raw[:, 4]
    else:
        raise ValueError(f"unrecognised mesh file extension: {path}")

    mesh = TetMesh(nodes, tets, tags)
    if require_exterior and 0 not in mesh.region_tags():
        raise ValueError("mesh has no exterior region (tag 0)")
    return mesh


def _parse_msh22(path):
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rt") as f:
        lines = [ln.strip() for ln in f]
    try:
        i = lines.index("$Nodes")
        n_nodes = int(lines[i + 1])
        node_ids = {}
        coords = np.empty((n_nodes, 3))
        for row, ln in enumerate(lines[i + 2: i + 2 + n_nodes]):
            parts = ln.split()
            node_ids[int(parts[0])] = row
            coords[row] = [float(v) for v in parts[1:4]]
        j = lines.index("$Elements")
        n_elems = int(lines[j + 1])
        tets, tags = [], []
        for ln in lines[j + 2: j + 2 + n_elems]:
            parts = [int(v) for v in ln.split()]
            etype, ntags = parts[1], parts[2]
            if etype != 4:
                raise ValueError(f"unsupported element type {etype} (tets only)")
            if ntags < 1:
                raise ValueError("tet element without a physical region tag")
            tag = parts[3]
            conn = parts[3 + ntags: 7 + ntags]
            tets.append([node_ids[c] for c in conn])
            tags.append(tag)
    except (IndexError, KeyError) as exc:
        raise ValueError(f"malformed MSH 2.2 file {path}: {exc}") from exc
    return coords, np.asarray(tets, dtype=np.int64), np.asarray(tags, dtype=np.int64)
