"""Dual tetrahedral mesh model: topology, states, point location, transforms.

One topology is shared by two deformed states (source and target image
space); paired vertex motion defines a piecewise-linear map between the
two spaces.  Orientation convention: a tet (p0, p1, p2, p3) has signed
volume det(p1-p0, p2-p0, p3-p0) / 6, positive for all tets at rest.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

try:  # pragma: no cover - exercised implicitly by speed
    from numba import njit
except ImportError:  # pragma: no cover
    njit = None

from .volumes import (
    Dvf,
    LabelVolume,
    RegistrationProblem,
    farthest_point_subset,
    voxel_centers,
)

__all__ = [
    "VOLUME_EPS",
    "BARY_EPS",
    "MeshState",
    "TetMesh",
    "TetMeshPair",
    "MeshGenerationError",
    "signed_tet_volume",
    "signed_volumes",
    "generate_mesh",
    "refine_mesh",
    "lift_state",
    "detect_folds",
    "repair_state",
    "locate_point",
    "locate_points",
    "map_point",
    "map_points",
    "extract_dvf",
    "transform_mask",
    "save_mesh",
    "load_mesh",
    "save_state",
    "load_state",
]

# A tet counts as folded once its signed volume drops to this (mm^3).
VOLUME_EPS = 1e-6
# Barycentric containment tolerance.
BARY_EPS = 1e-9

_WALK_CAP = 64
_LOCATE_KNN = 64

# xorshift64* mixing constants for the per-point walk streams
_MIX_A = np.uint64(0x9E3779B97F4A7C15)
_MIX_B = np.uint64(0xBF58476D1CE4E5B9)
_MIX_C = np.uint64(0x2545F4914F6CDD1D)
_INV_53 = 1.0 / 9007199254740992.0


class MeshGenerationError(RuntimeError):
    """Raised when point placement or tetrahedralization fails."""


@dataclass(frozen=True)
class MeshState:
    """Vertex positions (mm) of one deformed configuration."""

    points: np.ndarray  # (P, 3)

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64, order="C")
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"state points must have shape (P, 3), got {pts.shape}")
        object.__setattr__(self, "points", pts)
        pts.setflags(write=False)

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True)
class TetMesh:
    """Shared rest topology of the dual mesh.

    surface_tags carries the organ label a point was sampled on (0 for
    interior/filler points).  Edge constants come from the elasticity
    table at generation time.
    """

    rest_points: np.ndarray  # (P, 3)
    tets: np.ndarray  # (T, 4)
    edges: np.ndarray  # (E, 2), each i < j, unique
    rest_lengths: np.ndarray  # (E,)
    elasticity: np.ndarray  # (E,)
    surface_tags: np.ndarray  # (P,)
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        pts = np.ascontiguousarray(self.rest_points, dtype=np.float64)
        tets = np.ascontiguousarray(self.tets, dtype=np.intp)
        edges = np.ascontiguousarray(self.edges, dtype=np.intp)
        object.__setattr__(self, "rest_points", pts)
        object.__setattr__(self, "tets", tets)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "rest_lengths", np.ascontiguousarray(self.rest_lengths, dtype=np.float64))
        object.__setattr__(self, "elasticity", np.ascontiguousarray(self.elasticity, dtype=np.float64))
        object.__setattr__(self, "surface_tags", np.ascontiguousarray(self.surface_tags, dtype=np.int32))
        if tets.ndim != 2 or tets.shape[1] != 4:
            raise ValueError("tets must have shape (T, 4)")
        if np.any(
            (tets[:, :, None] == tets[:, None, :]).sum(axis=(1, 2)) != 4
        ):
            raise ValueError("tets must reference four distinct vertices")
        if edges.size:
            if np.any(edges[:, 0] >= edges[:, 1]):
                raise ValueError("edges must be stored with i < j")
            key = edges[:, 0] * len(pts) + edges[:, 1]
            if len(np.unique(key)) != len(edges):
                raise ValueError("duplicate edges")
        if len(self.rest_lengths) != len(edges) or len(self.elasticity) != len(edges):
            raise ValueError("edge attribute arrays must match the edge count")
        if len(self.surface_tags) != len(pts):
            raise ValueError("surface_tags must match the point count")
        for arr in (pts, tets, edges, self.rest_lengths, self.elasticity, self.surface_tags):
            arr.setflags(write=False)

    @property
    def n_points(self) -> int:
        return len(self.rest_points)

    @property
    def n_tets(self) -> int:
        return len(self.tets)

    @property
    def rest_state(self) -> MeshState:
        state = self._cache.get("rest_state")
        if state is None:
            state = MeshState(self.rest_points.copy())
            self._cache["rest_state"] = state
        return state

    @property
    def mean_edge_length(self) -> float:
        return float(self.rest_lengths.mean())

    @property
    def neighbors(self) -> np.ndarray:
        """(T, 4) tet adjacency; entry j is the tet across the face opposite
        local vertex j, or -1 on the hull."""
        adj = self._cache.get("neighbors")
        if adj is None:
            adj = _build_neighbors(self.tets)
            self._cache["neighbors"] = adj
        return adj

    @property
    def incident_tets(self) -> tuple[np.ndarray, np.ndarray]:
        """CSR (indptr, tet_ids): tets incident to each point."""
        csr = self._cache.get("incident")
        if csr is None:
            order = np.argsort(self.tets.ravel(), kind="stable")
            pts_of = self.tets.ravel()[order]
            tet_of = np.repeat(np.arange(self.n_tets), 4)[order]
            indptr = np.searchsorted(pts_of, np.arange(self.n_points + 1))
            csr = (indptr.astype(np.intp), tet_of.astype(np.intp))
            self._cache["incident"] = csr
        return csr

    @property
    def point_ring(self) -> tuple[np.ndarray, np.ndarray]:
        """CSR (indptr, point_ids): 1-ring neighbor points from the edges."""
        csr = self._cache.get("ring")
        if csr is None:
            both = np.concatenate([self.edges, self.edges[:, ::-1]], axis=0)
            order = np.lexsort((both[:, 1], both[:, 0]))
            both = both[order]
            indptr = np.searchsorted(both[:, 0], np.arange(self.n_points + 1))
            csr = (indptr.astype(np.intp), both[:, 1].astype(np.intp).copy())
            self._cache["ring"] = csr
        return csr

    def validate_rest(self) -> None:
        vols = signed_volumes(self.rest_points, self.tets)
        if np.any(vols <= VOLUME_EPS):
            raise ValueError("rest configuration contains folded or degenerate tets")
        lens = np.linalg.norm(
            self.rest_points[self.edges[:, 1]] - self.rest_points[self.edges[:, 0]], axis=1
        )
        if not np.allclose(lens, self.rest_lengths, rtol=1e-9, atol=1e-9):
            raise ValueError("rest lengths disagree with rest point distances")


@dataclass(frozen=True)
class TetMeshPair:
    """Mesh plus its two deformed states; both index the same topology."""

    mesh: TetMesh
    source: MeshState
    target: MeshState

    def __post_init__(self):
        if len(self.source) != self.mesh.n_points or len(self.target) != self.mesh.n_points:
            raise ValueError("state point counts must match the mesh")

    def state(self, which: str) -> MeshState:
        if which == "source":
            return self.source
        if which == "target":
            return self.target
        raise ValueError(f"unknown state {which!r}")


# ---------------------------------------------------------------------------
# Volumes and folds

def signed_tet_volume(p0, p1, p2, p3) -> float:
    """Signed volume (mm^3) of one tet under the fixed orientation."""
    a = np.asarray(p1, dtype=np.float64) - p0
    b = np.asarray(p2, dtype=np.float64) - p0
    c = np.asarray(p3, dtype=np.float64) - p0
    return float(np.dot(a, np.cross(b, c))) / 6.0


def signed_volumes(points: np.ndarray, tets: np.ndarray) -> np.ndarray:
    """Signed volumes of many tets against one point array."""
    p = points[tets]
    a = p[:, 1] - p[:, 0]
    b = p[:, 2] - p[:, 0]
    c = p[:, 3] - p[:, 0]
    return np.einsum("ij,ij->i", a, np.cross(b, c)) / 6.0


def detect_folds(mesh: TetMesh, state: MeshState) -> np.ndarray:
    """Indices of tets whose signed volume is <= VOLUME_EPS in `state`."""
    vols = signed_volumes(state.points, mesh.tets)
    return np.flatnonzero(vols <= VOLUME_EPS)


def repair_state(
    mesh: TetMesh,
    state: MeshState,
    max_iterations: int = 50,
    damping: float = 0.5,
) -> tuple[MeshState, int]:
    """Pull vertices of folded tets toward their rest-relative 1-ring spot.

    Each iteration blends every affected vertex halfway toward the current
    1-ring centroid plus its rest offset from that centroid.  Returns the
    best state found and its fold count; the count never exceeds the
    input's.
    """
    pts = state.points.copy()
    indptr, ring = mesh.point_ring
    counts = np.maximum(np.diff(indptr), 1)
    rest_means = np.add.reduceat(mesh.rest_points[ring], indptr[:-1], axis=0)
    rest_means /= counts[:, None]
    rest_offset = mesh.rest_points - rest_means

    best_pts = pts.copy()
    best_count = len(detect_folds(mesh, state))
    if best_count == 0:
        return state, 0
    for _ in range(max_iterations):
        folded = detect_folds(mesh, MeshState(pts))
        count = len(folded)
        if count < best_count:
            best_count = count
            best_pts = pts.copy()
        if count == 0:
            break
        moving = np.unique(mesh.tets[folded].ravel())
        means = np.add.reduceat(pts[ring], indptr[:-1], axis=0) / counts[:, None]
        target = means[moving] + rest_offset[moving]
        pts[moving] = (1.0 - damping) * pts[moving] + damping * target
    # stubborn leftovers: contract their vertices toward rest, which is
    # strictly feasible, so this phase cannot stall
    for _ in range(max_iterations):
        folded = detect_folds(mesh, MeshState(pts))
        count = len(folded)
        if count < best_count:
            best_count = count
            best_pts = pts.copy()
        if count == 0:
            break
        moving = np.unique(mesh.tets[folded].ravel())
        pts[moving] = (1.0 - damping) * pts[moving] + damping * mesh.rest_points[moving]
    return MeshState(best_pts), best_count


# ---------------------------------------------------------------------------
# Generation

def _build_neighbors(tets: np.ndarray) -> np.ndarray:
    faces: dict[tuple[int, int, int], tuple[int, int]] = {}
    adj = np.full(tets.shape, -1, dtype=np.intp)
    for t, quad in enumerate(tets):
        for j in range(4):
            face = tuple(sorted(np.delete(quad, j)))
            prev = faces.pop(face, None)
            if prev is None:
                faces[face] = (t, j)
            else:
                pt, pj = prev
                adj[pt, pj] = t
                adj[t, j] = pt
    return adj


def _orient_and_filter(points: np.ndarray, tets: np.ndarray) -> np.ndarray:
    vols = signed_volumes(points, tets)
    keep = np.abs(vols) > VOLUME_EPS
    tets = tets[keep].copy()
    flip = vols[keep] < 0
    tets[flip] = tets[flip][:, [0, 1, 3, 2]]
    return tets


def _edges_of(tets: np.ndarray) -> np.ndarray:
    pairs = tets[:, [0, 1, 0, 2, 0, 3, 1, 2, 1, 3, 2, 3]].reshape(-1, 2)
    pairs.sort(axis=1)
    return np.unique(pairs, axis=0)


def _label_at(labels: LabelVolume, pts: np.ndarray) -> np.ndarray:
    idx = np.rint(labels.physical_to_continuous(pts)).astype(np.intp)
    nx, ny, nz = labels.dims
    ix = np.clip(idx[:, 0], 0, nx - 1)
    iy = np.clip(idx[:, 1], 0, ny - 1)
    iz = np.clip(idx[:, 2], 0, nz - 1)
    return labels.data[iz, iy, ix]


def _primary_label(problem: RegistrationProblem) -> int:
    bladder = problem.source_labels.label_id("bladder")
    if bladder is not None and bladder in problem.guidance:
        return bladder
    return min(problem.guidance)


def _body_label(problem: RegistrationProblem) -> int:
    body = problem.source_labels.label_id("body")
    if body is not None and body in problem.guidance:
        return body
    # fall back to the organ with the most voxels
    data = problem.source_labels.data
    counts = {lab: int((data == lab).sum()) for lab in problem.guidance}
    return max(counts, key=lambda lab: (counts[lab], -lab))


def generate_mesh(
    problem: RegistrationProblem,
    n_points: int = 200,
    frac_primary: float = 0.2,
    frac_other: float = 0.4,
    rng_seed: int = 0,
) -> TetMesh:
    """Build the rest mesh: contour-sampled points plus interior filler.

    floor(frac_primary * n) points go on the bladder contour and
    floor(frac_other * n) on the remaining organ contours (split
    proportionally to contour size); the remainder fills low-density
    interior regions of the body, with the field-of-view corners always
    included so the mesh spans the whole region of interest.
    """
    if n_points < 20:
        raise MeshGenerationError(f"need at least 20 mesh points, got {n_points}")
    rng = np.random.default_rng(np.random.SeedSequence((int(rng_seed), 0x6D65)))
    primary = _primary_label(problem)
    others = [lab for lab in problem.organ_labels() if lab != primary]

    n_primary = int(frac_primary * n_points)
    n_other = int(frac_other * n_points)
    picked: list[np.ndarray] = []
    tags: list[np.ndarray] = []

    def take(label: int, count: int):
        pts = problem.guidance[label].source
        count = min(count, len(pts))
        if count <= 0:
            return
        sel = pts[farthest_point_subset(pts, count, rng)]
        picked.append(sel)
        tags.append(np.full(len(sel), label, dtype=np.int32))

    take(primary, n_primary)
    if others:
        sizes = np.array([len(problem.guidance[lab].source) for lab in others], dtype=float)
        shares = sizes / sizes.sum() * n_other
        alloc = np.floor(shares).astype(int)
        for k in np.argsort(-(shares - alloc), kind="stable")[: n_other - alloc.sum()]:
            alloc[k] += 1
        for lab, cnt in zip(others, alloc):
            take(lab, int(cnt))

    corners = np.array(list(itertools.product(*zip(problem.fov_min, problem.fov_max))))
    picked.append(corners)
    tags.append(np.zeros(len(corners), dtype=np.int32))

    n_fill = n_points - sum(len(p) for p in picked)
    if n_fill > 0:
        body = _body_label(problem)
        centers = voxel_centers(problem.source_labels)
        cand = centers[problem.source_labels.data.ravel() == body]
        if len(cand) > 30000:
            cand = cand[np.sort(rng.choice(len(cand), 30000, replace=False))]
        if len(cand):
            current = np.concatenate(picked, axis=0)
            from scipy.spatial import cKDTree

            dist = cKDTree(current).query(cand)[0]
            fill = np.empty((min(n_fill, len(cand)), 3))
            for i in range(len(fill)):
                j = int(np.argmax(dist))
                fill[i] = cand[j]
                np.minimum(dist, np.linalg.norm(cand - cand[j], axis=1), out=dist)
            picked.append(fill)
            tags.append(np.zeros(len(fill), dtype=np.int32))

    points = np.concatenate(picked, axis=0)
    tag = np.concatenate(tags)

    # drop coincident points (shared organ boundaries produce duplicates)
    keys = np.round(points / 1e-6).astype(np.int64)
    _, first = np.unique(keys, axis=0, return_index=True)
    order = np.sort(first)
    points, tag = points[order], tag[order]
    if len(points) < 5:
        raise MeshGenerationError("degenerate geometry: fewer than 5 distinct points")

    from scipy.spatial import Delaunay

    try:
        tri = Delaunay(points)
    except Exception as exc:  # qhull failures surface as generation errors
        raise MeshGenerationError(f"tetrahedralization failed: {exc}") from exc
    tets = _orient_and_filter(points, np.asarray(tri.simplices, dtype=np.intp))

    # discard tets fully outside the field of view
    verts = points[tets]
    outside = np.any(verts < problem.fov_min - 1e-9, axis=2) | np.any(
        verts > problem.fov_max + 1e-9, axis=2
    )
    tets = tets[~outside.all(axis=1)]
    if len(tets) == 0:
        raise MeshGenerationError("no valid tets inside the field of view")

    used = np.unique(tets.ravel())
    remap = np.full(len(points), -1, dtype=np.intp)
    remap[used] = np.arange(len(used))
    points, tag, tets = points[used], tag[used], remap[tets]

    edges = _edges_of(tets)
    rest_lengths = np.linalg.norm(points[edges[:, 1]] - points[edges[:, 0]], axis=1)
    mids = 0.5 * (points[edges[:, 0]] + points[edges[:, 1]])
    mid_labels = _label_at(problem.source_labels, mids)
    elasticity = np.array([problem.elasticity_of(lab) for lab in mid_labels])
    return TetMesh(points, tets, edges, rest_lengths, elasticity, tag)


def refine_mesh(mesh: TetMesh, pair: TetMeshPair) -> tuple[TetMesh, TetMeshPair]:
    """One 1:8 subdivision; deformed states get midpoints of deformed edges,
    so the refined pair represents the same piecewise-linear map.

    The central octahedron splits along its shortest rest diagonal (ties:
    lowest vertex-index pair).  Half-edges keep their parent's elasticity;
    new cross edges average their two parents' constants.
    """
    P = mesh.n_points
    edges = mesh.edges
    edge_id: dict[tuple[int, int], int] = {
        (int(i), int(j)): k for k, (i, j) in enumerate(edges)
    }
    rest = np.concatenate(
        [mesh.rest_points, 0.5 * (mesh.rest_points[edges[:, 0]] + mesh.rest_points[edges[:, 1]])]
    )

    def mid(i: int, j: int) -> int:
        return P + edge_id[(i, j) if i < j else (j, i)]

    new_tets = np.empty((mesh.n_tets * 8, 4), dtype=np.intp)
    w = 0
    for quad in mesh.tets:
        v0, v1, v2, v3 = (int(v) for v in quad)
        m01, m02, m03 = mid(v0, v1), mid(v0, v2), mid(v0, v3)
        m12, m13, m23 = mid(v1, v2), mid(v1, v3), mid(v2, v3)
        new_tets[w + 0] = (v0, m01, m02, m03)
        new_tets[w + 1] = (v1, m01, m12, m13)
        new_tets[w + 2] = (v2, m02, m12, m23)
        new_tets[w + 3] = (v3, m03, m13, m23)
        diagonals = (
            (m01, m23, (m02, m03, m13, m12)),
            (m02, m13, (m01, m12, m23, m03)),
            (m03, m12, (m01, m02, m23, m13)),
        )
        best = min(
            diagonals,
            key=lambda d: (
                float(np.dot(rest[d[0]] - rest[d[1]], rest[d[0]] - rest[d[1]])),
                min(d[0], d[1]),
                max(d[0], d[1]),
            ),
        )
        a, b, cycle = best
        for k in range(4):
            new_tets[w + 4 + k] = (a, b, cycle[k], cycle[(k + 1) % 4])
        w += 8

    vols = signed_volumes(rest, new_tets)
    flip = vols < 0
    new_tets[flip] = new_tets[flip][:, [0, 1, 3, 2]]

    new_edges = _edges_of(new_tets)
    rest_lengths = np.linalg.norm(rest[new_edges[:, 1]] - rest[new_edges[:, 0]], axis=1)

    parent_of = np.concatenate([np.full(P, -1, dtype=np.intp), np.arange(len(edges))])
    elasticity = np.empty(len(new_edges))
    for k, (i, j) in enumerate(new_edges):
        pi, pj = parent_of[i], parent_of[j]
        if pi < 0 and pj >= 0:
            elasticity[k] = mesh.elasticity[pj]
        elif pj < 0 and pi >= 0:
            elasticity[k] = mesh.elasticity[pi]
        elif pi >= 0 and pj >= 0:
            elasticity[k] = 0.5 * (mesh.elasticity[pi] + mesh.elasticity[pj])
        else:  # two original vertices can no longer share an edge
            raise AssertionError("unsplit parent edge survived refinement")

    tag_i = mesh.surface_tags[edges[:, 0]]
    tag_j = mesh.surface_tags[edges[:, 1]]
    mid_tags = np.where(tag_i == tag_j, tag_i, 0).astype(np.int32)
    tags = np.concatenate([mesh.surface_tags, mid_tags])

    refined = TetMesh(rest, new_tets, new_edges, rest_lengths, elasticity, tags)
    return refined, TetMeshPair(
        refined, lift_state(mesh, pair.source), lift_state(mesh, pair.target)
    )


def lift_state(coarse: TetMesh, state: MeshState) -> MeshState:
    """Coarse state on the once-subdivided mesh: deformed edge midpoints
    appended in edge order, matching the vertex layout of refine_mesh."""
    pts = state.points
    mids = 0.5 * (pts[coarse.edges[:, 0]] + pts[coarse.edges[:, 1]])
    return MeshState(np.concatenate([pts, mids]))


# ---------------------------------------------------------------------------
# Point location and mapping

def _state_frames(mesh: TetMesh, state: MeshState):
    """Per-tet origin and inverse edge matrix for barycentric solves."""
    p = state.points[mesh.tets]
    v0 = p[:, 0]
    a = p[:, 1] - v0
    b = p[:, 2] - v0
    c = p[:, 3] - v0
    det = np.einsum("ij,ij->i", a, np.cross(b, c))
    inv = np.empty((len(v0), 3, 3))
    inv[:, 0] = np.cross(b, c)
    inv[:, 1] = np.cross(c, a)
    inv[:, 2] = np.cross(a, b)
    safe = np.abs(det) > 1e-300
    inv[safe] /= det[safe, None, None]
    inv[~safe] = 0.0
    return v0, inv, safe


def _bary_against(v0, inv, pts):
    d = pts - v0
    lam = np.einsum("nij,nj->ni", inv, d)
    return np.concatenate([(1.0 - lam.sum(axis=1))[:, None], lam], axis=1)


def _walk_serial(pts, start, v0, inv, safe, neighbors, cap, eps):
    """Neighbor-walk each point to its containing tet.

    Face choice among negative barycentrics is randomized (xorshift64*
    stream per point) because steepest descent can cycle on deformed
    meshes.  Points that walk off the hull or exhaust `cap` are left with
    done=False for the caller to settle.
    """
    n = pts.shape[0]
    tet_idx = np.zeros(n, dtype=np.intp)
    bary = np.zeros((n, 4))
    done = np.zeros(n, dtype=np.bool_)
    lam = np.empty(4)
    for i in range(n):
        cur = start[i]
        s = (np.uint64(i + 1) * _MIX_B) ^ _MIX_A
        for _ in range(cap):
            if safe[cur]:
                dx = pts[i, 0] - v0[cur, 0]
                dy = pts[i, 1] - v0[cur, 1]
                dz = pts[i, 2] - v0[cur, 2]
                l1 = inv[cur, 0, 0] * dx + inv[cur, 0, 1] * dy + inv[cur, 0, 2] * dz
                l2 = inv[cur, 1, 0] * dx + inv[cur, 1, 1] * dy + inv[cur, 1, 2] * dz
                l3 = inv[cur, 2, 0] * dx + inv[cur, 2, 1] * dy + inv[cur, 2, 2] * dz
                lam[0] = ((1.0 - l1) - l2) - l3
                lam[1] = l1
                lam[2] = l2
                lam[3] = l3
            else:
                lam[:] = -np.inf
            nneg = 0
            for f in range(4):
                if lam[f] < -eps:
                    nneg += 1
            if nneg == 0:
                tet_idx[i] = cur
                bary[i, :] = lam
                done[i] = True
                break
            s ^= s >> np.uint64(12)
            s ^= s << np.uint64(25)
            s ^= s >> np.uint64(27)
            r = (s * _MIX_C) >> np.uint64(11)
            pick = int(np.float64(r) * _INV_53 * nneg)
            face = 0
            seen = 0
            for f in range(4):
                if lam[f] < -eps:
                    if seen == pick:
                        face = f
                        break
                    seen += 1
            nb = neighbors[cur, face]
            if nb < 0:
                break
            cur = nb
    return tet_idx, bary, done


if njit is not None:
    _walk_serial = njit(cache=True)(_walk_serial)


def _walk_batch(pts, start, v0, inv, safe, neighbors, cap, eps):
    """Vectorized twin of _walk_serial for when numba is unavailable."""
    n = pts.shape[0]
    tet_idx = np.zeros(n, dtype=np.intp)
    bary = np.zeros((n, 4))
    done = np.zeros(n, dtype=bool)
    cur = start.copy()
    states = (np.arange(1, n + 1, dtype=np.uint64) * _MIX_B) ^ _MIX_A
    undecided = np.arange(n)
    for _ in range(cap):
        if len(undecided) == 0:
            break
        t = cur[undecided]
        d = pts[undecided] - v0[t]
        part = np.einsum("nij,nj->ni", inv[t], d)
        lam = np.empty((len(undecided), 4))
        lam[:, 0] = ((1.0 - part[:, 0]) - part[:, 1]) - part[:, 2]
        lam[:, 1:] = part
        lam[~safe[t]] = -np.inf
        contained = lam.min(axis=1) >= -eps
        hit = undecided[contained]
        tet_idx[hit] = t[contained]
        bary[hit] = lam[contained]
        done[hit] = True
        moving = undecided[~contained]
        if len(moving) == 0:
            break
        s = states[moving]
        s ^= s >> np.uint64(12)
        s ^= s << np.uint64(25)
        s ^= s >> np.uint64(27)
        states[moving] = s
        r = ((s * _MIX_C) >> np.uint64(11)).astype(np.float64)
        neg = lam[~contained] < -eps
        counts = neg.sum(axis=1)
        pick = (r * _INV_53 * counts).astype(np.intp)
        cols = np.argsort(~neg, axis=1, kind="stable")
        face = cols[np.arange(len(moving)), pick]
        step = neighbors[cur[moving], face]
        alive = step >= 0
        undecided = moving[alive]
        cur[undecided] = step[alive]
    return tet_idx, bary, done


_walk = _walk_serial if njit is not None else _walk_batch


def locate_points(
    mesh: TetMesh,
    state: MeshState,
    pts: np.ndarray,
    hint: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Locate many points in a deformed state.

    Returns (tet_idx, bary, inside).  Outside-hull points keep the nearest
    tet (by centroid) with extrapolated barycentrics and inside=False.
    Strategy: neighbor-walk from a hint or nearest centroid; points the
    walk cannot settle are tested against their nearest-centroid tets.
    """
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    n = len(pts)
    v0, inv, safe = _state_frames(mesh, state)
    from scipy.spatial import cKDTree

    tree = None
    if hint is None:
        tree = cKDTree(state.points[mesh.tets].mean(axis=1))
        cur = tree.query(pts)[1].astype(np.intp)
    else:
        cur = np.array(hint, dtype=np.intp)
        cur[(cur < 0) | (cur >= mesh.n_tets)] = 0

    tet_idx, bary, inside = _walk(
        pts, cur, v0, inv, safe, mesh.neighbors, _WALK_CAP, BARY_EPS
    )
    inside = inside.astype(bool)
    # dead ends and cap overruns: test the tets whose centroids are nearest
    # to each point.  Candidate count is generous relative to the size of a
    # point's one-ring, so a containing tet is not missed in practice, and
    # the cost stays independent of mesh size.
    pending = np.flatnonzero(~inside)
    if len(pending):
        if tree is None:
            tree = cKDTree(state.points[mesh.tets].mean(axis=1))
        kk = min(_LOCATE_KNN, mesh.n_tets)
        cand = tree.query(pts[pending], k=kk)[1]
        cand = np.atleast_2d(cand).reshape(len(pending), kk).astype(np.intp)
        d = pts[pending][:, None, :] - v0[cand]
        lam = np.einsum("nkij,nkj->nki", inv[cand], d)
        lam = np.concatenate([(1.0 - lam.sum(axis=2))[:, :, None], lam], axis=2)
        lam[~safe[cand]] = -np.inf
        minb = lam.min(axis=2)
        best = np.argmax(minb, axis=1)
        rows = np.arange(len(pending))
        ok = minb[rows, best] >= -BARY_EPS
        # outside points extrapolate from the nearest centroid instead
        best[~ok] = 0
        tet_idx[pending] = cand[rows, best]
        bary[pending] = lam[rows, best]
        inside[pending] = ok
        off = pending[~ok]
        if len(off):
            near = cand[~ok, 0]
            bary[off] = _bary_against(v0[near], inv[near], pts[off])
    return tet_idx, bary, inside


def locate_point(mesh: TetMesh, state: MeshState, p) -> tuple[int, np.ndarray]:
    """Single-point location; tet index is -1 for outside-hull points (the
    returned barycentrics then extrapolate from the nearest tet)."""
    tet_idx, bary, inside = locate_points(mesh, state, np.asarray(p, dtype=np.float64)[None, :])
    if inside[0]:
        return int(tet_idx[0]), bary[0]
    return -1, bary[0]


def map_points(
    pair: TetMeshPair,
    pts: np.ndarray,
    direction: str = "target_to_source",
    hint: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Map points between image spaces via shared barycentrics.

    Returns (mapped, inside); outside-hull points are extrapolated from
    the nearest tet and flagged False.
    """
    if direction == "target_to_source":
        frm, to = pair.target, pair.source
    elif direction == "source_to_target":
        frm, to = pair.source, pair.target
    else:
        raise ValueError(f"unknown direction {direction!r}")
    tet_idx, bary, inside = locate_points(pair.mesh, frm, pts, hint=hint)
    corners = to.points[pair.mesh.tets[tet_idx]]
    mapped = np.einsum("nk,nkj->nj", bary, corners)
    return mapped, inside


def map_point(pair: TetMeshPair, p, direction: str = "target_to_source") -> np.ndarray:
    mapped, _ = map_points(pair, np.asarray(p, dtype=np.float64)[None, :], direction)
    return mapped[0]


def extract_dvf(pair: TetMeshPair, grid) -> Dvf:
    """Dense displacement field of the pair's map on `grid` (target space).

    Voxels outside the target-state hull carry the nearest tet's
    extrapolated vector and are flagged in `extrapolated`.
    """
    centers = voxel_centers(grid)
    mapped, inside = map_points(pair, centers, "target_to_source")
    nx, ny, nz = grid.dims
    vectors = (mapped - centers).reshape(nz, ny, nx, 3).astype(np.float32)
    flags = (~inside).reshape(nz, ny, nx)
    return Dvf(vectors, grid.spacing, grid.origin, extrapolated=flags)


def transform_mask(pair: TetMeshPair, source_labels: LabelVolume, label: int) -> LabelVolume:
    """Pull one organ mask into target space (nearest-neighbor lookup).

    Target voxels outside the target-state hull become background.
    """
    centers = voxel_centers(source_labels)
    mapped, inside = map_points(pair, centers, "target_to_source")
    idx = np.rint(source_labels.physical_to_continuous(mapped)).astype(np.intp)
    nx, ny, nz = source_labels.dims
    ix = np.clip(idx[:, 0], 0, nx - 1)
    iy = np.clip(idx[:, 1], 0, ny - 1)
    iz = np.clip(idx[:, 2], 0, nz - 1)
    values = source_labels.data[iz, iy, ix]
    out = np.where(inside & (values == label), label, 0).astype(source_labels.data.dtype)
    return LabelVolume(
        out.reshape(nz, ny, nx),
        source_labels.spacing,
        source_labels.origin,
        source_labels.label_names,
    )


# ---------------------------------------------------------------------------
# Text interchange format

def save_mesh(mesh: TetMesh, path) -> None:
    """Write topology: `point x y z [tag]`, `tet i0..i3`, `edge i j rest c`."""
    with open(path, "w", encoding="ascii") as fh:
        for p, tag in zip(mesh.rest_points, mesh.surface_tags):
            line = f"point {float(p[0])!r} {float(p[1])!r} {float(p[2])!r}"
            if tag:
                line += f" {int(tag)}"
            fh.write(line + "\n")
        for t in mesh.tets:
            fh.write(f"tet {t[0]} {t[1]} {t[2]} {t[3]}\n")
        for (i, j), rest, c in zip(mesh.edges, mesh.rest_lengths, mesh.elasticity):
            fh.write(f"edge {i} {j} {float(rest)!r} {float(c)!r}\n")


def load_mesh(path) -> TetMesh:
    points, tags, tets, edges, lengths, consts = [], [], [], [], [], []
    with open(path, "r", encoding="ascii") as fh:
        for ln, raw in enumerate(fh, 1):
            parts = raw.split()
            if not parts or parts[0].startswith("#"):
                continue
            kind = parts[0]
            try:
                if kind == "point":
                    points.append([float(v) for v in parts[1:4]])
                    tags.append(int(parts[4]) if len(parts) > 4 else 0)
                elif kind == "tet":
                    tets.append([int(v) for v in parts[1:5]])
                elif kind == "edge":
                    edges.append([int(parts[1]), int(parts[2])])
                    lengths.append(float(parts[3]))
                    consts.append(float(parts[4]))
                else:
                    raise ValueError(f"unknown record {kind!r}")
            except (ValueError, IndexError) as exc:
                raise ValueError(f"{path}:{ln}: malformed mesh line ({exc})") from exc
    if not points or not tets:
        raise ValueError(f"{path}: mesh file lacks points or tets")
    return TetMesh(
        np.asarray(points),
        np.asarray(tets, dtype=np.intp),
        np.asarray(edges, dtype=np.intp),
        np.asarray(lengths),
        np.asarray(consts),
        np.asarray(tags, dtype=np.int32),
    )


def save_state(state: MeshState, path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        for p in state.points:
            fh.write(f"point {float(p[0])!r} {float(p[1])!r} {float(p[2])!r}\n")


def load_state(path) -> MeshState:
    points = []
    with open(path, "r", encoding="ascii") as fh:
        for ln, raw in enumerate(fh, 1):
            parts = raw.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] != "point" or len(parts) < 4:
                raise ValueError(f"{path}:{ln}: malformed state line")
            points.append([float(v) for v in parts[1:4]])
    if not points:
        raise ValueError(f"{path}: empty state file")
    return MeshState(np.asarray(points))
