"""The three minimized objectives of a candidate mesh transformation.

All both-state quantities use the convention: a fold in either state makes
the candidate infeasible, carrying a violation count instead of values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tetmesh import TetMeshPair, detect_folds, locate_points, map_points
from .volumes import RegistrationProblem, trilinear_sample

__all__ = [
    "ObjectiveVector",
    "Evaluation",
    "ObjectiveConfig",
    "deformation_magnitude",
    "image_similarity",
    "guidance_distance",
    "evaluate",
]

# Kronecker low-discrepancy recurrence based on the plastic number.
_PLASTIC = 1.324717957244746
_ALPHA = np.array([1.0 / _PLASTIC, 1.0 / _PLASTIC**2, 1.0 / _PLASTIC**3])


@dataclass(frozen=True)
class ObjectiveVector:
    """Deformation magnitude, image similarity, guidance distance (all >= 0)."""

    deformation: float
    similarity: float
    guidance: float

    def as_array(self) -> np.ndarray:
        return np.array([self.deformation, self.similarity, self.guidance])

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.deformation, self.similarity, self.guidance)


@dataclass(frozen=True)
class Evaluation:
    """Feasible candidates carry objectives; infeasible ones a fold count."""

    objectives: ObjectiveVector | None
    violations: int

    @property
    def feasible(self) -> bool:
        return self.violations == 0


@dataclass(frozen=True)
class ObjectiveConfig:
    samples_per_tet: int = 8
    rng_seed: int = 0


def deformation_magnitude(pair: TetMeshPair) -> float:
    """Edge-strain energy, averaged over edges and summed over both states.

    Each edge contributes c * ((l - l_rest) / l_rest)^2.
    """
    mesh = pair.mesh
    e0, e1 = mesh.edges[:, 0], mesh.edges[:, 1]
    total = 0.0
    for state in (pair.source, pair.target):
        lengths = np.linalg.norm(state.points[e1] - state.points[e0], axis=1)
        strain = (lengths - mesh.rest_lengths) / mesh.rest_lengths
        total += float(np.mean(mesh.elasticity * strain**2))
    return total


def _sample_barycentrics(mesh, samples_per_tet: int, rng_seed: int) -> np.ndarray:
    """(T, S, 4) low-discrepancy barycentric samples, fixed per tet index."""
    key = ("simsamples", samples_per_tet, rng_seed)
    bary = mesh._cache.get(key)
    if bary is not None:
        return bary
    T = mesh.n_tets
    rng = np.random.default_rng(np.random.SeedSequence((int(rng_seed), 0x5A11)))
    offsets = rng.random((T, 1, 3))
    k = np.arange(1, samples_per_tet + 1).reshape(1, -1, 1)
    u = np.mod(offsets + k * _ALPHA, 1.0)
    u.sort(axis=2)
    bary = np.empty((T, samples_per_tet, 4))
    bary[:, :, 0] = u[:, :, 0]
    bary[:, :, 1] = u[:, :, 1] - u[:, :, 0]
    bary[:, :, 2] = u[:, :, 2] - u[:, :, 1]
    bary[:, :, 3] = 1.0 - u[:, :, 2]
    mesh._cache[key] = bary
    return bary


def image_similarity(
    pair: TetMeshPair,
    problem: RegistrationProblem,
    samples_per_tet: int = 8,
    rng_seed: int = 0,
) -> float:
    """Mean squared intensity difference over per-tet interior samples.

    Sample positions are taken in the target state and carried to the
    source state by their barycentrics, so both intensities describe the
    same material point under the candidate map.
    """
    mesh = pair.mesh
    bary = _sample_barycentrics(mesh, samples_per_tet, rng_seed)
    tcorn = pair.target.points[mesh.tets]
    scorn = pair.source.points[mesh.tets]
    xt = np.matmul(bary, tcorn).reshape(-1, 3)
    xs = np.matmul(bary, scorn).reshape(-1, 3)
    vt = trilinear_sample(problem.target_image, xt)
    vs = trilinear_sample(problem.source_image, xs)
    return float(np.mean((vt - vs) ** 2))


def _stacked_sources(mesh, problem: RegistrationProblem):
    """All organs' source contour points in one array, with rest-tet hints
    and per-organ slice bounds; cached so the hot path only concatenates
    once per (mesh, problem)."""
    key = ("guidance_src", id(problem))
    cached = mesh._cache.get(key)
    if cached is None:
        labels = problem.organ_labels()
        pts = np.concatenate([problem.guidance[lab].source for lab in labels], axis=0)
        hints = locate_points(mesh, mesh.rest_state, pts)[0]
        bounds = np.cumsum([0, *(len(problem.guidance[lab].source) for lab in labels)])
        cached = (pts, hints, bounds)
        mesh._cache[key] = cached
    return cached


def guidance_distance(pair: TetMeshPair, problem: RegistrationProblem) -> float:
    """Symmetric mean contour distance, averaged over organs (equal weights).

    Source contour points are mapped source-to-target; the two directed
    mean nearest-neighbor distances against the target contour points are
    averaged.  All organs share one location pass so the per-tet frames
    are built once per evaluation.
    """
    from scipy.spatial import cKDTree

    labels = problem.organ_labels()
    pts, hints, bounds = _stacked_sources(pair.mesh, problem)
    mapped_all, _ = map_points(pair, pts, "source_to_target", hint=hints)
    total = 0.0
    for k, label in enumerate(labels):
        gp = problem.guidance[label]
        mapped = mapped_all[bounds[k] : bounds[k + 1]]
        # rebuilt every call, so skip the balancing work
        tree = cKDTree(mapped, balanced_tree=False, compact_nodes=False)
        d_to_mapped = tree.query(gp.target)[0]
        d_to_target = problem.target_tree(label).query(mapped)[0]
        total += 0.5 * (float(d_to_mapped.mean()) + float(d_to_target.mean()))
    return total / len(labels)


def evaluate(
    pair: TetMeshPair,
    problem: RegistrationProblem,
    config: ObjectiveConfig = ObjectiveConfig(),
) -> Evaluation:
    """Fold-checked evaluation; folded pairs carry a violation count only."""
    violations = len(detect_folds(pair.mesh, pair.source)) + len(
        detect_folds(pair.mesh, pair.target)
    )
    if violations:
        return Evaluation(None, int(violations))
    vec = ObjectiveVector(
        deformation_magnitude(pair),
        image_similarity(pair, problem, config.samples_per_tet, config.rng_seed),
        guidance_distance(pair, problem),
    )
    arr = vec.as_array()
    if not np.all(np.isfinite(arr)) or np.any(arr < 0):
        raise FloatingPointError(f"objective evaluation produced invalid values {arr}")
    return Evaluation(vec, 0)
