"""Population seeding from externally supplied displacement fields.

Fields follow the inverse-style convention (target grid, target-to-source
displacement).  Because both mesh copies start at the shared rest
configuration, carrying a source-mesh point along the sampled field moves
it to the source-space position of its target-space rest location, so a
full application reproduces the field as the pair's transformation.

Incremental application with a per-move fold guard keeps every produced
state fold-free even for folded or adversarial input fields; blocked
moves are skipped silently and only counted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tetmesh import (
    VOLUME_EPS,
    MeshState,
    TetMesh,
    TetMeshPair,
    repair_state,
)
from .volumes import Dvf, GridMismatchError, RegistrationProblem, trilinear_sample

__all__ = [
    "DvfSet",
    "apply_dvf_to_mesh",
    "seed_population",
    "member_seed",
    "load_dvf_set",
    "synthetic_dvf_provider",
]

try:  # pragma: no cover - exercised implicitly by speed
    from numba import njit
except ImportError:  # pragma: no cover
    njit = None


def _guarded_sweep(pts, prop, order, tets, indptr, tet_ids, eps6):
    """One randomized pass: move each point unless an incident tet folds.

    Mutates `pts` in place, returns the number of skipped moves.  Written
    as a scalar loop so the jitted and plain paths share one float
    evaluation order.
    """
    skipped = 0
    for oi in range(order.shape[0]):
        p = order[oi]
        ox = pts[p, 0]
        oy = pts[p, 1]
        oz = pts[p, 2]
        pts[p, 0] = ox + prop[p, 0]
        pts[p, 1] = oy + prop[p, 1]
        pts[p, 2] = oz + prop[p, 2]
        ok = True
        for k in range(indptr[p], indptr[p + 1]):
            t = tet_ids[k]
            i0 = tets[t, 0]
            i1 = tets[t, 1]
            i2 = tets[t, 2]
            i3 = tets[t, 3]
            ax = pts[i1, 0] - pts[i0, 0]
            ay = pts[i1, 1] - pts[i0, 1]
            az = pts[i1, 2] - pts[i0, 2]
            bx = pts[i2, 0] - pts[i0, 0]
            by = pts[i2, 1] - pts[i0, 1]
            bz = pts[i2, 2] - pts[i0, 2]
            cx = pts[i3, 0] - pts[i0, 0]
            cy = pts[i3, 1] - pts[i0, 1]
            cz = pts[i3, 2] - pts[i0, 2]
            six_v = (
                ax * (by * cz - bz * cy)
                + ay * (bz * cx - bx * cz)
                + az * (bx * cy - by * cx)
            )
            if six_v <= eps6:
                ok = False
                break
        if not ok:
            pts[p, 0] = ox
            pts[p, 1] = oy
            pts[p, 2] = oz
            skipped += 1
    return skipped


if njit is not None:
    _guarded_sweep = njit(cache=True)(_guarded_sweep)


@dataclass(frozen=True)
class DvfSet:
    """Ordered displacement fields with provenance ids; all share one grid."""

    entries: tuple[Dvf, ...]
    ids: tuple[str, ...]

    def __post_init__(self):
        if not self.entries:
            raise ValueError("a DVF set must contain at least one field")
        if len(self.ids) != len(self.entries):
            raise ValueError("ids and entries must align")
        key = self.entries[0].grid_key()
        for ident, dvf in zip(self.ids, self.entries):
            if dvf.grid_key() != key:
                raise GridMismatchError(f"field {ident!r} is on a different grid")

    def __len__(self):
        return len(self.entries)

    def validate_against(self, problem: RegistrationProblem) -> None:
        if self.entries[0].grid_key() != problem.grid.grid_key():
            raise GridMismatchError("DVF grid does not match the problem grid")


def apply_dvf_to_mesh(
    mesh: TetMesh,
    state: MeshState,
    dvf: Dvf,
    scale: float,
    n_steps: int = 100,
    rng: np.random.Generator | None = None,
) -> tuple[MeshState, int]:
    """Incrementally carry mesh points along a scaled field, guarding folds.

    Each of the n_steps passes visits the points in a fresh random order
    and proposes (scale / n_steps) times the field interpolated at the
    point's current position; a move is applied only when no incident tet
    volume drops to the fold threshold.  Returns the new state and the
    count of skipped moves.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be at least 1")
    if rng is None:
        rng = np.random.default_rng()
    pts = state.points.copy()
    indptr, tet_ids = mesh.incident_tets
    tets = mesh.tets
    factor = float(scale) / n_steps
    skipped = 0
    for _ in range(n_steps):
        order = rng.permutation(mesh.n_points)
        # each point moves at most once per pass, so sampling the field at
        # the pass start equals sampling at visit time
        prop = factor * trilinear_sample(dvf, pts)
        skipped += int(
            _guarded_sweep(pts, prop, order, tets, indptr, tet_ids, 6.0 * VOLUME_EPS)
        )
    return MeshState(pts), skipped


def member_seed(seed: int, dvf_index: int, member_index: int) -> np.random.SeedSequence:
    """RNG stream of one seeded individual; fixed so runs are replayable."""
    return np.random.SeedSequence((int(seed), int(dvf_index), int(member_index)))


def seed_population(
    mesh: TetMesh,
    dvf_set: DvfSet,
    population_size: int,
    n_steps: int = 100,
    noise_sigma: float = 0.0,
    seed: int = 0,
) -> list[TetMeshPair]:
    """Build a population whose source states sample the given fields.

    The fields split the population into near-equal groups (earlier
    groups take the remainder); member j of a g-member group applies its
    field at scale (j + 1) / g.  All members get Gaussian point noise and
    repair, except each group's scale-1.0 representative, whose source
    state stays the exact full application.  Target states are rest plus
    noise plus repair.
    """
    if population_size < 1:
        raise ValueError("population_size must be positive")
    n_dvfs = len(dvf_set)
    base, rem = divmod(population_size, n_dvfs)
    rest = mesh.rest_state
    pairs: list[TetMeshPair] = []
    for d, dvf in enumerate(dvf_set.entries):
        group = base + (1 if d < rem else 0)
        for j in range(group):
            scale = (j + 1) / group
            rng = np.random.default_rng(member_seed(seed, d, j))
            source, _ = apply_dvf_to_mesh(mesh, rest, dvf, scale, n_steps, rng)
            if j != group - 1 and noise_sigma > 0:
                noisy = source.points + rng.normal(0.0, noise_sigma, source.points.shape)
                source, _ = repair_state(mesh, MeshState(noisy))
            if noise_sigma > 0:
                tgt = rest.points + rng.normal(0.0, noise_sigma, rest.points.shape)
                target, _ = repair_state(mesh, MeshState(tgt))
            else:
                target = rest
            pairs.append(TetMeshPair(mesh, source, target))
    return pairs


def load_dvf_set(
    paths,
    problem: RegistrationProblem,
    units: str = "mm",
) -> DvfSet:
    """Load displacement fields from files and validate them as a set.

    ``units="voxel"`` converts per-axis voxel displacements to mm on
    ingestion.
    """
    from .volumes import load_volume

    paths = list(paths)
    if not paths:
        raise ValueError("no DVF files given")
    if units not in ("mm", "voxel"):
        raise ValueError(f"unknown units {units!r}")
    entries = []
    ids = []
    for path in paths:
        loaded = load_volume(path)
        if not isinstance(loaded, Dvf):
            raise ValueError(f"{path} does not contain a displacement field")
        if units == "voxel":
            vec = loaded.vectors * np.asarray(loaded.spacing, dtype=np.float32)
            loaded = Dvf(vec, loaded.spacing, loaded.origin)
        entries.append(loaded)
        ids.append(str(path))
    out = DvfSet(tuple(entries), tuple(ids))
    out.validate_against(problem)
    return out


def synthetic_dvf_provider(
    problem: RegistrationProblem,
    truth: Dvf,
    n: int = 15,
    smoothing_levels=(0.0, 0.5, 1.0, 2.0, 4.0),
    noise_levels=(0.0, 2.0, 5.0),
    rng_seed: int = 0,
) -> DvfSet:
    """Degraded variants of a ground-truth field, standing in for an
    external predictor ensemble.

    Variant i pairs smoothing_levels[i % S] (Gaussian, voxels) with
    noise_levels[i // S] (divergence-free curl noise, mm amplitude), so
    the first variant reproduces the truth exactly when both lists start
    at zero.
    """
    from scipy.ndimage import gaussian_filter

    if truth.grid_key() != problem.grid.grid_key():
        raise GridMismatchError("truth field is not on the problem grid")
    if n < 1:
        raise ValueError("need at least one variant")
    rng = np.random.default_rng(np.random.SeedSequence((int(rng_seed), 0xD7F)))
    spacing = np.asarray(truth.spacing)
    entries = []
    ids = []
    for i in range(n):
        sigma = float(smoothing_levels[i % len(smoothing_levels)])
        amp = float(noise_levels[(i // len(smoothing_levels)) % len(noise_levels)])
        vec = truth.vectors.astype(np.float64)
        if sigma > 0:
            vec = np.stack(
                [gaussian_filter(vec[..., c], sigma, mode="nearest") for c in range(3)],
                axis=-1,
            )
        if amp > 0:
            vec = vec + amp * _unit_curl_noise(rng, vec.shape[:3], spacing)
        entries.append(Dvf(vec.astype(np.float32), truth.spacing, truth.origin))
        ids.append(f"synthetic_{i:02d}_s{sigma:g}_n{amp:g}")
    return DvfSet(tuple(entries), tuple(ids))


def _unit_curl_noise(rng, shape, spacing) -> np.ndarray:
    """Smooth divergence-free noise normalized to unit peak magnitude."""
    from scipy.ndimage import gaussian_filter

    pot = [gaussian_filter(rng.standard_normal(shape), 1.5, mode="nearest") for _ in range(3)]
    grads = [np.gradient(p, spacing[2], spacing[1], spacing[0]) for p in pot]
    # gradient axes come back (z, y, x); curl in (x, y, z) component order
    dz = [g[0] for g in grads]
    dy = [g[1] for g in grads]
    dx = [g[2] for g in grads]
    curl = np.stack(
        [dy[2] - dz[1], dz[0] - dx[2], dx[1] - dy[0]],
        axis=-1,
    )
    peak = np.linalg.norm(curl, axis=-1).max()
    if peak <= 0:
        return curl
    return curl / peak
