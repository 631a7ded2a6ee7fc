"""Clustered estimation-of-distribution optimizer for dual mesh states.

A genotype is the concatenated flat coordinates of both deformed states
over one shared topology.  Each generation the feasible population is
partitioned into equal-size clusters in normalized objective space, each
cluster fits a diagonal-plus-low-rank Gaussian and samples offspring
into randomly chosen mesh-point blocks of a parent, offspring are
repaired and evaluated, an elitist archive absorbs the feasible ones,
and rank/crowding truncation forms the next population.  One optional
refinement pass swaps the population and archive onto a subdivided mesh
partway through the budget.

All randomness flows through per-individual streams derived from
(seed, generation, index), so results do not depend on evaluation
order, and an optional virtual clock makes whole runs replayable
byte for byte.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .objectives import Evaluation, ObjectiveConfig, ObjectiveVector, evaluate
from .seeding import DvfSet, seed_population
from .tetmesh import (
    MeshState,
    TetMesh,
    TetMeshPair,
    detect_folds,
    generate_mesh,
    lift_state,
    refine_mesh,
    repair_state,
)
from .volumes import RegistrationProblem

__all__ = [
    "OptimizerConfig",
    "Individual",
    "ArchiveEntry",
    "ApproximationSet",
    "Snapshot",
    "OptimizeResult",
    "InitializationError",
    "encode_pair",
    "decode_genotype",
    "update_archive",
    "hypervolume",
    "cluster_population",
    "vary_cluster",
    "initialize_population",
    "optimize",
    "select_solution",
    "write_convergence_csv",
    "CONVERGENCE_HEADER",
]

CONVERGENCE_HEADER = (
    "generation,elapsed_s,best_deformation,best_similarity,best_guidance,"
    "archive_size,hypervolume"
)

_RANK_CAP = 8  # principal directions kept per cluster model
_BLOCK_PROB = 0.3  # chance a mesh-point block is resampled in an offspring
_FULL_RESAMPLE_PROB = 0.25  # chance an offspring takes the whole sampled vector


class InitializationError(RuntimeError):
    pass


@dataclass
class OptimizerConfig:
    population_size: int = 600
    n_clusters: int = 10
    archive_capacity: int = 1000
    coarse_points: int = 200
    resolutions: int = 2
    time_budget_s: float = 1800.0
    max_generations: int | None = None
    snapshot_times_s: tuple[float, ...] = ()
    rng_seed: int = 0
    samples_per_tet: int = 8
    frac_primary: float = 0.2
    frac_other: float = 0.4
    init_noise_frac: float = 0.10  # cold-start noise, fraction of mean edge length
    seed_noise_frac: float = 0.05  # extra noise on seeded members
    seed_steps: int = 100
    stagnation_window: int = 20
    stagnation_tol: float = 0.01
    step_init: float = 1.0
    step_bounds: tuple[float, float] = (1e-4, 10.0)
    seconds_per_eval: float | None = None  # None: wall clock; set: virtual clock

    def __post_init__(self):
        if self.population_size < 2 * self.n_clusters:
            raise ValueError("population must be at least twice the cluster count")
        if self.n_clusters < 1 or self.archive_capacity < 1:
            raise ValueError("cluster count and archive capacity must be positive")
        if self.resolutions not in (1, 2):
            raise ValueError("resolutions must be 1 or 2")
        if self.time_budget_s <= 0:
            raise ValueError("time budget must be positive")
        if not (0 < self.stagnation_tol < 1):
            raise ValueError("stagnation tolerance must be in (0, 1)")
        lo, hi = self.step_bounds
        if not (0 < lo < hi):
            raise ValueError("step bounds must satisfy 0 < lo < hi")


# ---------------------------------------------------------------------------
# Genotypes

def encode_pair(pair: TetMeshPair) -> np.ndarray:
    return np.concatenate([pair.source.points.ravel(), pair.target.points.ravel()])


def decode_genotype(mesh: TetMesh, genotype: np.ndarray) -> TetMeshPair:
    half = 3 * mesh.n_points
    if genotype.shape != (2 * half,):
        raise ValueError(
            f"genotype length {genotype.shape} does not match mesh with {mesh.n_points} points"
        )
    src = MeshState(genotype[:half].reshape(-1, 3))
    tgt = MeshState(genotype[half:].reshape(-1, 3))
    return TetMeshPair(mesh, src, tgt)


def _repair_genotype(mesh: TetMesh, genotype: np.ndarray) -> np.ndarray:
    pair = decode_genotype(mesh, genotype)
    src, _ = repair_state(mesh, pair.source)
    tgt, _ = repair_state(mesh, pair.target)
    return np.concatenate([src.points.ravel(), tgt.points.ravel()])


@dataclass
class Individual:
    genotype: np.ndarray
    pair: TetMeshPair
    evaluation: Evaluation | None = None

    @classmethod
    def from_pair(cls, pair: TetMeshPair) -> "Individual":
        return cls(encode_pair(pair), pair)

    @classmethod
    def from_genotype(cls, mesh: TetMesh, genotype: np.ndarray) -> "Individual":
        return cls(genotype, decode_genotype(mesh, genotype))


# ---------------------------------------------------------------------------
# Elitist archive

@dataclass(frozen=True)
class ArchiveEntry:
    genotype: np.ndarray
    objectives: ObjectiveVector


class ApproximationSet:
    """Bounded archive of mutually non-dominated objective vectors."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.entries: list[ArchiveEntry] = []

    def __len__(self):
        return len(self.entries)

    def objective_matrix(self) -> np.ndarray:
        if not self.entries:
            return np.empty((0, 3))
        return np.array([e.objectives.as_array() for e in self.entries])

    def best_per_objective(self) -> np.ndarray:
        """Componentwise minima over the archive; shape (3,)."""
        mat = self.objective_matrix()
        if not len(mat):
            return np.full(3, np.nan)
        return mat.min(axis=0)

    def add(self, genotype: np.ndarray, objectives: ObjectiveVector) -> bool:
        cand = objectives.as_array()
        if not self.entries:
            self.entries.append(ArchiveEntry(genotype, objectives))
            return True
        mat = self.objective_matrix()
        # weak dominance: an entry at least as good everywhere (duplicates too)
        if bool(np.any(np.all(mat <= cand, axis=1))):
            return False
        dominated = np.all(cand <= mat, axis=1)
        if dominated.any():
            self.entries = [e for e, d in zip(self.entries, dominated) if not d]
        self.entries.append(ArchiveEntry(genotype, objectives))
        if len(self.entries) > self.capacity:
            self._evict_one()
        return True

    def _evict_one(self):
        mat = self.objective_matrix()
        lo = mat.min(axis=0)
        span = mat.max(axis=0) - lo
        span[span <= 0] = 1.0
        norm = (mat - lo) / span
        if len(norm) > 200:
            dist, _ = cKDTree(norm).query(norm, k=2)
            nn = dist[:, 1]
        else:
            d2 = np.sum((norm[:, None, :] - norm[None, :, :]) ** 2, axis=2)
            np.fill_diagonal(d2, np.inf)
            nn = np.sqrt(d2.min(axis=1))
        protected = set(int(np.argmin(mat[:, j])) for j in range(mat.shape[1]))
        order = np.argsort(nn, kind="stable")
        for idx in order:
            if int(idx) not in protected:
                del self.entries[int(idx)]
                return
        del self.entries[int(order[0])]  # unreachable for capacity > 3


def update_archive(
    archive: ApproximationSet, genotype: np.ndarray, objectives: ObjectiveVector
) -> bool:
    return archive.add(genotype, objectives)


def select_solution(archive) -> int:
    """Index of the reported entry in an archive (or plain entry list).

    Entries sorted ascending by (guidance, similarity, deformation); the
    second-best guidance entry is returned as a hedge against guidance
    overfit, or the single entry when only one exists.
    """
    entries = archive.entries if hasattr(archive, "entries") else list(archive)
    n = len(entries)
    if n == 0:
        raise ValueError("archive is empty")
    order = sorted(
        range(n),
        key=lambda i: (
            entries[i].objectives.guidance,
            entries[i].objectives.similarity,
            entries[i].objectives.deformation,
        ),
    )
    return order[1] if n >= 2 else order[0]


# ---------------------------------------------------------------------------
# Hypervolume (3-objective, exact dimension sweep)

def _staircase_area(xy: np.ndarray, ref_x: float, ref_y: float) -> float:
    pts = xy[np.lexsort((xy[:, 1], xy[:, 0]))]
    front = []  # strictly decreasing y as x grows
    best_y = np.inf
    for x, y in pts:
        if y < best_y:
            front.append((x, y))
            best_y = y
    area = 0.0
    for i, (x, y) in enumerate(front):
        nx = front[i + 1][0] if i + 1 < len(front) else ref_x
        area += (nx - x) * (ref_y - y)
    return area


def hypervolume(points, reference) -> float:
    """Exact hypervolume dominated by minimization points within a box.

    Sweeps the third objective and accumulates slab volumes from the 2-D
    staircase of the active points.  Points must lie inside the reference
    box (componentwise at or below the reference).
    """
    ref = np.asarray(reference, dtype=np.float64)
    if ref.shape != (3,):
        raise ValueError("reference must be a 3-vector")
    pts = np.array(
        [p.as_array() if isinstance(p, ObjectiveVector) else np.asarray(p, float) for p in points],
        dtype=np.float64,
    ).reshape(-1, 3)
    if len(pts) == 0:
        return 0.0
    if not np.all(np.isfinite(pts)):
        raise ValueError("points must be finite")
    if np.any(pts > ref + 1e-12):
        raise ValueError("a point lies outside the reference box")
    zs = np.unique(pts[:, 2])
    total = 0.0
    levels = np.append(zs, ref[2])
    for i in range(len(zs)):
        active = pts[pts[:, 2] <= zs[i] + 1e-15]
        dz = levels[i + 1] - levels[i]
        if dz <= 0:
            continue
        total += _staircase_area(active[:, :2], ref[0], ref[1]) * dz
    return total


# ---------------------------------------------------------------------------
# Clustering

def cluster_population(objectives: np.ndarray, k: int, rng: np.random.Generator):
    """Equal-size partition of objective vectors into k clusters.

    Min-max normalization, k-means++ seeding, a few Lloyd iterations, then
    greedy distance-ordered assignment with per-cluster caps of floor and
    ceil of n / k.  Returns a list of index arrays.  Fewer points than
    clusters degrades to a single cluster.
    """
    objs = np.asarray(objectives, dtype=np.float64)
    n = len(objs)
    if n == 0:
        return []
    if n < k or k == 1:
        return [np.arange(n)]
    lo = objs.min(axis=0)
    span = objs.max(axis=0) - lo
    span[span <= 0] = 1.0
    x = (objs - lo) / span

    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[j] = x[rng.integers(n)]
        else:
            centers[j] = x[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, np.sum((x - centers[j]) ** 2, axis=1))
    for _ in range(10):
        dist = np.sum((x[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        assign = dist.argmin(axis=1)
        for j in range(k):
            sel = assign == j
            if sel.any():
                centers[j] = x[sel].mean(axis=0)

    dist = np.sum((x[:, None, :] - centers[None, :, :]) ** 2, axis=2)
    base, rem = divmod(n, k)
    cap = np.full(k, base, dtype=int)
    assigned = np.full(n, -1, dtype=int)
    counts = np.zeros(k, dtype=int)
    flat = np.argsort(dist, axis=None, kind="stable")
    for f in flat:
        i, j = divmod(int(f), k)
        if assigned[i] >= 0 or counts[j] >= cap[j]:
            continue
        assigned[i] = j
        counts[j] += 1
    # leftovers: nearest cluster still at the base size takes one extra
    leftover = np.flatnonzero(assigned < 0)
    for i in leftover:
        order = np.argsort(dist[i], kind="stable")
        for j in order:
            if counts[j] == base:
                assigned[i] = int(j)
                counts[j] += 1
                break
    assert rem == len(leftover) and (assigned >= 0).all()
    return [np.flatnonzero(assigned == j) for j in range(k)]


# ---------------------------------------------------------------------------
# Variation

def vary_cluster(
    genotypes: np.ndarray,
    rngs,
    step_size: float,
    repair_fn=None,
    rank_cap: int = _RANK_CAP,
    block_prob: float = _BLOCK_PROB,
) -> list[np.ndarray]:
    """Sample one offspring per supplied rng from a cluster's Gaussian model.

    The model is the cluster mean with a diagonal-plus-low-rank covariance
    scaled by step_size.  Each offspring copies a random parent and
    overwrites a random subset of mesh-point coordinate blocks with the
    sampled vector, so a cluster with zero spread returns parents
    unchanged.  repair_fn, when given, maps each raw offspring genotype to
    its repaired form.
    """
    g = np.asarray(genotypes, dtype=np.float64)
    if g.ndim != 2 or len(g) == 0:
        raise ValueError("genotypes must be a non-empty (c, d) array")
    c, d = g.shape
    if d % 3:
        raise ValueError("genotype length must be a multiple of 3")
    mu = g.mean(axis=0)
    centered = g - mu
    var = centered.var(axis=0)
    rank = min(rank_cap, c - 1)
    if rank > 0:
        try:
            _, s, vt = np.linalg.svd(centered / np.sqrt(c), full_matrices=False)
            comps = s[:rank, None] * vt[:rank]
        except np.linalg.LinAlgError:
            comps = np.zeros((0, d))
    else:
        comps = np.zeros((0, d))
    resid = np.sqrt(np.maximum(var - (comps**2).sum(axis=0), 0.0))

    n_blocks = d // 3
    out = []
    for rng in rngs:
        parent = g[rng.integers(c)]
        if rng.random() < _FULL_RESAMPLE_PROB:
            # occasional whole-genotype draw so coherent global moves
            # survive; block-wise mixing alone fragments them
            mask = np.ones(n_blocks, dtype=bool)
        else:
            mask = rng.random(n_blocks) < block_prob
            if not mask.any():
                mask[rng.integers(n_blocks)] = True
        z_low = rng.standard_normal(len(comps)) if len(comps) else np.empty(0)
        z_diag = rng.standard_normal(d)
        sample = mu + step_size * (z_low @ comps + resid * z_diag)
        child = parent.copy()
        coords = np.repeat(mask, 3)
        child[coords] = sample[coords]
        if repair_fn is not None:
            child = repair_fn(child)
        out.append(child)
    return out


# ---------------------------------------------------------------------------
# Ranking

def _nondominated_fronts(objs: np.ndarray) -> list[np.ndarray]:
    n = len(objs)
    le = np.all(objs[:, None, :] <= objs[None, :, :], axis=2)
    lt = np.any(objs[:, None, :] < objs[None, :, :], axis=2)
    dom = le & lt  # dom[i, j]: i dominates j
    n_dom = dom.sum(axis=0)
    remaining = np.ones(n, dtype=bool)
    fronts = []
    while remaining.any():
        front = np.flatnonzero(remaining & (n_dom == 0))
        if len(front) == 0:  # numeric ties; flush the rest
            front = np.flatnonzero(remaining)
        fronts.append(front)
        remaining[front] = False
        n_dom = n_dom - dom[front].sum(axis=0)
    return fronts


def _crowding(objs: np.ndarray) -> np.ndarray:
    n, m = objs.shape
    dist = np.zeros(n)
    for j in range(m):
        order = np.argsort(objs[:, j], kind="stable")
        span = objs[order[-1], j] - objs[order[0], j]
        dist[order[0]] = dist[order[-1]] = np.inf
        if span <= 0 or n < 3:
            continue
        gaps = (objs[order[2:], j] - objs[order[:-2], j]) / span
        dist[order[1:-1]] += gaps
    return dist


def _truncate(pool: list[Individual], size: int) -> list[Individual]:
    """Rank/crowding selection; feasible individuals always come first."""
    feasible = [ind for ind in pool if ind.evaluation.feasible]
    infeasible = [ind for ind in pool if not ind.evaluation.feasible]
    chosen: list[Individual] = []
    if feasible:
        objs = np.array([ind.evaluation.objectives.as_array() for ind in feasible])
        for front in _nondominated_fronts(objs):
            if len(chosen) + len(front) <= size:
                chosen.extend(feasible[i] for i in front)
            else:
                crowd = _crowding(objs[front])
                order = np.argsort(-crowd, kind="stable")
                need = size - len(chosen)
                chosen.extend(feasible[front[i]] for i in order[:need])
            if len(chosen) >= size:
                return chosen
    infeasible.sort(key=lambda ind: ind.evaluation.violations)
    chosen.extend(infeasible[: size - len(chosen)])
    return chosen


# ---------------------------------------------------------------------------
# Initialization

def initialize_population(
    problem: RegistrationProblem,
    mesh: TetMesh,
    strategy: str,
    config: OptimizerConfig,
    dvf_set: DvfSet | None = None,
) -> list[TetMeshPair]:
    """Cold or seeded starting population of dual-state pairs.

    Cold members perturb both states around rest with sigma of
    init_noise_frac times the mean edge length, then repair.  Seeded
    members come from incremental field application.  More than 10%
    members with unrepaired folds aborts.
    """
    n = config.population_size
    sigma_cold = config.init_noise_frac * mesh.mean_edge_length
    pairs: list[TetMeshPair] = []
    if strategy == "cold":
        rest = mesh.rest_state.points
        for i in range(n):
            rng = np.random.default_rng(
                np.random.SeedSequence((config.rng_seed, 0, i))
            )
            src, _ = repair_state(mesh, MeshState(rng.normal(rest, sigma_cold)))
            tgt, _ = repair_state(mesh, MeshState(rng.normal(rest, sigma_cold)))
            pairs.append(TetMeshPair(mesh, src, tgt))
    elif strategy == "seeded":
        if dvf_set is None:
            raise ValueError("seeded initialization requires a DVF set")
        dvf_set.validate_against(problem)
        pairs = seed_population(
            mesh,
            dvf_set,
            n,
            n_steps=config.seed_steps,
            noise_sigma=config.seed_noise_frac * mesh.mean_edge_length,
            seed=config.rng_seed,
        )
    else:
        raise ValueError(f"unknown strategy {strategy!r}")

    bad = sum(
        1
        for p in pairs
        if len(detect_folds(mesh, p.source)) or len(detect_folds(mesh, p.target))
    )
    if bad > 0.10 * n:
        raise InitializationError(
            f"{bad} of {n} initial members kept folds after repair"
        )
    return pairs


# ---------------------------------------------------------------------------
# Main loop

@dataclass
class Snapshot:
    time_s: float
    generation: int
    mesh: TetMesh
    entries: list[ArchiveEntry]


@dataclass
class OptimizeResult:
    mesh: TetMesh
    archive: ApproximationSet
    log_rows: list[tuple]
    snapshots: list[Snapshot]
    generations: int
    switch_generation: int | None
    elapsed_s: float
    strategy: str


@dataclass
class _Clock:
    seconds_per_eval: float | None
    started: float = field(default_factory=time.monotonic)
    evals: int = 0

    def charge(self, n: int = 1):
        self.evals += n

    def elapsed(self) -> float:
        if self.seconds_per_eval is not None:
            return self.evals * self.seconds_per_eval
        return time.monotonic() - self.started


def _evaluate_all(individuals, problem, obj_config, clock):
    for ind in individuals:
        if ind.evaluation is None:
            ind.evaluation = evaluate(ind.pair, problem, obj_config)
            clock.charge()


def _hv_of(archive: ApproximationSet, ref: np.ndarray | None) -> float:
    if ref is None or not len(archive):
        return 0.0
    pts = np.minimum(archive.objective_matrix(), ref)
    return hypervolume(pts, ref)


def optimize(
    problem: RegistrationProblem,
    config: OptimizerConfig,
    strategy: str = "cold",
    dvf_set: DvfSet | None = None,
    mesh: TetMesh | None = None,
    on_generation=None,
) -> OptimizeResult:
    """Run the registration optimizer within a time budget.

    `on_generation(generation, archive, population)` is called after each
    completed generation.  Budget and snapshot times are honored between
    generations only.
    """
    clock = _Clock(config.seconds_per_eval)
    if mesh is None:
        # the discretization belongs to the case, not the run: repeats with
        # different seeds search the same mesh
        mesh = generate_mesh(
            problem,
            n_points=config.coarse_points,
            frac_primary=config.frac_primary,
            frac_other=config.frac_other,
            rng_seed=0,
        )
    obj_config = ObjectiveConfig(
        samples_per_tet=config.samples_per_tet, rng_seed=config.rng_seed
    )
    pairs = initialize_population(problem, mesh, strategy, config, dvf_set)
    population = [Individual.from_pair(p) for p in pairs]
    _evaluate_all(population, problem, obj_config, clock)

    archive = ApproximationSet(config.archive_capacity)
    for ind in population:
        if ind.evaluation.feasible:
            archive.add(ind.genotype, ind.evaluation.objectives)

    hv_ref: np.ndarray | None = None
    if len(archive):
        hv_ref = 1.1 * archive.objective_matrix().max(axis=0) + 1e-9

    log_rows: list[tuple] = []
    snapshots: list[Snapshot] = []
    snapshot_due = sorted(set(float(t) for t in config.snapshot_times_s))
    guidance_history: list[float] = []
    steps = np.full(config.n_clusters, config.step_init)
    switch_generation: int | None = None
    at_fine = config.resolutions == 1

    def log_generation(gen: int):
        best = archive.best_per_objective()
        log_rows.append(
            (
                gen,
                clock.elapsed(),
                best[0],
                best[1],
                best[2],
                len(archive),
                _hv_of(archive, hv_ref),
            )
        )

    def take_snapshots(gen: int):
        while snapshot_due and clock.elapsed() >= snapshot_due[0]:
            t = snapshot_due.pop(0)
            snapshots.append(Snapshot(t, gen, mesh, list(archive.entries)))

    log_generation(0)
    take_snapshots(0)
    if len(archive):
        guidance_history.append(float(archive.best_per_objective()[2]))

    gen = 0
    while True:
        if clock.elapsed() >= config.time_budget_s:
            break
        if config.max_generations is not None and gen >= config.max_generations:
            break
        gen += 1

        feasible_idx = [i for i, ind in enumerate(population) if ind.evaluation.feasible]
        infeasible_idx = [i for i, ind in enumerate(population) if not ind.evaluation.feasible]
        rng_cluster = np.random.default_rng(
            np.random.SeedSequence((config.rng_seed, gen, 0xC1))
        )
        if feasible_idx:
            objs = np.array(
                [population[i].evaluation.objectives.as_array() for i in feasible_idx]
            )
            clusters = [
                [feasible_idx[j] for j in cl]
                for cl in cluster_population(objs, config.n_clusters, rng_cluster)
            ]
        else:
            clusters = [[] for _ in range(config.n_clusters)]
        while len(clusters) < config.n_clusters:
            clusters.append([])
        for pos, i in enumerate(infeasible_idx):
            clusters[pos % len(clusters)].append(i)

        offspring: list[Individual] = []
        cluster_spans: list[tuple[int, int, int]] = []  # (cluster slot, lo, hi)
        counter = 0
        for slot, members in enumerate(clusters):
            if not members:
                continue
            g = np.array([population[i].genotype for i in members])
            rngs = [
                np.random.default_rng(
                    np.random.SeedSequence((config.rng_seed, gen, counter + j))
                )
                for j in range(len(members))
            ]
            children = vary_cluster(
                g,
                rngs,
                float(steps[slot]),
                repair_fn=lambda v: _repair_genotype(mesh, v),
            )
            lo = counter
            for child in children:
                offspring.append(Individual.from_genotype(mesh, child))
            counter += len(children)
            cluster_spans.append((slot, lo, counter))
        _evaluate_all(offspring, problem, obj_config, clock)

        for ind in offspring:
            if ind.evaluation.feasible:
                archive.add(ind.genotype, ind.evaluation.objectives)
        if hv_ref is None and len(archive):
            hv_ref = 1.1 * archive.objective_matrix().max(axis=0) + 1e-9

        # per-cluster step adaptation against the cluster's own bests
        lo_b, hi_b = config.step_bounds
        for slot, lo, hi in cluster_spans:
            members = clusters[slot]
            parent_objs = [
                population[i].evaluation.objectives.as_array()
                for i in members
                if population[i].evaluation.feasible
            ]
            child_objs = [
                ind.evaluation.objectives.as_array()
                for ind in offspring[lo:hi]
                if ind.evaluation.feasible
            ]
            improved = False
            if parent_objs and child_objs:
                improved = bool(
                    np.any(
                        np.asarray(child_objs).min(axis=0)
                        < np.asarray(parent_objs).min(axis=0)
                    )
                )
            steps[slot] = min(max(steps[slot] * (1.1 if improved else 0.9), lo_b), hi_b)

        population = _truncate(population + offspring, config.population_size)

        log_generation(gen)
        take_snapshots(gen)
        if len(archive):
            guidance_history.append(float(archive.best_per_objective()[2]))
        if on_generation is not None:
            on_generation(gen, archive, population)

        if not at_fine:
            stagnant = False
            w = config.stagnation_window
            if len(guidance_history) > w:
                then = guidance_history[-w - 1]
                now = guidance_history[-1]
                stagnant = then <= 0 or (then - now) / then < config.stagnation_tol
            if stagnant or clock.elapsed() >= 0.5 * config.time_budget_s:
                mesh, population, archive = _switch_resolution(
                    mesh, population, archive, problem, obj_config, clock
                )
                at_fine = True
                switch_generation = gen
                steps[:] = config.step_init
                guidance_history.clear()

    return OptimizeResult(
        mesh=mesh,
        archive=archive,
        log_rows=log_rows,
        snapshots=snapshots,
        generations=gen,
        switch_generation=switch_generation,
        elapsed_s=clock.elapsed(),
        strategy=strategy,
    )


def _switch_resolution(mesh, population, archive, problem, obj_config, clock):
    """Subdivide the mesh once and re-encode population and archive on it."""
    rest_pair = TetMeshPair(mesh, mesh.rest_state, mesh.rest_state)
    fine_mesh, _ = refine_mesh(mesh, rest_pair)

    def lift_genotype(genotype: np.ndarray) -> np.ndarray:
        pair = decode_genotype(mesh, genotype)
        src = lift_state(mesh, pair.source)
        tgt = lift_state(mesh, pair.target)
        return np.concatenate([src.points.ravel(), tgt.points.ravel()])

    new_pop = [Individual.from_genotype(fine_mesh, lift_genotype(ind.genotype)) for ind in population]
    _evaluate_all(new_pop, problem, obj_config, clock)

    new_archive = ApproximationSet(archive.capacity)
    for entry in archive.entries:
        geno = lift_genotype(entry.genotype)
        ind = Individual.from_genotype(fine_mesh, geno)
        ind.evaluation = evaluate(ind.pair, problem, obj_config)
        clock.charge()
        if ind.evaluation.feasible:
            new_archive.add(geno, ind.evaluation.objectives)
    return fine_mesh, new_pop, new_archive


def write_convergence_csv(log_rows, path) -> None:
    lines = [CONVERGENCE_HEADER]
    for gen, elapsed, d, s, g, size, hv in log_rows:
        cells = [str(int(gen))]
        cells += [repr(float(v)) for v in (elapsed, d, s, g)]
        cells.append(str(int(size)))
        cells.append(repr(float(hv)))
        lines.append(",".join(cells))
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
