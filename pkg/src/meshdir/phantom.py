"""Analytic pelvis-like phantom with a known radial deformation.

A bright sphere (bladder) shrinks between the two time points through a
radial map that is exactly linear inside the target sphere, blends
smoothly to identity at a support shell, and leaves everything beyond
untouched, including a rigid bone slab.  Both images sample one analytic
intensity function, the target through the warp, so the ground-truth
field is fold-free by construction and registration error can be
measured against it.

The map is defined through its target-to-source form g(rho): a target
point at radius rho comes from source radius g(rho).  Monotonicity of g
is guaranteed by the support-shell width check and re-verified
numerically at generation time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volumes import Dvf, LabelVolume, Volume

__all__ = [
    "PhantomSpec",
    "PhantomCase",
    "generate_phantom",
    "radial_source_radius",
    "parse_phantom_spec",
    "write_phantom_spec",
]

BLADDER_LABEL = 1
BONE_LABEL = 2
BODY_LABEL = 3
_LABEL_NAMES = ("bladder", "bone", "body")

# support shell must exceed this multiple of the radius change for the
# smoothstep blend to stay monotone (sup |S'| = 1.5)
_MIN_SHELL_FACTOR = 1.55


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (48, 48, 48)
    spacing: tuple[float, float, float] = (3.0, 3.0, 3.0)
    source_radius_mm: float = 30.0
    target_radius_mm: float = 15.0
    support_radius_mm: float | None = None  # None: derived from the radii
    edge_width_mm: float = 4.0
    include_bone: bool = True
    include_body: bool = True
    bone_half_mm: tuple[float, float, float] = (36.0, 36.0, 6.0)
    bone_gap_mm: float = 6.0
    body_semiaxes_frac: tuple[float, float, float] = (0.46, 0.46, 0.47)
    intensity_body: float = 30.0
    intensity_bladder: float = 100.0
    intensity_bone: float = 200.0
    texture_amplitude: float = 6.0
    texture_wavelength_mm: float = 25.0
    rng_seed: int = 0

    def __post_init__(self):
        if any(d < 8 for d in self.dims):
            raise ValueError("phantom grid must be at least 8 voxels per axis")
        if any(s <= 0 for s in self.spacing):
            raise ValueError("spacing must be positive")
        if not (0 < self.target_radius_mm <= self.source_radius_mm):
            raise ValueError("need 0 < target radius <= source radius")
        shell = self.support_radius_mm
        if shell is not None:
            change = self.source_radius_mm - self.target_radius_mm
            if shell - self.target_radius_mm < _MIN_SHELL_FACTOR * change:
                raise ValueError(
                    "support shell too tight for a monotone radial map; need "
                    f"support - target >= {_MIN_SHELL_FACTOR} * (source - target)"
                )
        half = min(d * s for d, s in zip(self.dims, self.spacing)) / 2.0
        if self.support_radius() > half - 2.0 * max(self.spacing):
            raise ValueError("support shell does not fit inside the grid")

    def support_radius(self) -> float:
        if self.support_radius_mm is not None:
            return self.support_radius_mm
        change = self.source_radius_mm - self.target_radius_mm
        return self.target_radius_mm + 1.7 * max(change, 0.15 * self.source_radius_mm)

    def extent_mm(self) -> tuple[float, float, float]:
        return tuple(d * s for d, s in zip(self.dims, self.spacing))

    def center_mm(self) -> np.ndarray:
        return np.asarray(self.extent_mm()) / 2.0


@dataclass(frozen=True)
class PhantomCase:
    spec: PhantomSpec
    source_image: Volume
    target_image: Volume
    source_labels: LabelVolume
    target_labels: LabelVolume
    truth: Dvf


def _smoothstep(t: np.ndarray) -> np.ndarray:
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def radial_source_radius(spec: PhantomSpec, rho) -> np.ndarray:
    """Source radius g(rho) of a target point at radius rho."""
    rho = np.asarray(rho, dtype=np.float64)
    r_t = spec.target_radius_mm
    r_s = spec.source_radius_mm
    r_out = spec.support_radius()
    k = r_t / r_s
    g = np.where(rho <= r_t, rho / k, rho)
    shell = (rho > r_t) & (rho < r_out)
    if shell.any():
        t = (r_out - rho[shell]) / (r_out - r_t)
        bump = (r_s - r_t) * _smoothstep(t)
        g = g.copy()
        g[shell] = rho[shell] + bump
    return g


def _check_monotone(spec: PhantomSpec) -> None:
    rho = np.linspace(0.0, spec.support_radius() * 1.05, 4001)
    g = radial_source_radius(spec, rho)
    if np.any(np.diff(g) <= 0):
        raise ValueError("radial map is not monotone; widen the support shell")


def _voxel_centers(spec: PhantomSpec) -> np.ndarray:
    nx, ny, nz = spec.dims
    sx, sy, sz = spec.spacing
    zz, yy, xx = np.meshgrid(
        (np.arange(nz) + 0.5) * sz,
        (np.arange(ny) + 0.5) * sy,
        (np.arange(nx) + 0.5) * sx,
        indexing="ij",
    )
    return np.stack([xx, yy, zz], axis=-1)


def _bone_center(spec: PhantomSpec) -> np.ndarray:
    c = spec.center_mm()
    dz = spec.support_radius() + spec.bone_gap_mm + spec.bone_half_mm[2]
    return c - np.array([0.0, 0.0, dz])


def _intensity(spec: PhantomSpec, pts: np.ndarray) -> np.ndarray:
    """Analytic image value at arbitrary physical positions."""
    c = spec.center_mm()
    w = max(spec.edge_width_mm, 1e-6)
    out = np.zeros(pts.shape[:-1])
    body_soft = None
    if spec.include_body:
        semi = np.asarray(spec.body_semiaxes_frac) * np.asarray(spec.extent_mm())
        q = np.linalg.norm((pts - c) / semi, axis=-1)
        body_soft = _smoothstep((1.0 - q) * float(np.mean(semi)) / w)
        out += spec.intensity_body * body_soft
    r = np.linalg.norm(pts - c, axis=-1)
    out += (spec.intensity_bladder - spec.intensity_body) * _smoothstep(
        (spec.source_radius_mm - r) / w
    )
    if spec.include_bone:
        bc = _bone_center(spec)
        d = np.abs(pts - bc)
        prof = np.ones(pts.shape[:-1])
        for axis in range(3):
            prof = prof * _smoothstep((spec.bone_half_mm[axis] - d[..., axis]) / w)
        out += (spec.intensity_bone - spec.intensity_body) * prof
    if spec.texture_amplitude > 0:
        rng = np.random.default_rng(np.random.SeedSequence((spec.rng_seed, 0x7E)))
        phases = rng.uniform(0, 2 * np.pi, 3)
        wl = spec.texture_wavelength_mm
        tex = np.ones(pts.shape[:-1])
        for axis in range(3):
            tex = tex * np.sin(2 * np.pi * pts[..., axis] / wl + phases[axis])
        if body_soft is not None:
            tex = tex * body_soft
        out += spec.texture_amplitude * tex
    return out


def _labels(spec: PhantomSpec, pts: np.ndarray, bladder_radius: float) -> np.ndarray:
    c = spec.center_mm()
    lab = np.zeros(pts.shape[:-1], dtype=np.uint8)
    if spec.include_body:
        semi = np.asarray(spec.body_semiaxes_frac) * np.asarray(spec.extent_mm())
        q = np.linalg.norm((pts - c) / semi, axis=-1)
        lab[q <= 1.0] = BODY_LABEL
    if spec.include_bone:
        bc = _bone_center(spec)
        inside = np.all(np.abs(pts - bc) <= np.asarray(spec.bone_half_mm), axis=-1)
        lab[inside] = BONE_LABEL
    r = np.linalg.norm(pts - c, axis=-1)
    lab[r <= bladder_radius] = BLADDER_LABEL
    return lab


def generate_phantom(spec: PhantomSpec) -> PhantomCase:
    _check_monotone(spec)
    if spec.include_bone:
        bc = _bone_center(spec)
        c = spec.center_mm()
        gap = np.maximum(np.abs(c - bc) - np.asarray(spec.bone_half_mm), 0.0)
        if np.linalg.norm(gap) <= spec.support_radius():
            raise ValueError("bone slab overlaps the deforming shell")
        if np.any(bc - np.asarray(spec.bone_half_mm) < 0):
            raise ValueError("bone slab does not fit inside the grid")

    pts = _voxel_centers(spec)
    c = spec.center_mm()
    rel = pts - c
    rho = np.linalg.norm(rel, axis=-1)
    g = radial_source_radius(spec, rho)
    with np.errstate(invalid="ignore", divide="ignore"):
        scale = np.where(rho > 0, (g - rho) / np.where(rho > 0, rho, 1.0), 0.0)
    u = scale[..., None] * rel
    warped = pts + u

    source = Volume(_intensity(spec, pts).astype(np.float32), spec.spacing, (0.0, 0.0, 0.0))
    target = Volume(_intensity(spec, warped).astype(np.float32), spec.spacing, (0.0, 0.0, 0.0))
    src_lab = LabelVolume(
        _labels(spec, pts, spec.source_radius_mm),
        spec.spacing,
        (0.0, 0.0, 0.0),
        label_names=_LABEL_NAMES,
    )
    tgt_lab = LabelVolume(
        _labels(spec, pts, spec.target_radius_mm),
        spec.spacing,
        (0.0, 0.0, 0.0),
        label_names=_LABEL_NAMES,
    )
    truth = Dvf(u.astype(np.float32), spec.spacing, (0.0, 0.0, 0.0))
    return PhantomCase(spec, source, target, src_lab, tgt_lab, truth)


# ---------------------------------------------------------------------------
# Spec files

def parse_phantom_spec(path) -> PhantomSpec:
    import configparser

    parser = configparser.ConfigParser()
    with open(path, encoding="utf-8") as fh:
        parser.read_file(fh)
    if not parser.has_section("phantom"):
        raise ValueError(f"{path}: missing [phantom] section")
    sec = parser["phantom"]

    def triple(key, cast, default):
        raw = sec.get(key, None)
        if raw is None:
            return default
        parts = raw.replace(",", " ").split()
        if len(parts) != 3:
            raise ValueError(f"{path}: {key} needs three values")
        return tuple(cast(p) for p in parts)

    kwargs = {}
    kwargs["dims"] = triple("dims", int, PhantomSpec.dims)
    kwargs["spacing"] = triple("spacing", float, PhantomSpec.spacing)
    for key in (
        "source_radius_mm",
        "target_radius_mm",
        "edge_width_mm",
        "bone_gap_mm",
        "intensity_body",
        "intensity_bladder",
        "intensity_bone",
        "texture_amplitude",
        "texture_wavelength_mm",
    ):
        if sec.get(key) is not None:
            kwargs[key] = sec.getfloat(key)
    if sec.get("support_radius_mm") not in (None, ""):
        kwargs["support_radius_mm"] = sec.getfloat("support_radius_mm")
    for key in ("include_bone", "include_body"):
        if sec.get(key) is not None:
            kwargs[key] = sec.getboolean(key)
    if sec.get("bone_half_mm") is not None:
        kwargs["bone_half_mm"] = triple("bone_half_mm", float, PhantomSpec.bone_half_mm)
    if sec.get("body_semiaxes_frac") is not None:
        kwargs["body_semiaxes_frac"] = triple(
            "body_semiaxes_frac", float, PhantomSpec.body_semiaxes_frac
        )
    if sec.get("rng_seed") is not None:
        kwargs["rng_seed"] = sec.getint("rng_seed")
    return PhantomSpec(**kwargs)


def write_phantom_spec(spec: PhantomSpec, path) -> None:
    lines = ["[phantom]"]
    lines.append("dims = {} {} {}".format(*spec.dims))
    lines.append("spacing = {!r} {!r} {!r}".format(*spec.spacing))
    lines.append(f"source_radius_mm = {spec.source_radius_mm!r}")
    lines.append(f"target_radius_mm = {spec.target_radius_mm!r}")
    if spec.support_radius_mm is not None:
        lines.append(f"support_radius_mm = {spec.support_radius_mm!r}")
    lines.append(f"edge_width_mm = {spec.edge_width_mm!r}")
    lines.append(f"include_bone = {str(spec.include_bone).lower()}")
    lines.append(f"include_body = {str(spec.include_body).lower()}")
    lines.append("bone_half_mm = {!r} {!r} {!r}".format(*spec.bone_half_mm))
    lines.append(f"bone_gap_mm = {spec.bone_gap_mm!r}")
    lines.append("body_semiaxes_frac = {!r} {!r} {!r}".format(*spec.body_semiaxes_frac))
    lines.append(f"intensity_body = {spec.intensity_body!r}")
    lines.append(f"intensity_bladder = {spec.intensity_bladder!r}")
    lines.append(f"intensity_bone = {spec.intensity_bone!r}")
    lines.append(f"texture_amplitude = {spec.texture_amplitude!r}")
    lines.append(f"texture_wavelength_mm = {spec.texture_wavelength_mm!r}")
    lines.append(f"rng_seed = {spec.rng_seed}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
