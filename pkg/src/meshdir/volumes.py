"""Image, label, and vector-field containers with MetaImage-subset I/O.

All physical quantities are millimeters.  Grids follow the voxel-center
convention: the center of voxel (i, j, k) sits at
``origin + (i + 0.5, j + 0.5, k + 0.5) * spacing``.

Arrays are stored z-slowest, shape ``(nz, ny, nx)`` (vector fields add a
trailing channel axis), so ``ravel()`` yields the x-fastest order used on
the wire.  Public ``dims`` are always reported as ``(nx, ny, nz)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

__all__ = [
    "Volume",
    "LabelVolume",
    "Dvf",
    "GuidancePair",
    "RegistrationProblem",
    "VolumeFormatError",
    "GridMismatchError",
    "load_volume",
    "save_volume",
    "trilinear_sample",
    "boundary_face_centers",
    "farthest_point_subset",
    "default_elasticity_table",
    "build_problem",
    "preprocess_pair",
    "voxel_centers",
    "same_grid",
    "warp_mask",
]

# Hooke-style edge stiffness constants per tissue class.  Organs not named
# here fall back to OTHER_TISSUE_ELASTICITY.
BLADDER_ELASTICITY = 0.1
BOWEL_ELASTICITY = 0.1
BONE_ELASTICITY = 1.0e4
OTHER_TISSUE_ELASTICITY = 1.0


class VolumeFormatError(ValueError):
    """Raised for malformed or unsupported volume files."""


class GridMismatchError(ValueError):
    """Raised when two containers that must share a grid do not."""


class _Gridded:
    """Shared coordinate helpers for gridded containers."""

    @property
    def dims(self) -> tuple[int, int, int]:
        nz, ny, nx = self._zyx_shape()
        return (nx, ny, nz)

    @property
    def n_voxels(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    @property
    def voxel_volume_mm3(self) -> float:
        return float(np.prod(self.spacing))

    def _zyx_shape(self):
        raise NotImplementedError

    def grid_key(self):
        return (self.dims, tuple(self.spacing), tuple(self.origin))

    def index_to_physical(self, idx: np.ndarray) -> np.ndarray:
        """Voxel indices (x, y, z) to physical voxel-center coordinates."""
        idx = np.asarray(idx, dtype=np.float64)
        return self.origin + (idx + 0.5) * np.asarray(self.spacing)

    def physical_to_continuous(self, pts: np.ndarray) -> np.ndarray:
        """Physical points to continuous voxel-center coordinates (x, y, z)."""
        pts = np.asarray(pts, dtype=np.float64)
        return (pts - np.asarray(self.origin)) / np.asarray(self.spacing) - 0.5

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Physical box spanned by the voxel grid (outer faces, not centers)."""
        lo = np.asarray(self.origin, dtype=np.float64)
        hi = lo + np.asarray(self.dims) * np.asarray(self.spacing)
        return lo, hi


def _as_float3(v, name: str) -> tuple[float, float, float]:
    t = tuple(float(x) for x in v)
    if len(t) != 3:
        raise ValueError(f"{name} must have 3 components, got {len(t)}")
    return t


@dataclass(frozen=True)
class Volume(_Gridded):
    """Scalar intensity volume on a regular grid."""

    data: np.ndarray  # (nz, ny, nx)
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"volume data must be 3-D, got shape {data.shape}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _as_float3(self.spacing, "spacing"))
        object.__setattr__(self, "origin", _as_float3(self.origin, "origin"))
        if any(s <= 0 or not math.isfinite(s) for s in self.spacing):
            raise ValueError(f"spacing must be positive and finite, got {self.spacing}")
        data.setflags(write=False)

    def _zyx_shape(self):
        return self.data.shape

    def validate(self) -> None:
        if self.data.dtype.kind == "f" and not np.all(np.isfinite(self.data)):
            raise ValueError("volume contains non-finite values")


@dataclass(frozen=True)
class LabelVolume(_Gridded):
    """Small-integer segmentation labels; 0 is background.

    ``label_names[i]`` names label id ``i + 1``.  Names default to
    ``label_1 .. label_K`` when not supplied.
    """

    data: np.ndarray  # (nz, ny, nx), integer
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    label_names: tuple[str, ...] = ()

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"label data must be 3-D, got shape {data.shape}")
        if data.dtype.kind not in "iu":
            raise ValueError(f"label data must be integer, got dtype {data.dtype}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _as_float3(self.spacing, "spacing"))
        object.__setattr__(self, "origin", _as_float3(self.origin, "origin"))
        if any(s <= 0 or not math.isfinite(s) for s in self.spacing):
            raise ValueError(f"spacing must be positive and finite, got {self.spacing}")
        top = int(data.max()) if data.size else 0
        if top > 255:
            raise ValueError(f"label ids must fit in a byte, found {top}")
        names = tuple(self.label_names)
        if not names:
            names = tuple(f"label_{i}" for i in range(1, top + 1))
        elif len(names) < top:
            raise ValueError(f"{top} labels present but only {len(names)} names given")
        object.__setattr__(self, "label_names", names)
        data.setflags(write=False)

    def _zyx_shape(self):
        return self.data.shape

    @property
    def labels(self) -> tuple[int, ...]:
        present = np.unique(self.data)
        return tuple(int(v) for v in present if v != 0)

    def label_id(self, name: str) -> int | None:
        try:
            return self.label_names.index(name) + 1
        except ValueError:
            return None

    def name_of(self, label: int) -> str:
        if 1 <= label <= len(self.label_names):
            return self.label_names[label - 1]
        return f"label_{label}"

    def mask(self, label: int) -> np.ndarray:
        return self.data == label

    def validate(self) -> None:
        pass


@dataclass(frozen=True)
class Dvf(_Gridded):
    """Dense displacement field on the target grid, in mm.

    Inverse-style convention: a target-space point v corresponds to source
    position ``v + u(v)``.  ``extrapolated`` optionally flags voxels whose
    vectors were produced by extrapolation rather than interpolation.
    """

    vectors: np.ndarray  # (nz, ny, nx, 3)
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    extrapolated: np.ndarray | None = None

    def __post_init__(self):
        vec = np.asarray(self.vectors)
        if vec.ndim != 4 or vec.shape[-1] != 3:
            raise ValueError(f"vector data must have shape (nz, ny, nx, 3), got {vec.shape}")
        object.__setattr__(self, "vectors", vec)
        object.__setattr__(self, "spacing", _as_float3(self.spacing, "spacing"))
        object.__setattr__(self, "origin", _as_float3(self.origin, "origin"))
        if any(s <= 0 or not math.isfinite(s) for s in self.spacing):
            raise ValueError(f"spacing must be positive and finite, got {self.spacing}")
        vec.setflags(write=False)
        if self.extrapolated is not None:
            mask = np.asarray(self.extrapolated, dtype=bool)
            if mask.shape != vec.shape[:3]:
                raise ValueError("extrapolated mask shape does not match the grid")
            object.__setattr__(self, "extrapolated", mask)
            mask.setflags(write=False)

    def _zyx_shape(self):
        return self.vectors.shape[:3]

    def validate(self) -> None:
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("displacement field contains non-finite components")


# ---------------------------------------------------------------------------
# MetaImage subset I/O

_DTYPES = {
    "MET_FLOAT": np.dtype("<f4"),
    "MET_SHORT": np.dtype("<i2"),
    "MET_UCHAR": np.dtype("u1"),
}
_TYPE_NAMES = {np.dtype("<f4"): "MET_FLOAT", np.dtype("<i2"): "MET_SHORT", np.dtype("u1"): "MET_UCHAR"}


def _format_floats(values) -> str:
    return " ".join(repr(float(v)) for v in values)


def save_volume(vol: Volume | LabelVolume | Dvf, path) -> None:
    """Write a container as a single-file MetaImage (raw payload appended)."""
    vol.validate()
    if isinstance(vol, Dvf):
        payload = np.ascontiguousarray(vol.vectors, dtype="<f4")
        channels, type_name = 3, "MET_FLOAT"
    elif isinstance(vol, LabelVolume):
        payload = np.ascontiguousarray(vol.data, dtype="u1")
        channels, type_name = 1, "MET_UCHAR"
    else:
        data = vol.data
        if data.dtype == np.dtype("<i2"):
            payload, type_name = np.ascontiguousarray(data), "MET_SHORT"
        elif data.dtype.kind == "f":
            payload, type_name = np.ascontiguousarray(data, dtype="<f4"), "MET_FLOAT"
        elif data.dtype == np.dtype("u1"):
            payload, type_name = np.ascontiguousarray(data), "MET_UCHAR"
        else:
            raise VolumeFormatError(f"unsupported volume dtype {data.dtype}")
        channels = 1
    nx, ny, nz = vol.dims
    header = (
        "ObjectType = Image\n"
        "NDims = 3\n"
        f"DimSize = {nx} {ny} {nz}\n"
        f"ElementSpacing = {_format_floats(vol.spacing)}\n"
        f"Offset = {_format_floats(vol.origin)}\n"
        f"ElementNumberOfChannels = {channels}\n"
        f"ElementType = {type_name}\n"
        "ElementDataFile = LOCAL\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(payload.tobytes())


def load_volume(path) -> Volume | LabelVolume | Dvf:
    """Read a MetaImage-subset file.

    MET_UCHAR single-channel data comes back as a LabelVolume, other
    single-channel types as a Volume, and 3-channel MET_FLOAT as a Dvf.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    fields: dict[str, str] = {}
    pos = 0
    while True:
        nl = raw.find(b"\n", pos)
        if nl < 0:
            raise VolumeFormatError(f"{path}: header ended without ElementDataFile")
        line = raw[pos:nl]
        pos = nl + 1
        try:
            text = line.decode("ascii")
        except UnicodeDecodeError as exc:
            raise VolumeFormatError(f"{path}: non-ASCII bytes in header") from exc
        if "=" not in text:
            raise VolumeFormatError(f"{path}: malformed header line {text!r}")
        key, value = (part.strip() for part in text.split("=", 1))
        fields[key] = value
        if key == "ElementDataFile":
            break
    payload = raw[pos:]

    def need(key: str) -> str:
        if key not in fields:
            raise VolumeFormatError(f"{path}: missing header field {key}")
        return fields[key]

    if need("ObjectType") != "Image":
        raise VolumeFormatError(f"{path}: ObjectType must be Image")
    if need("NDims") != "3":
        raise VolumeFormatError(f"{path}: only NDims = 3 is supported")
    if need("ElementDataFile") != "LOCAL":
        raise VolumeFormatError(f"{path}: only local payloads are supported")
    try:
        nx, ny, nz = (int(v) for v in need("DimSize").split())
        spacing = tuple(float(v) for v in need("ElementSpacing").split())
        origin = tuple(float(v) for v in need("Offset").split())
        channels = int(fields.get("ElementNumberOfChannels", "1"))
    except ValueError as exc:
        raise VolumeFormatError(f"{path}: malformed header value ({exc})") from exc
    if len(spacing) != 3 or len(origin) != 3:
        raise VolumeFormatError(f"{path}: spacing and offset must have 3 components")
    if min(nx, ny, nz) <= 0:
        raise VolumeFormatError(f"{path}: non-positive DimSize")
    type_name = need("ElementType")
    if type_name not in _DTYPES:
        raise VolumeFormatError(f"{path}: unsupported ElementType {type_name}")
    if channels not in (1, 3):
        raise VolumeFormatError(f"{path}: unsupported channel count {channels}")
    dtype = _DTYPES[type_name]
    expected = nx * ny * nz * channels * dtype.itemsize
    if len(payload) != expected:
        raise VolumeFormatError(
            f"{path}: payload holds {len(payload)} bytes, header implies {expected}"
        )
    data = np.frombuffer(payload, dtype=dtype)
    if channels == 3:
        if type_name != "MET_FLOAT":
            raise VolumeFormatError(f"{path}: vector fields must be MET_FLOAT")
        return Dvf(data.reshape(nz, ny, nx, 3).copy(), spacing, origin)
    grid = data.reshape(nz, ny, nx).copy()
    if type_name == "MET_UCHAR":
        return LabelVolume(grid, spacing, origin)
    return Volume(grid, spacing, origin)


# ---------------------------------------------------------------------------
# Sampling

def trilinear_sample(vol: Volume | Dvf, points: np.ndarray) -> np.ndarray:
    """Trilinearly sample at physical points, clamping outside the grid.

    Returns (n,) scalars for a Volume and (n, 3) vectors for a Dvf; a
    single (3,) point returns a scalar / (3,) vector.
    """
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    data = vol.vectors if isinstance(vol, Dvf) else vol.data
    nz, ny, nx = data.shape[:3]
    c = vol.physical_to_continuous(pts)
    cx = np.clip(c[:, 0], 0.0, nx - 1.0)
    cy = np.clip(c[:, 1], 0.0, ny - 1.0)
    cz = np.clip(c[:, 2], 0.0, nz - 1.0)
    ix = np.minimum(np.floor(cx).astype(np.intp), max(nx - 2, 0))
    iy = np.minimum(np.floor(cy).astype(np.intp), max(ny - 2, 0))
    iz = np.minimum(np.floor(cz).astype(np.intp), max(nz - 2, 0))
    fx = cx - ix
    fy = cy - iy
    fz = cz - iz
    jx = np.minimum(ix + 1, nx - 1)
    jy = np.minimum(iy + 1, ny - 1)
    jz = np.minimum(iz + 1, nz - 1)
    vals = data.astype(np.float64, copy=False)
    if vals.ndim == 3:
        expand = lambda w: w  # noqa: E731
    else:
        expand = lambda w: w[:, None]  # noqa: E731
    c000 = vals[iz, iy, ix]
    c100 = vals[iz, iy, jx]
    c010 = vals[iz, jy, ix]
    c110 = vals[iz, jy, jx]
    c001 = vals[jz, iy, ix]
    c101 = vals[jz, iy, jx]
    c011 = vals[jz, jy, ix]
    c111 = vals[jz, jy, jx]
    wx, wy, wz = expand(fx), expand(fy), expand(fz)
    c00 = c000 * (1 - wx) + c100 * wx
    c10 = c010 * (1 - wx) + c110 * wx
    c01 = c001 * (1 - wx) + c101 * wx
    c11 = c011 * (1 - wx) + c111 * wx
    c0 = c00 * (1 - wy) + c10 * wy
    c1 = c01 * (1 - wy) + c11 * wy
    out = c0 * (1 - wz) + c1 * wz
    if single:
        return out[0]
    return out


def voxel_centers(vol: _Gridded) -> np.ndarray:
    """Physical centers of all voxels, shape (nz*ny*nx, 3), x fastest."""
    nx, ny, nz = vol.dims
    zz, yy, xx = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
    idx = np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1)
    return vol.index_to_physical(idx)


def same_grid(a: _Gridded, b: _Gridded, tol: float = 1e-9) -> bool:
    if a.dims != b.dims:
        return False
    return bool(
        np.allclose(a.spacing, b.spacing, rtol=0, atol=tol)
        and np.allclose(a.origin, b.origin, rtol=0, atol=tol)
    )


def warp_mask(labels: LabelVolume, dvf: Dvf, label: int, threshold: float = 0.5) -> LabelVolume:
    """Pull one label through a displacement field onto the field's grid.

    The binary indicator is sampled trilinearly at each grid point's
    displaced position and thresholded, which keeps voxelized surfaces
    aligned far better than nearest-neighbor lookup.
    """
    binary = Volume(labels.mask(label).astype(np.float32), labels.spacing, labels.origin)
    pts = voxel_centers(dvf) + dvf.vectors.reshape(-1, 3).astype(np.float64)
    vals = trilinear_sample(binary, pts) >= threshold
    nx, ny, nz = dvf.dims
    out = np.zeros((nz, ny, nx), dtype=np.uint8)
    out.ravel()[vals] = label
    return LabelVolume(out, dvf.spacing, dvf.origin, label_names=labels.label_names)


# ---------------------------------------------------------------------------
# Guidance extraction and problem assembly

def boundary_face_centers(labels: LabelVolume, label: int) -> np.ndarray:
    """Centers of voxel faces separating `label` voxels from everything else.

    The volume border counts as outside, so closed organs always yield a
    closed face set.  Returns (n, 3) physical mm points.
    """
    mask = labels.mask(label)
    spacing = np.asarray(labels.spacing)
    pieces = []
    # axis index into the (z, y, x) array vs the physical axis it moves along
    for arr_axis, phys_axis in ((2, 0), (1, 1), (0, 2)):
        for sign in (-1, +1):
            shift = np.roll(mask, -sign, axis=arr_axis)
            sl = [slice(None)] * 3
            sl[arr_axis] = -1 if sign > 0 else 0
            shift[tuple(sl)] = False
            boundary = mask & ~shift
            zz, yy, xx = np.nonzero(boundary)
            if xx.size == 0:
                continue
            centers = labels.index_to_physical(np.stack([xx, yy, zz], axis=1))
            centers[:, phys_axis] += 0.5 * sign * spacing[phys_axis]
            pieces.append(centers)
    if not pieces:
        return np.zeros((0, 3))
    return np.concatenate(pieces, axis=0)


def farthest_point_subset(points: np.ndarray, k: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Indices of a k-point farthest-point subsample.

    The first pick is the point nearest the centroid (or rng-chosen when an
    rng is given); each following pick maximizes the distance to the set.
    Ties resolve to the lowest index.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    if k >= n:
        return np.arange(n)
    if k <= 0:
        return np.arange(0)
    if rng is None:
        start = int(np.argmin(np.linalg.norm(pts - pts.mean(axis=0), axis=1)))
    else:
        start = int(rng.integers(n))
    chosen = np.empty(k, dtype=np.intp)
    chosen[0] = start
    dist = np.linalg.norm(pts - pts[start], axis=1)
    for i in range(1, k):
        nxt = int(np.argmax(dist))
        chosen[i] = nxt
        np.minimum(dist, np.linalg.norm(pts - pts[nxt], axis=1), out=dist)
    return chosen


@dataclass(frozen=True)
class GuidancePair:
    """Paired contour point sets (mm) for one organ label."""

    source: np.ndarray  # (ns, 3)
    target: np.ndarray  # (nt, 3)

    def __post_init__(self):
        for name in ("source", "target"):
            pts = np.asarray(getattr(self, name), dtype=np.float64)
            if pts.ndim != 2 or pts.shape[1] != 3:
                raise ValueError(f"{name} guidance points must have shape (n, 3)")
            object.__setattr__(self, name, pts)
            pts.setflags(write=False)


@dataclass
class RegistrationProblem:
    """One registration case: images, labels, guidance, and elasticity.

    All four gridded containers share dims, spacing, and origin.
    ``fov_min``/``fov_max`` bound the anatomically meaningful region
    (pre-padding crop box); the mesh is kept inside it.
    """

    source_image: Volume
    target_image: Volume
    source_labels: LabelVolume
    target_labels: LabelVolume
    guidance: dict[int, GuidancePair]
    elasticity_table: dict[int, float]
    fov_min: np.ndarray = None
    fov_max: np.ndarray = None

    def __post_init__(self):
        key = self.source_image.grid_key()
        for other in (self.target_image, self.source_labels, self.target_labels):
            if other.grid_key() != key:
                raise GridMismatchError("problem containers must share one grid")
        lo, hi = self.source_image.bounds
        if self.fov_min is None:
            self.fov_min = lo
        if self.fov_max is None:
            self.fov_max = hi
        self.fov_min = np.asarray(self.fov_min, dtype=np.float64)
        self.fov_max = np.asarray(self.fov_max, dtype=np.float64)
        if not np.all(self.fov_max > self.fov_min):
            raise ValueError("field of view box is empty")
        for label, pair in self.guidance.items():
            if len(pair.source) == 0 or len(pair.target) == 0:
                raise ValueError(f"guidance for label {label} has an empty side")
        for label, c in self.elasticity_table.items():
            if not (c > 0 and math.isfinite(c)):
                raise ValueError(f"elasticity for label {label} must be positive, got {c}")
        self._target_trees = {}

    @property
    def grid(self) -> Volume:
        return self.source_image

    def organ_labels(self) -> tuple[int, ...]:
        return tuple(sorted(self.guidance))

    def elasticity_of(self, label: int) -> float:
        return self.elasticity_table.get(int(label), OTHER_TISSUE_ELASTICITY)

    def target_tree(self, label: int):
        """cKDTree over the target guidance points of one organ (cached)."""
        tree = self._target_trees.get(label)
        if tree is None:
            from scipy.spatial import cKDTree

            tree = cKDTree(self.guidance[label].target)
            self._target_trees[label] = tree
        return tree


def default_elasticity_table(labels: LabelVolume) -> dict[int, float]:
    """Tissue stiffness by label name: soft bladder/bowel, rigid bone."""
    table: dict[int, float] = {}
    for label in range(1, len(labels.label_names) + 1):
        name = labels.label_names[label - 1].lower()
        if "bladder" in name or "bowel" in name:
            table[label] = BLADDER_ELASTICITY
        elif "bone" in name:
            table[label] = BONE_ELASTICITY
        else:
            table[label] = OTHER_TISSUE_ELASTICITY
    return table


def build_problem(
    source_image: Volume,
    target_image: Volume,
    source_labels: LabelVolume,
    target_labels: LabelVolume,
    elasticity_table: dict[int, float] | None = None,
    guidance_max_points: int | None = None,
    fov_min=None,
    fov_max=None,
) -> RegistrationProblem:
    """Assemble a RegistrationProblem from co-registered containers.

    Guidance point sets are the label-boundary voxel-face centers of every
    organ present in both label volumes, optionally thinned to
    ``guidance_max_points`` per side by farthest-point subsampling.
    """
    common = sorted(set(source_labels.labels) & set(target_labels.labels))
    if not common:
        raise ValueError("no organ label is present in both label volumes")
    guidance: dict[int, GuidancePair] = {}
    for label in common:
        src = boundary_face_centers(source_labels, label)
        tgt = boundary_face_centers(target_labels, label)
        if guidance_max_points:
            src = src[farthest_point_subset(src, guidance_max_points)]
            tgt = tgt[farthest_point_subset(tgt, guidance_max_points)]
        guidance[label] = GuidancePair(src, tgt)
    if elasticity_table is None:
        elasticity_table = default_elasticity_table(source_labels)
    return RegistrationProblem(
        source_image,
        target_image,
        source_labels,
        target_labels,
        guidance,
        dict(elasticity_table),
        fov_min,
        fov_max,
    )


def _crop_pad(vol, lo_idx, hi_idx, pad_lo, pad_hi, fill):
    """Crop to [lo, hi) voxel boxes then pad; origin tracks the crop."""
    data = vol.vectors if isinstance(vol, Dvf) else vol.data
    sl = (
        slice(lo_idx[2], hi_idx[2]),
        slice(lo_idx[1], hi_idx[1]),
        slice(lo_idx[0], hi_idx[0]),
    )
    chunk = data[sl]
    pads = [(pad_lo[2], pad_hi[2]), (pad_lo[1], pad_hi[1]), (pad_lo[0], pad_hi[0])]
    if chunk.ndim == 4:
        pads.append((0, 0))
    chunk = np.pad(chunk, pads, mode="constant", constant_values=fill)
    origin = tuple(
        vol.origin[a] + (lo_idx[a] - pad_lo[a]) * vol.spacing[a] for a in range(3)
    )
    if isinstance(vol, Dvf):
        return replace(vol, vectors=chunk, origin=origin, extrapolated=None)
    return replace(vol, data=chunk, origin=origin)


def preprocess_pair(
    source_image: Volume,
    target_image: Volume,
    source_labels: LabelVolume,
    target_labels: LabelVolume,
    margin_mm: float = 30.0,
    pad_xy: int = 96,
    min_depth: int = 48,
    bladder_label: int | None = None,
    elasticity_table: dict[int, float] | None = None,
    guidance_max_points: int | None = None,
) -> RegistrationProblem:
    """Crop both images around the bladder and pad to harness-friendly dims.

    The crop box is the union bounding box of the bladder label in both
    label volumes, expanded by margin_mm per side; padding is symmetric
    with each image's own minimum intensity (labels pad with background).
    All four inputs must share one grid.
    """
    key = source_image.grid_key()
    for other in (target_image, source_labels, target_labels):
        if other.grid_key() != key:
            raise GridMismatchError("preprocessing expects one shared grid")
    if bladder_label is None:
        bladder_label = source_labels.label_id("bladder")
    if bladder_label is None:
        raise ValueError("no bladder label found; pass bladder_label explicitly")
    union = source_labels.mask(bladder_label) | target_labels.mask(bladder_label)
    if not union.any():
        raise ValueError("bladder label is empty in both label volumes")
    zz, yy, xx = np.nonzero(union)
    spacing = np.asarray(source_image.spacing)
    margin_vox = np.ceil(margin_mm / spacing - 1e-9).astype(int)
    nx, ny, nz = source_image.dims
    lo = np.maximum([xx.min(), yy.min(), zz.min()] - margin_vox, 0)
    hi = np.minimum(np.asarray([xx.max(), yy.max(), zz.max()]) + 1 + margin_vox, [nx, ny, nz])
    size = hi - lo
    want = np.maximum(size, [pad_xy, pad_xy, min_depth])
    extra = want - size
    pad_lo = extra // 2
    pad_hi = extra - pad_lo

    src = _crop_pad(source_image, lo, hi, pad_lo, pad_hi, float(source_image.data.min()))
    tgt = _crop_pad(target_image, lo, hi, pad_lo, pad_hi, float(target_image.data.min()))
    slab = _crop_pad(source_labels, lo, hi, pad_lo, pad_hi, 0)
    tlab = _crop_pad(target_labels, lo, hi, pad_lo, pad_hi, 0)

    fov_min = np.asarray(source_image.origin) + lo * spacing
    fov_max = np.asarray(source_image.origin) + hi * spacing
    return build_problem(
        src,
        tgt,
        slab,
        tlab,
        elasticity_table=elasticity_table,
        guidance_max_points=guidance_max_points,
        fov_min=fov_min,
        fov_max=fov_max,
    )
