"""Volume geometry, NIfTI-1 input/output, masks and spherical searchlights.

Only single-file uncompressed NIfTI-1 (``.nii``) is handled. The affine is
not interpreted beyond the voxel sizes in ``pixdim``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import nibabel as nib
import numpy as np
from nibabel.spatialimages import HeaderDataError
from nibabel.wrapstruct import WrapStructError
from scipy import sparse

from .exceptions import FormatError, ParameterError

__all__ = [
    "VolumeGeometry",
    "Mask",
    "SearchlightSpec",
    "read_volume",
    "write_volume",
    "read_mask",
    "searchlight_offsets",
    "enumerate_searchlights",
    "searchlight_matrix",
]

HEADER_SIZE = 348

# NIfTI-1 datatype codes accepted on read
_DTYPES = {
    2: np.uint8,
    4: np.int16,
    16: np.float32,
    64: np.float64,
}


@dataclass(frozen=True)
class VolumeGeometry:
    dims: tuple[int, int, int]
    voxel_size: tuple[float, float, float] = (2.0, 2.0, 2.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        vox = tuple(float(v) for v in self.voxel_size)
        if len(dims) != 3 or min(dims) < 1:
            raise ParameterError(f"dims must be three counts >= 1, got {self.dims!r}")
        if len(vox) != 3 or not min(vox) > 0:
            raise ParameterError(f"voxel sizes must be positive, got {self.voxel_size!r}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "voxel_size", vox)

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.dims))


@dataclass(frozen=True)
class Mask:
    geometry: VolumeGeometry
    included: np.ndarray

    def __post_init__(self):
        inc = np.asarray(self.included, dtype=bool)
        if inc.shape != self.geometry.dims:
            raise ParameterError(f"mask shape {inc.shape} does not match dims "
                                 f"{self.geometry.dims}")
        object.__setattr__(self, "included", inc)

    @classmethod
    def full(cls, geometry: VolumeGeometry) -> "Mask":
        return cls(geometry, np.ones(geometry.dims, dtype=bool))

    @property
    def voxel_count(self) -> int:
        return int(self.included.sum())

    @property
    def flat_indices(self) -> np.ndarray:
        """C-order flat indices of included voxels (the canonical voxel order)."""
        return np.flatnonzero(self.included.ravel())

    @property
    def coords(self) -> np.ndarray:
        return np.argwhere(self.included)

    def unmask(self, values: np.ndarray, fill=np.nan) -> np.ndarray:
        """Scatter ``n_in_mask x ...`` values back into a volume."""
        values = np.asarray(values)
        out = np.full(self.geometry.dims + values.shape[1:], fill, dtype=float)
        out[self.included] = values
        return out


@dataclass(frozen=True)
class SearchlightSpec:
    radius_mm: float = 8.0
    min_voxels: int = 27

    def __post_init__(self):
        if not self.radius_mm > 0:
            raise ParameterError("radius_mm must be positive")
        if int(self.min_voxels) < 1:
            raise ParameterError("min_voxels must be >= 1")


# --------------------------------------------------------------------------
# NIfTI-1
# --------------------------------------------------------------------------


def read_volume(path) -> tuple[VolumeGeometry, np.ndarray]:
    """Read a single-file NIfTI-1 volume as float64.

    Returns the geometry and an array of shape ``dims`` or ``dims + (nt,)``.
    Header parsing is delegated to nibabel; fields nibabel tolerates but this
    package does not (magic, header size, datatype, short payload) are
    checked here and reported as :class:`FormatError`.
    """
    raw = Path(path).read_bytes()
    if len(raw) < HEADER_SIZE:
        raise FormatError(f"{path}: file shorter than the 348-byte header")
    # nibabel repairs these two fields on load, so check the raw bytes first
    if HEADER_SIZE not in (int.from_bytes(raw[:4], "little"), int.from_bytes(raw[:4], "big")):
        raise FormatError(f"{path}: sizeof_hdr is not 348 in either byte order")
    if raw[344:348] != b"n+1\x00":
        raise FormatError(f"{path}: magic is {raw[344:348]!r}, expected b'n+1\\x00'")
    try:
        img = nib.Nifti1Image.from_bytes(raw)
    except (WrapStructError, HeaderDataError, ValueError) as exc:
        raise FormatError(f"{path}: {exc}") from exc
    hdr = img.header
    datatype, bitpix = int(hdr["datatype"]), int(hdr["bitpix"])
    if datatype not in _DTYPES:
        raise FormatError(f"{path}: unsupported datatype code {datatype}")
    itemsize = np.dtype(_DTYPES[datatype]).itemsize
    if bitpix != itemsize * 8:
        raise FormatError(f"{path}: bitpix {bitpix} inconsistent with datatype {datatype}")

    shape = tuple(int(d) for d in img.shape)
    if any(d > 1 for d in shape[4:]):
        raise FormatError(f"{path}: dim[5..7] > 1 not supported")
    shape4 = (shape + (1, 1, 1, 1))[:4]
    offset = int(img.dataobj.offset)
    if offset < HEADER_SIZE:
        raise FormatError(f"{path}: vox_offset {offset} < 348")
    need = offset + int(np.prod(shape4)) * itemsize
    if len(raw) < need:
        raise FormatError(f"{path}: truncated payload ({len(raw)} bytes, dim requires {need})")

    # scl_slope/scl_inter are applied by nibabel (slope 0 means no scaling)
    data = img.get_fdata(dtype=np.float64).reshape(shape4)
    if len(shape) <= 3:
        data = data[..., 0]
    vox = tuple(abs(float(z)) if z != 0 else 1.0 for z in hdr["pixdim"][1:4])
    return VolumeGeometry(tuple(shape4[:3]), vox), data


def write_volume(path, geometry: VolumeGeometry, data: np.ndarray) -> None:
    """Write float32 little-endian NIfTI-1 (header 348, data at offset 352)."""
    data = np.asarray(data)
    if data.shape[:3] != geometry.dims or data.ndim not in (3, 4):
        raise ParameterError(f"data shape {data.shape} does not match geometry {geometry.dims}")
    affine = np.diag([*map(float, geometry.voxel_size), 1.0])
    hdr = nib.Nifti1Header(endianness="<")
    hdr.set_data_dtype(np.float32)
    img = nib.Nifti1Image(np.asarray(data, dtype="<f4"), affine, header=hdr)
    img.header.set_xyzt_units("mm")
    img.set_qform(affine, code=0)
    img.set_sform(affine, code=1)
    img.header.set_slope_inter(1.0, 0.0)
    Path(path).write_bytes(img.to_bytes())


def read_mask(path) -> Mask:
    geom, data = read_volume(path)
    if data.ndim == 4:
        if data.shape[3] != 1:
            raise FormatError(f"{path}: mask must be a single 3D volume")
        data = data[..., 0]
    return Mask(geom, data != 0)


# --------------------------------------------------------------------------
# searchlights
# --------------------------------------------------------------------------


def searchlight_offsets(spec: SearchlightSpec, geometry: VolumeGeometry) -> np.ndarray:
    """Integer offsets within ``radius_mm`` (inclusive), lexicographic order."""
    r = float(spec.radius_mm)
    vox = np.asarray(geometry.voxel_size)
    ext = np.floor(r / vox + 1e-9).astype(int)
    grids = np.meshgrid(*(np.arange(-e, e + 1) for e in ext), indexing="ij")
    off = np.stack([g.ravel() for g in grids], axis=1)
    d2 = np.sum((off * vox) ** 2, axis=1)
    return off[d2 <= r * r * (1 + 1e-12)]


def enumerate_searchlights(mask: Mask, spec: SearchlightSpec
                           ) -> Iterator[tuple[tuple[int, int, int], np.ndarray]]:
    """Yield ``(center, members)`` for every admitted in-mask center.

    ``members`` is an ``m x 3`` array of in-mask voxel coordinates, ordered
    like the offsets. Centers with fewer than ``min_voxels`` members are
    skipped.
    """
    offsets = searchlight_offsets(spec, mask.geometry)
    dims = np.asarray(mask.geometry.dims)
    for c in mask.coords:
        pts = c + offsets
        ok = np.all((pts >= 0) & (pts < dims), axis=1)
        pts = pts[ok]
        pts = pts[mask.included[pts[:, 0], pts[:, 1], pts[:, 2]]]
        if len(pts) >= spec.min_voxels:
            yield tuple(int(v) for v in c), pts


def searchlight_matrix(mask: Mask, spec: SearchlightSpec
                       ) -> tuple[np.ndarray, sparse.csr_matrix]:
    """Searchlight membership as a sparse 0/1 matrix.

    Returns
    -------
    centers : ndarray of int
        Positions (in mask voxel order) of admitted centers.
    members : csr_matrix, shape (n_centers, n_in_mask)
        Row ``c`` has ones at the in-mask voxels of searchlight ``c``.
    """
    offsets = searchlight_offsets(spec, mask.geometry)
    dims = np.asarray(mask.geometry.dims)
    coords = mask.coords
    lookup = np.full(mask.geometry.dims, -1, dtype=np.int64)
    lookup[mask.included] = np.arange(len(coords))
    rows, cols = [], []
    for off in offsets:
        pts = coords + off
        ok = np.all((pts >= 0) & (pts < dims), axis=1)
        idx = np.full(len(coords), -1, dtype=np.int64)
        idx[ok] = lookup[pts[ok, 0], pts[ok, 1], pts[ok, 2]]
        hit = idx >= 0
        rows.append(np.flatnonzero(hit))
        cols.append(idx[hit])
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    n = len(coords)
    mat = sparse.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    mat.sort_indices()
    counts = np.asarray(mat.sum(axis=1)).ravel()
    centers = np.flatnonzero(counts >= spec.min_voxels)
    return centers, mat[centers]
