"""Volumetric data types and the MVOL1 on-disk format.

Every scalar field in the pipeline (MRI channels, DVR maps, masks) is a
Volume3D: a dense float32 grid with voxel spacing in millimeters. Masks are
ordinary volumes restricted to 0/1 values so a single file format covers
images and segmentations alike.

MVOL1 format: one ASCII header line ``MVOL1 nx ny nz sx sy sz float32\\n``
followed by nx*ny*nz little-endian 32-bit floats with x varying fastest.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product
from pathlib import Path

import numpy as np

MVOL_MAGIC = "MVOL1"
MVOL_DTYPE = "float32"

CHANNEL_NAMES = ("mtr", "fa", "rd", "ad")


class MyelinSynthError(Exception):
    """Base class for errors raised by this package."""


class VolumeFormatError(MyelinSynthError):
    """Malformed MVOL1 header."""


class ValueCountError(MyelinSynthError):
    """Payload size does not match the dimensions declared in the header."""


class NonFiniteValueError(MyelinSynthError):
    """Volume contains NaN or infinite values where finite data is required."""


class MaskOverlapError(MyelinSynthError):
    """Lesion and NAWM masks claim the same voxel."""


class PatchExtractionError(MyelinSynthError):
    """Requested patch geometry does not fit the volume."""


def _freeze(values: np.ndarray) -> np.ndarray:
    # Copy only when the caller could still mutate the array through it.
    if values.flags.writeable:
        values = values.copy()
        values.flags.writeable = False
    return values


@dataclass(frozen=True, eq=False)
class Volume3D:
    """Scalar field on a regular 3D grid.

    ``values`` has shape ``dims`` with axis order (x, y, z); ``spacing`` is
    the voxel size in mm per axis. Instances are immutable; derive modified
    copies with :meth:`with_values`.
    """

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    values: np.ndarray

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        if len(dims) != 3 or any(d <= 0 for d in dims):
            raise ValueError(f"dims must be three positive integers, got {self.dims!r}")
        if len(spacing) != 3 or any(not np.isfinite(s) or s <= 0 for s in spacing):
            raise ValueError(f"spacing must be three positive reals, got {self.spacing!r}")
        values = np.asarray(self.values)
        if values.shape != dims:
            raise ValueCountError(
                f"value array shape {values.shape} does not match dims {dims}"
            )
        if values.dtype != np.float32:
            values = values.astype(np.float32)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "values", _freeze(values))

    @classmethod
    def from_array(cls, values, spacing=(1.0, 1.0, 1.0)) -> "Volume3D":
        values = np.asarray(values, dtype=np.float32)
        if values.ndim != 3:
            raise ValueError(f"expected a 3D array, got shape {values.shape}")
        return cls(values.shape, tuple(spacing), values)

    @property
    def n_voxels(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    def raw_bytes(self) -> bytes:
        """Payload bytes in MVOL1 order (little-endian float32, x fastest)."""
        return self.values.astype("<f4", copy=False).ravel(order="F").tobytes()

    def with_values(self, values) -> "Volume3D":
        return Volume3D(self.dims, self.spacing, np.asarray(values, dtype=np.float32))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Volume3D):
            return NotImplemented
        return (
            self.dims == other.dims
            and self.spacing == other.spacing
            and self.raw_bytes() == other.raw_bytes()
        )

    __hash__ = None


def _format_float(value: float) -> str:
    # .17g round-trips any finite float64 through the ASCII header.
    return format(float(value), ".17g")


def save_volume(volume: Volume3D, path) -> None:
    """Write a volume in MVOL1 format. Rejects non-finite values."""
    if not np.isfinite(volume.values).all():
        raise NonFiniteValueError("refusing to write volume containing NaN/Inf values")
    header = " ".join(
        [
            MVOL_MAGIC,
            *(str(d) for d in volume.dims),
            *(_format_float(s) for s in volume.spacing),
            MVOL_DTYPE,
        ]
    )
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(header.encode("ascii") + b"\n")
        fh.write(volume.raw_bytes())


def load_volume(path) -> Volume3D:
    """Read an MVOL1 file, enforcing the Volume3D invariants."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"volume file not found: {path}")
    with path.open("rb") as fh:
        header = fh.readline(512)
        payload = fh.read()
    if not header.endswith(b"\n"):
        raise VolumeFormatError(f"{path}: header line missing or unterminated")
    try:
        fields = header.decode("ascii").split()
    except UnicodeDecodeError as exc:
        raise VolumeFormatError(f"{path}: header is not ASCII") from exc
    if len(fields) != 8 or fields[0] != MVOL_MAGIC or fields[7] != MVOL_DTYPE:
        raise VolumeFormatError(
            f"{path}: expected header '{MVOL_MAGIC} nx ny nz sx sy sz {MVOL_DTYPE}', "
            f"got {header.decode('ascii', 'replace').strip()!r}"
        )
    try:
        dims = tuple(int(t) for t in fields[1:4])
        spacing = tuple(float(t) for t in fields[4:7])
    except ValueError as exc:
        raise VolumeFormatError(f"{path}: non-numeric dims or spacing in header") from exc
    if any(d <= 0 for d in dims) or any(s <= 0 for s in spacing):
        raise VolumeFormatError(f"{path}: dims and spacing must be positive")
    expected = dims[0] * dims[1] * dims[2] * 4
    if len(payload) != expected:
        raise ValueCountError(
            f"{path}: header declares {dims[0] * dims[1] * dims[2]} values "
            f"({expected} bytes), payload holds {len(payload)} bytes"
        )
    values = np.frombuffer(payload, dtype="<f4").reshape(dims, order="F")
    if not np.isfinite(values).all():
        raise NonFiniteValueError(f"{path}: volume contains non-finite values")
    return Volume3D(dims, spacing, values)


@dataclass(frozen=True, eq=False)
class MultimodalStack:
    """The 4-channel conditioning input: MTR, FA, RD, AD volumes on one grid."""

    channels: tuple[Volume3D, Volume3D, Volume3D, Volume3D]

    def __post_init__(self):
        channels = tuple(self.channels)
        if len(channels) != 4:
            raise ValueError(f"expected exactly 4 channels, got {len(channels)}")
        dims = channels[0].dims
        spacing = channels[0].spacing
        for name, chan in zip(CHANNEL_NAMES, channels):
            if chan.dims != dims:
                raise ValueError(f"channel {name!r} dims {chan.dims} != {dims}")
            if chan.spacing != spacing:
                raise ValueError(f"channel {name!r} spacing {chan.spacing} != {spacing}")
        object.__setattr__(self, "channels", channels)

    @classmethod
    def from_arrays(cls, arrays, spacing=(1.0, 1.0, 1.0)) -> "MultimodalStack":
        return cls(tuple(Volume3D.from_array(a, spacing) for a in arrays))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.channels[0].dims

    @property
    def spacing(self) -> tuple[float, float, float]:
        return self.channels[0].spacing

    def to_array(self) -> np.ndarray:
        """Channel-first array of shape (4, nx, ny, nz), float32."""
        return np.stack([c.values for c in self.channels], axis=0)


def _as_binary(volume: Volume3D, name: str) -> np.ndarray:
    values = volume.values
    if not np.logical_or(values == 0.0, values == 1.0).all():
        raise ValueError(f"{name} mask must contain only 0/1 values")
    return values > 0.5


@dataclass(frozen=True, eq=False)
class RoiMasks:
    """Disjoint binary partition of a volume into lesion / NAWM / other."""

    lesion: Volume3D
    nawm: Volume3D
    other: Volume3D

    def __post_init__(self):
        dims = self.lesion.dims
        if self.nawm.dims != dims or self.other.dims != dims:
            raise ValueError("mask dims differ across regions")
        les = _as_binary(self.lesion, "lesion")
        nawm = _as_binary(self.nawm, "nawm")
        other = _as_binary(self.other, "other")
        coverage = (
            les.astype(np.int32) + nawm.astype(np.int32) + other.astype(np.int32)
        )
        if not (coverage == 1).all():
            bad = int(np.count_nonzero(coverage != 1))
            raise ValueError(
                f"masks must partition the volume (each voxel in exactly one "
                f"region); {bad} voxels violate this"
            )

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.lesion.dims

    @property
    def lesion_bool(self) -> np.ndarray:
        return self.lesion.values > 0.5

    @property
    def nawm_bool(self) -> np.ndarray:
        return self.nawm.values > 0.5

    @property
    def other_bool(self) -> np.ndarray:
        return self.other.values > 0.5

    @property
    def n_lesion(self) -> int:
        return int(np.count_nonzero(self.lesion_bool))

    @property
    def n_nawm(self) -> int:
        return int(np.count_nonzero(self.nawm_bool))

    @property
    def n_other(self) -> int:
        return int(np.count_nonzero(self.other_bool))

    def region_bools(self) -> dict[str, np.ndarray]:
        return {
            "lesion": self.lesion_bool,
            "nawm": self.nawm_bool,
            "other": self.other_bool,
        }


def _first_voxel_xyz(mask: np.ndarray) -> tuple[int, int, int]:
    # First offending voxel in file order (x fastest).
    flat = mask.ravel(order="F")
    idx = int(flat.argmax())
    coords = np.unravel_index(idx, mask.shape, order="F")
    return tuple(int(c) for c in coords)


def partition_masks(lesion: Volume3D, nawm: Volume3D) -> RoiMasks:
    """Complete a lesion/NAWM mask pair into the three-region partition.

    ``other`` is the complement of lesion OR nawm. The inputs must be
    disjoint; overlap raises :class:`MaskOverlapError` naming the first
    offending voxel in file order.
    """
    if lesion.dims != nawm.dims:
        raise ValueError(f"lesion dims {lesion.dims} != nawm dims {nawm.dims}")
    les = _as_binary(lesion, "lesion")
    naw = _as_binary(nawm, "nawm")
    overlap = np.logical_and(les, naw)
    if overlap.any():
        x, y, z = _first_voxel_xyz(overlap)
        raise MaskOverlapError(
            f"lesion and nawm masks overlap; first offending voxel at "
            f"(x={x}, y={y}, z={z})"
        )
    other = np.logical_not(np.logical_or(les, naw))
    return RoiMasks(
        lesion,
        nawm,
        Volume3D(lesion.dims, lesion.spacing, other.astype(np.float32)),
    )


@dataclass(frozen=True)
class PatchGrid:
    """Geometry of a patch tiling: origins of every extracted patch.

    ``dropped_trailing`` records whether voxels at the trailing end of any
    axis were left uncovered because the stride tiling did not reach them
    (incomplete patches are dropped, never padded).
    """

    volume_dims: tuple[int, int, int]
    patch_dims: tuple[int, int, int]
    stride: tuple[int, int, int]
    origins: tuple[tuple[int, int, int], ...]
    dropped_trailing: bool

    @property
    def patch_count(self) -> int:
        return len(self.origins)

    @property
    def covers_volume(self) -> bool:
        """True when the patches tile the volume exactly once (disjoint cover)."""
        return self.stride == self.patch_dims and not self.dropped_trailing


def extract_patches(
    volume: Volume3D,
    patch_dims: tuple[int, int, int],
    stride: tuple[int, int, int] | None = None,
) -> tuple[PatchGrid, np.ndarray]:
    """Extract axis-aligned patches from a volume.

    Returns the grid geometry plus a float32 block array of shape
    (patch_count, l, w, h). Patch order is C-order over the origin grid
    (z-origin fastest), matching the tiling used by the patch discriminator.
    """
    p = tuple(int(v) for v in patch_dims)
    s = p if stride is None else tuple(int(v) for v in stride)
    dims = volume.dims
    if any(v < 1 for v in p):
        raise PatchExtractionError(f"patch dims must be >= 1, got {p}")
    if any(v < 1 for v in s):
        raise PatchExtractionError(f"stride must be >= 1, got {s}")
    if any(pi > di for pi, di in zip(p, dims)):
        raise PatchExtractionError(
            f"patch dims {p} exceed volume dims {dims} on at least one axis"
        )
    axis_origins = [list(range(0, d - pi + 1, si)) for d, pi, si in zip(dims, p, s)]
    dropped = any(
        origins[-1] + pi < d for origins, pi, d in zip(axis_origins, p, dims)
    )
    origins = tuple(product(*axis_origins))
    blocks = np.empty((len(origins), *p), dtype=np.float32)
    for i, (x, y, z) in enumerate(origins):
        blocks[i] = volume.values[x : x + p[0], y : y + p[1], z : z + p[2]]
    grid = PatchGrid(dims, p, s, origins, dropped)
    return grid, blocks
