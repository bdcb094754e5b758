"""Volumes, cines, masks and the resampling/averaging primitives.

Voxel arrays are indexed ``data[i, j, k]`` with ``i`` along x, ``j`` along y
and ``k`` along z. The flat serialisation used on disk is x-fastest, i.e.
``data.ravel(order="F")``. The physical position of voxel ``(i, j, k)`` is
``origin + spacing * (i, j, k)`` in mm; orientation is not modelled.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from .transforms import AffineTransform, DenseDisplacementField, TransformError

INTERPOLATION_ORDER = {"nearest": 0, "linear": 1, "cubic-bspline": 3}


class GeometryError(ValueError):
    """Raised when volumes that must share a grid do not."""


def _triple(values, name: str) -> tuple:
    t = tuple(float(v) for v in values)
    if len(t) != 3:
        raise GeometryError(f"{name} must have three components, got {len(t)}")
    return t


@dataclass(frozen=True)
class Volume3:
    """A 3D scalar volume; ``data`` is stored as read-only float32."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float32, copy=True)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise GeometryError(f"volume data must be 3D and non-empty, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("volume contains non-finite voxel values")
        spacing = _triple(self.spacing, "spacing")
        if min(spacing) <= 0:
            raise GeometryError(f"spacing must be strictly positive, got {spacing}")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", _triple(self.origin, "origin"))

    @property
    def dims(self) -> tuple:
        return tuple(self.data.shape)

    def same_geometry(self, other) -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.spacing, other.spacing, rtol=0, atol=1e-9)
            and np.allclose(self.origin, other.origin, rtol=0, atol=1e-9)
        )

    def with_data(self, data) -> Volume3:
        return Volume3(data, self.spacing, self.origin)

    def index_to_mm(self, idx) -> np.ndarray:
        return np.asarray(self.origin) + np.asarray(idx, dtype=np.float64) * np.asarray(self.spacing)

    def mm_to_index(self, pts) -> np.ndarray:
        return (np.asarray(pts, dtype=np.float64) - np.asarray(self.origin)) / np.asarray(self.spacing)

    def center_mm(self) -> np.ndarray:
        return self.index_to_mm((np.asarray(self.dims) - 1) / 2.0)


@dataclass(frozen=True)
class Mask3:
    """Binary volume on a voxel grid."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        arr = np.array(self.data, dtype=bool, copy=True)
        if arr.ndim != 3:
            raise GeometryError(f"mask data must be 3D, got shape {arr.shape}")
        spacing = _triple(self.spacing, "spacing")
        if min(spacing) <= 0:
            raise GeometryError(f"spacing must be strictly positive, got {spacing}")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", _triple(self.origin, "origin"))

    @property
    def dims(self) -> tuple:
        return tuple(self.data.shape)

    @property
    def count(self) -> int:
        return int(self.data.sum())

    same_geometry = Volume3.same_geometry

    @classmethod
    def like(cls, vol, data) -> Mask3:
        return cls(data, vol.spacing, vol.origin)

    def centroid_mm(self) -> np.ndarray:
        idx = np.argwhere(self.data)
        if len(idx) == 0:
            raise ValueError("centroid of an empty mask")
        return np.asarray(self.origin) + idx.mean(axis=0) * np.asarray(self.spacing)


@dataclass(frozen=True)
class Cine4:
    """Time-ordered sequence of co-registered-geometry 3D frames."""

    frames: tuple
    times: tuple
    frame_rate_hint: float | None = None

    def __post_init__(self):
        frames = tuple(self.frames)
        times = tuple(float(t) for t in self.times)
        if len(frames) < 2:
            raise ValueError(f"a cine needs at least 2 frames, got {len(frames)}")
        if len(times) != len(frames):
            raise ValueError(f"{len(times)} timestamps for {len(frames)} frames")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("cine timestamps must be strictly increasing")
        first = frames[0]
        for n, f in enumerate(frames[1:], start=1):
            if not first.same_geometry(f):
                raise GeometryError(f"frame {n} geometry differs from frame 0")
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "times", times)

    @classmethod
    def from_array(cls, data4, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0),
                   frame_rate: float = 1.0, times=None) -> Cine4:
        data4 = np.asarray(data4)
        n = data4.shape[3]
        if times is None:
            times = np.arange(n) / float(frame_rate)
        frames = tuple(Volume3(data4[..., t], spacing, origin) for t in range(n))
        return cls(frames, tuple(times), frame_rate)

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def geometry(self) -> Volume3:
        return self.frames[0]

    @property
    def spacing(self) -> tuple:
        return self.frames[0].spacing

    @property
    def origin(self) -> tuple:
        return self.frames[0].origin

    @property
    def dims(self) -> tuple:
        return self.frames[0].dims

    def as_array(self) -> np.ndarray:
        return np.stack([f.data for f in self.frames], axis=-1)

    def replace_frames(self, frames) -> Cine4:
        return Cine4(tuple(frames), self.times, self.frame_rate_hint)


@dataclass(frozen=True)
class SpatialMapping:
    """A transform plus the interpolation settings used to apply it."""

    transform: AffineTransform | DenseDisplacementField
    interpolation: str = "linear"
    padding: float = 0.0

    def __post_init__(self):
        if self.interpolation not in INTERPOLATION_ORDER:
            raise ValueError(f"unknown interpolation {self.interpolation!r}")
        if not np.isfinite(self.padding):
            raise ValueError("padding must be finite")
        if not isinstance(self.transform, (AffineTransform, DenseDisplacementField)):
            raise TypeError(f"unsupported transform type {type(self.transform).__name__}")


def average_frames(frames: Sequence[Volume3], weights=None) -> Volume3:
    """Voxel-wise (weighted) arithmetic mean of frames sharing one grid."""
    frames = list(frames)
    if not frames:
        raise ValueError("cannot average an empty frame list")
    first = frames[0]
    for f in frames[1:]:
        if not first.same_geometry(f):
            raise GeometryError("frames to average must share geometry")
    if weights is None:
        w = np.ones(len(frames))
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (len(frames),):
            raise ValueError(f"{w.size} weights for {len(frames)} frames")
        if np.any(w < 0):
            raise ValueError("frame weights must be nonnegative")
    total = w.sum()
    if total <= 0:
        raise ValueError("frame weights sum to zero")
    acc = np.zeros(first.dims, dtype=np.float64)
    for wi, f in zip(w, frames):
        if wi:
            acc += wi * f.data
    return first.with_data(acc / total)


def frame_mean_intensity(vol: Volume3, mask: Mask3 | None = None) -> float:
    if mask is None:
        return float(np.mean(vol.data, dtype=np.float64))
    if not vol.same_geometry(mask):
        raise GeometryError("mask geometry does not match volume")
    if not mask.data.any():
        raise ValueError("mask is empty")
    return float(np.mean(vol.data[mask.data], dtype=np.float64))


def voxel_affine(transform: AffineTransform, spacing, origin) -> tuple[np.ndarray, np.ndarray]:
    """Express an mm-space affine in voxel-index space of one grid.

    Written so that the identity maps to an exactly-integer identity.
    """
    s = np.asarray(spacing, dtype=np.float64)
    o = np.asarray(origin, dtype=np.float64)
    lin = transform.linear
    mv = lin * (s[None, :] / s[:, None])
    tv = (lin @ o + transform.translation - o) / s
    return mv, tv


def mapped_index_coords(mapping_transform, dims, spacing, origin) -> np.ndarray:
    """Input-space voxel coordinates, shape ``(3, nx, ny, nz)``, for every output voxel."""
    grid = np.indices(dims, dtype=np.float64)
    if isinstance(mapping_transform, AffineTransform):
        mv, tv = voxel_affine(mapping_transform, spacing, origin)
        coords = np.tensordot(mv, grid, axes=(1, 0)) + tv[:, None, None, None]
        return coords
    field_ = mapping_transform
    if tuple(field_.dims) != tuple(dims):
        raise GeometryError("displacement field grid does not match the volume")
    s = np.asarray(spacing, dtype=np.float64)
    return grid + np.moveaxis(field_.displacement, -1, 0) / s[:, None, None, None]


def resample_array(data: np.ndarray, coords: np.ndarray, interpolation: str = "linear",
                   padding: float = 0.0) -> np.ndarray:
    """Interpolate ``data`` at index ``coords``.

    The field of view spans voxel boundaries, ``[-0.5, n - 0.5]`` per axis:
    samples in that half-voxel rim take the edge value, anything beyond it
    takes ``padding``.
    """
    order = INTERPOLATION_ORDER[interpolation]
    hi = np.asarray(data.shape, dtype=np.float64).reshape((-1,) + (1,) * (coords.ndim - 1)) - 0.5
    outside = np.any((coords < -0.5) | (coords > hi), axis=0)
    out = ndimage.map_coordinates(
        np.asarray(data, dtype=np.float64) if order == 3 else data,
        coords, order=order, mode="nearest", prefilter=order > 1,
    )
    out[outside] = padding
    return out


def resample(vol: Volume3, mapping: SpatialMapping) -> Volume3:
    """Pull-back resampling of ``vol`` through ``mapping`` on its own grid."""
    t = mapping.transform
    if isinstance(t, AffineTransform):
        if not np.all(np.isfinite(t.matrix)):
            raise TransformError("non-finite transform parameters")
    elif not (np.allclose(t.spacing, vol.spacing) and np.allclose(t.origin, vol.origin)):
        raise GeometryError("displacement field geometry does not match the volume")
    coords = mapped_index_coords(t, vol.dims, vol.spacing, vol.origin)
    out = resample_array(vol.data, coords, mapping.interpolation, mapping.padding)
    return vol.with_data(out)


def resample_mask(mask: Mask3, mapping_transform, threshold: float = 0.5) -> Mask3:
    """Warp a binary mask with linear interpolation followed by thresholding."""
    coords = mapped_index_coords(mapping_transform, mask.dims, mask.spacing, mask.origin)
    out = ndimage.map_coordinates(mask.data.astype(np.float32), coords, order=1,
                                  mode="constant", cval=0.0)
    return Mask3(out >= threshold, mask.spacing, mask.origin)


@dataclass(frozen=True)
class PyramidLevel:
    """One level of a Gaussian image pyramid (array-level, float64)."""

    data: np.ndarray
    spacing: tuple
    origin: tuple
    factor: int
    mask: np.ndarray | None = field(default=None)


def gaussian_pyramid(data: np.ndarray, spacing, origin, levels: int,
                     mask: np.ndarray | None = None, sigma: float = 1.0) -> list[PyramidLevel]:
    """Coarse-to-fine pyramid; each coarser level is smoothed (sigma in voxels) and decimated by 2.

    Decimation keeps voxel 0, so every level shares the same origin.
    """
    cur = np.asarray(data, dtype=np.float64)
    cur_mask = None if mask is None else np.asarray(mask, dtype=bool)
    sp = np.asarray(spacing, dtype=np.float64)
    out = [PyramidLevel(cur, tuple(sp), tuple(origin), 1, cur_mask)]
    for lvl in range(1, levels):
        if min(cur.shape) < 8:
            break
        cur = ndimage.gaussian_filter(cur, sigma)[::2, ::2, ::2]
        if cur_mask is not None:
            cur_mask = cur_mask[::2, ::2, ::2]
        sp = sp * 2
        out.append(PyramidLevel(cur, tuple(sp), tuple(origin), 2 ** lvl, cur_mask))
    return out[::-1]
