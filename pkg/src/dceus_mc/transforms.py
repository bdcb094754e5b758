"""Spatial transforms acting on physical (mm) coordinates.

All transforms follow the pull-back convention: a transform registered
between a reference and a floating image maps *reference* coordinates into
*floating* coordinates, so that ``flt(T(x)) ~ ref(x)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

AFFINE_FILE_TAG = "# dceus-mc affine 3x4 row-major, mm, pull-back (ref -> flt)"


class TransformError(ValueError):
    """Raised for singular or non-finite transforms."""


@dataclass(frozen=True)
class AffineTransform:
    """12-parameter affine map ``y = L x + t`` stored as a 3x4 matrix."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64)
        if m.shape == (4, 4):
            m = m[:3]
        if m.shape != (3, 4):
            raise TransformError(f"affine matrix must be 3x4, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise TransformError("affine matrix has non-finite entries")
        if abs(np.linalg.det(m[:, :3])) <= 1e-9:
            raise TransformError("affine linear part is singular")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> AffineTransform:
        return cls(np.eye(3, 4))

    @classmethod
    def from_translation(cls, t) -> AffineTransform:
        m = np.eye(3, 4)
        m[:, 3] = np.asarray(t, dtype=np.float64)
        return cls(m)

    @property
    def linear(self) -> np.ndarray:
        return self.matrix[:, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:, 3]

    def as_4x4(self) -> np.ndarray:
        out = np.eye(4)
        out[:3] = self.matrix
        return out

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map an ``(..., 3)`` array of mm coordinates."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.linear.T + self.translation

    def inverse(self) -> AffineTransform:
        return AffineTransform(np.linalg.inv(self.as_4x4()))

    def compose(self, inner: AffineTransform) -> AffineTransform:
        """Return ``self o inner`` (``inner`` applied first)."""
        return AffineTransform(self.as_4x4() @ inner.as_4x4())

    def is_identity(self, atol: float = 0.0) -> bool:
        return bool(np.all(np.abs(self.matrix - np.eye(3, 4)) <= atol))

    def to_text(self) -> str:
        rows = [" ".join(repr(float(v)) for v in row) for row in self.matrix]
        return "\n".join([AFFINE_FILE_TAG, *rows]) + "\n"

    @classmethod
    def from_text(cls, text: str) -> AffineTransform:
        lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
        if not lines or not lines[0].startswith("# dceus-mc affine"):
            raise TransformError("missing affine file header tag")
        rows = [[float(v) for v in ln.split()] for ln in lines[1:]]
        return cls(np.array(rows))

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> AffineTransform:
        return cls.from_text(Path(path).read_text())


@dataclass(frozen=True)
class DenseDisplacementField:
    """Per-voxel displacement (mm) on a reference grid.

    The mapping is ``x -> x + displacement[i, j, k]`` for the voxel centre
    ``x`` of index ``(i, j, k)``.
    """

    displacement: np.ndarray  # (nx, ny, nz, 3)
    spacing: tuple
    origin: tuple = field(default=(0.0, 0.0, 0.0))

    def __post_init__(self):
        d = np.asarray(self.displacement, dtype=np.float64)
        if d.ndim != 4 or d.shape[-1] != 3:
            raise TransformError(f"displacement must be (nx, ny, nz, 3), got {d.shape}")
        if not np.all(np.isfinite(d)):
            raise TransformError("displacement field has non-finite values")
        d.setflags(write=False)
        object.__setattr__(self, "displacement", d)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def dims(self) -> tuple:
        return tuple(self.displacement.shape[:3])

    def magnitude(self) -> np.ndarray:
        return np.linalg.norm(self.displacement, axis=-1)
