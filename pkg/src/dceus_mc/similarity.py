"""Intensity similarity: Parzen-window NMI (with analytic gradient) and NCC."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .volume import GeometryError, Mask3, Volume3

_TINY = np.finfo(np.float64).tiny


class DegenerateImageError(ValueError):
    """Raised when an image has no usable intensity variation."""


@dataclass(frozen=True)
class JointHistogram:
    """Parzen-smoothed joint intensity histogram (rows: reference, columns: floating)."""

    counts: np.ndarray
    ref_range: tuple = (0.0, 1.0)
    flt_range: tuple = (0.0, 1.0)

    def __post_init__(self):
        c = np.asarray(self.counts, dtype=np.float64)
        if c.ndim != 2 or c.shape[0] != c.shape[1] or c.shape[0] < 2:
            raise ValueError(f"histogram must be square with >= 2 bins, got {c.shape}")
        if np.any(c < 0) or not np.all(np.isfinite(c)):
            raise ValueError("histogram counts must be finite and nonnegative")
        if c.sum() <= 0:
            raise ValueError("histogram has zero total mass")
        c.setflags(write=False)
        object.__setattr__(self, "counts", c)

    @classmethod
    def from_counts(cls, counts) -> JointHistogram:
        return cls(counts)

    @property
    def bins(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> float:
        return float(self.counts.sum())

    def transpose(self) -> JointHistogram:
        return JointHistogram(self.counts.T, self.flt_range, self.ref_range)


def bin_coordinates(values: np.ndarray, lo: float, hi: float, bins: int) -> np.ndarray:
    """Map intensities in ``[lo, hi]`` linearly onto continuous bin coordinates ``[0, bins-1]``."""
    return (np.asarray(values, dtype=np.float64) - lo) * ((bins - 1) / (hi - lo))


def _value_range(values: np.ndarray, what: str) -> tuple:
    if values.size == 0:
        raise DegenerateImageError("no contributing voxels")
    lo = float(values.min())
    hi = float(values.max())
    if not hi > lo:
        raise DegenerateImageError(f"{what} image is constant over the contributing voxels")
    return lo, hi


def _entropies(counts: np.ndarray) -> tuple[float, float, float]:
    p = counts / counts.sum()
    pr = p.sum(axis=1)
    pf = p.sum(axis=0)

    def h(q):
        q = q[q > 0]
        return float(-(q * np.log(q)).sum())

    return h(pr), h(pf), h(p.ravel())


def _contributing(ref: Volume3, flt: Volume3, mask: Mask3 | None) -> np.ndarray:
    if not ref.same_geometry(flt):
        raise GeometryError("reference and floating images must share geometry")
    if mask is None:
        return np.ones(ref.dims, dtype=bool)
    if not ref.same_geometry(mask):
        raise GeometryError("mask geometry does not match the images")
    if not mask.data.any():
        raise ValueError("mask is empty")
    return mask.data


def joint_histogram(ref: Volume3, flt: Volume3, bins: int = 64, mask: Mask3 | None = None,
                    ref_range=None, flt_range=None) -> JointHistogram:
    """Cubic-spline Parzen joint histogram over the voxels selected by ``mask``.

    Intensity ranges default to ``[min, max]`` of each image over the
    contributing voxels; pass explicit ranges to hold the binning fixed.
    """
    if bins < 2:
        raise ValueError("bins must be >= 2")
    sel = _contributing(ref, flt, mask)
    r = ref.data[sel].astype(np.float64)
    f = flt.data[sel].astype(np.float64)
    ref_range = tuple(ref_range) if ref_range is not None else _value_range(r, "reference")
    flt_range = tuple(flt_range) if flt_range is not None else _value_range(f, "floating")
    counts = _kernels.parzen_joint_histogram(
        bin_coordinates(r, *ref_range, bins), bin_coordinates(f, *flt_range, bins), bins)
    return JointHistogram(counts, ref_range, flt_range)


def nmi(hist: JointHistogram) -> float:
    """Studholme NMI ``(H(R) + H(F)) / H(R, F)`` with entropies in nats."""
    hr, hf, hrf = _entropies(hist.counts)
    if hrf <= 0:
        raise DegenerateImageError("joint entropy is zero")
    return (hr + hf) / hrf


def nmi_bin_derivative(counts: np.ndarray) -> tuple[float, np.ndarray]:
    """NMI value and ``dNMI / d counts[i, j]`` with the total mass held fixed."""
    total = counts.sum()
    p = counts / total
    pr = p.sum(axis=1)
    pf = p.sum(axis=0)
    lp = np.log(np.maximum(p, _TINY))
    lpr = np.log(np.maximum(pr, _TINY))
    lpf = np.log(np.maximum(pf, _TINY))
    hr = -(pr * lpr).sum()
    hf = -(pf * lpf).sum()
    hrf = -(p * lp).sum()
    if hrf <= 0:
        raise DegenerateImageError("joint entropy is zero")
    value = (hr + hf) / hrf
    # dH/dcount = -(log p + 1) / total; the "+1" terms cancel against the zero-sum Parzen derivative
    d = (-(lpr[:, None] + 1.0) - (lpf[None, :] + 1.0) + value * (lp + 1.0)) / (total * hrf)
    return float(value), d


def nmi_and_sample_gradient(r: np.ndarray, f: np.ndarray, bins: int, ref_range, flt_range,
                            want_grad: bool = True):
    """Array-level NMI of paired samples and ``dNMI/df`` for each sample."""
    rc = bin_coordinates(r, *ref_range, bins)
    fc = bin_coordinates(f, *flt_range, bins)
    counts = _kernels.parzen_joint_histogram(rc, fc, bins)
    value, d = nmi_bin_derivative(counts)
    if not want_grad:
        return value, None
    g = _kernels.parzen_sample_gradient(rc, fc, d, bins)
    return value, g * ((bins - 1) / (flt_range[1] - flt_range[0]))


def nmi_gradient(ref: Volume3, flt: Volume3, hist: JointHistogram,
                 mask: Mask3 | None = None) -> np.ndarray:
    """``dNMI / d flt[i, j, k]`` for every voxel, with the histogram ranges held fixed.

    Voxels outside ``mask`` get exactly zero.
    """
    sel = _contributing(ref, flt, mask)
    r = ref.data[sel].astype(np.float64)
    f = flt.data[sel].astype(np.float64)
    if abs(r.size - hist.total) > 1e-6 * max(1.0, hist.total):
        raise ValueError("histogram was not built from these images / mask")
    _, g = nmi_and_sample_gradient(r, f, hist.bins, hist.ref_range, hist.flt_range)
    out = np.zeros(ref.dims)
    out[sel] = g
    return out


def ncc_arrays(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    a = a - a.mean()
    b = b - b.mean()
    va = float(a @ a)
    vb = float(b @ b)
    if va <= 0 or vb <= 0:
        raise DegenerateImageError("NCC undefined for zero-variance input")
    return float(np.clip((a @ b) / np.sqrt(va * vb), -1.0, 1.0))


def ncc(a: Volume3, b: Volume3, mask: Mask3 | None = None) -> float:
    """Pearson correlation of voxel intensities over the contributing voxels."""
    sel = _contributing(a, b, mask)
    return ncc_arrays(a.data[sel], b.data[sel])
