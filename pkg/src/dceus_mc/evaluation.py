"""Validation metrics: lesion overlap, inter-frame NCC and lognormal TIC fits."""
from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import least_squares

from .similarity import ncc_arrays
from .volume import Cine4, GeometryError, Mask3

OVERLAP_DEFINITION = "Jaccard |A&B|/|A|B| x 100"


@dataclass(frozen=True)
class OverlapReport:
    frames: tuple
    matrix: np.ndarray  # fraction in [0, 1]
    mean: float
    std: float
    definition: str = OVERLAP_DEFINITION

    @property
    def mean_percent(self) -> float:
        return 100.0 * self.mean

    def to_dict(self) -> dict:
        return {"definition": self.definition, "frames": list(self.frames),
                "mean_percent": self.mean_percent, "std_percent": 100.0 * self.std,
                "n_pairs": len(self.frames) * (len(self.frames) - 1) // 2}


def jaccard(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    union = np.count_nonzero(a | b)
    if union == 0:
        raise ValueError("Jaccard of two empty masks is undefined")
    return np.count_nonzero(a & b) / union


def pairwise_overlap(segmentations: Sequence[Mask3], frames: Sequence[int] | None = None) -> OverlapReport:
    """Jaccard overlap over all unordered pairs of lesion segmentations."""
    segs = list(segmentations)
    if len(segs) < 2:
        raise ValueError("need at least two segmentations")
    for n, s in enumerate(segs):
        if not segs[0].same_geometry(s):
            raise GeometryError(f"segmentation {n} geometry differs")
        if not s.data.any():
            raise ValueError(f"segmentation {n} is empty")
    frames = tuple(range(len(segs))) if frames is None else tuple(frames)
    n = len(segs)
    flat = [s.data.ravel() for s in segs]
    mat = np.eye(n)
    vals = []
    for i, j in itertools.combinations(range(n), 2):
        v = jaccard(flat[i], flat[j])
        mat[i, j] = mat[j, i] = v
        vals.append(v)
    return OverlapReport(frames, mat, float(np.mean(vals)), float(np.std(vals)))


@dataclass(frozen=True)
class NccSummary:
    frames: tuple
    values: tuple
    mean: float
    std: float

    def to_dict(self) -> dict:
        return {"frames": list(self.frames), "mean": self.mean, "std": self.std,
                "n_pairs": len(self.values)}


def pairwise_ncc(cine: Cine4, frame_range: Sequence[int] | range, mask: Mask3 | None = None) -> NccSummary:
    """NCC over every unordered pair of frames in ``frame_range``."""
    frames = tuple(frame_range)
    if len(frames) < 2:
        raise ValueError("an NCC range needs at least two frames")
    if min(frames) < 0 or max(frames) >= len(cine):
        raise IndexError(f"frame range {frames[0]}..{frames[-1]} outside cine of {len(cine)} frames")
    if mask is not None:
        if not cine.geometry.same_geometry(mask):
            raise GeometryError("mask geometry does not match the cine")
        sel = mask.data
    else:
        sel = np.ones(cine.dims, dtype=bool)
    data = {n: cine.frames[n].data[sel] for n in frames}
    vals = tuple(ncc_arrays(data[a], data[b]) for a, b in itertools.combinations(frames, 2))
    return NccSummary(frames, vals, float(np.mean(vals)), float(np.std(vals)))


@dataclass(frozen=True)
class TimeIntensityCurve:
    times: np.ndarray
    intensities: np.ndarray
    roi_voxels: int = 0
    norm: float = 1.0

    def __post_init__(self):
        t = np.asarray(self.times, dtype=np.float64)
        y = np.asarray(self.intensities, dtype=np.float64)
        if t.shape != y.shape or t.ndim != 1:
            raise ValueError("times and intensities must be 1D and of equal length")
        if np.any(np.diff(t) <= 0):
            raise ValueError("TIC times must be strictly increasing")
        if not np.all(np.isfinite(y)):
            raise ValueError("TIC intensities must be finite")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "intensities", y)

    def __len__(self) -> int:
        return len(self.times)


def extract_tic(cine: Cine4, roi: Mask3, norm: float | None = None) -> TimeIntensityCurve:
    """Mean ROI intensity per frame divided by ``norm``.

    ``norm`` defaults to the cine's global maximum (use 255 for 8-bit sources).
    """
    if not cine.geometry.same_geometry(roi):
        raise GeometryError("ROI geometry does not match the cine")
    if not roi.data.any():
        raise ValueError("ROI is empty")
    if norm is None:
        norm = max(float(f.data.max()) for f in cine.frames)
    if not norm > 0:
        raise ValueError("TIC normalisation must be positive")
    means = np.array([np.mean(f.data[roi.data], dtype=np.float64) for f in cine.frames])
    return TimeIntensityCurve(np.asarray(cine.times), means / norm, roi.count, float(norm))


def lognormal_model(t, t0, mu, sigma, scale, offset) -> np.ndarray:
    """Lognormal bolus: ``offset + scale * LN(t - t0; mu, sigma)``, equal to ``offset`` for ``t <= t0``."""
    t = np.asarray(t, dtype=np.float64)
    tau = t - t0
    pos = tau > 0
    safe = np.where(pos, tau, 1.0)
    body = np.exp(-(np.log(safe) - mu) ** 2 / (2.0 * sigma ** 2)) / (safe * sigma * math.sqrt(2.0 * math.pi))
    return offset + scale * np.where(pos, body, 0.0)


PARAM_NAMES = ("t0", "mu", "sigma", "scale", "offset")


@dataclass(frozen=True)
class LognormalFit:
    params: dict
    sse: float
    rmse: float
    r_squared: float
    converged: bool
    n_samples: int
    flags: tuple = field(default=())

    def predict(self, t) -> np.ndarray:
        return lognormal_model(t, *(self.params[k] for k in PARAM_NAMES))

    def to_dict(self) -> dict:
        return asdict(self)


def fit_metrics(y: np.ndarray, yhat: np.ndarray) -> tuple[float, float, float]:
    """SSE, RMSE and R^2 of a fit."""
    res = np.asarray(y, dtype=np.float64) - np.asarray(yhat, dtype=np.float64)
    sse = float(res @ res)
    sst = float(((y - np.mean(y)) ** 2).sum())
    return sse, math.sqrt(sse / len(y)), 1.0 - sse / sst


def _initial_guesses(t: np.ndarray, y: np.ndarray) -> list[np.ndarray]:
    peak = int(np.argmax(y))
    base_n = max(1, min(peak, 3))
    offset = float(np.mean(y[:base_n]))
    span = y[peak] - offset
    below = np.nonzero(y[:peak + 1] <= offset + 0.1 * span)[0]
    t_on = t[below[-1]] if below.size else t[0] - (t[1] - t[0])
    guesses = []
    dt = np.gradient(t)
    for back in (0.0, 1.0, 3.0):
        t0 = t_on - back * (t[1] - t[0])
        tau = t - t0
        sel = tau > 0
        w = np.clip(y[sel] - offset, 0, None) * dt[sel]
        if w.sum() <= 0:
            continue
        lt = np.log(tau[sel])
        mu = float((w * lt).sum() / w.sum())
        sigma = float(np.sqrt(max((w * (lt - mu) ** 2).sum() / w.sum(), 1e-4)))
        guesses.append(np.array([t0, mu, max(sigma, 0.05), max(float(w.sum()), 1e-9), max(offset, 0.0)]))
    return guesses


def fit_lognormal(tic: TimeIntensityCurve, max_nfev: int = 2000) -> LognormalFit:
    """Damped least-squares fit of the five-parameter lognormal bolus model."""
    t, y = tic.times, tic.intensities
    if len(t) < 8:
        raise ValueError("lognormal fit needs at least 8 samples")
    if not np.ptp(y) > 0:
        raise ValueError("cannot fit a flat time-intensity curve")

    def resid(p):
        return lognormal_model(t, *p) - y

    lower = [t[0] - 10.0 * (t[-1] - t[0]), -10.0, 1e-3, 0.0, 0.0]
    upper = [t[-1], 10.0, 10.0, np.inf, np.inf]
    best = None
    for p0 in _initial_guesses(t, y):
        p0 = np.clip(p0, np.array(lower) + 1e-9, np.array(upper) - 1e-9)
        sol = least_squares(resid, p0, bounds=(lower, upper), method="trf",
                            x_scale="jac", xtol=1e-12, ftol=1e-12, gtol=1e-12, max_nfev=max_nfev)
        if best is None or sol.cost < best.cost:
            best = sol
    if best is None:
        raise ValueError("could not initialise the lognormal fit")
    params = dict(zip(PARAM_NAMES, (float(v) for v in best.x)))
    sse, rmse, r2 = fit_metrics(y, lognormal_model(t, *best.x))
    flags = ("negative_r_squared",) if r2 < 0 else ()
    return LognormalFit(params, sse, rmse, r2, bool(best.status > 0), len(t), flags)


def write_tic_csv(path, tic: TimeIntensityCurve, fit: LognormalFit | None = None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time_s", "intensity"] + (["fitted"] if fit else []))
        pred = fit.predict(tic.times) if fit else None
        for i, (tt, yy) in enumerate(zip(tic.times, tic.intensities)):
            w.writerow([f"{tt:.6g}", f"{yy:.8g}"] + ([f"{pred[i]:.8g}"] if fit else []))


def write_matrix_csv(path, frames: Sequence[int], matrix: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame"] + list(frames))
        for f, row in zip(frames, matrix):
            w.writerow([f] + [f"{v:.6f}" for v in row])


def write_json(path, payload) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, default=_json_default))


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")
