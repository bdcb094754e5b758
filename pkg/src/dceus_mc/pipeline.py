"""Two-pass, window-based motion correction of a contrast cine.

Pass one aligns every post-injection frame to the average of its short
temporal window (affine, then FFD seeded by the affine). Pass two averages
the corrected window, aligns that average affinely to the master (mean of
the whole cine), and re-registers every frame of the window non-rigidly to
the master-aligned window average, so all windows end up in one space.
"""
from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .affine import AffineRegConfig, RegistrationError, affine_register
from .bspline import BSplineGrid
from .ffd import FfdConfig, ffd_register
from .similarity import DegenerateImageError
from .transforms import AffineTransform, TransformError
from .volume import (
    Cine4,
    GeometryError,
    Mask3,
    SpatialMapping,
    Volume3,
    average_frames,
    frame_mean_intensity,
    resample,
    resample_mask,
)

log = logging.getLogger(__name__)

# failures that demote a frame down the fallback ladder instead of aborting the run
_RECOVERABLE = (RegistrationError, DegenerateImageError, TransformError, np.linalg.LinAlgError,
                FloatingPointError)


class StartDetectionError(ValueError):
    """No contrast arrival could be located, or too few frames follow it."""


class PipelineError(RuntimeError):
    """Unrecoverable registration failure (carries the affected frame indices)."""

    def __init__(self, message: str, frames: Sequence[int] = ()):
        super().__init__(message)
        self.frames = tuple(frames)


@dataclass(frozen=True)
class PipelineConfig:
    window_size: int = 5
    start_threshold_factor: float = 1.20
    baseline_frame_count: int = 5
    affine: AffineRegConfig = AffineRegConfig()
    ffd: FfdConfig = FfdConfig()
    master_weights: tuple | None = None
    parallelism: int = 1
    interpolation: str = "linear"

    def __post_init__(self):
        if not 3 <= self.window_size <= 6:
            raise ValueError(f"window_size must lie in [3, 6], got {self.window_size}")
        if not self.start_threshold_factor > 1:
            raise ValueError("start_threshold_factor must exceed 1")
        if self.baseline_frame_count < 1:
            raise ValueError("baseline_frame_count must be >= 1")
        if self.parallelism < 1:
            raise ValueError("parallelism must be >= 1")
        if self.master_weights is not None:
            object.__setattr__(self, "master_weights", tuple(float(w) for w in self.master_weights))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> PipelineConfig:
        d = dict(d)
        if isinstance(d.get("affine"), dict):
            d["affine"] = AffineRegConfig(**d["affine"])
        if isinstance(d.get("ffd"), dict):
            d["ffd"] = FfdConfig(**d["ffd"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown pipeline settings: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class WindowPlan:
    start_frame: int
    windows: tuple
    nominal_size: int

    def __post_init__(self):
        wins = tuple(range(w.start, w.stop) for w in self.windows)
        object.__setattr__(self, "windows", wins)
        pos = self.start_frame
        for w in wins:
            if w.start != pos or len(w) < self.nominal_size:
                raise ValueError("windows must be contiguous and at least nominal_size long")
            pos = w.stop
        sizes = [len(w) for w in wins]
        if sizes and max(sizes) - min(sizes) > 1:
            raise ValueError("window sizes may differ by at most one frame")

    @property
    def n_frames(self) -> int:
        return self.windows[-1].stop if self.windows else self.start_frame

    @property
    def sizes(self) -> list[int]:
        return [len(w) for w in self.windows]

    def window_of(self, frame: int) -> int:
        for g, w in enumerate(self.windows):
            if frame in w:
                return g
        raise IndexError(f"frame {frame} precedes the start frame")

    def to_dict(self) -> dict:
        return {"start_frame": self.start_frame, "nominal_size": self.nominal_size,
                "windows": [[w.start, w.stop - 1] for w in self.windows]}


@dataclass(frozen=True)
class StartDetection:
    frame: int
    baseline_mean: float
    threshold: float
    frame_means: tuple

    def to_dict(self) -> dict:
        return {"start_frame": self.frame, "baseline_mean": self.baseline_mean, "threshold": self.threshold,
                "start_frame_mean": self.frame_means[self.frame], "frame_means": list(self.frame_means)}


@dataclass
class FrameRecord:
    frame: int
    window: int | None
    status: str = "pass-through"  # pass-through | full | affine-only | unchanged
    first_affine: AffineTransform | None = None
    first_grid: BSplineGrid | None = None
    second_grid: BSplineGrid | None = None
    second_affine: AffineTransform | None = None  # used only when the second FFD fell back
    errors: list = field(default_factory=list)
    seconds: float = 0.0

    def mappings(self) -> list:
        """Pull-back transforms applied to this frame, in order."""
        out = []
        if self.first_grid is not None:
            out.append(self.first_grid.total_displacement())
        elif self.first_affine is not None:
            out.append(self.first_affine)
        if self.second_grid is not None:
            out.append(self.second_grid.total_displacement())
        elif self.second_affine is not None:
            out.append(self.second_affine)
        return out

    def to_dict(self) -> dict:
        d = {"frame": self.frame, "window": self.window, "status": self.status,
             "errors": list(self.errors), "seconds": round(self.seconds, 3)}
        if self.first_affine is not None:
            d["first_affine"] = self.first_affine.matrix.tolist()
        for key, grid in (("first_ffd", self.first_grid), ("second_ffd", self.second_grid)):
            if grid is not None:
                mag = np.linalg.norm(grid.spline_field(), axis=-1)
                d[key] = {"max_displacement_mm": float(mag.max()), "mean_displacement_mm": float(mag.mean()),
                          "converged": bool(grid.info.get("converged", True)),
                          "iterations": [lv["iterations"] for lv in grid.info.get("levels", [])]}
        return d


@dataclass
class CorrectionReport:
    start: StartDetection
    plan: WindowPlan
    frames: list
    window_affines: list
    config: PipelineConfig
    warnings: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"start_detection": self.start.to_dict(), "window_plan": self.plan.to_dict(),
                "window_affines": [t.matrix.tolist() for t in self.window_affines],
                "frames": [r.to_dict() for r in self.frames], "warnings": list(self.warnings),
                "timings_s": {k: round(v, 3) for k, v in self.timings.items()},
                "config": self.config.to_dict()}


def start_detection(cine: Cine4, cfg: PipelineConfig = PipelineConfig(), mask: Mask3 | None = None) -> StartDetection:
    n = len(cine)
    if n <= cfg.baseline_frame_count:
        raise StartDetectionError(f"{n} frames cannot hold a {cfg.baseline_frame_count}-frame baseline")
    means = tuple(frame_mean_intensity(f, mask) for f in cine.frames)
    baseline = float(np.mean(means[:cfg.baseline_frame_count]))
    if baseline <= 0:
        raise StartDetectionError("baseline mean intensity is zero")
    thr = cfg.start_threshold_factor * baseline
    for i, m in enumerate(means):
        if m > thr:
            return StartDetection(i, baseline, thr, means)
    raise StartDetectionError(f"no frame exceeds {cfg.start_threshold_factor:g} x baseline ({thr:.4g}): no injection found")


def detect_start_frame(cine: Cine4, cfg: PipelineConfig = PipelineConfig(), mask: Mask3 | None = None) -> int:
    return start_detection(cine, cfg, mask).frame


def plan_windows(n_frames: int, s: int, window_size: int) -> WindowPlan:
    """Split frames ``s..n_frames-1`` into windows; the last ``r`` windows take one extra frame."""
    avail = n_frames - s
    if s < 0 or avail < window_size:
        raise StartDetectionError(f"{avail} post-injection frames, fewer than one window of {window_size}")
    g = avail // window_size
    # leftover frames go one each to the trailing windows; if there are more
    # leftovers than windows, they are spread as evenly as possible instead
    q, r = divmod(avail, g)
    sizes = [q] * (g - r) + [q + 1] * r
    bounds = np.concatenate([[s], s + np.cumsum(sizes)])
    return WindowPlan(s, tuple(range(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])), window_size)


# ---------------------------------------------------------------- workers

def _init_worker():
    threadpool_limits(1)


def _first_pass_task(args) -> FrameRecord:
    frame_idx, window, ref, flt, mask, cfg = args
    rec = FrameRecord(frame_idx, window, status="unchanged")
    t0 = time.perf_counter()
    try:
        rec.first_affine = affine_register(ref, flt, mask, cfg.affine)
        rec.status = "affine-only"
        rec.first_grid = ffd_register(ref, flt, init=rec.first_affine, mask=mask, cfg=cfg.ffd)
        rec.status = "full"
    except _RECOVERABLE as exc:
        rec.errors.append(f"first pass: {type(exc).__name__}: {exc}")
    rec.seconds = time.perf_counter() - t0
    return rec


def _window_affine_task(args):
    master, wprime, mask, cfg = args
    try:
        return affine_register(master, wprime, mask, cfg.affine)
    except _RECOVERABLE as exc:
        return exc


def _second_pass_task(args) -> tuple:
    ref, flt, t_win, mask, cfg = args
    t0 = time.perf_counter()
    try:
        return ffd_register(ref, flt, init=t_win, mask=mask, cfg=cfg.ffd), None, time.perf_counter() - t0
    except _RECOVERABLE as exc:
        return None, f"second pass: {type(exc).__name__}: {exc}", time.perf_counter() - t0


def _apply(vol: Volume3, rec_mapping, interpolation: str) -> Volume3:
    return resample(vol, SpatialMapping(rec_mapping, interpolation))


class _Runner:
    """Ordered map over tasks, in-process or across worker processes."""

    def __init__(self, jobs: int):
        self.jobs = jobs
        self.pool = None

    def __enter__(self):
        if self.jobs > 1:
            self.pool = ProcessPoolExecutor(max_workers=self.jobs, initializer=_init_worker)
        return self

    def map(self, fn: Callable, tasks: list) -> list:
        if self.pool is None:
            with threadpool_limits(1):
                return [fn(t) for t in tasks]
        return list(self.pool.map(fn, tasks))

    def __exit__(self, *exc):
        if self.pool is not None:
            self.pool.shutdown()


# ---------------------------------------------------------------- passes

def _first_pass(frames: Sequence[Volume3], indices: Sequence[int], plan: WindowPlan, mask, cfg, runner):
    refs = [average_frames([frames[i] for i in w]) for w in plan.windows]
    tasks = [(n, plan.window_of(n), refs[plan.window_of(n)], frames[n], mask, cfg) for n in indices]
    records = runner.map(_first_pass_task, tasks)
    outputs = {}
    for rec in records:
        src = frames[rec.frame]
        if rec.first_grid is not None:
            outputs[rec.frame] = _apply(src, rec.first_grid.total_displacement(), cfg.interpolation)
        elif rec.first_affine is not None:
            outputs[rec.frame] = _apply(src, rec.first_affine, cfg.interpolation)
        else:
            outputs[rec.frame] = src
    return outputs, refs, {r.frame: r for r in records}


def first_pass(window_frames: Sequence[Volume3], mask: Mask3 | None = None,
               cfg: PipelineConfig = PipelineConfig()) -> tuple[list, Volume3, list]:
    """Register every frame of one window to the window average.

    Returns the corrected frames, the window reference and per-frame records.
    """
    frames = list(window_frames)
    if not frames:
        raise ValueError("empty window")
    plan = WindowPlan(0, (range(0, len(frames)),), len(frames))
    with _Runner(cfg.parallelism) as runner:
        outputs, refs, recs = _first_pass(frames, range(len(frames)), plan, mask, cfg, runner)
    return [outputs[i] for i in range(len(frames))], refs[0], [recs[i] for i in range(len(frames))]


def _second_pass(first_out: dict, windows: tuple, master: Volume3, mask, cfg, runner, records: dict,
                 warnings: list):
    wprimes = [average_frames([first_out[n] for n in w]) for w in windows]
    results = runner.map(_window_affine_task, [(master, wp, mask, cfg) for wp in wprimes])
    for g, res in enumerate(results):
        if isinstance(res, Exception):
            raise PipelineError(f"window {g}: master alignment failed ({res})", windows[g])
    t_wins = results
    wts = [_apply(wp, t, cfg.interpolation) for wp, t in zip(wprimes, t_wins)]
    tasks = []
    for g, w in enumerate(windows):
        tasks += [(wts[g], first_out[n], t_wins[g], mask, cfg) for n in w]
    order = [n for w in windows for n in w]
    final = {}
    for n, (grid, err, secs) in zip(order, runner.map(_second_pass_task, tasks)):
        rec = records[n]
        g = rec.window
        rec.seconds += secs
        if grid is not None:
            rec.second_grid = grid
            final[n] = _apply(first_out[n], grid.total_displacement(), cfg.interpolation)
            if not grid.info.get("converged", True):
                warnings.append(f"frame {n}: second-pass FFD stopped at the iteration cap")
        else:
            rec.errors.append(err)
            rec.second_affine = t_wins[g]
            rec.status = "affine-only" if rec.status == "full" else rec.status
            final[n] = _apply(first_out[n], t_wins[g], cfg.interpolation)
    return final, wprimes, t_wins


def second_pass(first_outputs: Sequence[Sequence[Volume3]], master: Volume3, mask: Mask3 | None = None,
                cfg: PipelineConfig = PipelineConfig()) -> tuple[list, list]:
    """Bring first-pass windows into the master's space; returns final frames per window and each window's affine."""
    sizes = [len(w) for w in first_outputs]
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    wins = tuple(range(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]))
    flat = {n: f for n, f in enumerate(f for w in first_outputs for f in w)}
    records = {n: FrameRecord(n, g, "full") for g, w in enumerate(wins) for n in w}
    with _Runner(cfg.parallelism) as runner:
        final, _, t_wins = _second_pass(flat, wins, master, mask, cfg, runner, records, [])
    return [[final[n] for n in w] for w in wins], t_wins


def motion_correct(cine: Cine4, mask: Mask3 | None = None,
                   cfg: PipelineConfig = PipelineConfig()) -> tuple[Cine4, CorrectionReport]:
    """Two-pass motion correction; frames before contrast arrival pass through untouched."""
    if mask is not None:
        if not cine.geometry.same_geometry(mask):
            raise GeometryError("mask geometry does not match the cine")
        if not mask.data.any():
            raise ValueError("registration mask is empty")
    timings = {}
    t0 = time.perf_counter()
    frames = list(cine.frames)
    master = average_frames(frames, cfg.master_weights)
    start = start_detection(cine, cfg, mask)
    plan = plan_windows(len(cine), start.frame, cfg.window_size)
    log.info("contrast arrival at frame %d (baseline %.4g, threshold %.4g); %d windows",
             start.frame, start.baseline_mean, start.threshold, len(plan.windows))
    timings["setup"] = time.perf_counter() - t0
    warnings: list = []
    with _Runner(cfg.parallelism) as runner:
        t1 = time.perf_counter()
        corrected = range(start.frame, len(cine))
        first_out, _, records = _first_pass(frames, corrected, plan, mask, cfg, runner)
        timings["first_pass"] = time.perf_counter() - t1
        for rec in records.values():
            if rec.status != "full":
                warnings.append(f"frame {rec.frame}: first pass fell back to {rec.status}")
            elif not rec.first_grid.info.get("converged", True):
                warnings.append(f"frame {rec.frame}: first-pass FFD stopped at the iteration cap")
        t2 = time.perf_counter()
        final, _, t_wins = _second_pass(first_out, plan.windows, master, mask, cfg, runner, records, warnings)
        timings["second_pass"] = time.perf_counter() - t2
    out_frames = [final.get(n, f) for n, f in enumerate(frames)]
    all_records = [records.get(n, FrameRecord(n, None)) for n in range(len(frames))]
    timings["total"] = time.perf_counter() - t0
    for w in warnings:
        log.warning(w)
    report = CorrectionReport(start, plan, all_records, list(t_wins), cfg, warnings, timings)
    return cine.replace_frames(out_frames), report


def correct_masks(masks: Sequence[Mask3], report: CorrectionReport, threshold: float = 0.5) -> list[Mask3]:
    """Carry per-frame masks through the same mappings the frames went through."""
    if len(masks) != len(report.frames):
        raise ValueError(f"{len(masks)} masks for {len(report.frames)} frames")
    out = []
    for m, rec in zip(masks, report.frames):
        for t in rec.mappings():
            m = resample_mask(m, t, threshold)
        out.append(m)
    return out


def with_parallelism(cfg: PipelineConfig, jobs: int) -> PipelineConfig:
    return replace(cfg, parallelism=int(jobs))
