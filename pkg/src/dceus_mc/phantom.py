"""Synthetic 4D contrast cines with known lesion, kinetics and motion.

A motion-free cine is synthesised first (regional lognormal kinetics
modulated by a band-limited perfusion texture, plus seeded speckle-like
noise); every frame is then pulled back through its ground-truth transform.
Lesion masks are evaluated analytically through the same transform.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import ndimage

from .evaluation import TimeIntensityCurve, lognormal_model
from .transforms import AffineTransform
from .volume import Cine4, Mask3, SpatialMapping, Volume3, resample


@dataclass(frozen=True)
class Kinetics:
    t0: float = 8.0
    mu: float = 2.5
    sigma: float = 0.5
    scale: float = 1500.0
    offset: float = 5.0

    def curve(self, t) -> np.ndarray:
        return lognormal_model(t, self.t0, self.mu, self.sigma, self.scale, 0.0)


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple = (96, 96, 64)
    spacing: tuple = (1.0, 1.0, 1.0)
    lesion_center_mm: tuple = (4.0, -3.0, 2.0)
    lesion_radii_mm: tuple = (12.0, 10.0, 8.0)
    texture_sigma_vox: float = 1.5
    texture_amplitude: float = 0.6
    lesion_kinetics: Kinetics = Kinetics(t0=8.0, mu=2.5, sigma=0.5, scale=1500.0, offset=5.0)
    background_kinetics: Kinetics = Kinetics(t0=6.0, mu=3.0, sigma=0.7, scale=2000.0, offset=5.0)
    speckle_std: float = 0.15
    additive_std: float = 1.0
    frame_rate: float = 1.0
    duration: float = 60.0
    seed: int = 0

    @property
    def n_frames(self) -> int:
        return int(round(self.duration * self.frame_rate))

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_frames) / self.frame_rate

    @property
    def origin(self) -> tuple:
        """Centred grid: the volume centre sits at 0 mm."""
        return tuple(-(n - 1) / 2.0 * s for n, s in zip(self.dims, self.spacing))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> PhantomSpec:
        d = dict(d)
        for k in ("lesion_kinetics", "background_kinetics"):
            if isinstance(d.get(k), dict):
                d[k] = Kinetics(**d[k])
        for k in ("dims", "spacing", "lesion_center_mm", "lesion_radii_mm"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass(frozen=True)
class MotionTrajectory:
    """Per-frame content displacement (voxels) and the matching pull-back transforms.

    Frame ``n`` shows the motion-free scene moved by ``displacements[n]``, so
    its pull-back transform is the translation by ``-displacements[n]`` (mm).
    """

    displacements_vox: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    components: dict = field(default_factory=dict)

    def __post_init__(self):
        d = np.asarray(self.displacements_vox, dtype=np.float64)
        if d.ndim != 2 or d.shape[1] != 3:
            raise ValueError("displacements must have shape (n_frames, 3)")
        object.__setattr__(self, "displacements_vox", d)

    @classmethod
    def identity(cls, n_frames: int, spacing=(1.0, 1.0, 1.0)) -> MotionTrajectory:
        return cls(np.zeros((n_frames, 3)), tuple(spacing), {"kind": "identity"})

    @classmethod
    def compose(cls, n_frames: int, frame_rate: float, spacing=(1.0, 1.0, 1.0), *,
                sine_amplitude_vox=(0.0, 4.0, 0.0), sine_period_s: float = 4.0, sine_phase: float = 0.0,
                drift_vox=(2.0, 0.0, 0.0), step_vox=(0.0, 0.0, 3.0), step_frame: int | None = None) -> MotionTrajectory:
        """Respiration (sinusoid) + probe drift (linear ramp) + patient movement (step)."""
        t = np.arange(n_frames) / frame_rate
        ramp = t / t[-1] if n_frames > 1 else np.zeros_like(t)
        step_frame = n_frames // 2 if step_frame is None else step_frame
        d = (np.sin(2 * math.pi * t / sine_period_s + sine_phase)[:, None] * np.asarray(sine_amplitude_vox)
             + ramp[:, None] * np.asarray(drift_vox)
             + (np.arange(n_frames) >= step_frame)[:, None] * np.asarray(step_vox))
        comps = {"kind": "composite", "sine_amplitude_vox": list(map(float, sine_amplitude_vox)),
                 "sine_period_s": sine_period_s, "sine_phase": sine_phase,
                 "drift_vox": list(map(float, drift_vox)), "step_vox": list(map(float, step_vox)),
                 "step_frame": int(step_frame)}
        return cls(d, tuple(spacing), comps)

    def __len__(self) -> int:
        return len(self.displacements_vox)

    def transform(self, n: int) -> AffineTransform:
        return AffineTransform.from_translation(-self.displacements_vox[n] * np.asarray(self.spacing))

    def to_dict(self) -> dict:
        return {"spacing": list(self.spacing), "components": self.components,
                "displacements_vox": self.displacements_vox.tolist(),
                "pullback_matrices": [self.transform(n).matrix.tolist() for n in range(len(self))]}


@dataclass(frozen=True)
class PhantomCine:
    cine: Cine4
    masks: tuple
    trajectory: MotionTrajectory
    spec: PhantomSpec


def _voxel_mm(spec: PhantomSpec) -> np.ndarray:
    axes = [o + np.arange(n) * s for o, n, s in zip(spec.origin, spec.dims, spec.spacing)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def lesion_indicator(spec: PhantomSpec, points_mm: np.ndarray) -> np.ndarray:
    q = (np.asarray(points_mm) - np.asarray(spec.lesion_center_mm)) / np.asarray(spec.lesion_radii_mm)
    return (q ** 2).sum(axis=-1) <= 1.0


def texture_field(spec: PhantomSpec) -> np.ndarray:
    """Band-limited multiplicative perfusion texture (mean ~1, clipped positive)."""
    rng = np.random.default_rng(spec.seed)
    noise = rng.standard_normal(spec.dims)
    if spec.texture_amplitude == 0:
        return np.ones(spec.dims)
    smooth = ndimage.gaussian_filter(noise, spec.texture_sigma_vox, mode="wrap")
    smooth /= smooth.std()
    return np.clip(1.0 + spec.texture_amplitude * smooth, 0.05, None)


def _check_margins(spec: PhantomSpec, traj: MotionTrajectory) -> None:
    amp = np.abs(traj.displacements_vox).max(axis=0) * np.asarray(spec.spacing)
    lo = np.asarray(spec.origin)
    hi = lo + (np.asarray(spec.dims) - 1) * np.asarray(spec.spacing)
    c = np.asarray(spec.lesion_center_mm)
    r = np.asarray(spec.lesion_radii_mm)
    if np.any(c - r - amp < lo) or np.any(c + r + amp > hi):
        raise ValueError("lesion plus motion amplitude exceeds the grid")


def static_frames(spec: PhantomSpec, texture: np.ndarray | None = None):
    """Motion-free frames (generator) in acquisition order, noise included."""
    tex = texture_field(spec) if texture is None else texture
    lesion = lesion_indicator(spec, _voxel_mm(spec))
    rng = np.random.default_rng([spec.seed, 1])
    lk, bk = spec.lesion_kinetics, spec.background_kinetics
    for t in spec.times:
        clean = np.where(lesion, lk.offset + lk.curve(t) * tex, bk.offset + bk.curve(t) * tex)
        speckle = 1.0 + spec.speckle_std * rng.standard_normal(spec.dims)
        noisy = clean * np.clip(speckle, 0.0, None) + spec.additive_std * rng.standard_normal(spec.dims)
        yield np.clip(noisy, 0.0, None).astype(np.float32)


def generate_phantom_cine(spec: PhantomSpec, traj: MotionTrajectory | None = None) -> PhantomCine:
    traj = MotionTrajectory.identity(spec.n_frames, spec.spacing) if traj is None else traj
    if len(traj) != spec.n_frames:
        raise ValueError(f"trajectory has {len(traj)} frames, phantom has {spec.n_frames}")
    _check_margins(spec, traj)
    x = _voxel_mm(spec)
    frames, masks = [], []
    for n, data in enumerate(static_frames(spec)):
        vol = Volume3(data, spec.spacing, spec.origin)
        t = traj.transform(n)
        if not t.is_identity():
            vol = resample(vol, SpatialMapping(t, "linear", 0.0))
        frames.append(vol)
        masks.append(Mask3(lesion_indicator(spec, t.apply(x)), spec.spacing, spec.origin))
    cine = Cine4(tuple(frames), tuple(spec.times), spec.frame_rate)
    return PhantomCine(cine, tuple(masks), traj, spec)


def motion_free_lesion(spec: PhantomSpec) -> Mask3:
    return Mask3(lesion_indicator(spec, _voxel_mm(spec)), spec.spacing, spec.origin)


def acquisition_mask(spec: PhantomSpec, margin_mm: float = 14.0) -> Mask3:
    """Box around the motion-free lesion, the per-acquisition registration mask."""
    x = _voxel_mm(spec)
    c = np.asarray(spec.lesion_center_mm)
    r = np.asarray(spec.lesion_radii_mm) + margin_mm
    inside = np.all(np.abs(x - c) <= r, axis=-1)
    return Mask3(inside, spec.spacing, spec.origin)


def expected_tic(spec: PhantomSpec, roi: Mask3 | None = None, norm: float = 1.0) -> TimeIntensityCurve:
    """Noise- and motion-free ROI-mean curve, weighting each region by its voxel share."""
    roi = motion_free_lesion(spec) if roi is None else roi
    if not roi.data.any():
        raise ValueError("ROI is empty")
    tex = texture_field(spec)
    lesion = lesion_indicator(spec, _voxel_mm(spec))
    t = spec.times
    total = np.zeros_like(t)
    n = roi.count
    for region, kin in ((lesion, spec.lesion_kinetics), (~lesion, spec.background_kinetics)):
        sel = roi.data & region
        k = int(sel.sum())
        if k == 0:
            continue
        total += (k / n) * (kin.offset + kin.curve(t) * tex[sel].mean())
    return TimeIntensityCurve(t, total / norm, n, float(norm))


PRESETS = {
    "respiratory": dict(spec=PhantomSpec(), motion=dict(sine_amplitude_vox=(0.0, 4.0, 0.0), sine_period_s=4.0,
                                                          sine_phase=0.0, drift_vox=(2.0, 0.0, 0.0),
                                                          step_vox=(0.0, 0.0, 3.0), step_frame=30)),
    "static": dict(spec=PhantomSpec(), motion=None),
    "small": dict(spec=PhantomSpec(dims=(48, 48, 32), lesion_center_mm=(2.0, -1.0, 1.0),
                                   lesion_radii_mm=(8.0, 7.0, 5.0), duration=24.0,
                                   lesion_kinetics=Kinetics(t0=4.0, mu=2.0, sigma=0.5, scale=1000.0, offset=5.0),
                                   background_kinetics=Kinetics(t0=3.0, mu=2.4, sigma=0.6, scale=1200.0, offset=5.0)),
                  motion=dict(sine_amplitude_vox=(0.0, 2.0, 0.0), sine_period_s=4.0, sine_phase=0.5,
                              drift_vox=(1.0, 0.0, 0.0), step_vox=(0.0, 0.0, 1.5), step_frame=12)),
}


def preset(name: str, seed: int = 0) -> tuple[PhantomSpec, MotionTrajectory]:
    if name not in PRESETS:
        raise KeyError(f"unknown phantom preset {name!r}; choose from {sorted(PRESETS)}")
    p = PRESETS[name]
    spec = replace(p["spec"], seed=seed)
    if p["motion"] is None:
        traj = MotionTrajectory.identity(spec.n_frames, spec.spacing)
    else:
        traj = MotionTrajectory.compose(spec.n_frames, spec.frame_rate, spec.spacing, **p["motion"])
    return spec, traj
