"""Free-form deformation registration driven by Parzen NMI.

The objective maximised at each pyramid level is::

    (1 - wb - wj) * NMI(ref, flt o phi) - wb * bending_energy - wj * mean (log det J)^2

with ``phi(x) = init(x + u(x))`` and ``u`` a cubic B-spline over the
control lattice. Optimisation is conjugate-gradient ascent with a
backtracking step and outright rejection of folding iterates.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from . import _kernels
from .affine import RegistrationError, _bbox
from .bspline import (
    BSplineGrid,
    adjoint_field_and_jacobian,
    bending_energy,
    field_and_jacobian,
    log_jacobian_terms,
)
from .similarity import DegenerateImageError, nmi_and_sample_gradient
from .transforms import AffineTransform
from .volume import GeometryError, Mask3, PyramidLevel, Volume3, gaussian_pyramid

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FfdConfig:
    bins: int = 64
    spacing: float = 5.0
    bending_weight: float = 0.3
    log_jacobian_weight: float = 0.1
    levels: int = 3
    max_iterations_per_level: int = 300
    max_step_fraction: float = 0.5   # first trial step, as a fraction of the control spacing
    min_step_vox: float = 0.01       # stop once the trial step is below this (level voxels)
    convergence_tol: float = 1e-4    # relative objective gain over ``patience`` iterations
    patience: int = 5

    def __post_init__(self):
        if self.bending_weight < 0 or self.log_jacobian_weight < 0:
            raise ValueError("penalty weights must be nonnegative")
        if self.bending_weight + self.log_jacobian_weight >= 1:
            raise ValueError("penalty weights must leave the similarity term a positive weight")
        if self.levels < 1 or self.bins < 2 or self.spacing <= 0:
            raise ValueError("invalid FFD levels, bins or spacing")

    @property
    def similarity_weight(self) -> float:
        return 1.0 - self.bending_weight - self.log_jacobian_weight

    def to_dict(self) -> dict:
        return asdict(self)


class FfdObjective:
    """Objective and analytic gradient over the control displacements at one level."""

    def __init__(self, ref_l: PyramidLevel, flt_l: PyramidLevel, template: BSplineGrid,
                 mask_l: np.ndarray | None, cfg: FfdConfig):
        self.cfg = cfg
        self.template = template
        sp = np.asarray(ref_l.spacing)
        self.flt = np.ascontiguousarray(flt_l.data, dtype=np.float64)
        self.flt_origin = np.asarray(flt_l.origin)
        self.flt_spacing = np.asarray(flt_l.spacing)
        lo, hi = _bbox(mask_l, ref_l.data.shape, 0)
        self.region_shape = tuple(int(v) for v in hi - lo)
        ref_r = ref_l.data[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
        sel = np.ones(self.region_shape, dtype=bool) if mask_l is None else \
            mask_l[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]].copy()
        if not sel.any():
            raise RegistrationError("registration mask is empty at this level")
        self.sel = sel
        self.full = bool(sel.all())
        axes = [ref_l.origin[a] + np.arange(lo[a], hi[a]) * sp[a] for a in range(3)]
        self.b0 = [template.axis_basis(a, axes[a], 0) for a in range(3)]
        self.b1 = [template.axis_basis(a, axes[a], 1) for a in range(3)]
        self.x = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)[sel]
        self.ref = ref_r[sel].astype(np.float64)
        self.ref_range = (float(self.ref.min()), float(self.ref.max()))
        self.flt_range = (float(self.flt.min()), float(self.flt.max()))
        if not (self.ref_range[1] > self.ref_range[0] and self.flt_range[1] > self.flt_range[0]):
            raise DegenerateImageError("constant image over the registration region")
        init = template.init
        self.lin = np.eye(3) if init is None else init.linear
        self.trans = np.zeros(3) if init is None else init.translation

    def _sample(self, u_sel: np.ndarray, want_grad: bool):
        y = (self.x + u_sel) @ self.lin.T + self.trans
        idx = (y - self.flt_origin) / self.flt_spacing
        return _kernels.trilinear_sample(self.flt, np.ascontiguousarray(idx[:, 0]),
                                         np.ascontiguousarray(idx[:, 1]),
                                         np.ascontiguousarray(idx[:, 2]), want_grad)

    def evaluate(self, coeffs: np.ndarray, want_grad: bool = True):
        """Return ``(objective, gradient or None, terms)``; folding yields ``-inf``."""
        cfg = self.cfg
        u, du = field_and_jacobian(coeffs, self.b0, self.b1)
        lj, gj = log_jacobian_terms(du, with_gradient=want_grad)
        if not np.isfinite(lj):
            return -np.inf, None, {"fold": True}
        grid = self.template.with_displacements(coeffs)
        be = bending_energy(grid, with_gradient=want_grad)
        be, gbe = be if want_grad else (be, None)
        vals, grads, valid = self._sample(u.reshape(-1, 3) if self.full else u[self.sel], want_grad)
        if valid.sum() < 8:
            raise RegistrationError("floating image left the field of view")
        sim, dsim = nmi_and_sample_gradient(self.ref[valid], vals[valid], cfg.bins,
                                            self.ref_range, self.flt_range, want_grad)
        ws, wb, wj = cfg.similarity_weight, cfg.bending_weight, cfg.log_jacobian_weight
        value = ws * sim - wb * be - wj * lj
        terms = {"nmi": sim, "bending": be, "log_jacobian": lj, "valid": int(valid.sum())}
        if not want_grad:
            return value, None, terms
        w_sel = np.zeros((len(vals), 3))
        # d phi / d u = L; image gradient converted from flt index units to mm
        w_sel[valid] = (ws * dsim)[:, None] * ((grads[valid] / self.flt_spacing) @ self.lin)
        if self.full:
            w = w_sel.reshape(self.region_shape + (3,))
        else:
            w = np.zeros(self.region_shape + (3,))
            w[self.sel] = w_sel
        grad = adjoint_field_and_jacobian(w, -wj * gj, self.b0, self.b1, coeffs.shape) - wb * gbe
        return value, grad, terms


def _optimise_level(obj: FfdObjective, coeffs: np.ndarray, level_spacing: np.ndarray,
                    cfg: FfdConfig, trace: list) -> tuple[np.ndarray, bool, int]:
    max_step = cfg.max_step_fraction * float(obj.template.control_spacing_mm.min())
    min_step = cfg.min_step_vox * float(level_spacing.min())
    f, g, _ = obj.evaluate(coeffs)
    if not np.isfinite(f):
        raise RegistrationError("initial deformation folds")
    trace.append(f)
    d = g.copy()
    g_prev = g
    step = max_step
    history = [f]
    converged = False
    it = 0
    for it in range(1, cfg.max_iterations_per_level + 1):
        dmax = np.abs(d).max()
        if dmax <= 0:
            converged = True
            break
        accepted = False
        while step >= min_step:
            trial = coeffs + (step / dmax) * d
            f_new, _, _ = obj.evaluate(trial, want_grad=False)
            if f_new > f:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            if not np.array_equal(d, g):
                d = g.copy()      # restart along steepest ascent
                step = max_step
                continue
            converged = True
            break
        coeffs = trial
        f, g, _ = obj.evaluate(coeffs)
        trace.append(f)
        history.append(f)
        beta = max(0.0, float((g * (g - g_prev)).sum() / max((g_prev * g_prev).sum(), 1e-300)))
        d = g + beta * d
        g_prev = g
        step = min(max_step, step * 1.5)
        if len(history) > cfg.patience:
            old = history[-1 - cfg.patience]
            if f - old <= cfg.convergence_tol * max(abs(old), 1e-12):
                converged = True
                break
    return coeffs, converged, it


def ffd_register(ref: Volume3, flt: Volume3, init: AffineTransform | None = None,
                 mask: Mask3 | None = None, cfg: FfdConfig = FfdConfig()) -> BSplineGrid:
    """Multi-level B-spline registration of ``flt`` onto ``ref``.

    The returned grid maps reference mm coordinates into floating space as
    ``init(x + u(x))``; ``grid.info`` records per-level iteration counts,
    the accepted objective trace and convergence flags.
    """
    if not ref.same_geometry(flt):
        raise GeometryError("reference and floating images must share geometry")
    if mask is not None:
        if not ref.same_geometry(mask):
            raise GeometryError("mask geometry does not match the images")
        if not mask.data.any():
            raise RegistrationError("registration mask is empty")
    mask_arr = None if mask is None else mask.data
    ref_pyr = gaussian_pyramid(ref.data, ref.spacing, ref.origin, cfg.levels, mask_arr)
    flt_pyr = gaussian_pyramid(flt.data, flt.spacing, flt.origin, cfg.levels)
    n_lv = len(ref_pyr)
    grid = BSplineGrid.zeros(ref, cfg.spacing * 2 ** (n_lv - 1), init)
    info = {"levels": [], "converged": True, "trace": []}
    for lv, (ref_l, flt_l) in enumerate(zip(ref_pyr, flt_pyr)):
        if lv > 0:
            grid = grid.refine()
        mask_l = ref_l.mask
        if mask_l is not None and not mask_l.any():
            mask_l = None
        obj = FfdObjective(ref_l, flt_l, grid, mask_l, cfg)
        trace: list = []
        coeffs, conv, iters = _optimise_level(obj, np.array(grid.displacements), np.asarray(ref_l.spacing),
                                              cfg, trace)
        grid = grid.with_displacements(coeffs)
        info["levels"].append({"factor": ref_l.factor, "control_spacing_vox": grid.control_spacing[0],
                               "iterations": iters, "converged": conv,
                               "objective_start": trace[0], "objective_end": trace[-1],
                               "accepted_steps": len(trace) - 1})
        info["trace"].extend(trace)
        info["converged"] = info["converged"] and conv
        log.debug("ffd level x%d: %d iterations, objective %.5f -> %.5f", ref_l.factor, iters,
                  trace[0], trace[-1])
    if not info["converged"]:
        log.warning("FFD hit the iteration cap before converging")
    return grid.with_displacements(grid.displacements, info)
