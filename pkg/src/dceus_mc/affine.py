"""12-DOF affine registration by symmetric block matching and least-trimmed squares.

Each pyramid level alternates: resample the floating image through the
current transform, match blocks both ways (reference blocks searched in the
warped floating image and vice versa), and refit the transform robustly on
the pooled correspondences.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from . import _kernels
from .transforms import AffineTransform, TransformError
from .volume import GeometryError, Mask3, Volume3, gaussian_pyramid, voxel_affine

log = logging.getLogger(__name__)


class RegistrationError(RuntimeError):
    """A registration could not produce a usable transform."""


class DegenerateCorrespondenceError(RegistrationError):
    pass


@dataclass(frozen=True)
class AffineRegConfig:
    block_size: int = 4
    search_radius: int = 3
    block_keep_fraction: float = 0.5
    lts_trim_fraction: float = 0.10
    levels: int = 3
    max_outer_iterations: int = 10
    convergence_tol: float = 1e-3

    def __post_init__(self):
        if not 0 <= self.lts_trim_fraction < 0.5:
            raise ValueError("lts_trim_fraction must lie in [0, 0.5)")
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if not 0 < self.block_keep_fraction <= 1:
            raise ValueError("block_keep_fraction must lie in (0, 1]")
        if self.block_size < 2 or self.search_radius < 1:
            raise ValueError("block_size must be >= 2 and search_radius >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class BlockCorrespondence:
    ref_center: tuple
    matched_center: tuple
    score: float
    direction: str  # "forward" or "backward"

    @property
    def displacement(self) -> np.ndarray:
        return np.asarray(self.matched_center) - np.asarray(self.ref_center)


def _block_corners(arr: np.ndarray, mask: np.ndarray | None, block: int,
                   keep_fraction: float, full: bool = False, valid: np.ndarray | None = None) -> np.ndarray:
    """Lower corners of the highest-variance non-overlapping blocks, deterministic order.

    A block survives masking when at least half its voxels (all of them with
    ``full``) are in the mask, and only if it lies entirely inside ``valid``.
    """
    nb = [n // block for n in arr.shape]
    if min(nb) < 1:
        raise RegistrationError(f"volume {arr.shape} is smaller than one {block}^3 block")
    sub = arr[:nb[0] * block, :nb[1] * block, :nb[2] * block]
    tiles = sub.reshape(nb[0], block, nb[1], block, nb[2], block)
    var = tiles.var(axis=(1, 3, 5)).ravel()
    idx = np.arange(var.size)
    if mask is not None:
        m = mask[:nb[0] * block, :nb[1] * block, :nb[2] * block]
        frac = m.reshape(nb[0], block, nb[1], block, nb[2], block).mean(axis=(1, 3, 5)).ravel()
        idx = idx[frac >= (1.0 if full else 0.5)]
    if valid is not None:
        v = valid[:nb[0] * block, :nb[1] * block, :nb[2] * block]
        idx = idx[v.reshape(nb[0], block, nb[1], block, nb[2], block).all(axis=(1, 3, 5)).ravel()[idx]]
    if idx.size == 0:
        raise RegistrationError("no blocks survive masking")
    order = idx[np.argsort(-var[idx], kind="stable")]
    n_keep = max(1, int(np.ceil(keep_fraction * order.size)))
    chosen = order[:n_keep]
    return np.stack(np.unravel_index(chosen, nb), axis=1).astype(np.int64) * block


def select_blocks(vol: Volume3, mask: Mask3 | None = None,
                  cfg: AffineRegConfig = AffineRegConfig()) -> np.ndarray:
    """Centres (mm, shape ``(n, 3)``) of the retained blocks, highest variance first."""
    if mask is not None and not vol.same_geometry(mask):
        raise GeometryError("mask geometry does not match the volume")
    corners = _block_corners(vol.data, None if mask is None else mask.data,
                             cfg.block_size, cfg.block_keep_fraction)
    return vol.index_to_mm(corners + (cfg.block_size - 1) / 2.0)


def _centers_to_corners(vol: Volume3, centers_mm, block: int) -> np.ndarray:
    idx = vol.mm_to_index(np.asarray(centers_mm, dtype=np.float64).reshape(-1, 3))
    corners = np.rint(idx - (block - 1) / 2.0).astype(np.int64)
    hi = np.asarray(vol.dims) - block
    if np.any(corners < 0) or np.any(corners > hi):
        raise ValueError("block centre lies too close to the volume border")
    return corners


def _match(src, dst, corners, block, radius):
    shifts, scores, ok = _kernels.block_match(np.ascontiguousarray(src, dtype=np.float64),
                                              np.ascontiguousarray(dst, dtype=np.float64),
                                              corners, block, radius)
    return shifts[ok], scores[ok], corners[ok]


def match_blocks(ref: Volume3, flt: Volume3, blocks, cfg: AffineRegConfig = AffineRegConfig(),
                 backward_blocks=None) -> list[BlockCorrespondence]:
    """Symmetric block matching between two images on the same grid.

    Forward: each reference block is searched in ``flt``. Backward: each
    ``flt`` block (``backward_blocks``, default the same centres) is searched
    in ``ref`` and its displacement inverted. Displacements point from the
    reference position to the matching floating position (pull-back).
    """
    if not ref.same_geometry(flt):
        raise GeometryError("block matching needs images on the same grid")
    b, r = cfg.block_size, cfg.search_radius
    sp = np.asarray(ref.spacing)
    out = []
    fwd_c = _centers_to_corners(ref, blocks, b)
    bwd_c = fwd_c if backward_blocks is None else _centers_to_corners(ref, backward_blocks, b)
    half = (b - 1) / 2.0
    shifts, scores, corners = _match(ref.data, flt.data, fwd_c, b, r)
    for d, s, c in zip(shifts, scores, corners):
        p = ref.index_to_mm(c + half)
        out.append(BlockCorrespondence(tuple(p), tuple(p + d * sp), float(s), "forward"))
    shifts, scores, corners = _match(flt.data, ref.data, bwd_c, b, r)
    for e, s, c in zip(shifts, scores, corners):
        q = ref.index_to_mm(c + half)
        out.append(BlockCorrespondence(tuple(q + e * sp), tuple(q), float(s), "backward"))
    if not out:
        raise DegenerateCorrespondenceError("no block produced a correspondence")
    return out


def _ls_affine(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    pc = p.mean(axis=0)
    x = np.hstack([p - pc, np.ones((len(p), 1))])
    sol, *_ = np.linalg.lstsq(x, q, rcond=None)
    lin = sol[:3].T
    t = sol[3] - lin @ pc
    return np.hstack([lin, t[:, None]])


def _check_geometry(p: np.ndarray) -> None:
    if len(p) < 4:
        raise DegenerateCorrespondenceError(f"{len(p)} correspondences; at least 4 are needed")
    sv = np.linalg.svd(p - p.mean(axis=0), compute_uv=False)
    if sv[0] <= 0 or sv[-1] / sv[0] < 1e-6:
        raise DegenerateCorrespondenceError("correspondences are coplanar or collinear")


def lts_fit_arrays(p: np.ndarray, q: np.ndarray, trim: float, max_iter: int = 50) -> tuple[np.ndarray, np.ndarray]:
    """Least-trimmed-squares affine ``q ~ M [p; 1]``; returns the 3x4 matrix and the kept indices."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    n = len(p)
    n_keep = n - int(np.floor(trim * n))
    keep = np.arange(n)
    _check_geometry(p)
    for _ in range(max_iter):
        _check_geometry(p[keep])
        m = _ls_affine(p[keep], q[keep])
        res = np.linalg.norm(p @ m[:, :3].T + m[:, 3] - q, axis=1)
        new_keep = np.sort(np.argsort(res, kind="stable")[:n_keep])
        if np.array_equal(new_keep, keep):
            break
        keep = new_keep
    _check_geometry(p[keep])
    return _ls_affine(p[keep], q[keep]), keep


def lts_fit_affine(corr: list[BlockCorrespondence], trim: float = 0.10) -> AffineTransform:
    """Robust affine from reference to matched positions, dropping the worst ``trim`` fraction."""
    if not 0 <= trim < 0.5:
        raise ValueError("trim must lie in [0, 0.5)")
    p = np.array([c.ref_center for c in corr], dtype=np.float64).reshape(-1, 3)
    q = np.array([c.matched_center for c in corr], dtype=np.float64).reshape(-1, 3)
    m, _ = lts_fit_arrays(p, q, trim)
    try:
        return AffineTransform(m)
    except TransformError as exc:
        raise DegenerateCorrespondenceError(str(exc)) from exc


def _bbox(mask: np.ndarray | None, shape, margin: int) -> tuple[np.ndarray, np.ndarray]:
    if mask is None or not mask.any():
        return np.zeros(3, dtype=np.int64), np.asarray(shape, dtype=np.int64)
    idx = np.argwhere(mask)
    lo = np.maximum(idx.min(axis=0) - margin, 0)
    hi = np.minimum(idx.max(axis=0) + 1 + margin, shape)
    return lo, hi


def warp_region(flt: np.ndarray, transform: AffineTransform, spacing, origin, lo, hi,
                order: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Resample ``flt`` through ``transform`` on the index box ``[lo, hi)`` of its own grid.

    Out-of-FOV samples repeat the nearest edge value (no artificial edges);
    the second return value flags the samples that fell inside the FOV.
    """
    mv, tv = voxel_affine(transform, spacing, origin)
    grid = np.indices(tuple(hi - lo), dtype=np.float64) + np.asarray(lo, dtype=np.float64)[:, None, None, None]
    coords = np.tensordot(mv, grid, axes=(1, 0)) + tv[:, None, None, None]
    upper = np.asarray(flt.shape, dtype=np.float64)[:, None, None, None] - 1
    inside = np.all((coords >= 0) & (coords <= upper), axis=0)
    return ndimage.map_coordinates(flt, coords, order=order, mode="nearest"), inside


def _level_step(ref_l, flt_l, mask_l, t: AffineTransform, cfg: AffineRegConfig):
    b, r = cfg.block_size, cfg.search_radius
    sp = np.asarray(ref_l.spacing)
    org = np.asarray(ref_l.origin)
    lo, hi = _bbox(mask_l, ref_l.data.shape, b + r)
    if np.any(hi - lo < b):
        raise RegistrationError("registration region smaller than one block")
    ref_r = ref_l.data[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
    mask_r = None if mask_l is None else mask_l[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
    warped, inside = warp_region(flt_l.data, t, sp, org, lo, hi)
    half = (b - 1) / 2.0
    ps, qs = [], []
    usable = inside if mask_r is None else inside & mask_r
    # forward blocks must also sit on valid warped content, not the edge-clamped rim
    c_f = _block_corners(ref_r, mask_r, b, cfg.block_keep_fraction, valid=inside)
    d, _, c_f = _match(ref_r, warped, c_f, b, r)
    if len(c_f):
        p = org + (c_f + lo + half) * sp
        ps.append(p)
        qs.append(t.apply(p + d * sp))
    c_b = _block_corners(warped, usable, b, cfg.block_keep_fraction, full=True)
    e, _, c_b = _match(warped, ref_r, c_b, b, r)
    if len(c_b):
        qpt = org + (c_b + lo + half) * sp
        ps.append(qpt + e * sp)
        qs.append(t.apply(qpt))
    if not ps:
        raise DegenerateCorrespondenceError("no block produced a correspondence")
    p = np.concatenate(ps)
    q = np.concatenate(qs)
    m, keep = lts_fit_arrays(p, q, cfg.lts_trim_fraction)
    try:
        t_new = AffineTransform(m)
    except TransformError as exc:
        raise DegenerateCorrespondenceError(str(exc)) from exc
    corners = org + np.array(np.meshgrid(*zip(lo, hi - 1), indexing="ij")).reshape(3, -1).T * sp
    delta = np.max(np.abs(t_new.apply(corners) - t.apply(corners)) / sp)
    return t_new, float(delta), len(p)


MIN_LEVEL_BLOCKS = 64


def _usable_blocks(arr, mask, block) -> int:
    lo, hi = _bbox(mask, arr.shape, 0)
    return int(np.prod((hi - lo) // block))


def affine_register(ref: Volume3, flt: Volume3, mask: Mask3 | None = None,
                    cfg: AffineRegConfig = AffineRegConfig(),
                    init: AffineTransform | None = None) -> AffineTransform:
    """Affine ``T`` (mm, ref -> flt) such that ``resample(flt, T)`` aligns with ``ref``."""
    if not ref.same_geometry(flt):
        raise GeometryError("reference and floating images must share geometry")
    if mask is not None:
        if not ref.same_geometry(mask):
            raise GeometryError("mask geometry does not match the images")
        if not mask.data.any():
            raise RegistrationError("registration mask is empty")
    sel = ref.data if mask is None else ref.data[mask.data]
    if np.ptp(sel) <= 0 or np.ptp(flt.data) <= 0:
        raise RegistrationError("constant image: nothing to register")
    mask_arr = None if mask is None else mask.data
    ref_pyr = gaussian_pyramid(ref.data, ref.spacing, ref.origin, cfg.levels, mask_arr)
    flt_pyr = gaussian_pyramid(flt.data, flt.spacing, flt.origin, cfg.levels)
    t = init if init is not None else AffineTransform.identity()
    for ref_l, flt_l in zip(ref_pyr, flt_pyr):
        mask_l = ref_l.mask
        if mask_l is not None and not mask_l.any():
            mask_l = None
        if ref_l.factor > 1 and _usable_blocks(ref_l.data, mask_l, cfg.block_size) < MIN_LEVEL_BLOCKS:
            log.debug("affine level x%d skipped: too few blocks", ref_l.factor)
            continue
        for it in range(cfg.max_outer_iterations):
            t, delta, n_corr = _level_step(ref_l, flt_l, mask_l, t, cfg)
            log.debug("affine level x%d it %d: %d correspondences, update %.4f vox",
                      ref_l.factor, it, n_corr, delta)
            if delta < cfg.convergence_tol:
                break
    if not np.all(np.isfinite(t.matrix)):
        raise RegistrationError("affine registration produced a non-finite transform")
    return t
