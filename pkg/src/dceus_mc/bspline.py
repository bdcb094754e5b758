"""Cubic B-spline control lattices and their regularisers.

Control point ``k`` along an axis sits at ``origin + (k - 1) * h`` (mm), so
the lattice carries one knot of margin before the image and enough after it
for every voxel to have a full 4-point support. Displacements are in mm.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import _kernels
from .transforms import AffineTransform, DenseDisplacementField

FOLD = np.inf


def lattice_dims(dims, spacing, control_spacing) -> tuple:
    extent = (np.asarray(dims) - 1) * np.asarray(spacing, dtype=np.float64)
    h = np.asarray(control_spacing, dtype=np.float64) * np.asarray(spacing, dtype=np.float64)
    return tuple(int(v) for v in np.floor(extent / h + 1e-9) + 4)


def _basis_values(u: np.ndarray, deriv: int) -> np.ndarray:
    """Cubic B-spline weights (or derivatives w.r.t. ``u``) for the 4 supporting knots."""
    v = 1.0 - u
    if deriv == 0:
        return np.stack([v ** 3 / 6, (3 * u ** 3 - 6 * u ** 2 + 4) / 6,
                         (-3 * u ** 3 + 3 * u ** 2 + 3 * u + 1) / 6, u ** 3 / 6], axis=-1)
    if deriv == 1:
        return np.stack([-0.5 * v ** 2, 1.5 * u ** 2 - 2 * u,
                         -1.5 * u ** 2 + u + 0.5, 0.5 * u ** 2], axis=-1)
    if deriv == 2:
        return np.stack([v, 3 * u - 2, -3 * u + 1, u], axis=-1)
    raise ValueError(f"unsupported derivative order {deriv}")


def basis_matrix(coords_mm: np.ndarray, origin: float, h: float, n_ctrl: int,
                 deriv: int = 0) -> np.ndarray:
    """Dense ``(len(coords), n_ctrl)`` matrix of basis functions (mm derivatives)."""
    t = (np.asarray(coords_mm, dtype=np.float64) - origin) / h + 1.0
    i = np.floor(t)
    w = _basis_values(t - i, deriv) / h ** deriv
    out = np.zeros((t.size, n_ctrl))
    rows = np.arange(t.size)
    for a in range(4):
        col = i.astype(np.int64) - 1 + a
        ok = (col >= 0) & (col < n_ctrl)
        out[rows[ok], col[ok]] = w[ok, a]
    return out


def _contract(arr: np.ndarray, mat: np.ndarray, axis: int) -> np.ndarray:
    """``out[.., i, ..] = sum_k mat[i, k] * arr[.., k, ..]`` along ``axis``."""
    return np.moveaxis(np.tensordot(mat, arr, axes=(1, axis)), 0, axis)


def separable_apply(coeffs: np.ndarray, bx, by, bz) -> np.ndarray:
    """Tensor-product expansion of ``coeffs[kx, ky, kz, ...]``."""
    out = _contract(coeffs, bx, 0)
    out = _contract(out, by, 1)
    return _contract(out, bz, 2)


def _subdivision_matrix(n_coarse: int, n_fine: int) -> np.ndarray:
    s = np.zeros((n_fine, n_coarse))
    for j in range(n_fine):
        if j % 2 == 0:
            k = j // 2
            for kk, w in ((k, 0.5), (k + 1, 0.5)):
                if kk < n_coarse:
                    s[j, kk] = w
        else:
            k = (j + 1) // 2
            for kk, w in ((k - 1, 0.125), (k, 0.75), (k + 1, 0.125)):
                if 0 <= kk < n_coarse:
                    s[j, kk] = w
    return s


@lru_cache(maxsize=32)
def _gram_matrices(n: int, spacing: float, h: float, n_ctrl: int) -> dict:
    """``G[d, e][k, l] = integral B_k^(d) B_l^(e)`` over the voxel-centre extent of one axis."""
    extent = (n - 1) * spacing
    gx, gw = np.polynomial.legendre.leggauss(4)
    edges = np.arange(0.0, extent, h)
    edges = np.append(edges, extent)
    a, b = edges[:-1], edges[1:]
    pts = (0.5 * (b - a)[:, None] * (gx[None, :] + 1) + a[:, None]).ravel()
    wts = (0.5 * (b - a)[:, None] * gw[None, :]).ravel()
    mats = {d: basis_matrix(pts, 0.0, h, n_ctrl, d) for d in (0, 1, 2)}
    return {(d, e): (mats[d] * wts[:, None]).T @ mats[e] for d, e in ((0, 0), (1, 1), (2, 2))}


@dataclass(frozen=True)
class BSplineGrid:
    """Control-point displacement lattice over a reference image grid.

    The represented mapping is ``x -> init(x + u(x))`` where ``u`` is the
    spline expansion of ``displacements`` and ``init`` defaults to identity.
    """

    dims: tuple
    spacing: tuple
    origin: tuple
    control_spacing: tuple
    displacements: np.ndarray
    init: AffineTransform | None = None
    info: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        object.__setattr__(self, "control_spacing", tuple(float(c) for c in self.control_spacing))
        disp = np.array(self.displacements, dtype=np.float64)
        expect = (*lattice_dims(self.dims, self.spacing, self.control_spacing), 3)
        if disp.shape != expect:
            raise ValueError(f"displacements shape {disp.shape} != lattice shape {expect}")
        if not np.all(np.isfinite(disp)):
            raise ValueError("control displacements must be finite")
        disp.setflags(write=False)
        object.__setattr__(self, "displacements", disp)

    @classmethod
    def zeros(cls, vol, control_spacing=(5.0, 5.0, 5.0), init=None) -> BSplineGrid:
        cs = tuple(np.broadcast_to(np.asarray(control_spacing, dtype=np.float64), (3,)))
        k = lattice_dims(vol.dims, vol.spacing, cs)
        return cls(vol.dims, vol.spacing, vol.origin, cs, np.zeros((*k, 3)), init)

    @property
    def control_dims(self) -> tuple:
        return tuple(self.displacements.shape[:3])

    @property
    def control_spacing_mm(self) -> np.ndarray:
        return np.asarray(self.control_spacing) * np.asarray(self.spacing)

    def with_displacements(self, disp, info=None) -> BSplineGrid:
        return BSplineGrid(self.dims, self.spacing, self.origin, self.control_spacing, disp,
                           self.init, dict(self.info if info is None else info))

    def with_init(self, init) -> BSplineGrid:
        return BSplineGrid(self.dims, self.spacing, self.origin, self.control_spacing,
                           self.displacements, init, dict(self.info))

    def axis_basis(self, axis: int, coords_mm, deriv: int = 0) -> np.ndarray:
        return basis_matrix(coords_mm, self.origin[axis], self.control_spacing_mm[axis],
                            self.control_dims[axis], deriv)

    def voxel_axes(self, spacing=None, start=(0, 0, 0), stop=None) -> list:
        """mm coordinates of voxel centres along each axis for a (sub-)grid sharing the origin."""
        spacing = self.spacing if spacing is None else spacing
        if stop is None:
            stop = [int(np.floor((d - 1) * s0 / s + 1e-9)) + 1
                    for d, s0, s in zip(self.dims, self.spacing, spacing)]
        return [self.origin[a] + np.arange(start[a], stop[a]) * spacing[a] for a in range(3)]

    def refine(self) -> BSplineGrid:
        """Exact dyadic refinement: same spline, half the control spacing."""
        cs = tuple(c / 2 for c in self.control_spacing)
        fine = lattice_dims(self.dims, self.spacing, cs)
        mats = [_subdivision_matrix(kc, kf) for kc, kf in zip(self.control_dims, fine)]
        disp = separable_apply(self.displacements, *mats)
        return BSplineGrid(self.dims, self.spacing, self.origin, cs, disp, self.init, dict(self.info))

    def displacement_at(self, points) -> np.ndarray:
        """Spline displacement ``u`` (without ``init``) at arbitrary ``(..., 3)`` mm points."""
        p = np.asarray(points, dtype=np.float64)
        flat = p.reshape(-1, 3)
        h = self.control_spacing_mm
        t = (flat - np.asarray(self.origin)) / h + 1.0
        i0 = np.floor(t).astype(np.int64)
        w = [_basis_values(t[:, a] - i0[:, a], 0) for a in range(3)]
        k = self.control_dims
        out = np.zeros_like(flat)
        for a in range(4):
            ia = i0[:, 0] - 1 + a
            oka = (ia >= 0) & (ia < k[0])
            for b in range(4):
                ib = i0[:, 1] - 1 + b
                okb = oka & (ib >= 0) & (ib < k[1])
                for c in range(4):
                    ic = i0[:, 2] - 1 + c
                    ok = okb & (ic >= 0) & (ic < k[2])
                    wt = w[0][ok, a] * w[1][ok, b] * w[2][ok, c]
                    out[ok] += wt[:, None] * self.displacements[ia[ok], ib[ok], ic[ok]]
        return out.reshape(p.shape)

    def map_points(self, points) -> np.ndarray:
        """Full pull-back mapping ``init(x + u(x))`` at mm points."""
        p = np.asarray(points, dtype=np.float64)
        y = p + self.displacement_at(p)
        return y if self.init is None else self.init.apply(y)

    def spline_field(self) -> np.ndarray:
        """``u`` at every voxel centre, shape ``(nx, ny, nz, 3)``."""
        axes = self.voxel_axes()
        return separable_apply(self.displacements, *(self.axis_basis(a, axes[a]) for a in range(3)))

    def total_displacement(self) -> DenseDisplacementField:
        """Dense displacement ``init(x + u(x)) - x`` for resampling on the reference grid."""
        u = self.spline_field()
        if self.init is not None:
            x = np.stack(np.meshgrid(*self.voxel_axes(), indexing="ij"), axis=-1)
            u = self.init.apply(x + u) - x
        return DenseDisplacementField(u, self.spacing, self.origin)


def evaluate_field(grid: BSplineGrid) -> DenseDisplacementField:
    """Dense spline displacement field ``u`` on the grid's reference voxels."""
    return DenseDisplacementField(grid.spline_field(), grid.spacing, grid.origin)


def _bending_terms(grid: BSplineGrid):
    h = grid.control_spacing_mm
    grams = [_gram_matrices(n, s, hh, k) for n, s, hh, k in
             zip(grid.dims, grid.spacing, h, grid.control_dims)]
    volume = float(np.prod([(n - 1) * s for n, s in zip(grid.dims, grid.spacing)]))
    if volume <= 0:
        raise ValueError("bending energy needs at least two voxels along every axis")
    orders = [((2, 2), (0, 0), (0, 0), 1.0), ((0, 0), (2, 2), (0, 0), 1.0),
              ((0, 0), (0, 0), (2, 2), 1.0), ((1, 1), (1, 1), (0, 0), 2.0),
              ((1, 1), (0, 0), (1, 1), 2.0), ((0, 0), (1, 1), (1, 1), 2.0)]
    # derivatives taken in lattice coordinates: d/ds_a = h_a d/dx_a
    lattice = [float(np.prod(h ** (2 * np.array([ox[0], oy[0], oz[0]])))) for ox, oy, oz, _ in orders]
    return [(grams[0][ox], grams[1][oy], grams[2][oz], w * k)
            for (ox, oy, oz, w), k in zip(orders, lattice)], volume


def bending_energy(grid: BSplineGrid, with_gradient: bool = False):
    """Domain-mean thin-plate energy of ``u``, integrated exactly from the control points.

    ``mean( sum_c v_c,ss^2 + v_c,tt^2 + v_c,rr^2 + 2 (v_c,st^2 + v_c,sr^2 + v_c,tr^2) )``
    with positions ``(s, t, r)`` and displacements ``v`` both in units of the
    control spacing, so the energy is dimensionless and does not change when
    a deformation is rescaled together with its lattice. The domain mean is
    taken over physical volume.
    """
    terms, volume = _bending_terms(grid)
    c = grid.displacements
    inv_h2 = 1.0 / grid.control_spacing_mm ** 2
    hc = np.zeros_like(c)
    for gx, gy, gz, w in terms:
        hc += w * separable_apply(c, gx, gy, gz)
    hc *= inv_h2
    value = float((c * hc).sum() / volume)
    if with_gradient:
        return value, 2.0 * hc / volume
    return value


def field_and_jacobian(coeffs: np.ndarray, b0: list, b1: list):
    """Spline field and its spatial derivatives at a separable sample grid.

    Returns ``u`` with shape (nx, ny, nz, 3) and ``du`` with shape
    (nx, ny, nz, 3, 3), ``du[..., a, b] = d u_a / d x_b``.
    """
    tx0 = _contract(coeffs, b0[0], 0)
    tx1 = _contract(coeffs, b1[0], 0)
    t00 = _contract(tx0, b0[1], 1)
    t01 = _contract(tx0, b1[1], 1)
    t10 = _contract(tx1, b0[1], 1)
    u = _contract(t00, b0[2], 2)
    du = np.stack([_contract(t10, b0[2], 2), _contract(t01, b0[2], 2),
                   _contract(t00, b1[2], 2)], axis=-1)
    return u, du


def adjoint_field_and_jacobian(w: np.ndarray | None, gjac: np.ndarray | None, b0: list, b1: list,
                               shape: tuple) -> np.ndarray:
    """Adjoint of :func:`field_and_jacobian`: pull per-sample sensitivities back to control points.

    ``w`` (nx, ny, nz, 3) weights the field, ``gjac`` (nx, ny, nz, 3, 3)
    weights ``du[..., a, b]``.
    """
    b0t = [m.T for m in b0]
    b1t = [m.T for m in b1]
    acc_val = None
    if w is not None:
        acc_val = _contract(w, b0t[2], 2)
    if gjac is not None:
        z = _contract(gjac[..., 2], b1t[2], 2)
        acc_val = z if acc_val is None else acc_val + z
        gy = _contract(gjac[..., 1], b0t[2], 2)
        gx = _contract(gjac[..., 0], b0t[2], 2)
        y = _contract(acc_val, b0t[1], 1) + _contract(gy, b1t[1], 1)
        yx = _contract(gx, b0t[1], 1)
        out = _contract(y, b0t[0], 0) + _contract(yx, b1t[0], 0)
    else:
        out = _contract(_contract(acc_val, b0t[1], 1), b0t[0], 0)
    assert out.shape == shape
    return out


def log_det_jacobian(du: np.ndarray) -> np.ndarray:
    """``log det(I + du)``; folded samples (det <= 0) give ``-inf``."""
    j = du + np.eye(3)
    det = (j[..., 0, 0] * (j[..., 1, 1] * j[..., 2, 2] - j[..., 1, 2] * j[..., 2, 1])
           - j[..., 0, 1] * (j[..., 1, 0] * j[..., 2, 2] - j[..., 1, 2] * j[..., 2, 0])
           + j[..., 0, 2] * (j[..., 1, 0] * j[..., 2, 1] - j[..., 1, 1] * j[..., 2, 0]))
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(det > 0, np.log(np.where(det > 0, det, 1.0)), -np.inf), det, j


def _cofactor(j: np.ndarray) -> np.ndarray:
    c = np.empty_like(j)
    c[..., 0, 0] = j[..., 1, 1] * j[..., 2, 2] - j[..., 1, 2] * j[..., 2, 1]
    c[..., 0, 1] = j[..., 1, 2] * j[..., 2, 0] - j[..., 1, 0] * j[..., 2, 2]
    c[..., 0, 2] = j[..., 1, 0] * j[..., 2, 1] - j[..., 1, 1] * j[..., 2, 0]
    c[..., 1, 0] = j[..., 0, 2] * j[..., 2, 1] - j[..., 0, 1] * j[..., 2, 2]
    c[..., 1, 1] = j[..., 0, 0] * j[..., 2, 2] - j[..., 0, 2] * j[..., 2, 0]
    c[..., 1, 2] = j[..., 0, 1] * j[..., 2, 0] - j[..., 0, 0] * j[..., 2, 1]
    c[..., 2, 0] = j[..., 0, 1] * j[..., 1, 2] - j[..., 0, 2] * j[..., 1, 1]
    c[..., 2, 1] = j[..., 0, 2] * j[..., 1, 0] - j[..., 0, 0] * j[..., 1, 2]
    c[..., 2, 2] = j[..., 0, 0] * j[..., 1, 1] - j[..., 0, 1] * j[..., 1, 0]
    return c


def log_jacobian_terms(du: np.ndarray, with_gradient: bool = False):
    """Mean of ``(log det J)^2`` over samples and ``d/d du`` of it.

    Returns ``(inf, None)`` when any sample folds.
    """
    flat = np.ascontiguousarray(du, dtype=np.float64).reshape(-1, 3, 3)
    total, g, folded = _kernels.log_jacobian_sum(flat, with_gradient)
    if folded:
        return FOLD, None
    m = flat.shape[0]
    return total / m, (g.reshape(du.shape) / m if with_gradient else None)


def log_jacobian_penalty(grid: BSplineGrid, spacing=None) -> float:
    """Mean ``(log det(I + grad u))^2`` over voxel centres; ``inf`` if any voxel folds."""
    axes = grid.voxel_axes(spacing)
    b0 = [grid.axis_basis(a, axes[a], 0) for a in range(3)]
    b1 = [grid.axis_basis(a, axes[a], 1) for a in range(3)]
    _, du = field_and_jacobian(grid.displacements, b0, b1)
    value, _ = log_jacobian_terms(du)
    return value


def jacobian_determinant(grid: BSplineGrid) -> np.ndarray:
    """``det(I + grad u)`` at every reference voxel centre."""
    axes = grid.voxel_axes()
    b0 = [grid.axis_basis(a, axes[a], 0) for a in range(3)]
    b1 = [grid.axis_basis(a, axes[a], 1) for a in range(3)]
    _, du = field_and_jacobian(grid.displacements, b0, b1)
    return log_det_jacobian(du)[1]
