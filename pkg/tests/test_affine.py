import numpy as np
import pytest

from dceus_mc.affine import (
    AffineRegConfig,
    BlockCorrespondence,
    DegenerateCorrespondenceError,
    RegistrationError,
    affine_register,
    lts_fit_affine,
    match_blocks,
    select_blocks,
)
from dceus_mc.transforms import AffineTransform
from dceus_mc.volume import Mask3, SpatialMapping, Volume3, resample

from conftest import textured

CFG = AffineRegConfig()


def warp(vol, s):
    """Volume whose content is ``vol`` pulled back through ``s``: out(y) = vol(s(y))."""
    return resample(vol, SpatialMapping(s, "cubic-bspline", padding=float(vol.data.mean())))


def about_center(lin, vol, trans=(0.0, 0.0, 0.0)):
    c = vol.center_mm()
    lin = np.asarray(lin, dtype=np.float64)
    return AffineTransform(np.hstack([lin, (c - lin @ c + np.asarray(trans))[:, None]]))


def test_select_blocks_ties_and_octant():
    flat = Volume3(np.ones((8, 8, 8), np.float32))
    centers = select_blocks(flat, None, CFG)
    assert len(centers) == 4
    assert np.allclose(centers[0], [1.5, 1.5, 1.5])
    assert np.allclose(centers[1], [1.5, 1.5, 5.5])  # index order among ties
    data = np.ones((16, 16, 16), np.float32)
    data[8:, 8:, 8:] = textured((8, 8, 8), seed=3).data
    vol = Volume3(data)
    chosen = select_blocks(vol, None, AffineRegConfig(block_keep_fraction=0.125))
    assert len(chosen) == 8
    assert np.all(chosen >= 8)


def test_select_blocks_empty_mask():
    vol = textured((8, 8, 8))
    with pytest.raises(RegistrationError):
        select_blocks(vol, Mask3(np.zeros((8, 8, 8), bool)), CFG)


def test_match_blocks_identity_and_shift():
    ref = textured((24, 24, 24), seed=1, spacing=(1.5, 1.0, 1.0))
    centers = select_blocks(ref, None, CFG)
    inner = centers[np.all((ref.mm_to_index(centers) > 5) & (ref.mm_to_index(centers) < 18), axis=1)]
    corr = match_blocks(ref, ref, inner, CFG)
    assert all(np.allclose(c.displacement, 0) for c in corr)
    # flt(x) = ref(x + 2 voxels along x)
    flt = Volume3(np.roll(ref.data, -2, axis=0), ref.spacing)
    corr = match_blocks(ref, flt, inner, CFG)
    fwd = np.array([c.displacement for c in corr if c.direction == "forward"])
    bwd = np.array([c.displacement for c in corr if c.direction == "backward"])
    assert np.allclose(fwd, [-2 * 1.5, 0, 0], atol=1e-6)
    assert np.allclose(bwd, [-2 * 1.5, 0, 0], atol=1e-6)
    assert all(np.linalg.norm(c.displacement / np.asarray(ref.spacing)) <= CFG.search_radius * np.sqrt(3)
               for c in corr)


def _corr_from(p, q):
    return [BlockCorrespondence(tuple(a), tuple(b), 1.0, "forward") for a, b in zip(p, q)]


def test_lts_noiseless_and_outliers(rng):
    truth = np.array([[1.03, 0.02, -0.01, 1.5], [0.01, 0.97, 0.03, -2.0], [-0.02, 0.01, 1.02, 0.7]])
    p = rng.uniform(-30, 30, (200, 3))
    q = p @ truth[:, :3].T + truth[:, 3]
    fit = lts_fit_affine(_corr_from(p, q), 0.10)
    assert np.abs(fit.matrix - truth).max() <= 1e-6
    q_bad = q + rng.normal(0, 0.05, q.shape)
    out = rng.choice(len(p), 20, replace=False)
    q_bad[out] += rng.uniform(-40, 40, (20, 3))
    robust = lts_fit_affine(_corr_from(p, q_bad), 0.10)
    naive = lts_fit_affine(_corr_from(p, q_bad), 0.0)
    assert np.abs(robust.matrix - truth)[:, :3].max() < 1e-3
    assert np.abs(naive.matrix - truth)[:, :3].max() > 1e-3


def test_lts_degenerate():
    p = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], float)
    with pytest.raises(DegenerateCorrespondenceError):
        lts_fit_affine(_corr_from(p, p), 0.0)
    with pytest.raises(DegenerateCorrespondenceError):
        lts_fit_affine(_corr_from(p[:3], p[:3]), 0.0)


@pytest.fixture(scope="module")
def phantom_vol():
    return textured((40, 40, 32), seed=11, sigma=2.0)


def test_self_registration(phantom_vol):
    t = affine_register(phantom_vol, phantom_vol, None, CFG)
    assert np.abs(t.linear - np.eye(3)).max() < 1e-3
    assert np.abs(t.translation).max() <= 0.1


def test_translation_recovery(phantom_vol):
    d = np.array([2.0, 3.0, 1.0])
    flt = warp(phantom_vol, AffineTransform.from_translation(-d))
    t = affine_register(phantom_vol, flt, None, CFG)
    assert np.abs(t.translation - d).max() < 0.25
    assert np.abs(t.linear - np.eye(3)).max() < 0.01


def test_scaling_recovery(phantom_vol):
    s = about_center(np.eye(3) / 1.05, phantom_vol)
    flt = warp(phantom_vol, s)
    t = affine_register(phantom_vol, flt, None, CFG)
    assert np.abs(t.linear - np.eye(3) * 1.05).max() < 0.01


def test_equivariance_under_integer_shift(phantom_vol):
    s = about_center(np.array([[1.02, 0.01, 0], [0, 0.99, 0], [0.01, 0, 1.0]]), phantom_vol, (0.5, -0.4, 0.3))
    flt = warp(phantom_vol, s)
    base = affine_register(phantom_vol, flt, None, CFG)
    d = np.array([2.0, 0.0, -1.0])
    shifted = warp(flt, AffineTransform.from_translation(-d))
    moved = affine_register(phantom_vol, shifted, None, CFG)
    expect = AffineTransform.from_translation(d).compose(base)
    pts = np.array([phantom_vol.center_mm(), phantom_vol.center_mm() + 8])
    assert np.abs(moved.apply(pts) - expect.apply(pts)).max() < 0.25


def test_deterministic(phantom_vol):
    flt = warp(phantom_vol, AffineTransform.from_translation((0.7, -1.2, 0.4)))
    a = affine_register(phantom_vol, flt, None, CFG)
    b = affine_register(phantom_vol, flt, None, CFG)
    assert np.array_equal(a.matrix, b.matrix)


def test_config_validation():
    with pytest.raises(ValueError):
        AffineRegConfig(lts_trim_fraction=0.5)
    with pytest.raises(ValueError):
        AffineRegConfig(levels=0)
