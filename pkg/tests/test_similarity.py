import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dceus_mc.similarity import (
    DegenerateImageError,
    JointHistogram,
    joint_histogram,
    ncc,
    nmi,
    nmi_gradient,
)
from dceus_mc.volume import Mask3, Volume3

from conftest import textured


def beta3(x):
    """Cubic B-spline kernel, piecewise closed form."""
    ax = abs(x)
    if ax < 1:
        return 2 / 3 - ax ** 2 + ax ** 3 / 2
    if ax < 2:
        return (2 - ax) ** 3 / 6
    return 0.0


def brute_histogram(r, f, bins):
    lo_r, hi_r = r.min(), r.max()
    lo_f, hi_f = f.min(), f.max()
    h = np.zeros((bins, bins))
    for a, b in zip(r.ravel(), f.ravel()):
        ca = (a - lo_r) / (hi_r - lo_r) * (bins - 1)
        cb = (b - lo_f) / (hi_f - lo_f) * (bins - 1)
        for i in range(int(math.floor(ca)) - 2, int(math.floor(ca)) + 3):
            for j in range(int(math.floor(cb)) - 2, int(math.floor(cb)) + 3):
                w = beta3(ca - i) * beta3(cb - j)
                if w:
                    h[min(max(i, 0), bins - 1), min(max(j, 0), bins - 1)] += w
    return h


def entropy(q):
    q = q[q > 0]
    return -(q * np.log(q)).sum()


def test_histogram_matches_brute_force(rng):
    r = Volume3(rng.random((4, 4, 4)).astype(np.float32))
    f = Volume3(rng.random((4, 4, 4)).astype(np.float32))
    h = joint_histogram(r, f, bins=6)
    oracle = brute_histogram(r.data.astype(np.float64), f.data.astype(np.float64), 6)
    assert np.allclose(h.counts, oracle, atol=1e-12)
    assert h.total == pytest.approx(64.0)
    assert np.allclose(h.counts.sum(axis=1).sum(), h.counts.sum(axis=0).sum())


def test_histogram_two_level_diagonal():
    data = np.zeros((4, 4, 4), np.float32)
    data[:2] = 1
    v = Volume3(data)
    h = joint_histogram(v, v, bins=4)
    diag = np.trace(h.counts)
    assert diag > 0.5 * h.total
    assert h.counts[0, 0] == pytest.approx(h.counts[3, 3])


def test_masked_equals_subvolume(rng):
    a = textured((8, 8, 8), seed=1)
    b = textured((8, 8, 8), seed=2)
    m = np.zeros((8, 8, 8), bool)
    m[2:6, 1:7, 3:8] = True
    h1 = joint_histogram(a, b, 16, Mask3(m))
    h2 = joint_histogram(Volume3(a.data[2:6, 1:7, 3:8]), Volume3(b.data[2:6, 1:7, 3:8]), 16)
    assert np.allclose(h1.counts, h2.counts)


def test_independent_counts_approach_product(rng):
    n = 40
    a = Volume3(rng.random((n, n, n)).astype(np.float32))
    b = Volume3(rng.random((n, n, n)).astype(np.float32))
    p = joint_histogram(a, b, 8).counts
    p = p / p.sum()
    outer = np.outer(p.sum(1), p.sum(0))
    assert np.abs(p - outer).max() < 0.1 * outer.max()


def test_nmi_identities():
    diag = JointHistogram.from_counts(np.diag([1.0, 2.0, 3.0, 4.0]))
    assert abs(nmi(diag) - 2.0) < 1e-9
    outer = JointHistogram.from_counts(np.outer([1.0, 2.0, 3.0, 0.5], [4.0, 1.0, 5.0, 2.0]))
    assert abs(nmi(outer) - 1.0) < 1e-9
    h = JointHistogram.from_counts(np.array([[2.0, 1.0], [1.0, 2.0]]))
    p = np.array([2, 1, 1, 2]) / 6
    expect = (2 * math.log(2)) / entropy(p)
    assert nmi(h) == pytest.approx(expect, abs=1e-12)
    with pytest.raises(DegenerateImageError):
        nmi(JointHistogram.from_counts(np.array([[5.0, 0.0], [0.0, 0.0]])))


@given(st.integers(0, 10_000))
def test_nmi_symmetric_and_bounded(seed):
    rng = np.random.default_rng(seed)
    counts = rng.random((6, 6)) * (rng.random((6, 6)) > 0.3)
    counts[0, 0] += 0.1
    counts[1, 1] += 0.1
    h = JointHistogram.from_counts(counts)
    assert nmi(h) == pytest.approx(nmi(h.transpose()), abs=1e-12)
    assert 1.0 - 1e-12 <= nmi(h) <= 2.0 + 1e-12


def test_nmi_invariant_to_monotone_relabel():
    a = textured((10, 10, 10), seed=3)
    b = textured((10, 10, 10), seed=4)
    lo, hi = float(b.data.min()), float(b.data.max())
    # affine relabel keeps every bin coordinate, the ranges move with it
    b2 = Volume3(2.0 * b.data + 5.0)
    h1 = joint_histogram(a, b, 16)
    h2 = joint_histogram(a, b2, 16)
    assert nmi(h1) == pytest.approx(nmi(h2), abs=1e-9)
    assert (2 * lo + 5, 2 * hi + 5) == pytest.approx(h2.flt_range, rel=1e-6)


def _fd_check(shape, bins, probes, seed, rel_step=1e-4):
    rng = np.random.default_rng(seed)
    ref = textured(shape, seed=seed)
    flt = Volume3((ref.data + rng.normal(0, 15, shape)).astype(np.float64).astype(np.float32))
    h = joint_histogram(ref, flt, bins)
    g = nmi_gradient(ref, flt, h)
    base = flt.data.astype(np.float64)
    step = rel_step * (h.flt_range[1] - h.flt_range[0])
    errs = []
    interior = np.argwhere((base > h.flt_range[0] + 3 * step) & (base < h.flt_range[1] - 3 * step))
    for idx in interior[rng.choice(len(interior), probes, replace=False)]:
        idx = tuple(idx)
        vals = []
        for s in (step, -step):
            d = base.copy()
            d[idx] += s
            hh = joint_histogram(ref, _exact(d), bins, ref_range=h.ref_range, flt_range=h.flt_range)
            vals.append(nmi(hh))
        fd = (vals[0] - vals[1]) / (2 * step)
        errs.append(abs(fd - g[idx]) / max(abs(fd), abs(g[idx]), 1e-12))
    return np.array(errs)


class _exact(Volume3):
    """Volume that keeps float64 samples so finite differences are not quantised."""

    def __init__(self, data):
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", (1.0, 1.0, 1.0))
        object.__setattr__(self, "origin", (0.0, 0.0, 0.0))


def test_intensity_gradient_matches_finite_differences():
    errs = _fd_check((8, 8, 8), 16, 100, seed=5)
    assert errs.max() < 1e-3


def test_gradient_zero_outside_mask():
    ref = textured((8, 8, 8), seed=6)
    flt = textured((8, 8, 8), seed=7)
    m = np.ones((8, 8, 8), bool)
    m[3, 4, 5] = False
    h = joint_histogram(ref, flt, 16, Mask3(m))
    g = nmi_gradient(ref, flt, h, Mask3(m))
    assert g[3, 4, 5] == 0.0
    with pytest.raises(ValueError):
        nmi_gradient(ref, flt, h)  # mass mismatch without the mask


def test_ncc_examples(rng):
    a = textured((6, 6, 6), seed=8)
    assert ncc(a, a) == pytest.approx(1.0)
    assert ncc(a, Volume3(-a.data + 3.0)) == pytest.approx(-1.0)
    x = rng.integers(0, 10, (3, 3, 3)).astype(np.float64)
    y = rng.integers(0, 10, (3, 3, 3)).astype(np.float64)
    xm, ym = x.ravel() - x.mean(), y.ravel() - y.mean()
    pearson = (xm * ym).sum() / math.sqrt((xm ** 2).sum() * (ym ** 2).sum())
    assert ncc(Volume3(x), Volume3(y)) == pytest.approx(pearson, abs=1e-12)
    with pytest.raises(DegenerateImageError):
        ncc(a, Volume3(np.ones((6, 6, 6))))


@given(st.floats(0.01, 100), st.floats(-100, 100))
def test_ncc_affine_invariant(alpha, beta):
    a = textured((6, 6, 6), seed=9)
    b = textured((6, 6, 6), seed=10)
    b2 = Volume3(alpha * b.data.astype(np.float64) + beta)
    assert ncc(a, b2) == pytest.approx(ncc(a, b), abs=1e-5)
