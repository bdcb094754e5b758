import gzip
import json

import nibabel as nib
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from dceus_mc import nifti
from dceus_mc.bspline import BSplineGrid
from dceus_mc.transforms import AffineTransform
from dceus_mc.volume import Cine4, Mask3, Volume3


def write_raw(path, data: np.ndarray, code: int, slope=1.0, inter=0.0, pixdim=(1, 1, 1), dim0=None, extra=b""):
    """Hand-assembled single-file NIfTI-1, independent of the module under test."""
    hdr = nib.Nifti1Header()
    hdr.set_data_shape(data.shape)
    hdr.set_data_dtype(data.dtype)
    hdr["datatype"] = code
    hdr["pixdim"][1:1 + len(pixdim)] = pixdim
    hdr["scl_slope"], hdr["scl_inter"] = slope, inter
    hdr["vox_offset"] = 352
    if dim0 is not None:
        hdr["dim"][0] = dim0
    blob = hdr.binaryblock + b"\0" * 4 + data.tobytes(order="F") + extra
    path.write_bytes(blob)
    return path


def test_constant_volume(tmp_path):
    p = tmp_path / "c.nii"
    nifti.save(Volume3(np.full((8, 8, 8), 3.5, np.float32)), p)
    v = nifti.load(p)
    assert isinstance(v, Volume3) and np.all(v.data == 3.5)


def test_scaled_uint8(tmp_path):
    raw = np.full((4, 4, 4), 4, np.uint8)
    p = write_raw(tmp_path / "s.nii", raw, 2, slope=2.0, inter=1.0)
    v = nifti.load(p, kind="volume")
    assert np.all(v.data == 9.0)
    hdr = nifti.read_header(p)
    assert (hdr.scl_slope, hdr.scl_inter, hdr.datatype) == (2.0, 1.0, "uint8")


def test_cine_timing_and_header(tmp_path):
    data = np.random.default_rng(0).random((6, 5, 4, 10)).astype(np.float32)
    p = tmp_path / "cine.nii.gz"
    nifti.save(Cine4.from_array(data, (1, 1, 1), (0, 0, 0), 1.0), p)
    cine = nifti.load(p, kind="cine", frame_rate=2.0)
    assert np.allclose(cine.times, np.arange(10) * 0.5)
    assert np.array_equal(cine.as_array(), data)
    c20 = Cine4.from_array(np.zeros((4, 4, 4, 20), np.float32), (1, 1, 1), (0, 0, 0), 1.0)
    nifti.save(c20, tmp_path / "c20.nii")
    dim = nib.load(str(tmp_path / "c20.nii")).header["dim"]
    assert dim[0] == 4 and dim[4] == 20
    assert nifti.load(tmp_path / "c20.nii").times[1] == pytest.approx(1.0)


def test_mask_saved_as_binary_uint8(tmp_path):
    m = np.zeros((5, 5, 5), bool)
    m[1:3, 2:4, 0:5] = True
    p = tmp_path / "m.nii"
    nifti.save(Mask3(m, (0.5, 0.5, 2.0)), p)
    img = nib.load(str(p))
    raw = np.asarray(img.dataobj)
    assert img.get_data_dtype() == np.uint8
    assert set(np.unique(raw)) <= {0, 1}
    back = nifti.load(p, kind="mask")
    assert np.array_equal(back.data, m) and back.spacing == (0.5, 0.5, 2.0)


@settings(max_examples=25)
@given(arrays(np.float32, st.tuples(st.integers(2, 6), st.integers(2, 6), st.integers(2, 6)),
              elements=st.floats(-1e6, 1e6, width=32)),
       st.tuples(*[st.floats(0.1, 4.0)] * 3), st.tuples(*[st.floats(-50, 50)] * 3))
def test_float32_roundtrip_bit_exact(tmp_path_factory, data, spacing, origin):
    p = tmp_path_factory.mktemp("rt") / "v.nii"
    vol = Volume3(data, spacing, origin)
    nifti.save(vol, p)
    back = nifti.load(p)
    assert back.data.dtype == np.float32
    assert np.array_equal(back.data.view(np.uint32), vol.data.view(np.uint32))
    assert np.allclose(back.spacing, np.float32(spacing)) and np.allclose(back.origin, np.float32(origin), atol=1e-4)
    nifti.save(back, p)
    again = nifti.load(p)
    assert again.spacing == back.spacing and again.origin == back.origin


@pytest.mark.parametrize("cut", [1, 100])
def test_truncated_file(tmp_path, cut):
    p = tmp_path / "t.nii"
    nifti.save(Volume3(np.ones((6, 6, 6), np.float32)), p)
    blob = p.read_bytes()
    p.write_bytes(blob[:-cut])
    with pytest.raises(nifti.NiftiError, match="bytes"):
        nifti.load(p)


def test_size_mismatch_padding_and_gzip(tmp_path):
    raw = np.ones((3, 3, 3), np.float32)
    p = write_raw(tmp_path / "pad.nii", raw, 16, extra=b"\0" * 8)
    with pytest.raises(nifti.NiftiError):
        nifti.load(p)
    g = tmp_path / "t.nii.gz"
    good = write_raw(tmp_path / "ok.nii", raw, 16).read_bytes()
    g.write_bytes(gzip.compress(good[:-4]))
    with pytest.raises(nifti.NiftiError):
        nifti.load(g)


def test_rejections(tmp_path):
    raw = np.ones((3, 3, 3), np.float32)
    with pytest.raises(nifti.NiftiError, match="datatype"):
        nifti.load(write_raw(tmp_path / "i32.nii", np.ones((3, 3, 3), np.int32), 8))
    with pytest.raises(nifti.NiftiError, match="pixdim"):
        nifti.load(write_raw(tmp_path / "px.nii", raw, 16, pixdim=(1, 0, 1)))
    with pytest.raises(nifti.NiftiError, match="dim"):
        nifti.load(write_raw(tmp_path / "d2.nii", raw.reshape(3, 3, 3), 16, dim0=2))
    with pytest.raises(FileNotFoundError):
        nifti.load(tmp_path / "missing.nii")
    (tmp_path / "junk.nii").write_bytes(b"not a nifti file at all")
    with pytest.raises(nifti.NiftiError):
        nifti.load(tmp_path / "junk.nii")
    with pytest.raises(nifti.NiftiError):
        nifti.load(write_raw(tmp_path / "v.nii", raw, 16), kind="cine")


def test_integer_overflow(tmp_path):
    vol = Volume3(np.array([[[300.0]]], np.float32).repeat(2, 0).repeat(2, 1).repeat(2, 2))
    with pytest.raises(nifti.NiftiError, match="overflow"):
        nifti.save(vol, tmp_path / "o.nii", datatype="uint8")
    nifti.save(vol, tmp_path / "ok.nii", datatype="int16")
    assert np.all(nifti.load(tmp_path / "ok.nii").data == 300)


def test_default_frame_rate_warns(tmp_path, caplog):
    p = write_raw(tmp_path / "c.nii", np.ones((3, 3, 3, 4), np.float32), 16)
    cine = nifti.load(p)
    assert np.allclose(cine.times, [0, 1, 2, 3])
    assert "assuming 1 Hz" in caplog.text


def test_grid_roundtrip(tmp_path):
    ref = Volume3(np.zeros((20, 18, 12), np.float32), (1.0, 1.5, 2.0), (3.0, -1.0, 0.5))
    init = AffineTransform(np.array([[1.02, 0, 0, 0.5], [0, 0.98, 0.01, -1.0], [0, 0, 1, 0.2]]))
    g = BSplineGrid.zeros(ref, 5.0, init)
    g = g.with_displacements(np.random.default_rng(2).normal(size=g.displacements.shape))
    p = tmp_path / "g.nii.gz"
    nifti.save_grid(g, p)
    back = nifti.load_grid(p)
    assert np.array_equal(back.displacements, g.displacements)
    assert np.array_equal(back.init.matrix, init.matrix)
    assert back.dims == g.dims and back.spacing == g.spacing and back.origin == g.origin
    meta = json.loads((tmp_path / "g.json").read_text())
    assert meta["control_spacing_vox"] == [5.0, 5.0, 5.0]


def test_mask_sequence_roundtrip(tmp_path):
    rng = np.random.default_rng(3)
    masks = [Mask3(rng.random((4, 5, 6)) > 0.5, (1, 2, 3)) for _ in range(7)]
    p = tmp_path / "ms.nii.gz"
    nifti.save_mask_sequence(masks, p, 2.0)
    back = nifti.load_mask_sequence(p)
    assert len(back) == 7 and all(np.array_equal(a.data, b.data) for a, b in zip(masks, back))
