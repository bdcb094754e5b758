import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from dceus_mc.transforms import AFFINE_FILE_TAG, AffineTransform, TransformError

small = st.floats(-0.1, 0.1, allow_nan=False)


def affine_from(lin_delta, trans):
    return AffineTransform(np.hstack([np.eye(3) + lin_delta, trans[:, None]]))


@given(arrays(np.float64, (3, 3), elements=small), arrays(np.float64, (3,), elements=st.floats(-10, 10)))
def test_inverse_roundtrip(lin, trans):
    t = affine_from(lin, trans)
    p = np.array([[1.0, 2.0, 3.0], [-4.0, 0.5, 9.0]])
    assert np.allclose(t.inverse().apply(t.apply(p)), p, atol=1e-9)
    assert t.compose(t.inverse()).is_identity(1e-9)


def test_compose_order():
    a = AffineTransform.from_translation((1, 0, 0))
    s = AffineTransform(np.diag([2.0, 2.0, 2.0, 1.0]))
    p = np.array([1.0, 1.0, 1.0])
    assert np.allclose(a.compose(s).apply(p), a.apply(s.apply(p)))
    assert np.allclose(a.compose(s).apply(p), [3, 2, 2])


def test_validation():
    with pytest.raises(TransformError):
        AffineTransform(np.zeros((3, 4)))
    with pytest.raises(TransformError):
        AffineTransform(np.eye(3))


def test_text_roundtrip(tmp_path):
    t = affine_from(np.full((3, 3), 0.01), np.array([1.5, -2.25, 3.125]))
    path = tmp_path / "t.txt"
    t.save(path)
    text = path.read_text()
    assert text.splitlines()[0] == AFFINE_FILE_TAG
    assert np.array_equal(AffineTransform.load(path).matrix, t.matrix)
    with pytest.raises(TransformError):
        AffineTransform.from_text("1 0 0 0\n0 1 0 0\n0 0 1 0\n")
