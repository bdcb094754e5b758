import numpy as np
import pytest
from hypothesis import settings
from scipy import ndimage

from dceus_mc.volume import Mask3, Volume3

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


def textured(shape=(32, 32, 24), seed=0, sigma=1.5, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)):
    rng = np.random.default_rng(seed)
    data = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    data = 100.0 + 40.0 * data / data.std()
    return Volume3(data.astype(np.float32), spacing, origin)


def box_mask(vol, lo, hi):
    m = np.zeros(vol.dims, dtype=bool)
    m[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = True
    return Mask3(m, vol.spacing, vol.origin)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance verdicts, filled by test_acceptance.py and printed at the end of the run
ACCEPTANCE: dict = {}


def record(criterion: int, part: str, ok: bool, detail: str = "") -> None:
    ACCEPTANCE.setdefault(criterion, []).append((part, bool(ok), detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[n]
        verdict = "PASS" if all(ok for _, ok, _ in parts) else "FAIL"
        detail = "; ".join(f"{p}{'' if ok else ' [fail]'}: {d}" for p, ok, d in parts)
        terminalreporter.write_line(f"criterion {n}: {verdict}  {detail}")
