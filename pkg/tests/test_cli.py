import gzip
import json
import re

import numpy as np
import pytest

from dceus_mc import nifti
from dceus_mc.cli import main
from dceus_mc.volume import Cine4, Mask3, SpatialMapping, resample
from dceus_mc.transforms import AffineTransform

from conftest import textured

SHAPE = (24, 24, 18)


@pytest.fixture(scope="module")
def files(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    base = textured(SHAPE, seed=3, sigma=2.0)
    frames = []
    for n in range(11):
        gain = 1.0 if n < 5 else 1.4 + 0.05 * n
        f = base.with_data((base.data * gain).astype(np.float32))
        shift = (0.0, 0.0, 0.0) if n < 5 else (0.6 * (n % 3), -0.5 * (n % 2), 0.0)
        frames.append(resample(f, SpatialMapping(AffineTransform.from_translation(-np.asarray(shift)), "linear",
                                                 float(f.data.mean()))))
    nifti.save(Cine4(tuple(frames), tuple(np.arange(11) * 0.5)), d / "in.nii.gz")
    m = np.zeros(SHAPE, bool)
    m[3:21, 3:21, 2:16] = True
    nifti.save(Mask3(m), d / "roi.nii.gz")
    nifti.save(base, d / "a.nii.gz")
    nifti.save(resample(base, SpatialMapping(AffineTransform.from_translation((-1.0, -2.0, 1.0)), "cubic-bspline",
                                             float(base.data.mean()))), d / "b.nii.gz")
    return d


def read_cine(path):
    return nifti.load(path).as_array()


def test_correct_writes_outputs_and_manifest_rerun(files):
    d = files
    cfg = d / "cfg.json"
    cfg.write_text(json.dumps({"window_size": 3}))
    out = d / "mc.nii.gz"
    code = main(["correct", str(d / "in.nii.gz"), "--mask", str(d / "roi.nii.gz"), "--out", str(out),
                 "--config", str(cfg), "--transforms-dir", str(d / "tx")])
    assert code == 0
    report = json.loads((d / "mc_report.json").read_text())
    manifest = json.loads((d / "mc_manifest.json").read_text())
    assert report["start_detection"]["start_frame"] == 5
    assert manifest["config"]["window_size"] == 3 and manifest["config"]["ffd"]["bins"] == 64
    assert manifest["version"] and "cine" in manifest["outputs"]
    assert (d / "tx" / "window_000_affine.txt").exists()
    assert (d / "tx" / "frame_005_pass2_grid.nii.gz").exists()
    first = read_cine(out)
    assert first.shape == SHAPE + (11,)
    assert np.array_equal(first[..., :5], read_cine(d / "in.nii.gz")[..., :5])
    assert main(["correct", "--from-manifest", str(d / "mc_manifest.json")]) == 0
    assert np.array_equal(read_cine(out), first)


def test_correct_errors(files, tmp_path, caplog):
    d = files
    missing = tmp_path / "nope.nii.gz"
    assert main(["correct", str(missing), "--out", str(tmp_path / "o.nii.gz")]) == 3
    assert str(missing) in caplog.text
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"window_size": 7}))
    assert main(["correct", str(d / "in.nii.gz"), "--out", str(tmp_path / "o.nii.gz"), "--config", str(bad)]) == 2
    assert "window_size" in caplog.text
    assert main(["correct", str(d / "in.nii.gz"), "--out", str(tmp_path / "o.nii.gz"), "--window-size", "2"]) == 2
    flat = tmp_path / "flat.nii"
    nifti.save(Cine4.from_array(np.ones(SHAPE + (8,), np.float32)), flat)
    assert main(["correct", str(flat), "--out", str(tmp_path / "o.nii.gz")]) == 4
    other = tmp_path / "m.nii"
    nifti.save(Mask3(np.ones((4, 4, 4), bool)), other)
    assert main(["correct", str(d / "in.nii.gz"), "--out", str(tmp_path / "o.nii.gz"), "--mask", str(other)]) == 6
    assert main(["bogus"]) == 2
    assert main([]) == 2


def test_evaluate_identical_and_range(files, tmp_path):
    d = files
    out = tmp_path / "ev"
    code = main(["evaluate", str(d / "in.nii.gz"), str(d / "in.nii.gz"), "--out-dir", str(out),
                 "--ncc-range", "5:10", "--roi", str(d / "roi.nii.gz")])
    assert code == 0
    rows = (out / "metrics.csv").read_text().strip().splitlines()
    assert rows[0] == "metric,pre,post,delta"
    assert all(float(r.split(",")[3]) == 0.0 for r in rows[1:])
    assert any(r.startswith("tic_rmse") for r in rows)
    payload = json.loads((out / "metrics.json").read_text())
    assert payload["ncc_5_9"]["pre"]["n_pairs"] == 10
    assert main(["evaluate", str(d / "in.nii.gz"), str(d / "in.nii.gz"), "--out-dir", str(out),
                 "--ncc-range", "5:30"]) == 6
    assert main(["evaluate", str(d / "in.nii.gz"), str(d / "in.nii.gz"), "--out-dir", str(out)]) == 2


def test_evaluate_overlap_columns(tmp_path):
    assert main(["simulate", "--preset", "small", "--seed", "2", "--out-dir", str(tmp_path)]) == 0
    masks = str(tmp_path / "lesion_masks.nii.gz")
    out = tmp_path / "ev"
    assert main(["evaluate", str(tmp_path / "cine.nii.gz"), str(tmp_path / "cine.nii.gz"), "--out-dir", str(out),
                 "--pre-masks", masks, "--post-masks", masks, "--first-frame", "4"]) == 0
    text = (out / "metrics.csv").read_text()
    assert "overlap_mean_percent" in text
    assert (out / "overlap_pre.csv").exists()


def test_simulate_outputs_and_determinism(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["simulate", "--preset", "small", "--seed", "7", "--out-dir", str(a)]) == 0
    assert main(["simulate", "--preset", "small", "--seed", "7", "--out-dir", str(b)]) == 0
    names = ["cine.nii.gz", "lesion_masks.nii.gz", "lesion_reference.nii.gz", "registration_mask.nii.gz"]
    for name in names:
        assert gzip.decompress((a / name).read_bytes()) == gzip.decompress((b / name).read_bytes())
    for name in ["trajectory.json", "phantom.json", "expected_tic.csv"]:
        assert (a / name).read_bytes() == (b / name).read_bytes()
    traj = json.loads((a / "trajectory.json").read_text())
    assert len(traj["displacements_vox"]) == 24


@pytest.mark.slow
def test_simulate_respiratory_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert main(["simulate", "--preset", "respiratory", "--seed", "7", "--out-dir", str(d)]) == 0
    assert gzip.decompress((a / "cine.nii.gz").read_bytes()) == gzip.decompress((b / "cine.nii.gz").read_bytes())


@pytest.mark.parametrize("affine_only", [True, False])
def test_register_pair_translation(files, tmp_path, capsys, affine_only):
    d = files
    args = ["register-pair", str(d / "a.nii.gz"), str(d / "b.nii.gz"), "--out", str(tmp_path / "w.nii.gz"),
            "--affine-out", str(tmp_path / "t.txt")]
    assert main(args + (["--affine-only"] if affine_only else [])) == 0
    text = capsys.readouterr().out
    vox = np.array([float(v) for v in re.search(r"translation_vox (.*)", text).group(1).split()])
    assert np.abs(vox - [1.0, 2.0, -1.0]).max() < 0.25
    assert AffineTransform.load(tmp_path / "t.txt").matrix.shape == (3, 4)
    assert (tmp_path / "w.nii.gz").exists()


def test_info(files, capsys):
    assert main(["info", str(files / "in.nii.gz")]) == 0
    out = capsys.readouterr().out
    assert "24 x 24 x 18 x 11" in out
    assert "frames    11" in out
    assert len(re.findall(r"^\s+\d+\s+\d+\.\d\d\s", out, flags=re.M)) == 11
    assert main(["info", str(files / "missing.nii")]) == 3
