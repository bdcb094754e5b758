"""NIfTI-1 input/output for volumes, cines, masks and B-spline grids.

Parsing and header bookkeeping are delegated to nibabel; this module adds
the datatype whitelist, size checks, slope/intercept scaling, frame timing
and the conversion to the package's geometry types.
"""
from __future__ import annotations

import gzip
import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path

import nibabel as nib
import numpy as np
from nibabel.openers import ImageOpener

from .bspline import BSplineGrid
from .transforms import AffineTransform
from .volume import Cine4, Mask3, Volume3

log = logging.getLogger(__name__)

DATATYPES = {"uint8": 2, "int16": 4, "float32": 16, "float64": 64, "uint16": 512}
_CODE_TO_NAME = {v: k for k, v in DATATYPES.items()}
_TIME_UNIT_SECONDS = {"sec": 1.0, "msec": 1e-3, "usec": 1e-6}


class NiftiError(ValueError):
    """Unreadable, unsupported or unrepresentable NIfTI content."""


@dataclass(frozen=True)
class NiftiHeaderView:
    dims: tuple
    datatype: str
    pixdim: tuple
    scl_slope: float
    scl_inter: float
    affine: np.ndarray
    time_step_s: float | None = None

    @property
    def ndim(self) -> int:
        return len(self.dims)


def _open(path) -> nib.Nifti1Image:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    try:
        img = nib.load(str(path))
    except Exception as exc:  # nibabel raises a zoo of types for bad files
        raise NiftiError(f"{path}: not a readable NIfTI-1 file ({exc})") from exc
    if not isinstance(img, nib.Nifti1Image) or isinstance(img, nib.Nifti2Image):
        raise NiftiError(f"{path}: only single-file NIfTI-1 is supported")
    return img


def _raw_header(path) -> nib.Nifti1Header:
    # nibabel's loader silently repairs some fields (zero pixdim, scaling); validate the bytes as written
    with ImageOpener(str(path), "rb") as fh:
        return nib.Nifti1Header.from_fileobj(fh, check=False)


def _header_view(img: nib.Nifti1Image, path) -> NiftiHeaderView:
    hdr = _raw_header(path)
    dim = hdr["dim"]
    if int(dim[0]) not in (3, 4):
        raise NiftiError(f"{path}: dim[0]={int(dim[0])}, expected 3 or 4")
    code = int(hdr["datatype"])
    if code not in _CODE_TO_NAME:
        raise NiftiError(f"{path}: unsupported datatype code {code}")
    n = int(dim[0])
    dims = tuple(int(d) for d in dim[1:n + 1])
    if min(dims) < 1:
        raise NiftiError(f"{path}: non-positive dimension in {dims}")
    pixdim = tuple(float(p) for p in hdr["pixdim"][1:n + 1])
    if min(pixdim[:3]) <= 0 or not np.all(np.isfinite(pixdim[:3])):
        raise NiftiError(f"{path}: non-positive pixdim {pixdim[:3]}")
    slope, inter = hdr.get_slope_inter()
    step = None
    if n == 4 and pixdim[3] > 0:
        unit = hdr.get_xyzt_units()[1]
        step = pixdim[3] * _TIME_UNIT_SECONDS.get(unit, 1.0) if unit in _TIME_UNIT_SECONDS else None
    return NiftiHeaderView(dims, _CODE_TO_NAME[code], pixdim,
                           1.0 if slope is None else float(slope), 0.0 if inter is None else float(inter),
                           np.asarray(img.affine, dtype=np.float64), step)


def _check_size(path, img: nib.Nifti1Image, view: NiftiHeaderView) -> None:
    need = int(getattr(img.dataobj, "offset", 352)) + int(np.prod(view.dims)) * np.dtype(view.datatype).itemsize
    path = str(path)
    if path.endswith(".gz"):
        with gzip.open(path, "rb") as fh:
            have = 0
            while chunk := fh.read(1 << 20):
                have += len(chunk)
    else:
        have = os.path.getsize(path)
    if have != need:
        raise NiftiError(f"{path}: file holds {have} bytes but the header declares {need}")


def read_header(path) -> NiftiHeaderView:
    img = _open(path)
    return _header_view(img, path)


def load(path, kind: str = "auto", frame_rate: float | None = None, mask_threshold: float = 0.0):
    """Load a NIfTI file as ``Volume3`` / ``Cine4`` / ``Mask3``.

    ``kind`` is one of ``auto``, ``volume``, ``cine`` or ``mask``. Masks keep
    voxels strictly above ``mask_threshold``. For cines, ``frame_rate`` (Hz)
    wins over header timing; without either, 1 Hz is assumed.
    """
    if kind not in ("auto", "volume", "cine", "mask"):
        raise ValueError(f"unknown kind {kind!r}")
    img = _open(path)
    view = _header_view(img, path)
    _check_size(path, img, view)
    try:
        data = np.asarray(img.dataobj)
    except Exception as exc:
        raise NiftiError(f"{path}: cannot read voxel data ({exc})") from exc
    if view.datatype == "float32" and view.scl_slope == 1.0 and view.scl_inter == 0.0:
        data = data.astype(np.float32, copy=False)
    spacing = view.pixdim[:3]
    origin = tuple(float(v) for v in view.affine[:3, 3])
    if view.ndim == 4:
        if kind in ("volume", "mask"):
            raise NiftiError(f"{path}: expected a 3D file, found 4D")
        if frame_rate is None:
            if view.time_step_s:
                frame_rate = 1.0 / view.time_step_s
            else:
                log.warning("%s: no frame rate given or stored, assuming 1 Hz", path)
                frame_rate = 1.0
        if not frame_rate > 0:
            raise ValueError("frame rate must be positive")
        return Cine4.from_array(data.astype(np.float32), spacing, origin, frame_rate)
    if kind == "cine":
        raise NiftiError(f"{path}: expected a 4D file, found 3D")
    if kind == "mask":
        return Mask3(data > mask_threshold, spacing, origin)
    return Volume3(data.astype(np.float32), spacing, origin)


def _affine_for(spacing, origin, template: NiftiHeaderView | None) -> np.ndarray:
    if template is not None:
        return template.affine
    aff = np.diag([*spacing, 1.0])
    aff[:3, 3] = origin
    return aff


def _to_dtype(data: np.ndarray, datatype: str) -> np.ndarray:
    dt = np.dtype(datatype)
    if dt.kind in "ui":
        info = np.iinfo(dt)
        r = np.rint(data)
        if r.size and (r.min() < info.min or r.max() > info.max):
            raise NiftiError(f"values in [{r.min()}, {r.max()}] overflow {datatype}")
        return r.astype(dt)
    return data.astype(dt)


def save(obj, path, datatype: str | None = None, template: NiftiHeaderView | None = None) -> None:
    """Write a ``Volume3``, ``Cine4`` or ``Mask3``; masks default to uint8, the rest to float32.

    Passing ``template`` (a header read from the source file) keeps its
    orientation affine on disk.
    """
    if isinstance(obj, Mask3):
        datatype = datatype or "uint8"
        data = obj.data.astype(np.uint8)
    elif isinstance(obj, Volume3):
        datatype = datatype or "float32"
        data = obj.data
    elif isinstance(obj, Cine4):
        datatype = datatype or "float32"
        data = obj.as_array()
    else:
        raise TypeError(f"cannot save {type(obj).__name__}")
    if datatype not in DATATYPES:
        raise NiftiError(f"unsupported datatype {datatype!r}")
    out = _to_dtype(np.asarray(data), datatype)
    img = nib.Nifti1Image(out, _affine_for(obj.spacing, obj.origin, template))
    hdr = img.header
    hdr.set_data_dtype(np.dtype(datatype))
    hdr.set_slope_inter(1.0, 0.0)
    if isinstance(obj, Cine4):
        step = float(np.median(np.diff(obj.times)))
        hdr.set_zooms((*obj.spacing, step))
        hdr.set_xyzt_units("mm", "sec")
    else:
        hdr.set_zooms(obj.spacing)
        hdr.set_xyzt_units("mm")
    nib.save(img, str(path))


def _sidecar(path) -> Path:
    p = str(path)
    for ext in (".nii.gz", ".nii"):
        if p.endswith(ext):
            return Path(p[: -len(ext)] + ".json")
    return Path(p + ".json")


def save_grid(grid: BSplineGrid, path) -> None:
    """Control displacements as a 4D float64 image (last axis = component) plus a JSON sidecar."""
    aff = np.diag([*grid.control_spacing_mm, 1.0])
    aff[:3, 3] = np.asarray(grid.origin) - grid.control_spacing_mm
    img = nib.Nifti1Image(np.asarray(grid.displacements, dtype=np.float64), aff)
    img.header.set_data_dtype(np.float64)
    nib.save(img, str(path))
    meta = {"dims": list(grid.dims), "spacing": list(grid.spacing), "origin": list(grid.origin),
            "control_spacing_vox": list(grid.control_spacing),
            "init": None if grid.init is None else grid.init.matrix.tolist(),
            "mapping": "y = init(x + u(x)), mm, reference -> floating"}
    _sidecar(path).write_text(json.dumps(meta, indent=2))


def load_grid(path) -> BSplineGrid:
    meta_path = _sidecar(path)
    if not meta_path.exists():
        raise FileNotFoundError(f"grid sidecar {meta_path} is missing")
    meta = json.loads(meta_path.read_text())
    disp = np.asarray(_open(path).dataobj, dtype=np.float64)
    init = None if meta.get("init") is None else AffineTransform(np.asarray(meta["init"]))
    return BSplineGrid(tuple(meta["dims"]), tuple(meta["spacing"]), tuple(meta["origin"]),
                       tuple(meta["control_spacing_vox"]), disp, init)


def save_mask_sequence(masks, path, frame_rate: float = 1.0) -> None:
    """Per-frame masks as one 4D uint8 file."""
    masks = list(masks)
    if not masks:
        raise ValueError("no masks to save")
    data = np.stack([m.data for m in masks], axis=-1).astype(np.uint8)
    m0 = masks[0]
    img = nib.Nifti1Image(data, _affine_for(m0.spacing, m0.origin, None))
    img.header.set_data_dtype(np.uint8)
    img.header.set_zooms((*m0.spacing, 1.0 / frame_rate))
    img.header.set_xyzt_units("mm", "sec")
    nib.save(img, str(path))


def load_mask_sequence(path, threshold: float = 0.0) -> list:
    """Read a 3D mask (one frame) or a 4D mask sequence, thresholding at ``> threshold``."""
    img = _open(path)
    view = _header_view(img, path)
    _check_size(path, img, view)
    data = np.asarray(img.dataobj)
    spacing = view.pixdim[:3]
    origin = tuple(float(v) for v in view.affine[:3, 3])
    if data.ndim == 3:
        data = data[..., None]
    return [Mask3(data[..., n] > threshold, spacing, origin) for n in range(data.shape[-1])]
