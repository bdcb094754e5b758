"""Command-line entry point: correct, evaluate, simulate, register-pair, info.

Exit codes
    0  success
    2  usage or configuration error
    3  input/output error (missing or unreadable file)
    4  contrast-arrival detection failed / too few post-injection frames
    5  registration failure
    6  geometry mismatch or frame range outside the cine
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, nifti
from .affine import AffineRegConfig, RegistrationError, affine_register
from .evaluation import (
    extract_tic,
    fit_lognormal,
    pairwise_ncc,
    pairwise_overlap,
    write_json,
    write_matrix_csv,
    write_tic_csv,
)
from .ffd import FfdConfig, ffd_register
from .phantom import PRESETS, acquisition_mask, expected_tic, generate_phantom_cine, motion_free_lesion, preset
from .pipeline import PipelineConfig, PipelineError, StartDetectionError, correct_masks, motion_correct
from .similarity import DegenerateImageError
from .transforms import TransformError
from .volume import GeometryError, SpatialMapping, frame_mean_intensity, resample

log = logging.getLogger("dceus_mc")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_START, EXIT_REG, EXIT_GEOMETRY = 0, 2, 3, 4, 5, 6


class UsageError(ValueError):
    pass


# ----------------------------------------------------------------- helpers

def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path}: invalid JSON ({exc})") from exc
    if not isinstance(d, dict):
        raise UsageError(f"config {path}: expected a JSON object")
    return d


def resolve_config(file_cfg: dict, args) -> PipelineConfig:
    """File settings first, then any flags given on the command line."""
    try:
        cfg = PipelineConfig.from_dict(file_cfg)
        over = {}
        for name in ("window_size", "start_threshold_factor", "baseline_frame_count"):
            if getattr(args, name, None) is not None:
                over[name] = getattr(args, name)
        if getattr(args, "jobs", None) is not None:
            over["parallelism"] = args.jobs
        cfg = replace(cfg, **over)
        if getattr(args, "ffd_levels", None) is not None:
            cfg = replace(cfg, ffd=replace(cfg.ffd, levels=args.ffd_levels))
        return cfg
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc


def _parse_range(text: str) -> range:
    try:
        a, b = (int(v) for v in text.split(":"))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"frame range must look like START:STOP, got {text!r}") from exc
    if b <= a:
        raise argparse.ArgumentTypeError(f"empty frame range {text!r}")
    return range(a, b)


def _write_transforms(outdir: Path, report) -> None:
    outdir.mkdir(parents=True, exist_ok=True)
    for g, t in enumerate(report.window_affines):
        t.save(outdir / f"window_{g:03d}_affine.txt")
    for rec in report.frames:
        if rec.first_affine is not None:
            rec.first_affine.save(outdir / f"frame_{rec.frame:03d}_pass1_affine.txt")
        if rec.first_grid is not None:
            nifti.save_grid(rec.first_grid, outdir / f"frame_{rec.frame:03d}_pass1_grid.nii.gz")
        if rec.second_grid is not None:
            nifti.save_grid(rec.second_grid, outdir / f"frame_{rec.frame:03d}_pass2_grid.nii.gz")


# ----------------------------------------------------------------- commands

def cmd_correct(args) -> int:
    if args.from_manifest:
        man = json.loads(Path(args.from_manifest).read_text())
        file_cfg = man["config"]
        inputs = man["inputs"]
        args.input = args.input or inputs["cine"]
        args.mask = args.mask or inputs.get("mask")
        args.warp_masks = args.warp_masks or inputs.get("warp_masks")
        if args.frame_rate is None:
            args.frame_rate = inputs.get("frame_rate")
        outs = man["outputs"]
        args.out = args.out or outs["cine"]
        args.report = args.report or outs.get("report")
        args.transforms_dir = args.transforms_dir or outs.get("transforms_dir")
        args.warped_masks_out = args.warped_masks_out or outs.get("warped_masks")
    else:
        file_cfg = _load_config(args.config)
    if not args.input or not args.out:
        raise UsageError("correct needs an input cine and --out")
    cfg = resolve_config(file_cfg, args)
    out = Path(args.out)
    report_path = Path(args.report) if args.report else out.with_name(_stem(out) + "_report.json")
    manifest_path = Path(args.manifest) if args.manifest else out.with_name(_stem(out) + "_manifest.json")

    t0 = time.perf_counter()
    header = nifti.read_header(args.input)
    cine = nifti.load(args.input, kind="cine", frame_rate=args.frame_rate)
    mask = nifti.load(args.mask, kind="mask") if args.mask else None
    gt_masks = nifti.load_mask_sequence(args.warp_masks) if args.warp_masks else None
    if gt_masks is not None and len(gt_masks) != len(cine):
        raise GeometryError(f"{len(gt_masks)} masks for a {len(cine)}-frame cine")
    corrected, report = motion_correct(cine, mask, cfg)
    nifti.save(corrected, out, template=header)
    write_json(report_path, report.to_dict())
    outputs = {"cine": str(out), "report": str(report_path)}
    if args.transforms_dir:
        _write_transforms(Path(args.transforms_dir), report)
        outputs["transforms_dir"] = str(args.transforms_dir)
    if gt_masks is not None:
        warped = correct_masks(gt_masks, report)
        wpath = Path(args.warped_masks_out) if args.warped_masks_out else out.with_name(_stem(out) + "_masks.nii.gz")
        nifti.save_mask_sequence(warped, wpath, cine.frame_rate_hint or 1.0)
        outputs["warped_masks"] = str(wpath)
    manifest = {
        "tool": "dceus-mc", "version": __version__, "command": "correct",
        "inputs": {"cine": str(args.input), "mask": args.mask, "warp_masks": args.warp_masks,
                   "frame_rate": cine.frame_rate_hint},
        "outputs": outputs, "config": cfg.to_dict(), "seed": None,
        "timings_s": {**report.timings, "wall": time.perf_counter() - t0},
    }
    write_json(manifest_path, manifest)
    log.info("corrected %d frames (start frame %d); report %s", len(cine), report.start.frame, report_path)
    return EXIT_OK


def _stem(p: Path) -> str:
    name = p.name
    for ext in (".nii.gz", ".nii"):
        if name.endswith(ext):
            return name[: -len(ext)]
    return p.stem


def cmd_evaluate(args) -> int:
    pre = nifti.load(args.pre, kind="cine", frame_rate=args.frame_rate)
    post = nifti.load(args.post, kind="cine", frame_rate=args.frame_rate)
    if not pre.geometry.same_geometry(post.geometry) or len(pre) != len(post):
        raise GeometryError("pre and post cines differ in geometry or frame count")
    outdir = Path(args.out_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    rows, payload = [], {}
    if args.pre_masks and args.post_masks:
        seq = {k: nifti.load_mask_sequence(p) for k, p in (("pre", args.pre_masks), ("post", args.post_masks))}
        frames = range(args.first_frame, len(seq["pre"]))
        for k, masks in seq.items():
            if len(masks) != len(pre):
                raise GeometryError(f"{k} mask sequence has {len(masks)} frames, cine has {len(pre)}")
            rep = pairwise_overlap([masks[n] for n in frames], list(frames))
            payload[f"overlap_{k}"] = rep.to_dict()
            write_matrix_csv(outdir / f"overlap_{k}.csv", rep.frames, rep.matrix)
        rows.append(("overlap_mean_percent", payload["overlap_pre"]["mean_percent"],
                     payload["overlap_post"]["mean_percent"]))
        rows.append(("overlap_std_percent", payload["overlap_pre"]["std_percent"],
                     payload["overlap_post"]["std_percent"]))
    ncc_mask = nifti.load(args.ncc_mask, kind="mask") if args.ncc_mask else None
    for r in args.ncc_range or []:
        a = pairwise_ncc(pre, r, ncc_mask)
        b = pairwise_ncc(post, r, ncc_mask)
        key = f"ncc_{r.start}_{r.stop - 1}"
        payload[key] = {"pre": a.to_dict(), "post": b.to_dict()}
        rows.append((key + "_mean", a.mean, b.mean))
    if args.roi:
        roi = nifti.load(args.roi, kind="mask")
        norm = args.tic_norm
        if norm is None:
            norm = max(float(f.data.max()) for c in (pre, post) for f in c.frames)
        for k, cine in (("pre", pre), ("post", post)):
            tic = extract_tic(cine, roi, norm)
            fit = fit_lognormal(tic)
            write_tic_csv(outdir / f"tic_{k}.csv", tic, fit)
            payload[f"tic_{k}"] = fit.to_dict()
        for m in ("sse", "rmse", "r_squared"):
            rows.append((f"tic_{m}", payload["tic_pre"][m], payload["tic_post"][m]))
    if not rows:
        raise UsageError("nothing to evaluate: give mask sequences, --ncc-range or --roi")
    with open(outdir / "metrics.csv", "w") as fh:
        fh.write("metric,pre,post,delta\n")
        for name, a, b in rows:
            fh.write(f"{name},{a:.8g},{b:.8g},{b - a:.8g}\n")
    write_json(outdir / "metrics.json", payload)
    for name, a, b in rows:
        log.info("%-28s pre %.5g  post %.5g", name, a, b)
    return EXIT_OK


def cmd_simulate(args) -> int:
    spec, traj = preset(args.preset, args.seed)
    ph = generate_phantom_cine(spec, traj)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    nifti.save(ph.cine, out / "cine.nii.gz")
    nifti.save_mask_sequence(ph.masks, out / "lesion_masks.nii.gz", spec.frame_rate)
    nifti.save(motion_free_lesion(spec), out / "lesion_reference.nii.gz")
    nifti.save(acquisition_mask(spec), out / "registration_mask.nii.gz")
    write_json(out / "trajectory.json", traj.to_dict())
    write_json(out / "phantom.json", {"preset": args.preset, **spec.to_dict()})
    write_tic_csv(out / "expected_tic.csv", expected_tic(spec))
    log.info("wrote %d-frame phantom to %s", len(ph.cine), out)
    return EXIT_OK


def cmd_register_pair(args) -> int:
    ref = nifti.load(args.ref, kind="volume")
    flt = nifti.load(args.flt, kind="volume")
    mask = nifti.load(args.mask, kind="mask") if args.mask else None
    t = affine_register(ref, flt, mask, AffineRegConfig())
    vox = t.translation / np.asarray(ref.spacing)
    print("affine (ref mm -> flt mm):")
    print(t.to_text())
    print("translation_vox " + " ".join(f"{v:.4f}" for v in vox))
    if args.affine_out:
        t.save(args.affine_out)
    mapping = t
    if not args.affine_only:
        grid = ffd_register(ref, flt, init=t, mask=mask, cfg=FfdConfig())
        mag = np.linalg.norm(grid.spline_field(), axis=-1)
        print(f"ffd max_displacement_mm {mag.max():.4f} mean_displacement_mm {mag.mean():.4f}")
        if args.grid_out:
            nifti.save_grid(grid, args.grid_out)
        mapping = grid.total_displacement()
    if args.out:
        nifti.save(resample(flt, SpatialMapping(mapping)), args.out)
    return EXIT_OK


def cmd_info(args) -> int:
    hdr = nifti.read_header(args.path)
    obj = nifti.load(args.path, frame_rate=args.frame_rate)
    print(f"file      {args.path}")
    print(f"datatype  {hdr.datatype}  slope {hdr.scl_slope:g}  inter {hdr.scl_inter:g}")
    print(f"dims      {' x '.join(map(str, hdr.dims))}")
    print(f"spacing   {' '.join(f'{s:g}' for s in hdr.pixdim[:3])} mm")
    frames = getattr(obj, "frames", None)
    if frames is None:
        print(f"mean      {frame_mean_intensity(obj):.6g}")
        return EXIT_OK
    print(f"frames    {len(frames)}")
    print("frame  time_s  mean")
    for n, (t, f) in enumerate(zip(obj.times, frames)):
        print(f"{n:5d}  {t:6.2f}  {frame_mean_intensity(f):.6g}")
    return EXIT_OK


# ----------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dceus-mc", description=__doc__.split("\n")[0],
                                epilog="exit codes: 0 ok, 2 usage/config, 3 I/O, 4 start detection, "
                                       "5 registration, 6 geometry/range",
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("correct", help="motion-correct a 4D cine")
    c.add_argument("input", nargs="?", help="4D NIfTI cine")
    c.add_argument("--out", help="corrected cine path")
    c.add_argument("--mask", help="registration mask (3D)")
    c.add_argument("--config", help="JSON file mirroring the pipeline settings")
    c.add_argument("--from-manifest", help="rerun exactly as recorded in a manifest")
    c.add_argument("--report", help="report JSON path")
    c.add_argument("--manifest", help="manifest JSON path")
    c.add_argument("--transforms-dir", help="write per-frame transform files here")
    c.add_argument("--warp-masks", help="4D lesion-mask sequence to carry through the correction")
    c.add_argument("--warped-masks-out", help="where to write the carried masks")
    c.add_argument("--frame-rate", type=float, help="frame rate in Hz (overrides the header)")
    c.add_argument("--jobs", type=int, help="parallel registrations")
    c.add_argument("--window-size", type=int)
    c.add_argument("--start-threshold-factor", type=float)
    c.add_argument("--baseline-frame-count", type=int)
    c.add_argument("--ffd-levels", type=int)
    c.set_defaults(func=cmd_correct)

    e = sub.add_parser("evaluate", help="compare a cine before and after correction")
    e.add_argument("pre")
    e.add_argument("post")
    e.add_argument("--out-dir", required=True)
    e.add_argument("--pre-masks", help="4D lesion masks of the uncorrected cine")
    e.add_argument("--post-masks", help="4D lesion masks of the corrected cine")
    e.add_argument("--first-frame", type=int, default=0, help="first frame used for overlap")
    e.add_argument("--ncc-range", type=_parse_range, action="append", help="START:STOP (stop exclusive)")
    e.add_argument("--ncc-mask", help="restrict NCC to this mask")
    e.add_argument("--roi", help="lesion ROI for the time-intensity curve")
    e.add_argument("--tic-norm", type=float, help="TIC normalisation (default: max over both cines)")
    e.add_argument("--frame-rate", type=float)
    e.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("simulate", help="write a synthetic phantom cine")
    s.add_argument("--preset", default="respiratory", choices=sorted(PRESETS))
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("register-pair", help="affine + FFD registration of two volumes")
    r.add_argument("ref")
    r.add_argument("flt")
    r.add_argument("--mask")
    r.add_argument("--affine-only", action="store_true")
    r.add_argument("--affine-out")
    r.add_argument("--grid-out")
    r.add_argument("--out", help="write the resampled floating volume")
    r.set_defaults(func=cmd_register_pair)

    i = sub.add_parser("info", help="print header, geometry and frame means")
    i.add_argument("path")
    i.add_argument("--frame-rate", type=float)
    i.set_defaults(func=cmd_info)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s",
                        level=logging.WARNING - 10 * min(args.verbose + 1, 2))
    try:
        return args.func(args)
    except UsageError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except (FileNotFoundError, nifti.NiftiError, OSError, json.JSONDecodeError, KeyError) as exc:
        log.error("%s", exc)
        return EXIT_IO
    except StartDetectionError as exc:
        log.error("start detection: %s", exc)
        return EXIT_START
    except (RegistrationError, PipelineError, DegenerateImageError, TransformError) as exc:
        log.error("registration: %s", exc)
        return EXIT_REG
    except (GeometryError, IndexError) as exc:
        log.error("%s", exc)
        return EXIT_GEOMETRY
    except ValueError as exc:
        log.error("%s", exc)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
