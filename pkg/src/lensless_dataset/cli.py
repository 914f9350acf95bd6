"""Command-line front end: ``lensless-dataset <subcommand> ...``.

Subcommands share one contract, the run's ``manifest.json``::

    simulate     config -> measurements + manifest
    reconstruct  manifest -> reconstructions/ (FISTA per lensless record)
    register     manifest -> calibration, ground_truth/, registered/, fidelity
    analyze-psf  PSF files -> profile CSVs (+ comparison JSON for two)
    package      manifest -> canonical dataset directory
    make-psf     synthetic PSF helper
    make-scenes  synthetic source-image helper

Failures print one JSON object on stderr and exit nonzero (2 for invalid
input, 1 for failures while running).  Every ``cmd_*`` function is also usable
from Python.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
from scipy.ndimage import gaussian_filter

from . import __version__
from .acquisition import (
    DISPLAY_SHAPE,
    LENSED_EXPOSURE,
    AcquisitionSchedule,
    DatasetManifest,
    VirtualCamera,
    calibrate_exposure,
    display_image,
    grid_bands,
    package_dataset,
    run_acquisition,
    synthetic_scene,
)
from .errors import ConfigError, GeometryError, LenslessError, ManifestError
from .geometry import (
    CirclesGridSpec,
    DistortionModel,
    Homography,
    calibrate_distortion,
    detect_grid,
    estimate_homography_dlt,
    refine_homography_photometric,
    undistort_image,
    warp,
)
from .imgcore import Image, PixelGrid, load_image, save_image
from .metrology import compare_imagers, fidelity, psf_profile
from .optics import SensorModel, load_psf, save_psf, synthetic_psf
from .recon import SolverConfig, fista

log = logging.getLogger("lensless_dataset")

IMAGE_SUFFIXES = (".png", ".pfm")
GRID_ID = "__grid__"


# ---------------------------------------------------------------------------
# configuration


def _config_schema():
    return json.loads(resources.files("lensless_dataset").joinpath("schemas/config.schema.json").read_text())


def load_config(path=None, overrides=None) -> dict:
    """Read, merge and validate a run config; resolve its paths.

    Relative paths are taken relative to the config file.  Raises ConfigError
    naming the offending path before anything is written.
    """
    cfg, base = {}, Path.cwd()
    if path is not None:
        p = Path(path)
        try:
            cfg = json.loads(p.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {p}", p) from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}", p) from None
        base = p.resolve().parent
    cfg.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        jsonschema.validate(cfg, _config_schema())
    except jsonschema.ValidationError as e:
        where = "/".join(str(x) for x in e.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {e.message}") from None

    def resolve(v):
        q = Path(v)
        return q if q.is_absolute() else base / q

    cfg["psfs"] = {cid: resolve(v) for cid, v in cfg["psfs"].items()}
    for cid, p in cfg["psfs"].items():
        if not p.is_file():
            raise ConfigError(f"PSF for camera {cid!r} not found: {p}", p)
    if "images" in cfg:
        cfg["images"] = resolve(cfg["images"])
        if not cfg["images"].is_dir():
            raise ConfigError(f"image directory not found: {cfg['images']}", cfg["images"])
    cfg["output"] = resolve(cfg.get("output", "run"))
    lensed_id = (cfg.get("lensed") or {}).get("camera_id", "lensed")
    if cfg.get("lensed", {}) is not None and lensed_id in cfg["psfs"]:
        raise ConfigError(f"camera id {lensed_id!r} used twice")
    return cfg


def _source_images(cfg) -> dict:
    if "synthetic_images" in cfg:
        n = cfg["synthetic_images"]
        shape = tuple(cfg.get("display_shape", DISPLAY_SHAPE))
        seed = cfg.get("seed", 0)
        return {f"scene{i:05d}": synthetic_scene(shape, seed=seed * 100003 + i) for i in range(n)}
    files = sorted(p for p in cfg["images"].iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if cfg.get("max_images"):
        files = files[: cfg["max_images"]]
    if not files:
        raise ConfigError(f"no .png or .pfm images in {cfg['images']}", cfg["images"])
    ids = [p.stem for p in files]
    if len(set(ids)) != len(ids):
        raise ConfigError("image ids (file stems) are not unique", cfg["images"])
    return {p.stem: load_image(p) for p in files}


def build_cameras(cfg, psf_store, reference: Image):
    """Cameras from the config, with lensless exposures calibrated on ``reference``."""
    sensor = SensorModel(**cfg.get("sensor", {}))
    target = cfg.get("exposure_target", 0.9)
    cams = []
    for cid in cfg["psfs"]:
        cam = VirtualCamera(cid, "lensless", sensor=sensor, psf=cid)
        cams.append(dataclasses.replace(cam, exposure_scale=calibrate_exposure(reference, cam, target, psf_store)))
    lensed = cfg.get("lensed", {})
    if lensed is not None:
        shape = reference.shape
        dist = lensed.get("distortion")
        model = DistortionModel.from_dict(dist) if dist else DistortionModel.pinhole(shape, k1=-0.08, k2=0.01)
        ext = lensed.get("extrinsics")
        cams.append(VirtualCamera(
            lensed.get("camera_id", "lensed"),
            "lensed",
            sensor=sensor,
            exposure_scale=lensed.get("exposure_scale", LENSED_EXPOSURE),
            distortion=model,
            extrinsics=Homography.from_dict(ext) if ext else None,
        ))
    return cams


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(cfg: dict) -> Path:
    """Exposure calibration plus a full acquisition run; returns the manifest path."""
    images = _source_images(cfg)
    psf_store = {cid: load_psf(p) for cid, p in cfg["psfs"].items()}
    shape = tuple(cfg.get("display_shape", DISPLAY_SHAPE))
    ref_id = cfg.get("reference_image") or brightest_image(images, shape)
    if ref_id not in images:
        raise ConfigError(f"reference_image {ref_id!r} is not among the input images")
    cams = build_cameras(cfg, psf_store, display_image(images[ref_id], shape))
    sched = AcquisitionSchedule(
        [c.camera_id for c in cams],
        list(images),
        **cfg.get("schedule", {}),
    )
    out = Path(cfg["output"])
    m = run_acquisition(
        images, cams, sched, psf_store, cfg.get("seed", 0), out,
        mode=cfg.get("mode", "per-camera"), display_shape=shape, max_workers=cfg.get("workers", 1),
    )
    m.calibration["exposure_reference"] = ref_id
    return m.save(out / "manifest.json")


def brightest_image(images: dict, shape=DISPLAY_SHAPE) -> str:
    """Id of the displayed frame with the highest mean.

    A lensless pixel integrates most of the scene, so the brightest frame on
    average is the one most likely to saturate.  Ties go to the first id.
    """
    means = [float(display_image(img, shape).data.mean()) for img in images.values()]
    return list(images)[int(np.argmax(means))]


def _load_manifest(path) -> tuple[DatasetManifest, Path]:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    m = DatasetManifest.load(path)
    if not m.complete:
        raise ManifestError(f"{path}: run is flagged incomplete")
    return m, path.parent


def _lensless(manifest):
    return [c for c in manifest.cameras if c["kind"] == "lensless"]


def _reconstruct_one(root, cam, file, exposure, shape, config):
    psf = load_psf(root / cam["psf_file"])
    window = PixelGrid.from_dict(cam["sensor_window"])
    res = fista(load_image(root / file), psf, config, scene_shape=shape, sensor_window=window)
    # stored scene-referred so it is comparable with the displayed frame
    return res, res.estimate.with_data(res.estimate.data / exposure)


def cmd_reconstruct(manifest_path, solver: SolverConfig | None = None, workers: int = 1) -> Path:
    """FISTA reconstruction of every lensless record and grid capture."""
    manifest, root = _load_manifest(manifest_path)
    solver = solver or SolverConfig()
    shape = tuple(manifest.display_shape)
    jobs = []
    for cam in _lensless(manifest):
        cid = cam["camera_id"]
        for r in manifest.records_for(cid):
            jobs.append((cam, r["image_id"], r["file"], r["exposure_scale"]))
        cap = manifest.calibration.get("grid_captures", {}).get(cid)
        if cap:
            jobs.append((cam, GRID_ID, cap["file"], cap["exposure_scale"]))

    def run(job):
        cam, image_id, file, exposure = job
        return _reconstruct_one(root, cam, file, exposure, shape, solver)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]

    entries, grid = [], {}
    for (cam, image_id, _, _), (res, est) in zip(jobs, results):
        cid = cam["camera_id"]
        if image_id == GRID_ID:
            rel = f"calibration/grid_recon_{cid}"
        else:
            rel = f"reconstructions/{cid}/{image_id}"
        (root / rel).parent.mkdir(parents=True, exist_ok=True)
        save_image(est, root / f"{rel}.pfm", "pfm")
        res.write_history_csv(root / f"{rel}.csv")
        e = {"image_id": image_id, "camera_id": cid, "file": f"{rel}.pfm", "history": f"{rel}.csv",
             "iterations": res.iterations_run, "step": res.step, "lipschitz": res.lipschitz_estimate}
        if image_id == GRID_ID:
            grid[cid] = e
        else:
            entries.append(e)
        log.info("reconstructed %s/%s in %d iterations", cid, image_id, res.iterations_run)
    manifest.reconstructions = sorted(entries, key=lambda e: (e["camera_id"], e["image_id"]))
    manifest.calibration["grid_reconstructions"] = grid
    manifest.solver = dataclasses.asdict(solver)
    return manifest.save(root / "manifest.json")


def _ground_truth(root, manifest, model: DistortionModel, lensed_id):
    """Undistorted, exposure-normalized lensed captures keyed by image id."""
    out = {}
    for r in manifest.records_for(lensed_id):
        img = load_image(root / r["file"])
        out[r["image_id"]] = undistort_image(img, model).data / r["exposure_scale"]
    return out


def detect_grid_bands(img: Image, spec: CirclesGridSpec, bands: int, smooth: float = 0.0) -> np.ndarray:
    """Grid centroids of a stacked registration frame, band by band."""
    a = img.gray()
    if smooth > 0:
        a = gaussian_filter(a, smooth)
    pts = []
    for r0, r1 in grid_bands(a.shape, bands):
        p = detect_grid(Image(a[r0:r1]), spec)
        pts.append(p + [0.0, r0])
    return np.concatenate(pts)


def _registration_homography(root, manifest, cid, gt_grid, spec):
    """Coarse DLT from grid correspondences refined photometrically.

    Falls back to the nominal (identity) map when the grid cannot be found in
    the reconstruction.
    """
    info = manifest.calibration["grid_reconstructions"][cid]
    recon = load_image(root / info["file"])
    bands = len(manifest.calibration["grid_placements"])
    coarse = "grid"
    try:
        src = detect_grid_bands(recon, spec, bands, smooth=1.0)
        dst = detect_grid_bands(Image(gt_grid), spec, bands)
        h = estimate_homography_dlt(src, dst)
    except GeometryError as e:
        log.warning("camera %s: grid registration failed (%s); using nominal geometry", cid, e)
        h, coarse = Homography.identity(), "nominal"
    # the reconstruction is least determined within half a PSF of its edge
    psf_shape = load_psf(root / manifest.camera(cid)["psf_file"]).shape
    margin = max(psf_shape) // 2
    trusted = np.zeros(gt_grid.shape[:2], dtype=bool)
    trusted[margin:-margin or None, margin:-margin or None] = True
    refined = True
    try:
        res = refine_homography_photometric(recon, Image(gt_grid), h, smooth=1.0, mask=trusted)
        h = res.homography
    except GeometryError as e:
        log.warning("camera %s: photometric refinement failed (%s); keeping coarse estimate", cid, e)
        refined = False
    return h, coarse, refined


def cmd_register(manifest_path) -> Path:
    """Calibrate the lensed camera, build ground truth and register reconstructions."""
    manifest, root = _load_manifest(manifest_path)
    if not manifest.reconstructions or "grid_reconstructions" not in manifest.calibration:
        raise ManifestError("no reconstructions in the manifest; run `reconstruct` first")
    lensed = [c for c in manifest.cameras if c["kind"] == "lensed"]
    if len(lensed) != 1:
        raise ManifestError("registration needs exactly one lensed (ground-truth) camera")
    lid = lensed[0]["camera_id"]
    cal = manifest.calibration
    shape = tuple(manifest.display_shape)

    cal_spec = CirclesGridSpec(**cal["calibration_grid"])
    views = [v for v in cal["grid_views"] if v["camera_id"] == lid]
    dets = [detect_grid(load_image(root / v["file"]), cal_spec) for v in views]
    model = calibrate_distortion(dets, cal_spec, fix_k3=True)
    (root / "calibration").mkdir(exist_ok=True)
    (root / "calibration/distortion.json").write_text(json.dumps(model.to_dict(), indent=2, sort_keys=True) + "\n")
    cal["distortion_model"] = {"file": "calibration/distortion.json", "camera_id": lid,
                               "rms_reprojection_px": model.rms}
    log.info("distortion calibrated, rms %.4f px", model.rms)

    gt = _ground_truth(root, manifest, model, lid)
    (root / "ground_truth").mkdir(exist_ok=True)
    manifest.ground_truth = []
    for image_id in manifest.schedule.image_ids:
        save_image(Image(gt[image_id]), root / f"ground_truth/{image_id}.pfm", "pfm")
        manifest.ground_truth.append({"image_id": image_id, "file": f"ground_truth/{image_id}.pfm"})

    cap = cal["grid_captures"][lid]
    gt_grid = undistort_image(load_image(root / cap["file"]), model).data / cap["exposure_scale"]
    grid_spec = CirclesGridSpec(**cal["grid"])
    homs, regs = {}, []
    for cam in _lensless(manifest):
        cid = cam["camera_id"]
        h, coarse, refined = _registration_homography(root, manifest, cid, gt_grid, grid_spec)
        rel = f"calibration/homography_{cid}.json"
        (root / rel).write_text(json.dumps(h.to_dict(), indent=2, sort_keys=True) + "\n")
        homs[cid] = {"file": rel, "coarse": coarse, "refined": refined,
                     "corner_displacement_px": float(h.corner_displacement(shape))}
        (root / "registered" / cid).mkdir(parents=True, exist_ok=True)
        for e in manifest.reconstructions:
            if e["camera_id"] != cid:
                continue
            reg = warp(load_image(root / e["file"]), h, out_shape=gt[e["image_id"]].shape[:2])
            rel_img = f"registered/{cid}/{e['image_id']}.pfm"
            save_image(reg, root / rel_img, "pfm")
            # score what was written, so the report matches the files
            rep = fidelity(load_image(root / rel_img), load_image(root / f"ground_truth/{e['image_id']}.pfm"))
            regs.append({"image_id": e["image_id"], "camera_id": cid, "file": rel_img,
                         "mse": rep.mse, "psnr": rep.to_dict()["psnr"]})
    cal["homographies"] = homs
    manifest.registrations = regs
    return manifest.save(root / "manifest.json")


def cmd_analyze_psf(paths, output_dir, bin_width: float = 1.0) -> list[Path]:
    """Radial autocorrelation profile CSV per PSF, and a comparison for two."""
    if not 1 <= len(paths) <= 2:
        raise ConfigError("analyze-psf takes one or two PSF files")
    paths = [Path(p) for p in paths]
    for p in paths:
        if not p.is_file():
            raise ConfigError(f"PSF file not found: {p}", p)
    labels = [p.stem for p in paths]
    if len(labels) == 2 and labels[0] == labels[1]:
        labels = [f"{labels[0]}_a", f"{labels[1]}_b"]
    psfs = [load_psf(p) for p in paths]
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for label, psf in zip(labels, psfs):
        f = out / f"{label}_profile.csv"
        f.write_text(psf_profile(psf, bin_width).to_csv())
        written.append(f)
    if len(psfs) == 2:
        comp = compare_imagers(psfs[0], psfs[1], bin_width, labels=labels)
        f = out / "comparison.json"
        f.write_text(comp.to_json() + "\n")
        (out / "comparison.csv").write_text(comp.to_csv())
        written += [f, out / "comparison.csv"]
    return written


def cmd_package(manifest_path, output_dir) -> Path:
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    return package_dataset(manifest_path, output_dir) / "manifest.json"


# ---------------------------------------------------------------------------
# argparse plumbing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _emit_error("UsageError", message)
        sys.exit(2)


def _emit_error(kind, message, path=None):
    d = {"error": kind, "message": message}
    if path is not None:
        d["path"] = str(path)
    sys.stderr.write(json.dumps(d, sort_keys=True) + "\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lensless-dataset", description="Simulated parallel lensless-imaging dataset pipeline.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--quiet", action="store_true", help="only print errors")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="simulate an acquisition run")
    s.add_argument("--config", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--output")
    s.add_argument("--mode", choices=("shared", "per-camera"))

    s = sub.add_parser("reconstruct", help="FISTA reconstructions for a run")
    s.add_argument("manifest")
    s.add_argument("--config", help="run config whose 'solver' section is used")
    s.add_argument("--iterations", type=int)
    s.add_argument("--workers", type=int, default=1)

    s = sub.add_parser("register", help="calibrate, build ground truth and register reconstructions")
    s.add_argument("manifest")

    s = sub.add_parser("analyze-psf", help="autocorrelation profiles of one or two PSFs")
    s.add_argument("psfs", nargs="+")
    s.add_argument("--output", required=True)
    s.add_argument("--bin-width", type=float, default=1.0)

    s = sub.add_parser("package", help="copy a run into the canonical dataset layout")
    s.add_argument("manifest")
    s.add_argument("--output", required=True)

    s = sub.add_parser("make-psf", help="write a synthetic PSF")
    s.add_argument("kind", choices=("delta", "gaussian", "diffuser", "lenslet"))
    s.add_argument("--output", required=True)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("make-scenes", help="write synthetic 16-bit PNG source images")
    s.add_argument("count", type=int)
    s.add_argument("--output", required=True)
    s.add_argument("--size", type=int, nargs=2, default=list(DISPLAY_SHAPE), metavar=("ROWS", "COLS"))
    s.add_argument("--seed", type=int, default=0)
    return p


def _solver_from(args) -> SolverConfig:
    d = _solver_section(args.config) if args.config else {}
    if args.iterations is not None:
        d["max_iterations"] = args.iterations
    return SolverConfig(**d)


def _solver_section(path) -> dict:
    try:
        cfg = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}", path) from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}", path) from None
    solver = cfg.get("solver", {})
    try:
        jsonschema.validate(solver, _config_schema()["properties"]["solver"])
    except jsonschema.ValidationError as e:
        raise ConfigError(f"solver config invalid: {e.message}", path) from None
    return dict(solver)


def _run(args) -> list[Path] | Path:
    if args.command == "simulate":
        cfg = load_config(args.config, {"seed": args.seed, "output": args.output, "mode": args.mode})
        return cmd_simulate(cfg)
    if args.command == "reconstruct":
        if args.iterations is not None and args.iterations < 1:
            raise ConfigError("--iterations must be >= 1")
        return cmd_reconstruct(args.manifest, _solver_from(args), args.workers)
    if args.command == "register":
        return cmd_register(args.manifest)
    if args.command == "analyze-psf":
        return cmd_analyze_psf(args.psfs, args.output, args.bin_width)
    if args.command == "package":
        return cmd_package(args.manifest, args.output)
    if args.command == "make-psf":
        out = Path(args.output)
        out.parent.mkdir(parents=True, exist_ok=True)
        return save_psf(synthetic_psf(args.kind, args.size, args.seed), out)
    if args.command == "make-scenes":
        out = Path(args.output)
        out.mkdir(parents=True, exist_ok=True)
        paths = []
        for i in range(args.count):
            p = out / f"scene{i:05d}.png"
            save_image(synthetic_scene(tuple(args.size), seed=args.seed * 100003 + i), p, "png16")
            paths.append(p)
        return paths
    raise AssertionError(args.command)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    try:
        result = _run(args)
    except ConfigError as e:
        _emit_error(type(e).__name__, str(e), e.path)
        return 2
    except (LenslessError, ValueError, OSError) as e:
        _emit_error(type(e).__name__, str(e), getattr(e, "filename", None))
        return 1
    if not args.quiet:
        for p in result if isinstance(result, list) else [result]:
            print(p)
    return 0


if __name__ == "__main__":
    sys.exit(main())
