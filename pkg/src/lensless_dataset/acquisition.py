"""Simulated synchronized acquisition.

A run walks a virtual clock over display cycles.  In every cycle each camera
fires once, ``inter_camera_delay_ms`` apart, and consecutive cycles are
separated by ``inter_image_delay_ms`` after the last camera.  Everything that
the run writes is a pure function of its inputs and the run seed.

Run directory layout (paths in the manifest are relative to it)::

    manifest.json
    measurements/<camera_id>/<image_id>.pfm   (+ .png 16-bit preview)
    psfs/<camera_id>.pfm                      (+ .json sidecar)
    calibration/                              grid captures and views
"""
from __future__ import annotations

import dataclasses
import datetime
import hashlib
import json
import math
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .errors import AcquisitionError, ManifestError
from .geometry import (
    CirclesGridSpec,
    DistortionModel,
    Homography,
    apply_homography,
    distort_image,
    fit_grid_homography,
    render_grid,
    undistort_points,
)
from .imgcore import Image, PixelGrid, as_image, center_crop, resample_bilinear, save_image
from .optics import Measurement, PointSpreadFunction, SensorModel, forward, save_psf, sense

FORMAT_VERSION = 1
DISPLAY_SHAPE = (300, 300)
MODES = ("per-camera", "shared")
LENSED_EXPOSURE = 0.5

DEFAULT_CAL_GRID = CirclesGridSpec(diagonal_spacing=0.02)


def grid_pose(spec: CirclesGridSpec, rvec, centre, depth):
    """Pose ``(rvec, tvec)`` putting the grid's centre at camera point
    ``(centre[0], centre[1], depth)`` after rotating it by ``rvec``.
    """
    from scipy.spatial.transform import Rotation

    ew, eh = spec.extent
    c = np.array([ew / 2, eh / 2, 0.0])
    t = np.array([centre[0], centre[1], depth]) - Rotation.from_rotvec(rvec).apply(c)
    return tuple(float(v) for v in rvec), tuple(float(v) for v in t)


# Lensed-camera views of the physical grid for distortion calibration: tilted
# in both axes and spread over the frame so the corners are constrained.
DEFAULT_CAL_POSES = tuple(
    grid_pose(DEFAULT_CAL_GRID, rv, c, 0.40)
    for rv, c in [
        ((0.3, 0.0, -0.1), (0.0, -0.14)),
        ((-0.3, 0.1, 0.0), (0.0, 0.0)),
        ((0.25, -0.1, 0.1), (0.0, 0.14)),
        ((0.0, 0.35, 0.35), (0.04, -0.11)),
        ((0.0, -0.35, 0.35), (-0.04, 0.11)),
        ((0.1, 0.3, -0.35), (-0.04, -0.11)),
        ((-0.1, -0.3, -0.35), (0.04, 0.11)),
        ((-0.35, 0.2, 0.0), (0.0, -0.06)),
        ((0.35, -0.2, 0.0), (0.0, 0.06)),
    ]
)


@dataclass(frozen=True)
class AcquisitionSchedule:
    camera_order: tuple[str, ...]
    image_ids: tuple[str, ...]
    inter_camera_delay_ms: int = 200
    inter_image_delay_ms: int = 500

    def __post_init__(self):
        object.__setattr__(self, "camera_order", tuple(self.camera_order))
        object.__setattr__(self, "image_ids", tuple(self.image_ids))
        for name in ("inter_camera_delay_ms", "inter_image_delay_ms"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)) or v < 0:
                raise ValueError(f"{name} must be a non-negative integer, got {v!r}")
            object.__setattr__(self, name, int(v))
        if not self.camera_order:
            raise ValueError("camera_order must not be empty")
        if len(set(self.camera_order)) != len(self.camera_order):
            raise ValueError("camera_order contains duplicates")
        if len(set(self.image_ids)) != len(self.image_ids):
            raise ValueError("image_ids contains duplicates")

    @property
    def cycle_ms(self) -> int:
        return (len(self.camera_order) - 1) * self.inter_camera_delay_ms + self.inter_image_delay_ms

    def trigger_time(self, k: int, j: int) -> int:
        return k * self.cycle_ms + j * self.inter_camera_delay_ms

    def triggers(self):
        """``(cycle, camera_index, camera_id, time_ms)`` in firing order."""
        for k in range(len(self.image_ids)):
            for j, cam in enumerate(self.camera_order):
                yield k, j, cam, self.trigger_time(k, j)

    def to_dict(self) -> dict:
        return {
            "camera_order": list(self.camera_order),
            "image_ids": list(self.image_ids),
            "inter_camera_delay_ms": self.inter_camera_delay_ms,
            "inter_image_delay_ms": self.inter_image_delay_ms,
        }

    @classmethod
    def from_dict(cls, d) -> "AcquisitionSchedule":
        return cls(**d)


@dataclass(frozen=True)
class VirtualCamera:
    """One simulated camera.

    Lensless cameras name a PSF in the run's PSF store and optionally a sensor
    window in full-convolution coordinates (default: display-sized, centred).
    Lensed cameras carry a distortion model and an ``extrinsics`` homography
    from display pixels to ideal pinhole pixels (default identity).
    """

    camera_id: str
    kind: str
    sensor: SensorModel = field(default_factory=SensorModel)
    exposure_scale: float = 1.0
    psf: str | None = None
    sensor_window: PixelGrid | None = None
    distortion: DistortionModel | None = None
    extrinsics: Homography | None = None

    def __post_init__(self):
        if self.kind not in ("lensless", "lensed"):
            raise ValueError(f"camera {self.camera_id!r}: unknown kind {self.kind!r}")
        if not (self.exposure_scale > 0 and math.isfinite(self.exposure_scale)):
            raise ValueError(f"camera {self.camera_id!r}: exposure_scale must be positive")
        if self.kind == "lensless" and not self.psf:
            raise ValueError(f"camera {self.camera_id!r}: lensless camera needs a PSF reference")
        if self.kind == "lensed" and self.distortion is None:
            raise ValueError(f"camera {self.camera_id!r}: lensed camera needs a distortion model")

    def window_for(self, display_shape, psf: PointSpreadFunction) -> PixelGrid:
        if self.sensor_window is not None:
            return self.sensor_window
        full = (display_shape[0] + psf.shape[0] - 1, display_shape[1] + psf.shape[1] - 1)
        return PixelGrid.centered(full, display_shape)

    def ideal(self, display: Image, psf_store) -> Image:
        """Noiseless, unit-exposure sensor image of a displayed frame."""
        if self.kind == "lensless":
            psf = psf_store[self.psf]
            return forward(display, psf, self.window_for(display.shape, psf))
        return distort_image(display, self.distortion, self.extrinsics, out_shape=display.shape)

    def to_dict(self, display_shape=None, psf_store=None) -> dict:
        d = {
            "camera_id": self.camera_id,
            "kind": self.kind,
            "sensor": self.sensor.to_dict(),
            "exposure_scale": self.exposure_scale,
        }
        if self.kind == "lensless":
            d["psf"] = self.psf
            win = self.sensor_window
            if win is None and display_shape is not None and psf_store is not None:
                win = self.window_for(display_shape, psf_store[self.psf])
            d["sensor_window"] = win.to_dict() if win is not None else None
        else:
            d["distortion"] = self.distortion.to_dict()
            d["extrinsics"] = (self.extrinsics or Homography.identity()).to_dict()
        return d

    @classmethod
    def from_dict(cls, d) -> "VirtualCamera":
        kw = dict(
            camera_id=d["camera_id"],
            kind=d["kind"],
            sensor=SensorModel.from_dict(d.get("sensor", {})),
            exposure_scale=float(d.get("exposure_scale", 1.0)),
        )
        if d["kind"] == "lensless":
            kw["psf"] = d["psf"]
            if d.get("sensor_window"):
                kw["sensor_window"] = PixelGrid.from_dict(d["sensor_window"])
        else:
            kw["distortion"] = DistortionModel.from_dict(d["distortion"])
            if d.get("extrinsics"):
                kw["extrinsics"] = Homography.from_dict(d["extrinsics"])
        return cls(**kw)


# ---------------------------------------------------------------------------
# manifest


def _schema():
    text = resources.files("lensless_dataset").joinpath("schemas/manifest.schema.json").read_text()
    return json.loads(text)


@dataclass
class DatasetManifest:
    """Journal of one acquisition run and everything later derived from it.

    ``records`` hold one entry per (image, camera) trigger in firing order.
    Later pipeline stages append ``reconstructions``, ``ground_truth`` and
    ``registrations`` and fill in ``calibration``.
    """

    run_id: str
    schedule: AcquisitionSchedule
    cameras: list[dict]
    records: list[dict] = field(default_factory=list)
    calibration: dict = field(default_factory=dict)
    seed: int = 0
    mode: str = "per-camera"
    display_shape: tuple[int, int] = DISPLAY_SHAPE
    complete: bool = True
    created: str = ""
    reconstructions: list[dict] = field(default_factory=list)
    ground_truth: list[dict] = field(default_factory=list)
    registrations: list[dict] = field(default_factory=list)
    solver: dict | None = None
    packaged: str = ""
    format_version: int = FORMAT_VERSION

    # fields that legitimately differ between otherwise identical runs
    VOLATILE = ("run_id", "created", "packaged")

    def camera(self, camera_id) -> dict:
        for c in self.cameras:
            if c["camera_id"] == camera_id:
                return c
        raise KeyError(camera_id)

    def records_for(self, camera_id) -> list[dict]:
        return [r for r in self.records if r["camera_id"] == camera_id]

    def to_dict(self) -> dict:
        d = {
            "format_version": self.format_version,
            "run_id": self.run_id,
            "created": self.created,
            "seed": self.seed,
            "mode": self.mode,
            "complete": self.complete,
            "display_shape": list(self.display_shape),
            "schedule": self.schedule.to_dict(),
            "cameras": self.cameras,
            "records": self.records,
            "calibration": self.calibration,
            "reconstructions": self.reconstructions,
            "ground_truth": self.ground_truth,
            "registrations": self.registrations,
        }
        if self.solver is not None:
            d["solver"] = self.solver
        if self.packaged:
            d["packaged"] = self.packaged
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d) -> "DatasetManifest":
        validate_manifest(d)
        return cls(
            run_id=d["run_id"],
            schedule=AcquisitionSchedule.from_dict(d["schedule"]),
            cameras=d["cameras"],
            records=d["records"],
            calibration=d.get("calibration", {}),
            seed=d["seed"],
            mode=d["mode"],
            display_shape=tuple(d["display_shape"]),
            complete=d["complete"],
            created=d.get("created", ""),
            reconstructions=d.get("reconstructions", []),
            ground_truth=d.get("ground_truth", []),
            registrations=d.get("registrations", []),
            solver=d.get("solver"),
            packaged=d.get("packaged", ""),
            format_version=d["format_version"],
        )

    def save(self, path) -> Path:
        path = Path(path)
        d = self.to_dict()
        validate_manifest(d)
        path.write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except FileNotFoundError:
            raise ManifestError(f"{path}: manifest not found") from None
        except json.JSONDecodeError as e:
            raise ManifestError(f"{path}: not valid JSON ({e})") from None
        return cls.from_dict(d)


def validate_manifest(d: dict) -> None:
    """Check ``d`` against the shipped JSON schema and the pairing rules."""
    if isinstance(d, dict) and d.get("format_version") != FORMAT_VERSION:
        raise ManifestError(f"unsupported manifest format_version {d.get('format_version')!r}")
    try:
        jsonschema.validate(d, _schema())
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ManifestError(f"manifest schema violation at {where}: {e.message}") from None
    if not d["complete"]:
        return
    n_img = len(d["schedule"]["image_ids"])
    n_cam = len(d["schedule"]["camera_order"])
    if len(d["records"]) != n_img * n_cam:
        raise ManifestError(f"expected {n_img * n_cam} records, found {len(d['records'])}")
    pairs = {(r["image_id"], r["camera_id"]) for r in d["records"]}
    if len(pairs) != len(d["records"]):
        raise ManifestError("duplicate (image_id, camera_id) record")
    times = [r["trigger_time_ms"] for r in d["records"]]
    if any(b < a for a, b in zip(times, times[1:])):
        raise ManifestError("trigger times decrease in file order")


def referenced_files(d: dict) -> list[str]:
    """Every relative file path a manifest dict points at, in a stable order.

    Paths live under the keys ``file``, ``preview``, ``history`` and
    ``psf_file`` anywhere in the document.
    """
    out = []

    def walk(v):
        if isinstance(v, dict):
            for k in sorted(v):
                if k in PATH_KEYS and isinstance(v[k], str):
                    out.append(v[k])
                else:
                    walk(v[k])
        elif isinstance(v, list):
            for x in v:
                walk(x)

    walk(d)
    return list(dict.fromkeys(out))


PATH_KEYS = ("file", "preview", "history", "psf_file")


# ---------------------------------------------------------------------------
# helpers


def record_seed(seed: int, image_id: str, camera_id: str) -> int:
    """Per-trigger RNG seed derived from the run seed by hashing."""
    h = hashlib.sha256(f"{int(seed)}\x00{image_id}\x00{camera_id}".encode()).digest()
    return int.from_bytes(h[:8], "little")


def display_image(img, shape=DISPLAY_SHAPE) -> Image:
    """Frame shown on the monitor: centre crop to ``shape``.

    Sources smaller than ``shape`` are first upscaled (bilinear, aspect kept)
    so the crop is always filled.  Samples are clipped to [0, 1].
    """
    img = as_image(img)
    h, w = img.shape
    s = max(shape[0] / h, shape[1] / w)
    if s > 1:
        img = resample_bilinear(img, (max(shape[0], math.ceil(h * s)), max(shape[1], math.ceil(w * s))))
    out = center_crop(img, shape)
    return out.with_data(np.clip(out.data, 0.0, 1.0))


def synthetic_scene(shape=DISPLAY_SHAPE, seed=0, channels=1) -> Image:
    """Natural-ish test frame: smooth blobs plus a few soft-edged rectangles."""
    from scipy.ndimage import gaussian_filter

    r = np.random.default_rng(seed)
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    planes = []
    for _ in range(channels):
        out = np.full(shape, r.uniform(0.1, 0.4))
        for _ in range(12):
            cy, cx, s = r.uniform(0, h), r.uniform(0, w), r.uniform(0.03, 0.17) * max(h, w)
            out += r.uniform(-0.3, 0.5) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
        for _ in range(6):
            y0, x0 = r.integers(0, max(1, h - h // 8)), r.integers(0, max(1, w - w // 8))
            hh, ww = r.integers(max(1, h // 20), max(2, h // 4)), r.integers(max(1, w // 20), max(2, w // 4))
            out[y0 : y0 + hh, x0 : x0 + ww] += r.uniform(-0.25, 0.25)
        planes.append(np.clip(gaussian_filter(out, 1.0), 0.02, 0.98))
    return Image(np.stack(planes, axis=2))


def calibrate_exposure(reference, camera: VirtualCamera, target_fraction: float = 0.9, psf_store=None) -> float:
    """Exposure putting the 99.9th percentile of the camera's noiseless
    reference measurement at ``target_fraction`` of full well.
    """
    if not 0 < target_fraction < 1:
        raise ValueError("target_fraction must lie in (0, 1)")
    ideal = camera.ideal(as_image(reference), psf_store or {})
    return exposure_for(ideal, camera.sensor, target_fraction)


def exposure_for(ideal: Image, sensor: SensorModel, target_fraction: float = 0.9) -> float:
    p = float(np.percentile(ideal.data, 99.9))
    if not p > 0:
        raise AcquisitionError("reference measurement is all zero; exposure undefined")
    return target_fraction * sensor.full_well_fraction / p


def lensed_grid_view(spec: CirclesGridSpec, model: DistortionModel, rvec, tvec, shape, supersample=4) -> Image:
    """Ideal lensed image of a physical grid at pose ``(rvec, tvec)``."""
    from scipy.spatial.transform import Rotation

    R = Rotation.from_rotvec(rvec).as_matrix()
    plane_to_norm = np.column_stack([R[:, 0], R[:, 1], np.asarray(tvec, dtype=np.float64)])
    norm_to_plane = np.linalg.inv(plane_to_norm)

    def pixel_to_plane(p):
        return apply_homography(norm_to_plane, undistort_points(p, model))

    return render_grid(spec, shape, pixel_to_plane=pixel_to_plane, supersample=supersample)


def display_grid(shape=DISPLAY_SHAPE, spec: CirclesGridSpec | None = None, bands: int = 3):
    """Registration frame: ``bands`` copies of the grid stacked vertically.

    One 11x4 grid spans a thin horizontal strip, which leaves a homography
    poorly constrained away from it; stacking copies spreads the
    correspondences over the frame.  Returns the frame and, per band, the
    grid-to-display homography.
    """
    spec = spec or CirclesGridSpec()
    h, w = shape
    edges = np.linspace(0, h, bands + 1).round().astype(int)
    frame = np.ones(shape)
    placements = []
    for b in range(bands):
        band = (int(edges[b + 1] - edges[b]), w)
        hom = Homography.translation(0, float(edges[b])) @ fit_grid_homography(spec, band, margin=0.1)
        placements.append(hom)
        frame = np.minimum(frame, render_grid(spec, shape, hom, supersample=4).data[:, :, 0])
    return Image(frame), placements


def grid_bands(shape, bands: int = 3):
    """Row ranges of the bands used by :func:`display_grid`."""
    edges = np.linspace(0, shape[0], bands + 1).round().astype(int)
    return [(int(edges[b]), int(edges[b + 1])) for b in range(bands)]


def default_cameras(psf_ids=("lensless_a", "lensless_b"), lensed_id="lensed", shape=DISPLAY_SHAPE):
    cams = [VirtualCamera(c, "lensless", psf=c) for c in psf_ids]
    model = DistortionModel.pinhole(shape, k1=-0.08, k2=0.01)
    cams.append(VirtualCamera(lensed_id, "lensed", exposure_scale=LENSED_EXPOSURE, distortion=model))
    return cams


# ---------------------------------------------------------------------------
# the run


def _write_measurement(m: Measurement, base: Path, full_well: float):
    base.parent.mkdir(parents=True, exist_ok=True)
    save_image(m.image, base.with_suffix(".pfm"), "pfm")
    save_image(m.image.with_data(m.image.data / full_well), base.with_suffix(".png"), "png16")


def run_acquisition(
    images: dict,
    cameras,
    schedule: AcquisitionSchedule,
    psf_store: dict,
    seed: int,
    output_dir,
    mode: str = "per-camera",
    display_shape=DISPLAY_SHAPE,
    calibration_poses=DEFAULT_CAL_POSES,
    calibration_grid: CirclesGridSpec = DEFAULT_CAL_GRID,
    max_workers: int = 1,
    run_id: str | None = None,
) -> DatasetManifest:
    """Simulate the full acquisition and write measurements plus a manifest.

    In ``shared`` mode every camera sees image ``k`` in cycle ``k``.  In
    ``per-camera`` mode each camera has its own display and camera ``j`` sees
    image ``(k + j) mod n`` in cycle ``k``, so every image still reaches every
    camera exactly once.

    Calibration captures are written too: the registration grid as seen by
    every camera, and lensed-camera views of a physical grid at the given
    poses.  Rendering may use ``max_workers`` threads; outputs are identical
    to the sequential run.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    cams = {c.camera_id: c for c in cameras}
    missing = [i for i in schedule.image_ids if i not in images]
    if missing:
        raise AcquisitionError(f"image ids missing from the image map: {missing}")
    if set(cams) != set(schedule.camera_order):
        raise AcquisitionError("camera descriptors do not match schedule.camera_order")
    for c in cams.values():
        if c.kind == "lensless" and c.psf not in psf_store:
            raise AcquisitionError(f"camera {c.camera_id!r} references unknown PSF {c.psf!r}")
    display_shape = tuple(display_shape)
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)

    displays = {}

    def shown(image_id):
        if image_id not in displays:
            displays[image_id] = display_image(images[image_id], display_shape)
        return displays[image_id]

    n = len(schedule.image_ids)
    plan = []
    for k, j, cam_id, t in schedule.triggers():
        idx = k if mode == "shared" else (k + j) % n
        plan.append((k, cam_id, schedule.image_ids[idx], t))

    cam_dicts = []
    for cid in schedule.camera_order:
        d = cams[cid].to_dict(display_shape, psf_store)
        if cams[cid].kind == "lensless":
            d["psf_file"] = f"psfs/{cid}.pfm"
        cam_dicts.append(d)
    manifest = DatasetManifest(
        run_id=run_id or uuid.uuid4().hex,
        schedule=schedule,
        cameras=cam_dicts,
        seed=int(seed),
        mode=mode,
        display_shape=display_shape,
        complete=False,
        created=datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds"),
    )

    def capture(cam: VirtualCamera, frame: Image, rec_seed: int, **meta) -> Measurement:
        return sense(cam.ideal(frame, psf_store), cam.sensor, cam.exposure_scale, rec_seed, camera_id=cam.camera_id, **meta)

    def render(item):
        k, cam_id, image_id, t = item
        s = record_seed(seed, image_id, cam_id)
        m = capture(cams[cam_id], shown(image_id), s, trigger_time_ms=t, source_image_id=image_id)
        return m, s

    try:
        (out / "psfs").mkdir(exist_ok=True)
        for cid in schedule.camera_order:
            if cams[cid].kind == "lensless":
                save_psf(psf_store[cams[cid].psf], out / "psfs" / f"{cid}.pfm")
        # warm the display cache serially so worker threads only read it
        for _, _, image_id, _ in plan:
            shown(image_id)
        if max_workers > 1:
            with ThreadPoolExecutor(max_workers) as pool:
                results = pool.map(render, plan)
                for item, (m, s) in zip(plan, results):
                    _journal(manifest, out, item, m, s, cams)
        else:
            for item in plan:
                m, s = render(item)
                _journal(manifest, out, item, m, s, cams)
        manifest.calibration = _calibration_captures(
            cams, schedule, capture, seed, out, display_shape, calibration_poses, calibration_grid, psf_store
        )
    except OSError as e:
        manifest.save(out / "manifest.json")
        raise AcquisitionError(f"write failed, journal flagged incomplete: {e}") from e
    manifest.complete = True
    manifest.save(out / "manifest.json")
    return manifest


def _journal(manifest, out, item, m: Measurement, s, cams):
    k, cam_id, image_id, t = item
    rel = f"measurements/{cam_id}/{image_id}"
    _write_measurement(m, out / rel, cams[cam_id].sensor.full_well_fraction)
    manifest.records.append({
        "image_id": image_id,
        "camera_id": cam_id,
        "cycle": k,
        "file": rel + ".pfm",
        "preview": rel + ".png",
        "trigger_time_ms": t,
        "exposure_scale": m.exposure_scale,
        "saturated_fraction": m.saturated_fraction,
        "seed": s,
    })


def _calibration_captures(cams, schedule, capture, seed, out, shape, poses, cal_spec, psf_store):
    cal = out / "calibration"
    cal.mkdir(parents=True, exist_ok=True)
    grid_spec = CirclesGridSpec()
    frame, placements = display_grid(shape, grid_spec)
    save_image(frame, cal / "grid_display.pfm", "pfm")
    captures = {}
    for cid in schedule.camera_order:
        cam = cams[cid]
        if cam.kind == "lensless":
            # the mostly-white grid is far brighter than scenes: expose for it
            cam = dataclasses.replace(cam, exposure_scale=exposure_for(cam.ideal(frame, psf_store), cam.sensor))
        m = capture(cam, frame, record_seed(seed, "__grid__", cid), source_image_id="__grid__")
        rel = f"calibration/grid_{cid}"
        _write_measurement(m, out / rel, cams[cid].sensor.full_well_fraction)
        captures[cid] = {"file": rel + ".pfm", "exposure_scale": m.exposure_scale}
    views = []
    lensed = [c for c in schedule.camera_order if cams[c].kind == "lensed"]
    for cid in lensed:
        cam = cams[cid]
        for v, (rvec, tvec) in enumerate(poses):
            ideal = lensed_grid_view(cal_spec, cam.distortion, rvec, tvec, shape)
            m = sense(ideal, cam.sensor, cam.exposure_scale, record_seed(seed, f"__view{v}__", cid), camera_id=cid)
            rel = f"calibration/view_{cid}_{v:02d}"
            _write_measurement(m, out / rel, cam.sensor.full_well_fraction)
            views.append({"camera_id": cid, "file": rel + ".pfm", "rvec": list(rvec), "tvec": list(tvec)})
    return {
        "grid": dataclasses.asdict(grid_spec),
        "grid_placements": [p.to_dict() for p in placements],
        "grid_display": {"file": "calibration/grid_display.pfm"},
        "grid_captures": captures,
        "calibration_grid": dataclasses.asdict(cal_spec),
        "grid_views": views,
        "psfs": {c: {"file": f"psfs/{c}.pfm"} for c in schedule.camera_order if cams[c].kind == "lensless"},
    }


# ---------------------------------------------------------------------------
# packaging

LAYOUT = ("measurements", "ground_truth", "reconstructions", "registered", "psfs", "calibration")


def _now():
    return datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")


def package_dataset(manifest, output_dir, source_dir=None, reconstructions=None, registrations=None) -> Path:
    """Copy a run and everything it references into the canonical layout.

    ``manifest`` is a :class:`DatasetManifest` or a path to ``manifest.json``
    (then ``source_dir`` defaults to its directory).  Extra reconstruction or
    registration entries may be merged in.  Every referenced file must exist
    and live under one of :data:`LAYOUT`; the written manifest validates
    against the schema.  Packaging twice gives identical bytes apart from the
    ``packaged`` timestamp.
    """
    if not isinstance(manifest, DatasetManifest):
        path = Path(manifest)
        source_dir = source_dir or path.parent
        manifest = DatasetManifest.load(path)
    if source_dir is None:
        raise ValueError("source_dir is required when passing a manifest object")
    src, dst = Path(source_dir).resolve(), Path(output_dir).resolve()
    m = dataclasses.replace(manifest)
    if reconstructions:
        m.reconstructions = _merge(m.reconstructions, reconstructions)
    if registrations:
        m.registrations = _merge(m.registrations, registrations)
    if not m.complete:
        raise ManifestError("refusing to package an incomplete run")
    d = m.to_dict()
    validate_manifest(d)
    files = referenced_files(d)
    for rel in files:
        if Path(rel).is_absolute() or ".." in Path(rel).parts:
            raise ManifestError(f"manifest path is not relative to the dataset root: {rel}")
        if Path(rel).parts[0] not in LAYOUT:
            raise ManifestError(f"manifest path outside the dataset layout: {rel}")
        if not (src / rel).is_file():
            raise ManifestError(f"dangling reference: {rel} (looked in {src})")
    dst.mkdir(parents=True, exist_ok=True)
    for sub in LAYOUT:
        (dst / sub).mkdir(exist_ok=True)
    if src != dst:
        import shutil

        for rel in files:
            copies = [rel]
            if rel.startswith("psfs/") and (src / rel).with_suffix(".json").is_file():
                copies.append(str(Path(rel).with_suffix(".json")))
            for r in copies:
                (dst / r).parent.mkdir(parents=True, exist_ok=True)
                shutil.copyfile(src / r, dst / r)
    m.packaged = _now()
    m.save(dst / "manifest.json")
    return dst


def _merge(existing, extra):
    key = lambda e: (e["image_id"], e["camera_id"])  # noqa: E731
    out = {key(e): e for e in existing}
    out.update({key(e): e for e in extra})
    return sorted(out.values(), key=key)
