import dataclasses
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lensless_dataset.acquisition import (
    AcquisitionSchedule,
    DatasetManifest,
    VirtualCamera,
    calibrate_exposure,
    default_cameras,
    display_grid,
    display_image,
    package_dataset,
    record_seed,
    referenced_files,
    run_acquisition,
    synthetic_scene,
    validate_manifest,
)
from lensless_dataset.errors import AcquisitionError, ManifestError
from lensless_dataset.imgcore import Image
from lensless_dataset.optics import SensorModel, forward, make_psf, sense, synthetic_psf

SMALL = (48, 48)


def times(sched):
    return [t for *_, t in sched.triggers()]


# --------------------------------------------------------------------------- schedule


def test_trigger_examples():
    assert times(AcquisitionSchedule(["a", "b"], ["x", "y"])) == [0, 200, 700, 900]
    s = AcquisitionSchedule(["a"], ["x", "y", "z", "w"], 200, 350)
    assert times(s) == [0, 350, 700, 1050]
    s = AcquisitionSchedule(["a", "b", "c"], ["x", "y", "z"])
    assert times(s) == [0, 200, 400, 900, 1100, 1300, 1800, 2000, 2200]


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 5), st.integers(1, 6), st.integers(0, 1000), st.integers(0, 1000))
def test_trigger_law(n_cam, n_img, dc, di):
    s = AcquisitionSchedule([f"c{j}" for j in range(n_cam)], [f"i{k}" for k in range(n_img)], dc, di)
    t = np.array(times(s)).reshape(n_img, n_cam)
    assert t[0, 0] == 0
    assert np.all(np.diff(t, axis=1) == dc)
    assert np.all(t[1:, 0] - t[:-1, -1] == di)
    assert t.dtype.kind == "i"


def test_schedule_validation():
    with pytest.raises(ValueError):
        AcquisitionSchedule([], ["x"])
    with pytest.raises(ValueError):
        AcquisitionSchedule(["a", "a"], ["x"])
    with pytest.raises(ValueError):
        AcquisitionSchedule(["a"], ["x"], -1, 500)
    with pytest.raises(ValueError):
        AcquisitionSchedule(["a"], ["x"], 200, 2.5)


# --------------------------------------------------------------------------- exposure


def delta_camera(**kw):
    return VirtualCamera("cam", "lensless", psf="delta", **kw)


DELTA = {"delta": make_psf(np.ones((1, 1)), "delta")}


def test_exposure_closed_form():
    cam = delta_camera()
    assert calibrate_exposure(Image(np.full(SMALL, 0.45)), cam, 0.9, DELTA) == pytest.approx(2.0, abs=1e-12)
    assert calibrate_exposure(Image(np.full(SMALL, 0.9)), cam, 0.9, DELTA) == pytest.approx(1.0, abs=1e-9)
    cam = delta_camera(sensor=SensorModel(full_well_fraction=0.5))
    assert calibrate_exposure(Image(np.full(SMALL, 0.45)), cam, 0.9, DELTA) == pytest.approx(1.0)


def test_exposure_zero_reference():
    with pytest.raises(AcquisitionError):
        calibrate_exposure(Image(np.zeros(SMALL)), delta_camera(), 0.9, DELTA)
    with pytest.raises(ValueError):
        calibrate_exposure(Image(np.ones(SMALL)), delta_camera(), 1.0, DELTA)


@pytest.mark.parametrize("seed", range(4))
def test_exposure_safety(seed):
    psfs = {"p": synthetic_psf("diffuser", 16, seed=seed)}
    cam = VirtualCamera("cam", "lensless", psf="p")
    ref = synthetic_scene((64, 64), seed=seed)
    scale = calibrate_exposure(ref, cam, 0.9, psfs)
    ideal = cam.ideal(ref, psfs)
    m = sense(ideal, SensorModel.noiseless(), scale)
    assert m.saturated_fraction <= 0.001
    assert np.percentile(ideal.data * scale, 99.9) == pytest.approx(0.9, rel=1e-12)


# --------------------------------------------------------------------------- helpers


def test_record_seed_stable_and_distinct():
    a = record_seed(1, "img", "cam")
    assert a == record_seed(1, "img", "cam")
    others = {record_seed(2, "img", "cam"), record_seed(1, "img2", "cam"), record_seed(1, "img", "cam2")}
    assert a not in others and len(others) == 3


def test_display_image_crop_and_upscale(rng):
    big = Image(rng.random((320, 400)))
    d = display_image(big)
    assert d.shape == (300, 300)
    assert np.array_equal(d.data, big.data[10:310, 50:350])
    small = display_image(Image(rng.random((120, 200))))
    assert small.shape == (300, 300)


def test_display_grid_bands():
    frame, placements = display_grid((300, 300))
    assert len(placements) == 3
    assert frame.data.min() < 0.01 and frame.data.max() == 1.0


def test_camera_validation():
    with pytest.raises(ValueError):
        VirtualCamera("x", "lensless")
    with pytest.raises(ValueError):
        VirtualCamera("x", "lensed")
    with pytest.raises(ValueError):
        VirtualCamera("x", "lensless", psf="p", exposure_scale=0.0)
    cam = default_cameras(shape=SMALL)[-1]
    back = VirtualCamera.from_dict(json.loads(json.dumps(cam.to_dict())))
    assert back.to_dict() == cam.to_dict()


# --------------------------------------------------------------------------- runs


def small_setup(n_images=3, lensed=True):
    psfs = {"a": synthetic_psf("diffuser", 8, seed=1), "b": synthetic_psf("lenslet", 8, seed=2)}
    cams = default_cameras(("a", "b"), shape=SMALL)
    if not lensed:
        cams = cams[:2]
    images = {f"im{i}": synthetic_scene((60, 56), seed=i) for i in range(n_images)}
    sched = AcquisitionSchedule([c.camera_id for c in cams], list(images))
    return images, cams, sched, psfs


def run_small(tmp, seed=5, **kw):
    images, cams, sched, psfs = small_setup(**{k: kw.pop(k) for k in ("n_images", "lensed") if k in kw})
    return run_acquisition(images, cams, sched, psfs, seed, tmp, display_shape=SMALL, **kw)


def test_run_records_and_pairing(tmp_path):
    m = run_small(tmp_path)
    assert len(m.records) == 9 and m.complete
    assert {(r["image_id"], r["camera_id"]) for r in m.records} == {
        (i, c) for i in ("im0", "im1", "im2") for c in ("a", "b", "lensed")
    }
    assert [r["trigger_time_ms"] for r in m.records] == [0, 200, 400, 900, 1100, 1300, 1800, 2000, 2200]
    for f in referenced_files(m.to_dict()):
        assert (tmp_path / f).is_file(), f
    on_disk = json.loads((tmp_path / "manifest.json").read_text())
    validate_manifest(on_disk)
    assert DatasetManifest.from_dict(on_disk).to_dict() == on_disk


def test_modes(tmp_path):
    shared = run_small(tmp_path / "s", mode="shared")
    per = run_small(tmp_path / "p", mode="per-camera")
    for k in range(3):
        assert {r["image_id"] for r in shared.records if r["cycle"] == k} == {f"im{k}"}
        assert len({r["image_id"] for r in per.records if r["cycle"] == k}) == 3
    assert shared.mode == "shared" and per.mode == "per-camera"


def files_bytes(root, manifest):
    return {f: (root / f).read_bytes() for f in referenced_files(manifest.to_dict())}


def strip(d):
    return {k: v for k, v in d.items() if k not in DatasetManifest.VOLATILE}


def test_run_deterministic(tmp_path):
    a = run_small(tmp_path / "a")
    b = run_small(tmp_path / "b")
    assert a.run_id != b.run_id
    assert files_bytes(tmp_path / "a", a) == files_bytes(tmp_path / "b", b)
    assert strip(a.to_dict()) == strip(b.to_dict())
    c = run_small(tmp_path / "c", seed=6)
    fa, fc = files_bytes(tmp_path / "a", a), files_bytes(tmp_path / "c", c)
    assert fa["measurements/a/im0.pfm"] != fc["measurements/a/im0.pfm"]


def test_parallel_matches_sequential(tmp_path):
    a = run_small(tmp_path / "a")
    b = run_small(tmp_path / "b", max_workers=3)
    assert files_bytes(tmp_path / "a", a) == files_bytes(tmp_path / "b", b)
    assert strip(a.to_dict()) == strip(b.to_dict())


def test_missing_image_writes_nothing(tmp_path):
    images, cams, sched, psfs = small_setup()
    del images["im1"]
    with pytest.raises(AcquisitionError, match="im1"):
        run_acquisition(images, cams, sched, psfs, 0, tmp_path / "out", display_shape=SMALL)
    assert not (tmp_path / "out").exists()


def test_write_failure_flags_incomplete(tmp_path):
    (tmp_path / "measurements/b/im0.pfm").mkdir(parents=True)
    with pytest.raises(AcquisitionError):
        run_small(tmp_path, mode="shared")
    d = json.loads((tmp_path / "manifest.json").read_text())
    assert d["complete"] is False
    assert [r["camera_id"] for r in d["records"]] == ["a"]
    with pytest.raises(ManifestError):
        package_dataset(tmp_path / "manifest.json", tmp_path / "pkg")


def test_lensed_measurement_follows_distortion(tmp_path):
    m = run_small(tmp_path, lensed=True)
    rec = next(r for r in m.records if r["camera_id"] == "lensed")
    assert rec["exposure_scale"] == 0.5
    assert rec["saturated_fraction"] == 0.0


# --------------------------------------------------------------------------- manifest + packaging


def test_manifest_schema_violations(tmp_path):
    m = run_small(tmp_path)
    d = m.to_dict()
    bad = dict(d, records=d["records"][:-1])
    with pytest.raises(ManifestError, match="records"):
        validate_manifest(bad)
    bad = json.loads(json.dumps(d))
    del bad["records"][0]["seed"]
    with pytest.raises(ManifestError, match="schema"):
        validate_manifest(bad)
    bad = json.loads(json.dumps(d))
    bad["records"][0]["file"] = "/abs/path.pfm"
    with pytest.raises(ManifestError):
        validate_manifest(bad)
    with pytest.raises(ManifestError, match="format_version"):
        validate_manifest(dict(d, format_version=99))


def test_package_minimal(tmp_path):
    psfs = {"a": synthetic_psf("diffuser", 8, seed=1)}
    cams = [VirtualCamera("a", "lensless", psf="a")]
    sched = AcquisitionSchedule(["a"], ["only"])
    run_acquisition({"only": synthetic_scene(SMALL)}, cams, sched, psfs, 0, tmp_path / "run", display_shape=SMALL)
    out = package_dataset(tmp_path / "run/manifest.json", tmp_path / "pkg")
    d = json.loads((out / "manifest.json").read_text())
    validate_manifest(d)
    assert len(d["records"]) == 1 and d["packaged"]
    for sub in ("measurements", "ground_truth", "reconstructions", "registered", "psfs", "calibration"):
        assert (out / sub).is_dir()
    assert (out / "measurements/a/only.pfm").is_file()
    assert (out / "psfs/a.json").is_file()
    for f in referenced_files(d):
        assert not f.startswith("/") and ".." not in f


def test_package_idempotent(tmp_path):
    run_small(tmp_path / "run")
    out = package_dataset(tmp_path / "run/manifest.json", tmp_path / "pkg")
    first = {p.relative_to(out): p.read_bytes() for p in out.rglob("*") if p.is_file()}
    package_dataset(tmp_path / "run/manifest.json", tmp_path / "pkg")
    second = {p.relative_to(out): p.read_bytes() for p in out.rglob("*") if p.is_file()}
    assert first.keys() == second.keys()
    for k in first:
        if k.name == "manifest.json":
            a, b = json.loads(first[k]), json.loads(second[k])
            a.pop("packaged"), b.pop("packaged")
            assert a == b
        else:
            assert first[k] == second[k], k
    # packaging the packaged dataset in place is also a fixed point
    package_dataset(out / "manifest.json", out)


def test_package_dangling_reference(tmp_path):
    run_small(tmp_path / "run")
    (tmp_path / "run/measurements/b/im1.pfm").unlink()
    with pytest.raises(ManifestError, match="measurements/b/im1.pfm"):
        package_dataset(tmp_path / "run/manifest.json", tmp_path / "pkg")
