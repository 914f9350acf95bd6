import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

from lensless_dataset.acquisition import DatasetManifest, validate_manifest
from lensless_dataset.cli import main


def run_cli(*argv):
    return main(["--quiet", *map(str, argv)])


def last_error(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    return json.loads(err[-1])


def write_config(root, **kw):
    cfg = {"synthetic_images": 2, "psfs": {"diffuser": "psfs/diffuser.pfm", "lenslet": "psfs/lenslet.pfm"},
           "output": "run", "seed": 3, "display_shape": [64, 64]}
    cfg.update(kw)
    p = root / "cfg.json"
    p.write_text(json.dumps(cfg))
    return p


@pytest.fixture(scope="module")
def psf_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("psfs")
    assert run_cli("make-psf", "diffuser", "--size", 16, "--seed", 1, "--output", d / "diffuser.pfm") == 0
    assert run_cli("make-psf", "lenslet", "--size", 16, "--seed", 2, "--output", d / "lenslet.pfm") == 0
    return d


@pytest.fixture
def workdir(tmp_path, psf_dir):
    shutil.copytree(psf_dir, tmp_path / "psfs")
    return tmp_path


@pytest.fixture(scope="module")
def small_run(tmp_path_factory, psf_dir):
    root = tmp_path_factory.mktemp("small")
    shutil.copytree(psf_dir, root / "psfs")
    cfg = write_config(root)
    assert run_cli("simulate", "--config", cfg) == 0
    assert run_cli("reconstruct", root / "run", "--iterations", 10) == 0
    return root / "run"


def manifest(run):
    return json.loads((run / "manifest.json").read_text())


def strip(d):
    return {k: v for k, v in d.items() if k not in DatasetManifest.VOLATILE}


# --------------------------------------------------------------------------- simulate


def test_simulate_smoke(small_run):
    d = manifest(small_run)
    validate_manifest(d)
    assert len(d["records"]) == 2 * 3
    assert {c["camera_id"] for c in d["cameras"]} == {"diffuser", "lenslet", "lensed"}
    for r in d["records"]:
        assert (small_run / r["file"]).is_file()


def test_simulate_repeatable(workdir):
    cfg = write_config(workdir)
    assert run_cli("simulate", "--config", cfg, "--output", workdir / "a") == 0
    assert run_cli("simulate", "--config", cfg, "--output", workdir / "b") == 0
    a, b = manifest(workdir / "a"), manifest(workdir / "b")
    assert strip(a) == strip(b)
    for r in a["records"]:
        assert (workdir / "a" / r["file"]).read_bytes() == (workdir / "b" / r["file"]).read_bytes()


def test_simulate_overrides(workdir):
    cfg = write_config(workdir)
    assert run_cli("simulate", "--config", cfg, "--seed", 9, "--mode", "shared") == 0
    d = manifest(workdir / "run")
    assert d["seed"] == 9 and d["mode"] == "shared"


def test_missing_psf_rejected_before_writes(workdir, capsys):
    cfg = write_config(workdir, psfs={"diffuser": "psfs/diffuser.pfm", "gone": "psfs/gone.pfm"})
    assert run_cli("simulate", "--config", cfg) == 2
    err = last_error(capsys)
    assert err["error"] == "ConfigError"
    assert err["path"].endswith("psfs/gone.pfm") and "gone.pfm" in err["message"]
    assert not (workdir / "run").exists()


def test_invalid_config_rejected(workdir, capsys):
    cfg = write_config(workdir, seed="three")
    assert run_cli("simulate", "--config", cfg) == 2
    assert "seed" in last_error(capsys)["message"]
    assert run_cli("simulate", "--config", workdir / "nope.json") == 2
    assert last_error(capsys)["path"].endswith("nope.json")
    assert not (workdir / "run").exists()


def test_usage_error_is_json(capsys):
    with pytest.raises(SystemExit) as e:
        main(["simulate"])
    assert e.value.code == 2
    assert last_error(capsys)["error"] == "UsageError"


# --------------------------------------------------------------------------- reconstruct


def test_reconstruct_history(small_run):
    d = manifest(small_run)
    assert len(d["reconstructions"]) == 2 * 2
    assert d["solver"]["max_iterations"] == 10
    for e in d["reconstructions"]:
        lines = (small_run / e["history"]).read_text().strip().splitlines()
        assert len(lines) == 1 + 10
        assert e["iterations"] == 10
    assert set(d["calibration"]["grid_reconstructions"]) == {"diffuser", "lenslet"}


def test_reconstruct_rerun_identical(small_run):
    before = {e["file"]: (small_run / e["file"]).read_bytes() for e in manifest(small_run)["reconstructions"]}
    assert run_cli("reconstruct", small_run, "--iterations", 10, "--workers", 2) == 0
    after = {e["file"]: (small_run / e["file"]).read_bytes() for e in manifest(small_run)["reconstructions"]}
    assert before == after


def test_reconstruct_bad_iterations(small_run, capsys):
    assert run_cli("reconstruct", small_run, "--iterations", 0) == 2
    assert last_error(capsys)["error"] == "ConfigError"


def test_register_without_reconstructions(workdir, capsys):
    cfg = write_config(workdir)
    assert run_cli("simulate", "--config", cfg) == 0
    assert run_cli("register", workdir / "run") == 1
    err = last_error(capsys)
    assert err["error"] == "ManifestError" and "reconstruct" in err["message"]


def test_missing_manifest(tmp_path, capsys):
    assert run_cli("reconstruct", tmp_path / "nothing") == 1
    assert "nothing" in last_error(capsys)["message"]


@pytest.fixture(scope="module")
def registered_run(tmp_path_factory, psf_dir):
    root = tmp_path_factory.mktemp("reg")
    shutil.copytree(psf_dir, root / "psfs")
    cfg = write_config(root, synthetic_images=1, display_shape=[300, 300])
    assert run_cli("simulate", "--config", cfg) == 0
    assert run_cli("reconstruct", root / "run", "--workers", 2) == 0
    assert run_cli("register", root / "run") == 0
    return root / "run"


def test_register_identity_geometry(registered_run):
    d = manifest(registered_run)
    validate_manifest(d)
    for cid, h in d["calibration"]["homographies"].items():
        assert h["coarse"] == "grid", cid
        assert h["corner_displacement_px"] < 0.5, (cid, h)
    assert len(d["registrations"]) == 2
    for r in d["registrations"]:
        assert (registered_run / r["file"]).is_file()
        assert r["psnr"] > 15
    assert (registered_run / "calibration/distortion.json").is_file()
    assert d["calibration"]["distortion_model"]["rms_reprojection_px"] < 0.1


def test_package_cli(registered_run, tmp_path):
    assert run_cli("package", registered_run, "--output", tmp_path / "pkg") == 0
    d = manifest(tmp_path / "pkg")
    validate_manifest(d)
    for sub in ("registered", "ground_truth", "reconstructions", "calibration"):
        assert any((tmp_path / "pkg" / sub).iterdir()), sub


# --------------------------------------------------------------------------- analyze-psf


def test_analyze_one(psf_dir, tmp_path):
    assert run_cli("analyze-psf", psf_dir / "diffuser.pfm", "--output", tmp_path) == 0
    rows = (tmp_path / "diffuser_profile.csv").read_text().strip().splitlines()
    assert len(rows) > 5
    assert not (tmp_path / "comparison.json").exists()


def test_analyze_two(psf_dir, tmp_path):
    assert run_cli("analyze-psf", psf_dir / "diffuser.pfm", psf_dir / "lenslet.pfm", "--output", tmp_path) == 0
    comp = json.loads((tmp_path / "comparison.json").read_text())
    assert comp["labels"] == {"a": "diffuser", "b": "lenslet"}
    for name, m in comp["metrics"].items():
        assert m["better"] in ("diffuser", "lenslet", "tie"), name
    assert (tmp_path / "comparison.csv").is_file()


def test_analyze_same_twice(psf_dir, tmp_path):
    p = psf_dir / "lenslet.pfm"
    assert run_cli("analyze-psf", p, p, "--output", tmp_path) == 0
    comp = json.loads((tmp_path / "comparison.json").read_text())
    for name, m in comp["metrics"].items():
        assert m["difference"] == 0 or np.isnan(m["difference"]), name
        assert m["better"] == "tie", name


def test_analyze_missing(tmp_path, capsys):
    assert run_cli("analyze-psf", tmp_path / "x.pfm", "--output", tmp_path / "o") == 2
    assert last_error(capsys)["path"].endswith("x.pfm")
    assert not (tmp_path / "o").exists()


def test_entry_point():
    out = subprocess.run([sys.executable, "-m", "lensless_dataset.cli", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.strip()
