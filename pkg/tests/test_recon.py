import json

import numpy as np
import pytest

from oracles import dense_matrix, direct_convolve
from lensless_dataset.errors import ShapeError, SolverError
from lensless_dataset.imgcore import Image, PixelGrid
from lensless_dataset.optics import Measurement, PointSpreadFunction, forward, make_psf, synthetic_psf
from lensless_dataset.recon import (
    SolverConfig,
    SolverResult,
    build_operator,
    estimate_lipschitz,
    fista,
    least_squares_gradient,
    least_squares_objective,
    read_history_csv,
    reconstruct_pair,
)


def oracle_instance(seed=7):
    """6x6 scene, 3x3 delta-dominant PSF, full-extent 8x8 sensor."""
    rng = np.random.default_rng(seed)
    k = 0.2 * rng.random((3, 3))
    k[1, 1] += 1.0
    psf = PointSpreadFunction(Image(k))
    win = PixelGrid(0, 0, 8, 8)
    A = dense_matrix(lambda e: direct_convolve(e, k), (6, 6))
    x_true = rng.random((6, 6))
    b = (A @ x_true.ravel() + 0.05 * rng.standard_normal(64)).reshape(8, 8)
    return psf, win, A, b


def delta():
    d = np.zeros((3, 3))
    d[1, 1] = 1
    return make_psf(d)


def test_lipschitz_delta_is_one():
    assert abs(estimate_lipschitz(delta(), PixelGrid(1, 1, 7, 7), (7, 7)) - 1.0) < 1e-6


def test_lipschitz_matches_dense_eigensolve():
    psf, win, A, _ = oracle_instance()
    ref = np.linalg.eigvalsh(A.T @ A).max()
    est, trace = estimate_lipschitz(psf, win, (6, 6), iters=50, return_trace=True)
    assert abs(est - ref) <= 1e-4 * ref
    assert np.all(np.diff(trace) >= -1e-12 * ref)


def test_lipschitz_homogeneous():
    psf = synthetic_psf("diffuser", 9, seed=3)
    win = PixelGrid(2, 2, 10, 10)
    base = estimate_lipschitz(psf, win, (12, 12))
    assert abs(estimate_lipschitz(psf.scaled(3.0), win, (12, 12)) - 9.0 * base) <= 1e-6 * 9.0 * base


def test_lipschitz_zero_psf():
    with pytest.raises(SolverError):
        estimate_lipschitz(PointSpreadFunction(Image(np.zeros((3, 3)))), PixelGrid(0, 0, 3, 3), (3, 3))


def test_fista_delta_recovers_measurement(rng):
    b = rng.random((10, 10))
    res = fista(Image(b), delta(), SolverConfig(), scene_shape=(10, 10))
    assert res.iterations_run == 200 and len(res.objective_history) == 200
    assert np.max(np.abs(res.estimate.data[:, :, 0] - b)) < 1e-6


def test_fista_default_scene_grid_embeds_measurement(rng):
    b = rng.random((10, 10))
    res = fista(Image(b), delta())
    # scene grid is sensor + psf - 1 = 12x12 and the sensor sits at offset 1
    assert res.estimate.shape == (12, 12)
    assert np.max(np.abs(res.estimate.data[1:11, 1:11, 0] - b)) < 1e-6


def test_fista_matches_normal_equations():
    psf, win, A, b = oracle_instance()
    x_ls = np.linalg.solve(A.T @ A, A.T @ b.ravel())
    res = fista(Image(b), psf, SolverConfig(prox="identity"), (6, 6), win)
    assert np.max(np.abs(res.estimate.data.ravel() - x_ls)) < 1e-4
    f_min = 0.5 * np.sum((A @ x_ls - b.ravel()) ** 2)
    assert res.objective_history[-1] - f_min < 1e-8


@pytest.mark.xfail(strict=True, reason="accelerated momentum ripples by ~1e-6 on this strongly convex instance")
def test_fista_objective_monotone_after_five():
    psf, win, A, _ = oracle_instance()
    x_true = np.random.default_rng(9).random((6, 6))
    b = (A @ x_true.ravel()).reshape(8, 8)
    h = np.array(fista(Image(b), psf, SolverConfig(prox="identity"), (6, 6), win).objective_history)
    assert np.all(np.diff(h[5:]) <= 1e-9)


def test_fista_objective_gap_bound():
    # F(x_k) - F* <= 2 ||x0 - x*||^2 / (step (k + 1)^2), x0 = 0
    psf, win, A, b = oracle_instance()
    x_ls = np.linalg.solve(A.T @ A, A.T @ b.ravel())
    f_min = 0.5 * np.sum((A @ x_ls - b.ravel()) ** 2)
    res = fista(Image(b), psf, SolverConfig(prox="identity"), (6, 6), win)
    k = np.arange(1, 201)
    bound = 2.0 * np.sum(x_ls**2) / (res.step * (k + 1) ** 2)
    assert np.all(np.array(res.objective_history) - f_min <= bound + 1e-12)


def test_fista_linear_in_brightness():
    psf, win, _, b = oracle_instance()
    cfg = SolverConfig(prox="identity")
    x1 = fista(Image(b), psf, cfg, (6, 6), win).estimate.data
    x2 = fista(Image(2 * b), psf, cfg, (6, 6), win).estimate.data
    assert np.max(np.abs(x2 - 2 * x1)) <= 1e-8 * np.max(np.abs(x1))


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(11)
    psf = synthetic_psf("diffuser", 5, seed=1)
    op = build_operator(psf, (8, 8), (8, 8))
    x = rng.random((8, 8, 1))
    b = rng.random((8, 8, 1))
    g = least_squares_gradient(op, x, b)
    h = 1e-5
    for idx in rng.choice(64, 5, replace=False):
        r, c = divmod(int(idx), 8)
        xp, xm = x.copy(), x.copy()
        xp[r, c, 0] += h
        xm[r, c, 0] -= h
        fd = (least_squares_objective(op, xp, b) - least_squares_objective(op, xm, b)) / (2 * h)
        assert abs(fd - g[r, c, 0]) <= 1e-5 * abs(g[r, c, 0])


def test_nonnegative_iterates(rng):
    psf = synthetic_psf("lenslet", 7, seed=2)
    b = rng.random((12, 12))
    seen = []

    def cb(k, x):
        seen.append(x.min())

    res = fista(Image(b), psf, SolverConfig(max_iterations=30), callback=cb)
    assert len(seen) == 30 and min(seen) >= 0
    assert res.estimate.data.min() >= 0


def test_fista_early_stop_and_fixed_step(rng):
    psf, win, A, b = oracle_instance()
    res = fista(Image(b), psf, SolverConfig(max_iterations=500, tolerance=1e-6, prox="identity"), (6, 6), win)
    assert res.iterations_run < 500
    assert len(res.objective_history) == res.iterations_run
    with pytest.raises(SolverError):
        fista(Image(b), psf, SolverConfig(step_size=1e6, prox="identity"), (6, 6), win)


def test_fista_shape_mismatch(rng):
    with pytest.raises(ShapeError):
        fista(Image(rng.random((5, 5))), delta(), SolverConfig(), (6, 6), PixelGrid(0, 0, 4, 4))


def test_fista_deterministic(rng):
    psf = synthetic_psf("diffuser", 9, seed=3)
    b = Image(rng.random((20, 20, 3)))
    a1 = fista(b, psf, SolverConfig(max_iterations=20))
    a2 = fista(b, psf, SolverConfig(max_iterations=20))
    assert a1.estimate == a2.estimate
    assert a1.objective_history == a2.objective_history


def test_solver_config_json_round_trip():
    cfg = SolverConfig(max_iterations=17, step_size=0.5, prox="identity", tolerance=1e-3)
    assert SolverConfig.from_json(cfg.to_json()) == cfg
    assert json.loads(SolverConfig().to_json())["step_size"] == "auto_power_iteration"
    with pytest.raises(ValueError):
        SolverConfig(max_iterations=0)
    with pytest.raises(ValueError):
        SolverConfig(step_size=-1.0)


def test_history_csv(tmp_path):
    r = SolverResult(Image(np.zeros((1, 1))), [3.0, 2.5, 0.1 + 0.2], 3)
    r.write_history_csv(tmp_path / "h.csv")
    assert read_history_csv(tmp_path / "h.csv") == [3.0, 2.5, 0.1 + 0.2]
    assert (tmp_path / "h.csv").read_text().splitlines()[0] == "iteration,objective"


def test_reconstruct_pair(rng):
    psf_a = synthetic_psf("diffuser", 7, seed=1)
    b = Image(rng.random((14, 14)))
    cfg = SolverConfig(max_iterations=15)
    m = Measurement(b, camera_id="a")
    single = reconstruct_pair({"a": m}, {"a": psf_a}, cfg)
    assert single["a"].estimate == fista(m, psf_a, cfg).estimate
    pair = reconstruct_pair({"a": m, "b": m}, {"a": psf_a, "b": psf_a}, cfg, max_workers=2)
    assert pair["a"].estimate == pair["b"].estimate == single["a"].estimate
    with pytest.raises(KeyError, match="'c'"):
        reconstruct_pair({"a": m, "c": m}, {"a": psf_a}, cfg)
