import numpy as np
import pytest

from peekaboo.bilateral import (
    BilateralGrid,
    SolverConfig,
    bilateral_solve,
    pcg,
    solve,
    zeta,
)
from peekaboo.grids import binarize


def _random_reference(rng, h, w):
    # piecewise-constant colour regions plus mild noise
    img = np.zeros((h, w, 3), dtype=np.float32)
    img[:, : w // 2] = rng.uniform(0, 80, size=3).astype(np.float32)
    img[:, w // 2 :] = rng.uniform(160, 255, size=3).astype(np.float32)
    img += rng.normal(0, 2.0, size=img.shape).astype(np.float32)
    return img


def _dense_system(grid, confidence, target, lam):
    # independent assembly of the bilateral-space system as dense matrices
    n, m = grid.bistochastize()
    B = grid.blur_matrix().toarray()
    Dn = np.diag(n)
    Dm = np.diag(m)
    S = grid.S.toarray()
    c = confidence.ravel().astype(np.float64)
    t = target.ravel().astype(np.float64)
    A = lam * (Dm - Dn @ B @ Dn) + np.diag(S @ c)
    b = S @ (c * t)
    return A, b


def test_pcg_agrees_with_dense_solve_on_random_spd():
    rng = np.random.default_rng(0)
    for _ in range(5):
        k = int(rng.integers(5, 40))
        mroot = rng.normal(size=(k, k))
        A = mroot @ mroot.T + np.eye(k) * k
        b = rng.normal(size=k)
        x_dense = np.linalg.solve(A, b)
        x, ok, iters, res = pcg(lambda v: A @ v, b, np.diag(A), tol=1e-10, max_iter=10 * k)
        assert ok
        assert np.abs(x - x_dense).max() < 1e-7


def test_grid_structure_hard_assignment():
    rng = np.random.default_rng(1)
    ref = _random_reference(rng, 16, 16)
    grid = BilateralGrid(ref, 4.0, 16.0, 8.0)
    # each pixel belongs to exactly one vertex
    colsum = np.asarray(grid.S.sum(axis=0)).ravel()
    np.testing.assert_array_equal(colsum, np.ones(grid.npixels))
    # every vertex carries at least one pixel
    mass = grid.splat(np.ones(grid.npixels))
    assert mass.min() >= 1.0
    # blur is symmetric
    B = grid.blur_matrix()
    assert (B - B.T).nnz == 0
    # blur of ones equals 2*ndims plus neighbour counts, all positive
    assert np.all(grid.blur(np.ones(grid.nvertices)) >= 10.0)


def test_bistochastization_normalized_blur_preserves_ones():
    rng = np.random.default_rng(2)
    ref = _random_reference(rng, 24, 24)
    grid = BilateralGrid(ref, 8.0, 16.0, 8.0)
    ones = np.ones(grid.nvertices)
    out = grid.normalized_blur(ones)
    assert np.abs(out - 1.0).max() < 1e-3


def test_smoothness_constant_null_space():
    rng = np.random.default_rng(3)
    ref = _random_reference(rng, 12, 20)
    grid = BilateralGrid(ref, 6.0, 12.0, 6.0)
    n, m = grid.bistochastize()
    ones = np.ones(grid.nvertices)
    a_smooth_ones = m * ones - n * grid.blur(n * ones)
    assert np.abs(a_smooth_ones).max() < 1e-9


def test_pcg_matches_dense_oracle_on_8x8():
    # 10 random 8x8 images/targets, bilateral-space agreement <= 1e-5 max-abs
    rng = np.random.default_rng(4)
    cfg = SolverConfig(sigma_spatial=3.0, sigma_luma=24.0, sigma_chroma=12.0, lam=4.0,
                       pcg_tol=1e-10, pcg_max_iter=2000)
    for trial in range(10):
        ref = rng.uniform(0, 255, size=(8, 8, 3)).astype(np.float32)
        target = rng.uniform(0, 1, size=(8, 8)).astype(np.float32)
        conf = rng.uniform(0.2, 1.0, size=(8, 8)).astype(np.float32)
        grid = BilateralGrid(ref, cfg.sigma_spatial, cfg.sigma_luma, cfg.sigma_chroma)
        A, b = _dense_system(grid, conf, target, cfg.lam)
        y_dense = np.linalg.solve(A, b)
        oracle_pixels = np.clip(grid.slice(y_dense).reshape(8, 8), 0.0, 1.0)
        out, converged = solve(grid, target, conf, cfg)
        assert converged
        assert np.abs(out - oracle_pixels).max() <= 1e-5


def test_converged_solution_residual_below_tol():
    rng = np.random.default_rng(5)
    ref = rng.uniform(0, 255, size=(8, 8, 3)).astype(np.float32)
    target = (rng.uniform(size=(8, 8)) > 0.5).astype(np.float32)
    conf = np.ones((8, 8), dtype=np.float32)
    cfg = SolverConfig(sigma_spatial=4.0, lam=10.0, pcg_tol=1e-6, pcg_max_iter=2000)
    grid = BilateralGrid(ref, cfg.sigma_spatial, cfg.sigma_luma, cfg.sigma_chroma)
    n, m = grid.bistochastize()
    sc = grid.splat(conf.ravel().astype(np.float64))
    sct = grid.splat(conf.ravel().astype(np.float64) * target.ravel())
    out, converged = solve(grid, target, conf, cfg)
    assert converged
    # recover bilateral-space solution from pixels (hard splat: slice is exact)
    y = grid.splat(out.ravel().astype(np.float64)) / np.maximum(sc, 1e-12)
    resid = cfg.lam * (m * y - n * grid.blur(n * y)) + sc * y - sct
    assert np.linalg.norm(resid) <= 5e-6  # small slack for the [0,1] clamp + float32 cast


def test_constant_preservation():
    rng = np.random.default_rng(6)
    for c0 in (0.0, 0.37, 1.0):
        ref = rng.uniform(0, 255, size=(16, 16, 3)).astype(np.float32)
        target = np.full((16, 16), c0, dtype=np.float32)
        out, _ = bilateral_solve(ref, target, cfg=SolverConfig())
        assert np.abs(out - c0).max() < 1e-5


def test_lambda_zero_identity_with_injective_splat():
    # sub-pixel sigma_spatial: every pixel owns its own vertex, so the
    # data-term-only solve must return the target wherever confidence > 0
    rng = np.random.default_rng(7)
    ref = rng.uniform(0, 255, size=(10, 10, 3)).astype(np.float32)
    target = rng.uniform(0, 1, size=(10, 10)).astype(np.float32)
    conf = np.ones((10, 10), dtype=np.float32)
    cfg = SolverConfig(sigma_spatial=0.9, sigma_luma=16.0, sigma_chroma=8.0, lam=0.0,
                       pcg_tol=1e-12, pcg_max_iter=500)
    out, converged = bilateral_solve(ref, target, conf, cfg)
    assert converged
    assert np.abs(out - target).max() < 1e-6


def test_lambda_zero_vertex_average_semantics():
    # with a coarse grid the data term yields per-vertex confidence-weighted means
    rng = np.random.default_rng(8)
    ref = np.full((8, 8, 3), 100.0, dtype=np.float32)  # single colour: spatial bins only
    target = rng.uniform(0, 1, size=(8, 8)).astype(np.float32)
    conf = rng.uniform(0.1, 1.0, size=(8, 8)).astype(np.float32)
    cfg = SolverConfig(sigma_spatial=100.0, lam=0.0, pcg_tol=1e-12, pcg_max_iter=500)
    grid = BilateralGrid(ref, cfg.sigma_spatial, cfg.sigma_luma, cfg.sigma_chroma)
    assert grid.nvertices == 1
    out, _ = solve(grid, target, conf, cfg)
    expected = float(np.sum(conf * target) / np.sum(conf))
    assert np.abs(out - expected).max() < 1e-6


def test_output_clamped_to_unit_interval():
    rng = np.random.default_rng(9)
    ref = _random_reference(rng, 16, 16)
    target = (rng.uniform(size=(16, 16)) > 0.3).astype(np.float32)
    out, _ = bilateral_solve(ref, target)
    assert out.min() >= 0.0 and out.max() <= 1.0
    assert out.dtype == np.float32


def test_nonconvergence_flag_and_usable_result():
    rng = np.random.default_rng(10)
    ref = _random_reference(rng, 16, 16)
    target = (rng.uniform(size=(16, 16)) > 0.5).astype(np.float32)
    cfg = SolverConfig(pcg_tol=1e-14, pcg_max_iter=1)
    out, converged = bilateral_solve(ref, target, cfg=cfg)
    assert converged is False
    assert np.all(np.isfinite(out))
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_all_zero_confidence_rejected():
    rng = np.random.default_rng(11)
    ref = _random_reference(rng, 8, 8)
    with pytest.raises(ValueError, match="confidence"):
        bilateral_solve(ref, np.ones((8, 8), dtype=np.float32), np.zeros((8, 8), dtype=np.float32))


def test_zeta_output_binary_and_idempotent():
    # a mask correlated with image structure, as the pipeline produces
    rng = np.random.default_rng(12)
    ref = np.full((32, 32, 3), (30.0, 35.0, 40.0), dtype=np.float32)
    ref[8:24, 10:28] = (180.0, 160.0, 70.0)
    ref += rng.normal(0, 2.0, size=ref.shape).astype(np.float32)
    gt = np.zeros((32, 32), dtype=np.float32)
    gt[8:24, 10:28] = 1.0
    # fuzzy, noisy version of the region
    from scipy.ndimage import gaussian_filter

    soft = gaussian_filter(gt, sigma=2.0)
    soft = np.clip(soft + rng.normal(0, 0.08, size=soft.shape), 0, 1).astype(np.float32)
    cfg = SolverConfig(sigma_spatial=8.0)
    z1 = zeta(soft, ref, cfg)
    assert set(np.unique(z1)).issubset({0.0, 1.0})
    z2 = zeta(z1, ref, cfg)
    changed = float(np.mean(z1 != z2))
    assert changed <= 0.05


def test_zeta_snaps_mask_to_reference_edges():
    # a fuzzy boundary 2px off the true colour edge must move onto the edge
    h, w = 48, 64
    edge = 32
    ref = np.zeros((h, w, 3), dtype=np.float32)
    ref[:, :edge] = (40.0, 45.0, 50.0)
    ref[:, edge:] = (200.0, 180.0, 60.0)
    rng = np.random.default_rng(13)
    ref += rng.normal(0, 2.0, size=ref.shape).astype(np.float32)

    true_mask = np.zeros((h, w), dtype=np.float32)
    true_mask[:, edge:] = 1.0

    xs = np.arange(w, dtype=np.float64)
    soft = 1.0 / (1.0 + np.exp(-(xs - (edge - 2.0)) / 3.0))  # 0.5-crossing 2px early
    soft = np.tile(soft, (h, 1)).astype(np.float32)
    soft += rng.normal(0, 0.05, size=soft.shape).astype(np.float32)
    soft = np.clip(soft, 0, 1)

    def iou(a, b):
        inter = np.sum((a == 1) & (b == 1))
        union = np.sum((a == 1) | (b == 1))
        return inter / union

    before = iou(binarize(soft, 0.5), true_mask)
    refined = zeta(soft, ref, SolverConfig(sigma_spatial=16.0))
    after = iou(refined, true_mask)
    assert after > before
    assert after > 0.97
