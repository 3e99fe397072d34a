import numpy as np
import pytest

from peekaboo.grids import ShapeError, binarize
from peekaboo.losses import (
    LossConfig,
    bce,
    loss_aux,
    loss_pcl,
    total_loss,
)


def _fd_grad(fn, x, h=1e-6):
    g = np.zeros_like(x, dtype=np.float64)
    for idx in np.ndindex(*x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (fn(xp) - fn(xm)) / (2 * h)
    return g


def test_bce_known_values():
    # uniform 0.5 prediction vs any binary target -> ln 2
    p = np.full((4, 4), 0.5)
    t = np.zeros((4, 4))
    t[0, :] = 1.0
    v, _ = bce(p, t)
    assert v == pytest.approx(np.log(2.0), abs=1e-12)

    # pred 0.9 / target 1 everywhere -> -ln 0.9
    v, _ = bce(np.full((3, 3), 0.9), np.ones((3, 3)))
    assert v == pytest.approx(-np.log(0.9), abs=1e-12)


def test_bce_perfect_prediction_clamped():
    v, g = bce(np.ones((5, 5)), np.ones((5, 5)))
    assert 0.0 <= v <= 1.5e-7
    assert np.all(np.isfinite(g))


def test_bce_gradient_formula_and_fd():
    rng = np.random.default_rng(0)
    p = rng.uniform(0.05, 0.95, size=(3, 4))
    t = (rng.uniform(size=(3, 4)) > 0.5).astype(np.float64)
    _, g = bce(p, t)
    expected = (p - t) / (p * (1 - p)) / p.size
    np.testing.assert_allclose(g, expected, atol=1e-12)
    fd = _fd_grad(lambda x: bce(x, t)[0], p)
    np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-10)


def test_bce_shape_mismatch():
    with pytest.raises(ShapeError):
        bce(np.zeros((2, 2)), np.zeros((2, 3)))


def test_pcl_soft_value_and_grads():
    rng = np.random.default_rng(1)
    a = rng.uniform(0, 1, size=(4, 4))
    b = rng.uniform(0, 1, size=(4, 4))
    z = np.zeros((4, 4))
    v, lit, ga, gb = loss_pcl(a, b, z, z, mode="soft")
    assert v == pytest.approx(np.mean((a - b) ** 2), abs=1e-12)
    np.testing.assert_allclose(ga, 2 * (a - b) / a.size, atol=1e-12)
    np.testing.assert_allclose(gb, -ga, atol=1e-12)
    fd = _fd_grad(lambda x: loss_pcl(x, b, z, z, "soft")[0], a)
    np.testing.assert_allclose(ga, fd, rtol=1e-6, atol=1e-10)
    # identical branches -> exactly zero
    v0, _, g0, _ = loss_pcl(a, a.copy(), z, z, mode="soft")
    assert v0 == 0.0 and np.all(g0 == 0.0)


def test_pcl_literal_zero_gradient():
    rng = np.random.default_rng(2)
    a = rng.uniform(0, 1, size=(4, 4))
    b = rng.uniform(0, 1, size=(4, 4))
    zp = (rng.uniform(size=(4, 4)) > 0.5).astype(np.float64)
    zpm = (rng.uniform(size=(4, 4)) > 0.5).astype(np.float64)
    v, lit, ga, gb = loss_pcl(a, b, zp, zpm, mode="literal")
    assert v == lit == pytest.approx(np.mean((zp - zpm) ** 2), abs=1e-12)
    assert np.all(ga == 0.0) and np.all(gb == 0.0)


def test_aux_pushes_toward_own_binarization():
    rng = np.random.default_rng(3)
    p = rng.uniform(0.05, 0.95, size=(6, 6))
    v, g = loss_aux(p)
    t = binarize(p, 0.5)
    vb, gb = bce(p, t)
    assert v == vb
    np.testing.assert_array_equal(g, gb)
    # gradient sign drives confident predictions more confident
    assert np.all(g[p > 0.5] < 0)
    assert np.all(g[p < 0.5] > 0)


def test_total_loss_weighted_sum_example():
    # alpha=1.5: l_seg=0.4, l_mfp=0.2, l_pcl=0.1, l_aux=0 -> 0.9
    cfg = LossConfig(alpha=1.5, aux_weight=4.0)
    report_like = 1.5 * 0.4 + 0.2 + 0.1 + 4.0 * 0.0
    assert report_like == pytest.approx(0.9)

    # and through the real path with crafted inputs
    rng = np.random.default_rng(4)
    a = rng.uniform(0.1, 0.9, size=(5, 5))
    b = rng.uniform(0.1, 0.9, size=(5, 5))
    zp = (rng.uniform(size=(5, 5)) > 0.5).astype(np.float64)
    zpm = (rng.uniform(size=(5, 5)) > 0.5).astype(np.float64)
    rep = total_loss(a, b, zp, zpm, cfg)
    expected = 1.5 * rep.l_seg + rep.l_mfp + rep.l_pcl + 4.0 * rep.l_aux
    assert rep.l_total == pytest.approx(expected, rel=1e-12)


def test_total_loss_disabled_terms_contribute_zero():
    rng = np.random.default_rng(5)
    a = rng.uniform(0.1, 0.9, size=(4, 4))
    b = rng.uniform(0.1, 0.9, size=(4, 4))
    zp = np.ones((4, 4))
    zpm = np.zeros((4, 4))
    cfg = LossConfig(enable_mfp=False, enable_pcl=False, aux_weight=0.0)
    rep = total_loss(a, b, zp, zpm, cfg)
    assert rep.l_mfp == 0.0 and rep.l_pcl == 0.0 and rep.l_aux == 0.0
    assert rep.l_total == pytest.approx(cfg.alpha * rep.l_seg, rel=1e-12)
    assert np.all(rep.grad_m_pm == 0.0)


def test_total_loss_gradients_match_fd():
    rng = np.random.default_rng(6)
    a = rng.uniform(0.1, 0.9, size=(3, 3))
    b = rng.uniform(0.1, 0.9, size=(3, 3))
    zp = (rng.uniform(size=(3, 3)) > 0.5).astype(np.float64)
    zpm = (rng.uniform(size=(3, 3)) > 0.5).astype(np.float64)
    for cfg in (
        LossConfig(),
        LossConfig(enable_mfp=False),
        LossConfig(enable_pcl=False),
        LossConfig(pcl_mode="literal"),
        LossConfig(alpha=0.7, aux_weight=2.0),
    ):
        rep = total_loss(a, b, zp, zpm, cfg)
        fd_a = _fd_grad(lambda x: total_loss(x, b, zp, zpm, cfg).l_total, a)
        fd_b = _fd_grad(lambda x: total_loss(a, x, zp, zpm, cfg).l_total, b)
        np.testing.assert_allclose(rep.grad_m_p, fd_a, rtol=1e-5, atol=1e-9)
        np.testing.assert_allclose(rep.grad_m_pm, fd_b, rtol=1e-5, atol=1e-9)


def test_no_gradient_reaches_targets():
    # parameter-side gradients must be computed with targets held constant:
    # recomputing with a modified target changes grads only through the
    # explicit (pred - target) dependence, and frozen copies give identical
    # results to the originals
    rng = np.random.default_rng(7)
    a = rng.uniform(0.1, 0.9, size=(4, 4))
    b = rng.uniform(0.1, 0.9, size=(4, 4))
    zp = (rng.uniform(size=(4, 4)) > 0.5).astype(np.float64)
    zpm = (rng.uniform(size=(4, 4)) > 0.5).astype(np.float64)
    rep1 = total_loss(a, b, zp, zpm)
    rep2 = total_loss(a, b, zp.copy(), zpm.copy())
    np.testing.assert_array_equal(rep1.grad_m_p, rep2.grad_m_p)
    np.testing.assert_array_equal(rep1.grad_m_pm, rep2.grad_m_pm)


def test_nonfinite_loss_raises():
    a = np.full((2, 2), np.nan)
    b = np.full((2, 2), 0.5)
    z = np.zeros((2, 2))
    with pytest.raises(FloatingPointError):
        total_loss(a, b, z, z)


def test_binarize_strict_threshold():
    m = np.array([[0.49, 0.5], [0.51, 1.0]])
    np.testing.assert_array_equal(binarize(m, 0.5), [[0.0, 0.0], [1.0, 1.0]])
    # idempotent
    np.testing.assert_array_equal(binarize(binarize(m)), binarize(m))
    # all-0.5 input -> all zeros
    assert np.all(binarize(np.full((3, 3), 0.5)) == 0.0)
