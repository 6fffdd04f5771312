import numpy as np
import pytest

from scoreprior.core import RngStream
from scoreprior.forward import (
    InpaintingOp,
    MagnitudeRetrievalOp,
    MeasurementModel,
    inpaint_adjoint,
    inpaint_apply,
    loglik_grad_linear,
    loglik_grad_magnitude,
    magnitude_apply,
    simulate_measurement,
)


def fd_gradient(f, x, h):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_err(a, b):
    return np.abs(a - b).max() / np.abs(b).max()


def test_full_mask_is_identity():
    op = InpaintingOp(np.ones((5, 6)))
    x = np.random.default_rng(0).random((5, 6))
    assert np.array_equal(inpaint_apply(op, x), x) and np.array_equal(inpaint_adjoint(op, x), x)


def test_single_hidden_pixel():
    mask = np.ones((4, 4))
    mask[2, 1] = 0
    op = InpaintingOp(mask)
    x = np.random.default_rng(1).random((4, 4)) + 1
    ata = op.adjoint(op.apply(x))
    assert ata[2, 1] == 0 and np.all(ata[mask == 1] == x[mask == 1])


def test_center_crop_geometry():
    op = InpaintingOp.center_crop((64, 64), (32, 32))
    assert op.mask.sum() == 64 * 64 - 32 * 32
    assert op.mask[16:48, 16:48].sum() == 0 and op.mask[15, 15] == 1


def test_inpainting_adjoint_identity():
    rng = np.random.default_rng(2)
    for _ in range(20):
        op = InpaintingOp((rng.random((9, 7)) > 0.3) * 1.0 + np.eye(9, 7) * 0)
        if op.mask.sum() == 0:
            continue
        x, y = rng.standard_normal((2, 9, 7))
        assert abs(np.sum(op.apply(x) * y) - np.sum(x * op.adjoint(y))) < 1e-12


def test_mask_validation():
    with pytest.raises(ValueError):
        InpaintingOp(np.zeros((3, 3)))
    with pytest.raises(ValueError):
        InpaintingOp(np.full((3, 3), 0.5))
    with pytest.raises(ValueError):
        InpaintingOp(np.ones((3, 3))).apply(np.ones((4, 3)))


def test_linear_gradient_examples():
    rng = np.random.default_rng(3)
    x, y = rng.random((2, 6, 6))
    full = MeasurementModel(InpaintingOp(np.ones((6, 6))), 0.2)
    assert np.allclose(loglik_grad_linear(full, x, y), (y - x) / 0.2)
    crop = MeasurementModel(InpaintingOp.center_crop((6, 6), (2, 2)), 0.2)
    assert np.array_equal(crop.loglik_grad(x, crop.apply(x)), np.zeros((6, 6)))


def test_sign_convention_is_ascent_on_log_likelihood():
    m = MeasurementModel(InpaintingOp(np.ones((4, 4))), 0.5)
    x, y = np.zeros((4, 4)), np.ones((4, 4))
    step = x + 0.01 * m.loglik_grad(x, y)
    assert m.log_likelihood(step, y) > m.log_likelihood(x, y)


def test_linear_gradient_finite_differences():
    rng = np.random.default_rng(4)
    for _ in range(10):
        m = MeasurementModel(InpaintingOp((rng.random((8, 8)) > 0.4) * 1.0), 0.2)
        x, y = rng.random((2, 8, 8))
        fd = fd_gradient(lambda v: m.log_likelihood(v, y), x, 1e-5)
        assert rel_err(m.loglik_grad(x, y), fd) < 1e-6


def test_magnitude_unit_modulus_and_idempotent():
    op = MagnitudeRetrievalOp()
    rng = np.random.default_rng(5)
    for _ in range(5):
        x = rng.random((16, 16))
        ax = magnitude_apply(op, x)
        assert np.abs(np.abs(np.fft.fft2(ax)) - 1).max() < 1e-10
        assert np.abs(op.apply(ax) - ax).max() < 1e-8


def test_magnitude_of_delta_is_delta():
    d = np.zeros((8, 8))
    d[0, 0] = 1.0
    assert np.abs(MagnitudeRetrievalOp().apply(d) - d).max() < 1e-14


def test_magnitude_positive_scaling_invariance():
    op = MagnitudeRetrievalOp()
    x = np.random.default_rng(6).random((12, 12))
    for c in (0.01, 3.0, 250.0):
        assert np.abs(op.apply(c * x) - op.apply(x)).max() < 1e-10


def test_magnitude_gradient_finite_differences():
    rng = np.random.default_rng(7)
    op = MagnitudeRetrievalOp()
    for _ in range(10):
        x = rng.random((8, 8))
        assert np.abs(np.fft.fft2(x)).min() > 1e-3
        m = MeasurementModel(op, 1e-2)
        y = op.apply(rng.random((8, 8))) + 0.01 * rng.standard_normal((8, 8))
        fd = fd_gradient(lambda v: m.log_likelihood(v, y), x, 1e-6)
        assert rel_err(loglik_grad_magnitude(m, x, y), fd) < 1e-5


def test_magnitude_gradient_zero_at_exact_fit_and_along_x():
    rng = np.random.default_rng(8)
    m = MeasurementModel(MagnitudeRetrievalOp(), 1e-4)
    x = rng.random((8, 8))
    assert np.abs(m.loglik_grad(x, m.apply(x))).max() < 1e-8
    y = m.apply(rng.random((8, 8)))
    g = m.loglik_grad(x, y)
    # positive scaling leaves A fixed, so the directional derivative along x vanishes
    assert abs(np.sum(g * x)) < 1e-8 * np.linalg.norm(g) * np.linalg.norm(x)


def test_simulation():
    x = np.random.default_rng(9).random((16, 16))
    inp = MeasurementModel(InpaintingOp.center_crop((16, 16), (8, 8)), 0.2)
    y = simulate_measurement(inp, x, RngStream(1))
    assert np.all(y[inp.operator.mask == 0] == 0)
    resid = (y - x)[inp.operator.mask == 1]
    assert 0.1 < resid.var() < 0.3
    assert np.array_equal(simulate_measurement(inp, x, RngStream(1), noise_variance=0.0), inp.apply(x))
    mag = MeasurementModel(MagnitudeRetrievalOp(), 1e-4)
    assert np.array_equal(mag.simulate(x, RngStream(2), 0.0), mag.apply(x))
    with pytest.raises(ValueError):
        MeasurementModel(MagnitudeRetrievalOp(), 0.0)


def test_infinite_noise_means_flat_likelihood():
    m = MeasurementModel(InpaintingOp(np.ones((3, 3))), np.inf)
    assert np.array_equal(m.loglik_grad(np.ones((3, 3)), np.zeros((3, 3))), np.zeros((3, 3)))
