import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scoreprior.blobs import BlobsConfig, sample_batch
from scoreprior.cnn import (
    CheckpointError,
    CnnDenoiser,
    cnn_forward,
    cnn_loss_grad,
    cnn_loss_grad_clean_noisy,
    init_cnn,
    load_checkpoint,
    save_checkpoint,
    sgd_momentum_step,
)
from scoreprior.core import RngStream, conv2_same
from scoreprior.training import TrainConfig, ArchConfig, train_denoiser


def randomize(net, rng, scale=0.3):
    for p in net.parameters():
        p[...] = scale * rng.normal(p.shape)
    return net


def reference_forward(net, z):
    """Layer-by-layer forward built on the single-channel conv2_same."""
    h = [z]
    for l, (w, b) in enumerate(zip(net.weights, net.biases)):
        inp = h + [z] if net.input_skip else h
        out = []
        for o in range(w.shape[0]):
            acc = np.full(z.shape, b[o])
            for c, ch in enumerate(inp):
                acc = acc + conv2_same(ch, w[o, c])
            out.append(acc if l == net.depth - 1 else np.maximum(acc, 0.0))
        h = out
    return z + h[0]


def finite_difference_check(net, clean, noisy, step=1e-5):
    _, grads = cnn_loss_grad_clean_noisy(net, clean, noisy)
    worst = 0.0
    for p, g in zip(net.parameters(), grads):
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + step
            lp, _ = cnn_loss_grad_clean_noisy(net, clean, noisy)
            p[idx] = old - step
            lm, _ = cnn_loss_grad_clean_noisy(net, clean, noisy)
            p[idx] = old
            fd = (lp - lm) / (2 * step)
            denom = max(abs(fd), abs(g[idx]), 1e-7)
            worst = max(worst, abs(fd - g[idx]) / denom)
    return worst


def test_zero_parameters_give_identity():
    net = init_cnn(4, 3, RngStream(0))
    for p in net.parameters():
        p[...] = 0.0
    z = RngStream(1).normal((9, 7))
    assert np.array_equal(cnn_forward(net, z), z)


def test_fresh_network_is_identity():
    net = init_cnn(5, 4, RngStream(0))
    z = RngStream(2).normal((3, 10, 10))
    assert np.array_equal(cnn_forward(net, z), z)


@pytest.mark.parametrize("shape", [(64, 64), (37, 41)])
def test_fully_convolutional_shapes(shape):
    net = randomize(init_cnn(3, 4, RngStream(3)), RngStream(4))
    assert cnn_forward(net, np.zeros(shape)).shape == shape


@pytest.mark.parametrize("skip,k", [(True, 3), (False, 3), (True, 5)])
def test_forward_matches_conv2_reference(skip, k):
    net = randomize(init_cnn(3, 3, RngStream(5), input_skip=skip, kernel_size=k), RngStream(6))
    z = RngStream(7).normal((11, 13))
    assert np.abs(cnn_forward(net, z) - reference_forward(net, z)).max() < 1e-12


def test_batch_forward_matches_single():
    net = randomize(init_cnn(3, 4, RngStream(8)), RngStream(9))
    z = RngStream(10).normal((4, 12, 12))
    batch = cnn_forward(net, z)
    for i in range(4):
        assert np.allclose(batch[i], cnn_forward(net, z[i]), rtol=0, atol=1e-12)


def test_identity_network_mse_equals_noise_variance():
    net = init_cnn(10, 32, RngStream(11))
    clean = sample_batch(BlobsConfig(), RngStream(12), 25)
    noisy = clean + np.sqrt(0.1) * RngStream(13).normal(clean.shape)
    err = np.mean((cnn_forward(net, noisy) - clean) ** 2)
    assert abs(err - 0.1) < 0.005


def test_gradient_two_layer_two_channel():
    rng = RngStream(14)
    net = randomize(init_cnn(2, 2, rng), rng)
    clean = (rng.uniform((3, 8, 8)) > 0.5) * 1.0
    noisy = clean + 0.3 * rng.normal(clean.shape)
    assert finite_difference_check(net, clean, noisy) < 1e-4


@settings(max_examples=5, deadline=None)
@given(depth=st.integers(1, 3), channels=st.integers(1, 3), skip=st.booleans(), seed=st.integers(0, 2**31))
def test_gradient_random_architectures(depth, channels, skip, seed):
    rng = RngStream(seed)
    net = randomize(init_cnn(depth, channels, rng, input_skip=skip), rng)
    clean = (rng.uniform((2, 6, 5)) > 0.5) * 1.0
    noisy = clean + 0.3 * rng.normal(clean.shape)
    assert finite_difference_check(net, clean, noisy) < 1e-4


def test_final_bias_gradient_by_hand():
    net = init_cnn(3, 2, RngStream(15))
    for p in net.parameters():
        p[...] = 0.0
    clean = np.array([0.0, 1.0, 1.0, 0.0]).reshape(4, 1, 1)
    noisy = np.array([0.3, 0.6, 1.5, -0.2]).reshape(4, 1, 1)
    loss, grads = cnn_loss_grad_clean_noisy(net, clean, noisy)
    resid = noisy - clean
    assert loss == pytest.approx(np.mean(resid**2))
    assert grads[-1][0] == pytest.approx(2 * resid.mean())
    # only the final layer sees a non-zero input (the skip channel)
    assert all(np.all(g == 0) for g in grads[:-2])
    assert np.allclose(grads[-2][0, 2, 1, 1], 2 * np.mean(resid * noisy))


def test_loss_nonnegative_and_noise_drawn_from_stream():
    net = randomize(init_cnn(2, 2, RngStream(16)), RngStream(17))
    clean = np.zeros((2, 5, 5))
    l1, _ = cnn_loss_grad(net, clean, RngStream(18), 0.1)
    l2, _ = cnn_loss_grad(net, clean, RngStream(18), 0.1)
    assert l1 >= 0 and l1 == l2
    with pytest.raises(ValueError):
        cnn_loss_grad(net, clean, RngStream(18), 0.0)


def test_sgd_momentum_step():
    p, g, v = [np.array([1.0, 2.0])], [np.array([0.5, -1.0])], [np.array([0.1, 0.1])]
    p1, v1 = sgd_momentum_step(p, g, v, 0.1, 0.0)
    assert np.allclose(p1[0], p[0] - 0.1 * g[0])
    p2, v2 = sgd_momentum_step(p, [np.zeros(2)], v, 0.1, 0.9)
    assert np.allclose(v2[0], 0.09) and np.allclose(p2[0], p[0] + 0.09)


def test_momentum_converges_on_quadratic_bowl():
    p, v = [np.array(1.0)], [np.array(0.0)]
    for step in range(500):
        p, v = sgd_momentum_step(p, [p[0]], v, 0.1, 0.9)
        if abs(p[0]) < 1e-6 and abs(v[0]) < 1e-6:
            break
    assert abs(p[0]) < 1e-6


def test_checkpoint_roundtrip(tmp_path):
    net = randomize(init_cnn(4, 3, RngStream(19), input_skip=True, noise_variance=0.01), RngStream(20))
    path = tmp_path / "net.scnn"
    save_checkpoint(net, path)
    back = load_checkpoint(path)
    assert back.input_skip and back.noise_variance == 0.01 and back.depth == 4 and back.channels == 3
    for a, b in zip(net.parameters(), back.parameters()):
        assert a.tobytes() == b.tobytes()
    blob = path.read_bytes()
    (tmp_path / "short").write_bytes(blob[:-8])
    with pytest.raises(CheckpointError, match="payload"):
        load_checkpoint(tmp_path / "short")
    (tmp_path / "magic").write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "magic")


def test_inconsistent_params_rejected():
    w = [np.zeros((2, 2, 3, 3)), np.zeros((1, 2, 3, 3))]  # second layer should take 3 channels
    with pytest.raises(ValueError):
        CnnDenoiser(w, [np.zeros(2), np.zeros(1)], input_skip=True)


def test_zero_learning_rate_leaves_network_unchanged():
    cfg = TrainConfig(learning_rate=0.0, max_steps=4, eval_every=2, batch_size=2, validation_size=4)
    blobs = BlobsConfig(height=12, width=12)
    net, rows = train_denoiser(cfg, ArchConfig(depth=3, channels=4), blobs)
    vals = [r.val_loss for r in rows]
    assert max(vals) == min(vals)
    assert all(np.all(w == 0) for w in net.weights[-1:])


def test_short_training_reduces_validation_loss():
    cfg = TrainConfig(max_steps=60, eval_every=20, batch_size=8, validation_size=8, learning_rate=0.03)
    net, rows = train_denoiser(cfg, ArchConfig(depth=4, channels=8), BlobsConfig(height=24, width=24))
    best = [r.best_val_loss for r in rows]
    assert all(b1 >= b2 for b1, b2 in zip(best, best[1:]))
    assert best[-1] < best[0]
