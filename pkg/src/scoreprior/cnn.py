"""Residual convolutional denoiser, forward and backward passes in numpy.

The network computes ``r(z) = z + CNN(z)``. Every layer is a zero-padded
"same" cross-correlation plus bias; hidden layers use ReLU, the last layer is
linear and produces one channel. With ``input_skip`` the raw input is
concatenated as an extra channel onto the input of every layer.

Activations are held in a zero-ringed, channel-last, flattened layout of
shape ``(B * (H + 2p) * (W + 2p), C)``. A k x k correlation then becomes k*k
matrix products of contiguous row-slices, one per kernel tap.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .core import RngStream

CHECKPOINT_MAGIC = b"SCNN"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sIIIIBd")


class CheckpointError(ValueError):
    pass


@dataclass
class CnnDenoiser:
    """Parameters of the residual CNN, plus the noise variance it targets.

    ``weights[l]`` has shape (out_channels, in_channels, k, k).
    """

    weights: list
    biases: list
    input_skip: bool = True
    noise_variance: float = 0.1

    def __post_init__(self):
        self.validate()

    @property
    def depth(self) -> int:
        return len(self.weights)

    @property
    def channels(self) -> int:
        return self.weights[0].shape[0] if self.depth > 1 else 1

    @property
    def kernel_size(self) -> int:
        return self.weights[0].shape[-1]

    def validate(self):
        if len(self.weights) < 1 or len(self.weights) != len(self.biases):
            raise ValueError("need one bias vector per layer and at least one layer")
        skip = 1 if self.input_skip else 0
        k = self.weights[0].shape[-1]
        cin = 1 + skip
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 4 or w.shape[2] != k or w.shape[3] != k or k % 2 == 0:
                raise ValueError(f"layer {l}: bad kernel shape {w.shape}")
            if w.shape[1] != cin:
                raise ValueError(f"layer {l}: expects {cin} input channels, weights have {w.shape[1]}")
            if b.shape != (w.shape[0],):
                raise ValueError(f"layer {l}: bias shape {b.shape} does not match {w.shape[0]} outputs")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {l}: non-finite parameters")
            cin = w.shape[0] + skip
        if self.weights[-1].shape[0] != 1:
            raise ValueError("last layer must produce a single channel")

    def parameters(self) -> list:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def with_parameters(self, params) -> "CnnDenoiser":
        params = list(params)
        return CnnDenoiser(params[0::2], params[1::2], self.input_skip, self.noise_variance)

    def copy(self) -> "CnnDenoiser":
        return self.with_parameters([p.copy() for p in self.parameters()])

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def denoise(self, z) -> np.ndarray:
        return cnn_forward(self, z)


def init_cnn(depth: int, channels: int, rng: RngStream, input_skip: bool = True,
             kernel_size: int = 3, noise_variance: float = 0.1) -> CnnDenoiser:
    """He-scaled Gaussian weights, zero biases, zero final layer.

    The zero final layer makes the freshly built network the identity map.
    """
    if depth < 1 or channels < 1:
        raise ValueError("depth and channels must be positive")
    if kernel_size % 2 == 0:
        raise ValueError("kernel_size must be odd")
    skip = 1 if input_skip else 0
    weights, biases = [], []
    cin = 1 + skip
    for l in range(depth):
        cout = 1 if l == depth - 1 else channels
        if l == depth - 1:
            w = np.zeros((cout, cin, kernel_size, kernel_size))
        else:
            std = np.sqrt(2.0 / (cin * kernel_size**2))
            w = std * rng.normal((cout, cin, kernel_size, kernel_size))
        weights.append(w)
        biases.append(np.zeros(cout))
        cin = cout + skip
    return CnnDenoiser(weights, biases, input_skip, noise_variance)


class _Layout:
    """Flattened, zero-ringed geometry for a batch of H x W images."""

    def __init__(self, batch: int, height: int, width: int, pad: int):
        self.B, self.H, self.W, self.p = batch, height, width, pad
        self.Hp, self.Wp = height + 2 * pad, width + 2 * pad
        self.L = batch * self.Hp * self.Wp
        self.s = pad * self.Wp + pad
        k = 2 * pad + 1
        self.offsets = [((a, b), (a - pad) * self.Wp + (b - pad)) for a in range(k) for b in range(k)]
        ring = np.ones((batch, self.Hp, self.Wp), dtype=bool)
        ring[:, pad:pad + height, pad:pad + width] = False
        self.ring = np.flatnonzero(ring)

    def embed(self, images: np.ndarray) -> np.ndarray:
        out = np.zeros((self.B, self.Hp, self.Wp))
        out[:, self.p:self.p + self.H, self.p:self.p + self.W] = images
        return out.reshape(-1)

    def extract(self, flat: np.ndarray) -> np.ndarray:
        v = flat.reshape(self.B, self.Hp, self.Wp)
        return v[:, self.p:self.p + self.H, self.p:self.p + self.W]


def _correlate(lay: _Layout, X: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    s, L = lay.s, lay.L
    out = np.empty((L, w.shape[0]))
    out[:] = b
    taps = np.ascontiguousarray(w.transpose(2, 3, 1, 0))  # (k, k, cin, cout)
    for (i, j), o in lay.offsets:
        out[s:L - s] += X[s + o:L - s + o] @ taps[i, j]
    out[lay.ring] = 0.0
    return out


def _as_batch(z) -> tuple[np.ndarray, bool]:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 2:
        return z[None], True
    if z.ndim == 3:
        return z, False
    raise ValueError(f"expected (H, W) or (B, H, W) input, got shape {z.shape}")


def _forward(net: CnnDenoiser, zb: np.ndarray, keep: bool):
    lay = _Layout(*zb.shape, net.kernel_size // 2)
    zf = lay.embed(zb)
    skip = net.input_skip
    X = np.stack([zf, zf], axis=1) if skip else zf[:, None].copy()
    inputs = []
    out = None
    for l, (w, b) in enumerate(zip(net.weights, net.biases)):
        if keep:
            inputs.append(X)
        a = _correlate(lay, X, w, b)
        if l == net.depth - 1:
            out = a[:, 0]
            break
        c = a.shape[1]
        X = np.empty((lay.L, c + 1)) if skip else np.empty((lay.L, c))
        np.maximum(a, 0.0, out=X[:, :c])
        if skip:
            X[:, c] = zf
    r = zb + lay.extract(out)
    return r, lay, inputs


def cnn_forward(net: CnnDenoiser, z) -> np.ndarray:
    """Apply the residual denoiser to one image (H, W) or a batch (B, H, W)."""
    zb, single = _as_batch(z)
    r, _, _ = _forward(net, zb, keep=False)
    return r[0] if single else r


def cnn_loss_grad_clean_noisy(net: CnnDenoiser, clean: np.ndarray, noisy: np.ndarray):
    """MSE loss of ``r(noisy)`` against ``clean`` and its exact parameter gradient.

    Returns ``(loss, grads)`` with ``grads`` ordered like ``net.parameters()``.
    """
    clean, _ = _as_batch(clean)
    noisy, _ = _as_batch(noisy)
    if clean.shape != noisy.shape:
        raise ValueError("clean and noisy batches differ in shape")
    r, lay, inputs = _forward(net, noisy, keep=True)
    resid = r - clean
    loss = float(np.mean(resid**2))
    s, L = lay.s, lay.L
    dA = lay.embed(2.0 * resid / resid.size)[:, None]
    grads = [None] * (2 * net.depth)
    for l in range(net.depth - 1, -1, -1):
        X, w = inputs[l], net.weights[l]
        gw = np.empty_like(w)
        dAi = dA[s:L - s]
        for (i, j), o in lay.offsets:
            gw[:, :, i, j] = dAi.T @ X[s + o:L - s + o]
        grads[2 * l] = gw
        grads[2 * l + 1] = dA.sum(axis=0)
        if l == 0:
            break
        c = net.weights[l - 1].shape[0]
        taps = np.ascontiguousarray(w[:, :c].transpose(2, 3, 0, 1))  # (k, k, cout, c)
        dX = np.zeros((L, c))
        for (i, j), o in lay.offsets:
            dX[s + o:L - s + o] += dAi @ taps[i, j]
        dX[lay.ring] = 0.0
        dX *= X[:, :c] > 0.0
        dA = dX
    return loss, grads


def cnn_loss_grad(net: CnnDenoiser, clean_batch, rng: RngStream, noise_variance: float):
    """Corrupt ``clean_batch`` with N(0, noise_variance) noise, then score the denoiser."""
    if noise_variance <= 0:
        raise ValueError("noise_variance must be positive")
    clean, _ = _as_batch(clean_batch)
    if clean.shape[0] < 1:
        raise ValueError("empty batch")
    noisy = clean + np.sqrt(noise_variance) * rng.normal(clean.shape)
    return cnn_loss_grad_clean_noisy(net, clean, noisy)


def sgd_momentum_step(params, grads, velocity, lr: float, momentum: float):
    """``v' = momentum * v - lr * g``, ``p' = p + v'``. Returns new lists."""
    new_v = [momentum * v - lr * g for v, g in zip(velocity, grads)]
    new_p = [p + v for p, v in zip(params, new_v)]
    return new_p, new_v


def save_checkpoint(net: CnnDenoiser, path) -> None:
    header = _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, net.depth, net.channels,
                          net.kernel_size, int(net.input_skip), net.noise_variance)
    payload = b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in net.parameters())
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload)


def load_checkpoint(path) -> CnnDenoiser:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < _HEADER.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, depth, channels, k, skip, sigma2 = _HEADER.unpack_from(blob)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a denoiser checkpoint (magic {magic!r})")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    shapes = []
    extra = 1 if skip else 0
    cin = 1 + extra
    for l in range(depth):
        cout = 1 if l == depth - 1 else channels
        shapes += [(cout, cin, k, k), (cout,)]
        cin = cout + extra
    need = sum(int(np.prod(s)) for s in shapes) * 8
    body = blob[_HEADER.size:]
    if len(body) != need:
        raise CheckpointError(f"{path}: payload is {len(body)} bytes, header implies {need}")
    flat = np.frombuffer(body, dtype="<f8").astype(np.float64)
    params, pos = [], 0
    for s in shapes:
        n = int(np.prod(s))
        params.append(flat[pos:pos + n].reshape(s).copy())
        pos += n
    return CnnDenoiser(params[0::2], params[1::2], bool(skip), sigma2)
