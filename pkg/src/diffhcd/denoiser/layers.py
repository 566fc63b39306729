"""Forward/backward pairs for the layers of the convolutional denoiser.

Activations are NHWC. Every ``*_forward`` returns ``(out, cache)`` and the
matching ``*_backward`` takes ``(dout, cache)``.
"""

import numpy as np


def reflect_pad1(x):
    return np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)), mode="reflect")


def reflect_pad1_backward(dxp):
    """Fold the gradient of a 1-pixel mirror pad back onto the interior."""
    dx = dxp[:, 1:-1].copy()
    dx[:, 1] += dxp[:, 0]
    dx[:, -2] += dxp[:, -1]
    out = dx[:, :, 1:-1].copy()
    out[:, :, 1] += dx[:, :, 0]
    out[:, :, -2] += dx[:, :, -1]
    return out


def conv3x3_forward(x, w, b, stride=1):
    """3x3 convolution with mirror padding.

    x: (N, H, W, Cin); w: (Cout, Cin, 3, 3); b: (Cout,)
    """
    n, h, wd, cin = x.shape
    if w.shape[1] != cin:
        raise ValueError(f"conv expects {w.shape[1]} input channels, got {cin}")
    xp = reflect_pad1(x)
    ho, wo = (h - 1) // stride + 1, (wd - 1) // stride + 1
    cols = np.empty((n, ho, wo, 9, cin), dtype=x.dtype)
    for k in range(9):
        ki, kj = divmod(k, 3)
        cols[:, :, :, k] = xp[:, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride]
    cols = cols.reshape(n * ho * wo, 9 * cin)
    # columns are ordered (ki, kj, cin)
    wmat = w.transpose(0, 2, 3, 1).reshape(w.shape[0], -1)
    out = (cols @ wmat.T + b).reshape(n, ho, wo, -1)
    return out, (x.shape, cols, w, stride)


def conv3x3_backward(dout, cache):
    xshape, cols, w, stride = cache
    n, h, wd, cin = xshape
    cout = w.shape[0]
    ho, wo = dout.shape[1], dout.shape[2]
    d2 = dout.reshape(-1, cout)
    dw = (d2.T @ cols).reshape(cout, 3, 3, cin).transpose(0, 3, 1, 2)
    db = d2.sum(axis=0)
    wmat = w.transpose(0, 2, 3, 1).reshape(cout, -1)
    dcols = (d2 @ wmat).reshape(n, ho, wo, 9, cin)
    dxp = np.zeros((n, h + 2, wd + 2, cin), dtype=dout.dtype)
    for k in range(9):
        ki, kj = divmod(k, 3)
        dxp[:, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride] += dcols[:, :, :, k]
    return reflect_pad1_backward(dxp), np.ascontiguousarray(dw), db


def groupnorm_forward(x, gamma, beta, groups, eps=1e-5):
    n, h, w, c = x.shape
    xg = x.reshape(n, h, w, groups, c // groups)
    mu = xg.mean(axis=(1, 2, 4), keepdims=True)
    var = xg.var(axis=(1, 2, 4), keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * rstd).reshape(x.shape)
    return xhat * gamma + beta, (xhat, rstd, gamma, groups)


def groupnorm_backward(dout, cache):
    xhat, rstd, gamma, groups = cache
    n, h, w, c = dout.shape
    dgamma = (dout * xhat).sum(axis=(0, 1, 2))
    dbeta = dout.sum(axis=(0, 1, 2))
    dxhat = (dout * gamma).reshape(n, h, w, groups, c // groups)
    xh = xhat.reshape(dxhat.shape)
    m1 = dxhat.mean(axis=(1, 2, 4), keepdims=True)
    m2 = (dxhat * xh).mean(axis=(1, 2, 4), keepdims=True)
    dx = rstd * (dxhat - m1 - xh * m2)
    return dx.reshape(dout.shape), dgamma, dbeta


def silu_forward(x):
    s = 1.0 / (1.0 + np.exp(-x))
    return x * s, (x, s)


def silu_backward(dout, cache):
    x, s = cache
    return dout * s * (1.0 + x * (1.0 - s))


def dense_forward(x, w, b):
    """x: (N, Din); w: (Dout, Din)."""
    return x @ w.T + b, x


def dense_backward(dout, x, w):
    return dout @ w, dout.T @ x, dout.sum(axis=0)


def upsample2_forward(x):
    return x.repeat(2, axis=1).repeat(2, axis=2)


def upsample2_backward(dout):
    n, h, w, c = dout.shape
    return dout.reshape(n, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))


def noise_level_features(gamma, n_freq=16, dtype=np.float32):
    """Sinusoidal features of log-SNR, shape (N, 2 n_freq)."""
    gamma = np.clip(np.asarray(gamma, dtype=np.float64), 1e-12, 1 - 1e-12)
    log_snr = np.log(gamma) - np.log1p(-gamma)
    freqs = np.exp(np.linspace(np.log(1 / 32), np.log(2.0), n_freq))
    arg = log_snr[:, None] * freqs[None, :]
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1).astype(dtype)
