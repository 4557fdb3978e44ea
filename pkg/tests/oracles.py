"""Slow, direct reference implementations used as test oracles."""

import numpy as np

from qsamnet.quaternion import hamilton_array


def hamilton_sum_oracle(x, banks, bias=None, stride=1):
    """Direct per-pixel sum of quaternion products over taps and input channels."""
    w = np.stack(banks, axis=-1)  # (Cout, Cin, k, k, 4)
    cout, cin, k, _, _ = w.shape
    b, _, h, wd = x.shape
    p = k // 2
    q = np.stack(np.split(x, 4, axis=1), axis=-1)  # (B, Cin, H, W, 4)
    q = np.pad(q, ((0, 0), (0, 0), (p, p), (p, p), (0, 0)))
    ho, wo = (h - 1) // stride + 1, (wd - 1) // stride + 1
    out = np.zeros((b, cout, ho, wo, 4))
    for i in range(ho):
        for j in range(wo):
            patch = q[:, :, i * stride:i * stride + k, j * stride:j * stride + k]  # (B, Cin, k, k, 4)
            prod = hamilton_array(w[None], patch[:, None])  # (B, Cout, Cin, k, k, 4)
            out[:, :, i, j] = prod.sum(axis=(2, 3, 4))
    if bias is not None:
        out += bias.T[None, :, None, None, :]
    return np.concatenate([out[..., c] for c in range(4)], axis=1)


def naive_ssim(x, y):
    """Window-by-window SSIM with an explicit 2-D Gaussian kernel."""
    r = np.arange(11) - 5.0
    g = np.exp(-(r**2) / (2 * 1.5**2))
    w = np.outer(g, g)
    w /= w.sum()
    c1, c2 = 0.01**2, 0.03**2
    scores = []
    for i in range(x.shape[0] - 10):
        for j in range(x.shape[1] - 10):
            a, b = x[i:i + 11, j:j + 11], y[i:i + 11, j:j + 11]
            ma, mb = (w * a).sum(), (w * b).sum()
            va = (w * (a - ma) ** 2).sum()
            vb = (w * (b - mb) ** 2).sum()
            cov = (w * (a - ma) * (b - mb)).sum()
            scores.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    return float(np.mean(scores))
