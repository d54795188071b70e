"""Slow, direct reference computations. Deliberately share no code with the package."""
from __future__ import annotations

import math
from fractions import Fraction

import numpy as np


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    c = (size - 1) / 2
    g = np.array([math.exp(-((i - c) ** 2) / (2 * sigma * sigma)) for i in range(size)])
    g /= g.sum()
    return np.outer(g, g)


def ssim_direct(x: np.ndarray, y: np.ndarray, *, window=11, sigma=1.5, c1=1e-4, c2=9e-4, c3=None,
                alpha=1.0, beta=1.0, gamma=1.0) -> float:
    """Per-window luminance * contrast * structure, averaged over windows and channels.

    ``x``/``y`` are (C, H, W) float64 arrays.
    """
    c3 = c2 / 2 if c3 is None else c3
    w = gaussian_kernel(window, sigma)
    C, H, W = x.shape
    vals = []
    for ch in range(C):
        for i in range(H - window + 1):
            for j in range(W - window + 1):
                a = x[ch, i : i + window, j : j + window]
                b = y[ch, i : i + window, j : j + window]
                ma, mb = (w * a).sum(), (w * b).sum()
                va = (w * (a - ma) ** 2).sum()
                vb = (w * (b - mb) ** 2).sum()
                cov = (w * (a - ma) * (b - mb)).sum()
                sa, sb = math.sqrt(va), math.sqrt(vb)
                lum = (2 * ma * mb + c1) / (ma * ma + mb * mb + c1)
                con = (2 * sa * sb + c2) / (va + vb + c2)
                st = (cov + c3) / (sa * sb + c3)
                vals.append(lum**alpha * con**beta * st**gamma)
    return float(np.mean(vals))


def mask_counts(a: np.ndarray, b: np.ndarray) -> tuple[int, int, int]:
    """(|A ∩ B|, |A|, |B|) by walking every pixel."""
    inter = na = nb = 0
    for p, q in zip(a.ravel().tolist(), b.ravel().tolist()):
        na += p != 0
        nb += q != 0
        inter += p != 0 and q != 0
    return inter, na, nb


def iou_fraction(a: np.ndarray, b: np.ndarray) -> Fraction:
    inter, na, nb = mask_counts(a, b)
    union = na + nb - inter
    return Fraction(1) if union == 0 else Fraction(inter, union)


def dsc_fraction(a: np.ndarray, b: np.ndarray) -> Fraction:
    inter, na, nb = mask_counts(a, b)
    return Fraction(1) if na + nb == 0 else Fraction(2 * inter, na + nb)


def kl_monte_carlo(mu: np.ndarray, log_var: np.ndarray, n: int, rng: np.random.Generator) -> float:
    """E_q[log q(z) - log p(z)] estimated from ``n`` samples of a single diagonal Gaussian."""
    sd = np.exp(0.5 * log_var)
    z = mu + sd * rng.standard_normal((n, mu.size))
    log_q = -0.5 * (((z - mu) / sd) ** 2 + log_var + math.log(2 * math.pi)).sum(axis=1)
    log_p = -0.5 * (z**2 + math.log(2 * math.pi)).sum(axis=1)
    return float((log_q - log_p).mean())


def sobel_magnitude_direct(gray: np.ndarray) -> np.ndarray:
    """3x3 Sobel magnitude with edge-replicated borders, by explicit loops."""
    kx = [[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]]
    H, W = gray.shape
    p = np.pad(gray, 1, mode="edge")
    out = np.zeros((H, W))
    for i in range(H):
        for j in range(W):
            gx = gy = 0.0
            for u in range(3):
                for v in range(3):
                    gx += kx[u][v] * p[i + u, j + v]
                    gy += kx[v][u] * p[i + u, j + v]
            out[i, j] = math.hypot(gx, gy)
    return out


def ssim_windows(x: np.ndarray, y: np.ndarray, *, window=11, sigma=1.5, c1=1e-4, c2=9e-4, c3=None,
                 alpha=1.0, beta=1.0, gamma=1.0) -> float:
    """Same per-window definition as :func:`ssim_direct`, every window extracted explicitly.

    Each window's weighted statistics are formed from its own pixels in
    float64, so this is still a direct evaluation, only without the Python
    loop over window positions.
    """
    c3 = c2 / 2 if c3 is None else c3
    w = gaussian_kernel(window, sigma)
    a = np.lib.stride_tricks.sliding_window_view(x.astype(np.float64), (window, window), axis=(1, 2))
    b = np.lib.stride_tricks.sliding_window_view(y.astype(np.float64), (window, window), axis=(1, 2))
    ma = (w * a).sum(axis=(-2, -1))
    mb = (w * b).sum(axis=(-2, -1))
    da = a - ma[..., None, None]
    db = b - mb[..., None, None]
    va = (w * da * da).sum(axis=(-2, -1))
    vb = (w * db * db).sum(axis=(-2, -1))
    cov = (w * da * db).sum(axis=(-2, -1))
    sa, sb = np.sqrt(va), np.sqrt(vb)
    lum = (2 * ma * mb + c1) / (ma * ma + mb * mb + c1)
    con = (2 * sa * sb + c2) / (va + vb + c2)
    st = (cov + c3) / (sa * sb + c3)
    return float(np.mean(lum**alpha * con**beta * st**gamma))
