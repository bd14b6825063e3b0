"""Shrinkage operators used by the fusion solver."""

import numpy as np


def _check_threshold(t):
    if t < 0:
        raise ValueError(f"threshold must be nonnegative, got {t}")


def soft_threshold(a, t):
    """Elementwise ``sign(a) * max(|a| - t, 0)``."""
    _check_threshold(t)
    a = np.asarray(a, dtype=float)
    return np.sign(a) * np.maximum(np.abs(a) - t, 0.0)


def l21_shrink(d, t):
    """Column-wise group shrinkage.

    Minimizer of ``t * sum_i ||e_i||_2 + 0.5 * ||E - D||_F^2`` where ``e_i``
    are the columns of ``E``. Note this is the column-wise l2,1 norm: each
    column (one image) is kept or dropped as a unit.
    """
    _check_threshold(t)
    d = np.asarray(d, dtype=float)
    norms = np.linalg.norm(d, axis=0)
    scale = np.zeros_like(norms)
    keep = norms > t
    scale[keep] = 1.0 - t / norms[keep]
    return d * scale


def svt(a, t):
    """Singular value thresholding of a (possibly batched) matrix at level ``t``."""
    _check_threshold(t)
    u, s, vh = np.linalg.svd(a, full_matrices=False)
    s = np.maximum(s - t, 0.0)
    return (u * s[..., None, :]) @ vh


def tnn_prox(b, rho):
    """Proximal operator of the tensor nuclear norm.

    Returns ``argmin_G ||G||_tnn + (rho / 2) * ||G - b||_F^2``. With the
    unnormalized DFT, ``||G||_F^2 = ||G_f||_F^2 / n3``, so each Fourier slice
    is shrunk by matrix SVT at level ``n3 / rho``. Only the first
    ``n3 // 2 + 1`` slices are computed; the inverse real FFT supplies
    their conjugate mirrors.
    """
    if rho <= 0:
        raise ValueError(f"rho must be positive, got {rho}")
    b = np.asarray(b, dtype=float)
    if b.ndim != 3:
        raise ValueError(f"expected a 3-order tensor, got shape {b.shape}")
    n3 = b.shape[2]
    bf = np.moveaxis(np.fft.rfft(b, axis=2), 2, 0)
    gf = svt(bf, n3 / rho)
    return np.fft.irfft(np.moveaxis(gf, 0, 2), n=n3, axis=2)
