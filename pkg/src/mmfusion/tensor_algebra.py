"""t-product algebra on dense 3-order tensors.

Tensors are plain ``numpy`` arrays of shape ``(n1, n2, n3)``; frontal slice
``k`` is ``x[:, :, k]`` and the mode-3 fiber ``(i, j)`` is ``x[i, j, :]``.
The Fourier transform along mode 3 is unnormalized in the forward
direction and scaled by ``1/n3`` in the inverse direction (numpy's default).
"""

import numpy as np

SYMMETRY_TOL = 1e-8
CIRCULANT_MAX_ROWS = 512


class SymmetryError(ValueError):
    """A Fourier-domain tensor is not the transform of a real tensor."""


def _check3(x, name="x"):
    x = np.asarray(x)
    if x.ndim != 3:
        raise ValueError(f"{name} must be a 3-order tensor, got shape {x.shape}")
    return x


def fft_mode3(x):
    """Unnormalized DFT of every mode-3 fiber of ``x``."""
    x = _check3(x)
    return np.fft.fft(x, axis=2)


def _symmetry_defect(xf):
    n3 = xf.shape[2]
    mirror = np.conj(xf[:, :, (-np.arange(n3)) % n3])
    return np.max(np.abs(xf - mirror), initial=0.0)


def ifft_mode3(xf, tol=SYMMETRY_TOL):
    """Inverse of :func:`fft_mode3` returning a real tensor.

    Raises
    ------
    SymmetryError
        If ``xf`` violates conjugate symmetry across its slices by more than
        ``tol`` (scaled by the largest magnitude when that exceeds 1).
    """
    xf = _check3(xf, "xf")
    scale = max(1.0, float(np.max(np.abs(xf), initial=0.0)))
    defect = _symmetry_defect(xf)
    if defect > tol * scale:
        raise SymmetryError(
            f"conjugate symmetry violated by {defect:.3e} (tolerance {tol * scale:.3e})"
        )
    return np.fft.ifft(xf, axis=2).real


def t_product(x, y):
    """t-product ``x * y`` of an n1 x n2 x n3 and an n2 x n4 x n3 tensor."""
    x = _check3(x)
    y = _check3(y, "y")
    if x.shape[1] != y.shape[0] or x.shape[2] != y.shape[2]:
        raise ValueError(f"cannot t-multiply shapes {x.shape} and {y.shape}")
    n3 = x.shape[2]
    xf = np.fft.rfft(x, axis=2)
    yf = np.fft.rfft(y, axis=2)
    mf = np.einsum("ijk,jlk->ilk", xf, yf)
    return np.fft.irfft(mf, n=n3, axis=2)


def t_transpose(x):
    """Transpose every frontal slice and reverse the order of slices 2..n3."""
    x = _check3(x)
    n3 = x.shape[2]
    return np.transpose(x, (1, 0, 2))[:, :, (-np.arange(n3)) % n3].copy()


def identity_tensor(n, n3):
    if n < 1 or n3 < 1:
        raise ValueError("identity_tensor needs n >= 1 and n3 >= 1")
    out = np.zeros((n, n, n3))
    out[:, :, 0] = np.eye(n)
    return out


def _mirror_fill(af, half):
    """Complete slices ``half..n3-1`` of ``af`` as conjugates of their mirrors."""
    n3 = af.shape[2]
    for k in range(half, n3):
        af[:, :, k] = np.conj(af[:, :, n3 - k])
    return af


def t_svd(x):
    """Full t-SVD ``x = u * s * v^T``.

    Each Fourier slice is factored by an ordinary SVD; only slices
    ``0..n3//2`` are factored and the rest are filled in as conjugates so the
    factors transform back to real tensors.

    Returns
    -------
    u : ndarray, shape (n1, n1, n3)
    s : ndarray, shape (n1, n2, n3)
    v : ndarray, shape (n2, n2, n3)
    """
    x = _check3(x)
    n1, n2, n3 = x.shape
    xf = fft_mode3(x)
    uf = np.zeros((n1, n1, n3), dtype=complex)
    sf = np.zeros((n1, n2, n3), dtype=complex)
    vf = np.zeros((n2, n2, n3), dtype=complex)
    half = n3 // 2 + 1
    r = min(n1, n2)
    for k in range(half):
        slc = xf[:, :, k]
        # slice 0 and the Nyquist slice are real; factor them in real arithmetic
        if k == 0 or 2 * k == n3:
            slc = slc.real
        uk, sk, vhk = np.linalg.svd(slc, full_matrices=True)
        uf[:, :, k] = uk
        sf[np.arange(r), np.arange(r), k] = sk
        vf[:, :, k] = vhk.conj().T
    for af in (uf, sf, vf):
        _mirror_fill(af, half)
    return ifft_mode3(uf), ifft_mode3(sf), ifft_mode3(vf)


def fourier_singular_values(x):
    """Singular values of every Fourier slice, shape ``(n3, min(n1, n2))``."""
    x = _check3(x)
    xf = np.moveaxis(fft_mode3(x), 2, 0)
    return np.linalg.svd(xf, compute_uv=False)


def tnn(x):
    """Tensor nuclear norm: sum of the singular values of all Fourier slices."""
    x = _check3(x)
    if x.size == 0:
        return 0.0
    return float(np.sum(fourier_singular_values(x)))


def block_circulant(x, max_rows=CIRCULANT_MAX_ROWS):
    """Dense block-circulant matrix whose block (i, j) is slice ``(i - j) mod n3``.

    Intended as a test oracle; refuses tensors with ``n1 * n3 > max_rows``.
    """
    x = _check3(x)
    n1, n2, n3 = x.shape
    if n1 * n3 > max_rows:
        raise ValueError(f"block_circulant limited to {max_rows} rows, got {n1 * n3}")
    out = np.empty((n1 * n3, n2 * n3), dtype=x.dtype)
    for i in range(n3):
        for j in range(n3):
            out[i * n1:(i + 1) * n1, j * n2:(j + 1) * n2] = x[:, :, (i - j) % n3]
    return out


def phi_merge(z_list):
    """Stack V functional matrices into an N x V x N tensor.

    ``out[i, v, j] == z_list[v][i, j]``: mode 2 indexes the view and mode 3
    the sample, so every Fourier slice is a small N x V matrix.
    """
    z_list = [np.asarray(z) for z in z_list]
    if not z_list:
        raise ValueError("phi_merge needs at least one matrix")
    n = z_list[0].shape[0]
    for z in z_list:
        if z.shape != (n, n):
            raise ValueError(f"expected {n}x{n} matrices, got {z.shape}")
    return np.stack(z_list, axis=1)


def phi_split(t):
    """Inverse of :func:`phi_merge`."""
    t = _check3(t, "t")
    if t.shape[0] != t.shape[2]:
        raise ValueError(f"mode-1 and mode-3 extents differ: {t.shape}")
    return [t[:, v, :].copy() for v in range(t.shape[1])]
