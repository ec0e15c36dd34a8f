"""Dense complex kernels used by the LMMSE filters and the channel generator.

Every function accepts arbitrary leading batch dimensions, so a stack of
matrices with shape ``(..., n, n)`` is processed in one call.
"""

import numpy as np

from ovep.errors import NotPositiveDefinite, NotPsd

PIVOT_RTOL = 1e-14
PSD_CLAMP_RTOL = 1e-10


def _mean_trace(a):
    n = a.shape[-1]
    return np.real(np.trace(a, axis1=-2, axis2=-1)) / n


def _checked_cholesky(a):
    try:
        chol = np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from None
    pivots = np.real(np.diagonal(chol, axis1=-2, axis2=-1)) ** 2
    floor = PIVOT_RTOL * _mean_trace(a)[..., None]
    if not np.all(np.isfinite(pivots)) or np.any(pivots <= floor):
        raise NotPositiveDefinite("pivot below %.1e * trace/dim" % PIVOT_RTOL)
    return chol


def _inverse_factor(a):
    """Return ``L^{-1}`` where ``a = L L^H``, so that ``a^{-1} = L^{-H} L^{-1}``."""
    return np.linalg.inv(_checked_cholesky(a))


def hpd_inverse(a):
    """Invert a Hermitian positive-definite matrix through its Cholesky factor.

    Raises
    ------
    NotPositiveDefinite
        If a Cholesky pivot is not larger than ``1e-14 * trace(a) / dim``.
    """
    a = np.asarray(a, dtype=complex)
    linv = _inverse_factor(a)
    inv = np.conj(np.swapaxes(linv, -1, -2)) @ linv
    return 0.5 * (inv + np.conj(np.swapaxes(inv, -1, -2)))


def woodbury_inverse(h, d, sigma_z):
    """Return ``(sigma_z^{-1} H^H H + D(d))^{-1}`` inverting only a rows x rows core.

    ``D^{-1} - D^{-1} H^H (sigma_z I + H D^{-1} H^H)^{-1} H D^{-1}``
    """
    h = np.asarray(h, dtype=complex)
    d = np.asarray(d, dtype=float)
    if np.any(d <= 0):
        raise ValueError("diagonal loading d must be strictly positive")
    dinv = 1.0 / d
    hd = h * dinv[..., None, :]
    core = _core_matrix(h, hd, sigma_z)
    w = _inverse_factor(core) @ hd
    corr = np.conj(np.swapaxes(w, -1, -2)) @ w
    eye = np.zeros(corr.shape, dtype=complex)
    idx = np.arange(corr.shape[-1])
    eye[..., idx, idx] = dinv
    return eye - corr


def _core_matrix(h, hd, sigma_z):
    k = h.shape[-2]
    sz = np.asarray(sigma_z, dtype=float)[..., None, None]
    core = hd @ np.conj(np.swapaxes(h, -1, -2))
    return core + sz * np.eye(k)


def regularized_gram_solve(h, d, sigma_z, rhs, gram=None):
    """Diagonal of ``S = (sigma_z^{-1} H^H H + D(d))^{-1}`` and the product ``S @ rhs``.

    The Woodbury route is taken when ``H`` has fewer rows than columns,
    otherwise the full matrix is factored.  ``gram`` may carry a cached
    ``H^H H`` for the direct route.

    Returns
    -------
    diag : ndarray, shape (..., M), real
    prod : ndarray, shape (..., M), complex
    """
    h = np.asarray(h, dtype=complex)
    d = np.asarray(d, dtype=float)
    rhs = np.asarray(rhs, dtype=complex)
    k, m = h.shape[-2], h.shape[-1]
    if k < m:
        dinv = 1.0 / d
        hd = h * dinv[..., None, :]
        w = _inverse_factor(_core_matrix(h, hd, sigma_z)) @ hd
        diag = dinv - np.sum(np.abs(w) ** 2, axis=-2)
        wr = w @ rhs[..., None]
        prod = dinv * rhs - (np.conj(np.swapaxes(w, -1, -2)) @ wr)[..., 0]
        return diag, prod

    if gram is None:
        gram = np.conj(np.swapaxes(h, -1, -2)) @ h
    if np.any(d <= 0):
        raise ValueError("diagonal loading d must be strictly positive")
    # factor the symmetrically scaled D^{-1/2} S^{-1} D^{-1/2} = D^{-1/2} G D^{-1/2} / sigma_z + I,
    # which stays well conditioned when some entries of d are huge
    s = 1.0 / np.sqrt(d)
    sz = np.asarray(sigma_z, dtype=float)[..., None, None]
    a = gram * (s[..., :, None] * s[..., None, :]) / sz
    idx = np.arange(m)
    a[..., idx, idx] += 1.0
    linv = _inverse_factor(a)
    diag = s * s * np.sum(np.abs(linv) ** 2, axis=-2)
    prod = s * (np.conj(np.swapaxes(linv, -1, -2)) @ (linv @ (s * rhs)[..., None]))[..., 0]
    return diag, prod


def psd_sqrt(r):
    """Hermitian PSD square root ``S`` with ``S S^H = R``.

    Eigenvalues slightly below zero (round-off) are clamped to zero; values
    below ``-1e-10 * trace / dim`` raise :class:`NotPsd`.
    """
    r = np.asarray(r)
    herm = 0.5 * (r + np.conj(np.swapaxes(r, -1, -2)))
    vals, vecs = np.linalg.eigh(herm)
    floor = -PSD_CLAMP_RTOL * _mean_trace(herm)[..., None]
    if np.any(vals < floor):
        raise NotPsd("eigenvalue %.3e below clamp threshold" % np.min(vals))
    root = np.sqrt(np.clip(vals, 0.0, None))
    s = (vecs * root[..., None, :]) @ np.conj(np.swapaxes(vecs, -1, -2))
    s = 0.5 * (s + np.conj(np.swapaxes(s, -1, -2)))
    if not np.iscomplexobj(r):
        s = np.real(s)
    return s
