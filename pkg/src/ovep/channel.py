"""Spatially correlated Rayleigh channels, AWGN and the linear measurement model.

The channel follows the Kronecker model ``H = R_r^{1/2} G R_t^{1/2}`` with an
exponential correlation profile ``[R_r]_{n,n'} = rho^{|n-n'|}`` on the base
station side.  The user side is uncorrelated by default.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from ovep.errors import ConfigError, LengthMismatch
from ovep.linalg import psd_sqrt


@dataclass(frozen=True)
class CorrelationSpec:
    """Exponential correlation profile of an ``n``-element array."""

    rho: float
    n: int

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigError(f"rho must lie in [0, 1], got {self.rho}")
        if self.n < 1:
            raise ConfigError(f"antenna count must be positive, got {self.n}")


@dataclass(frozen=True)
class ChannelInstance:
    """A realized channel together with the noise and symbol energies.

    ``sigma_z`` is the total complex noise variance per receive antenna and
    ``sigma_x`` the average symbol energy, so ``snr = sigma_x / sigma_z``.
    """

    h: np.ndarray
    sigma_z: float
    sigma_x: float = 1.0

    def __post_init__(self):
        if self.sigma_z <= 0 or self.sigma_x <= 0:
            raise ConfigError("sigma_z and sigma_x must be positive")
        if self.h.ndim != 2:
            raise ConfigError("h must be a 2-D matrix")
        if not np.all(np.isfinite(self.h)):
            raise ConfigError("h contains non-finite entries")

    @property
    def n(self):
        return self.h.shape[0]

    @property
    def m(self):
        return self.h.shape[1]

    @property
    def snr_db(self):
        return 10.0 * np.log10(self.sigma_x / self.sigma_z)

    @classmethod
    def from_snr_db(cls, h, snr_db, sigma_x=1.0):
        return cls(np.asarray(h, dtype=complex), sigma_x / db_to_linear(snr_db), sigma_x)


def db_to_linear(db):
    return 10.0 ** (np.asarray(db, dtype=float) / 10.0)


def complex_normal(rng, shape, var=1.0):
    """Circular complex Gaussian samples with variance ``var`` (``var/2`` per real axis)."""
    re = rng.standard_normal(shape)
    im = rng.standard_normal(shape)
    return np.sqrt(var / 2.0) * (re + 1j * im)


def exp_correlation_matrix(spec):
    idx = np.arange(spec.n)
    lag = np.abs(idx[:, None] - idx[None, :])
    return np.power(float(spec.rho), lag)


@lru_cache(maxsize=32)
def _sqrt_exp_correlation(rho, n):
    s = psd_sqrt(exp_correlation_matrix(CorrelationSpec(rho, n)))
    s.setflags(write=False)
    return s


def correlation_sqrt(spec):
    """Cached ``R_r^{1/2}`` for an exponential profile."""
    return _sqrt_exp_correlation(float(spec.rho), int(spec.n))


def generate_channel(spec_r, m, rng, r_t=None, size=None):
    """Draw ``H = R_r^{1/2} G [R_t^{1/2}]`` with ``G`` i.i.d. CN(0, 1).

    Parameters
    ----------
    spec_r : CorrelationSpec
        Receive-side correlation profile (gives ``N`` and ``rho``).
    m : int
        Number of single-antenna users.
    rng : numpy.random.Generator
    r_t : ndarray, optional
        Transmit correlation matrix; identity when omitted.
    size : tuple of int, optional
        Leading batch shape; a single ``N x M`` matrix when omitted.
    """
    lead = () if size is None else tuple(np.atleast_1d(size))
    g = complex_normal(rng, lead + (spec_r.n, m))
    h = correlation_sqrt(spec_r) @ g
    if r_t is not None:
        h = h @ psd_sqrt(r_t)
    return h


def transmit(ch, x, rng):
    """Noisy measurement ``y = H x + z`` with ``z ~ CN(0, sigma_z I)``."""
    x = np.asarray(x, dtype=complex)
    if x.shape[-1] != ch.m:
        raise LengthMismatch(f"x has length {x.shape[-1]}, channel expects {ch.m}")
    return ch.h @ x + complex_normal(rng, (ch.n,), ch.sigma_z)
