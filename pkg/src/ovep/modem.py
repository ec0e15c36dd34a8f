"""Square Gray-coded QAM, hard demapping and the MMSE denoiser for a QAM prior."""

from dataclasses import dataclass, field

import numpy as np

from ovep.errors import ConfigError, DegeneratePrecision, LengthMismatch

VAR_FLOOR = 1e-12


def _gray(i):
    return i ^ (i >> 1)


@dataclass(frozen=True)
class Constellation:
    """Square ``order``-QAM with per-axis Gray labels, scaled to energy ``sigma_x``.

    ``points[s]`` is the symbol carrying the bit label ``s``; the leading
    half of the label selects the in-phase level, the trailing half the
    quadrature level.
    """

    order: int
    sigma_x: float = 1.0
    points: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        side = int(round(np.sqrt(self.order)))
        if self.order < 4 or side * side != self.order or side & (side - 1):
            raise ConfigError(f"order must be a square power of 4, got {self.order}")
        if self.sigma_x <= 0:
            raise ConfigError("sigma_x must be positive")
        # gray label -> level index, per axis
        level_of_label = np.empty(side, dtype=int)
        level_of_label[_gray(np.arange(side))] = np.arange(side)
        levels = self.scale * (2.0 * level_of_label - (side - 1))
        labels = np.arange(self.order)
        pts = levels[labels >> self.bits_per_axis] + 1j * levels[labels & (side - 1)]
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def side(self):
        return int(round(np.sqrt(self.order)))

    @property
    def bits_per_axis(self):
        return self.side.bit_length() - 1

    @property
    def bits_per_symbol(self):
        return 2 * self.bits_per_axis

    @property
    def scale(self):
        """Half the distance between adjacent levels on one axis."""
        k = self.side
        return np.sqrt(3.0 * self.sigma_x / (2.0 * (k * k - 1)))


@dataclass
class DenoiserOutput:
    x_hat: np.ndarray
    v_hat: np.ndarray

    @property
    def gamma_hat(self):
        return 1.0 / self.v_hat


def map_bits(bits, c):
    """Map a bit array ``(..., n_bits)`` onto Gray-coded symbols ``(..., n_bits / bps)``."""
    bits = np.asarray(bits)
    bps = c.bits_per_symbol
    if bits.shape[-1] % bps:
        raise LengthMismatch(f"{bits.shape[-1]} bits is not a multiple of {bps}")
    groups = bits.reshape(bits.shape[:-1] + (-1, bps)).astype(np.int64)
    weights = 1 << np.arange(bps - 1, -1, -1)
    return c.points[groups @ weights]


def demap_hard(x_hat, c):
    """Nearest-point decision followed by Gray demapping, returns ``uint8`` bits."""
    x_hat = np.asarray(x_hat)
    k = c.side
    bpa = c.bits_per_axis

    def axis_label(v):
        idx = np.clip(np.rint((v / c.scale + (k - 1)) / 2.0), 0, k - 1).astype(np.int64)
        return _gray(idx)

    label = (axis_label(x_hat.real) << bpa) | axis_label(x_hat.imag)
    shifts = np.arange(c.bits_per_symbol - 1, -1, -1)
    bits = (label[..., None] >> shifts) & 1
    return bits.reshape(x_hat.shape[:-1] + (-1,)).astype(np.uint8)


def _check_gamma(gamma):
    gamma = np.asarray(gamma, dtype=float)
    if not np.all(np.isfinite(gamma)):
        raise DegeneratePrecision("denoiser precision contains non-finite entries")
    return gamma


def denoise(mu, gamma, c):
    """Posterior mean and variance of a QAM symbol observed through ``CN(mu, 1/gamma)``.

    The weights ``exp(-gamma |x - mu|^2)`` are normalized after subtracting
    their largest exponent, so very confident inputs do not overflow.  The
    variance is floored at ``1e-12``.
    """
    mu = np.asarray(mu, dtype=complex)
    gamma = _check_gamma(gamma)
    pts = c.points
    logits = -gamma[..., None] * np.abs(pts - mu[..., None]) ** 2
    logits -= np.max(logits, axis=-1, keepdims=True)
    w = np.exp(logits)
    w /= np.sum(w, axis=-1, keepdims=True)
    x_hat = w @ pts
    second = w @ (np.abs(pts) ** 2)
    v_hat = np.maximum(second - np.abs(x_hat) ** 2, VAR_FLOOR)
    return DenoiserOutput(x_hat, v_hat)


def denoise_qpsk(mu, gamma, sigma_x):
    """Closed-form QPSK denoiser: per-axis ``tanh`` of the scaled input ``gamma * mu``."""
    mu = np.asarray(mu, dtype=complex)
    gamma = _check_gamma(gamma)
    t = gamma * mu
    k = np.sqrt(2.0 * sigma_x)
    x_hat = np.sqrt(sigma_x / 2.0) * (np.tanh(k * t.real) + 1j * np.tanh(k * t.imag))
    v_hat = np.maximum(sigma_x - np.abs(x_hat) ** 2, VAR_FLOOR)
    return DenoiserOutput(x_hat, v_hat)
