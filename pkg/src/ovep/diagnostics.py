"""Instruments for the first-iteration behaviour of the block detectors.

* per-block contributions to the denoiser input and the normalized
  inter-block correlation matrix built from them,
* the decomposition of the denoiser-input MSE into a correlation term and
  an alignment term,
* histograms of the denoiser input ``Re[gamma_bar * mu_bar]`` and of the
  output variance,
* an operation-count (complex multiplication) model per detector.

The statistics are accumulated batch by batch.  Every accumulator has a
``merge`` method so partial results from independent workers can be
reduced in a fixed order.
"""

from dataclasses import dataclass, field

import numpy as np

from ovep.detector import Variant
from ovep.errors import InsufficientTrials, StaleState

MIN_TRIALS = 100


def per_block_contribution(state):
    """Split the denoiser input into the share of every block.

    ``mu_bar_l = (gamma_l / gamma_bar) mu_l - (gamma~_l / gamma_bar) mu~_l``;
    the last overlap message is zero, and the shares sum to ``mu_bar``.

    Parameters
    ----------
    state : EpState
        Batched state after at least one iteration.

    Returns
    -------
    ndarray, shape (B, L, M), complex

    Raises
    ------
    StaleState
        If no iteration ran yet or the combined message of some entry was
        retained from a previous iteration by the guard.
    """
    if state.iter == 0 or state.bar_fresh is None:
        raise StaleState("state has no combined message yet")
    if not np.all(state.bar_fresh):
        raise StaleState("combined message was retained by the guard for some entries")
    g_bar = state.bar_q.gamma[:, None, :]
    bq, oq = state.block_q, state.overlap_q
    return (bq.gamma * bq.mu - oq.gamma * oq.mu) / g_bar


def _fresh_trials(state):
    if state.iter == 0 or state.bar_fresh is None:
        raise StaleState("state has no combined message yet")
    return np.all(state.bar_fresh, axis=1)


def _contributions(state):
    """Contributions of the trials whose combined message is fresh, plus the mask."""
    keep = _fresh_trials(state)
    g_bar = state.bar_q.gamma[keep, None, :]
    bq, oq = state.block_q, state.overlap_q
    nat = bq.gamma[keep] * bq.mu[keep] - oq.gamma[keep] * oq.mu[keep]
    return nat / g_bar, keep


# -- inter-block correlation ------------------------------------------------


@dataclass
class CorrelationDiagnostic:
    """Sample estimate of ``Phi[l, l'] = E[mu_l^H mu_l'] / (E||mu_l|| E||mu_l'||)``."""

    phi: np.ndarray
    n_trials: int

    @property
    def abs_phi(self):
        return np.abs(self.phi)

    def mean_offdiag(self):
        """Mean of ``|Phi|`` over the off-diagonal entries (0 for a single block)."""
        l = self.phi.shape[0]
        if l < 2:
            return 0.0
        a = self.abs_phi
        return float((a.sum() - np.trace(a)) / (l * (l - 1)))


@dataclass
class CorrelationAccumulator:
    n_trials: int = 0
    cross: np.ndarray | None = None
    norms: np.ndarray | None = None
    n_stale: int = 0

    def add(self, state):
        contrib, keep = _contributions(state)
        self.n_stale += int(np.count_nonzero(~keep))
        cross = np.einsum("blm,bkm->lk", np.conj(contrib), contrib)
        norms = np.sum(np.linalg.norm(contrib, axis=-1), axis=0)
        self._absorb(contrib.shape[0], cross, norms)
        return self

    def _absorb(self, n, cross, norms):
        if self.cross is None:
            self.cross, self.norms = cross, norms
        else:
            self.cross = self.cross + cross
            self.norms = self.norms + norms
        self.n_trials += n

    def merge(self, other):
        if other.cross is not None:
            self._absorb(other.n_trials, other.cross, other.norms)
        self.n_stale += other.n_stale
        return self

    def result(self, min_trials=MIN_TRIALS):
        if self.n_trials < min_trials:
            raise InsufficientTrials(f"{self.n_trials} trials, need at least {min_trials}")
        mean_norm = self.norms / self.n_trials
        phi = (self.cross / self.n_trials) / np.outer(mean_norm, mean_norm)
        return CorrelationDiagnostic(phi, self.n_trials)


def interblock_correlation(states, min_trials=MIN_TRIALS):
    """Normalized inter-block correlation matrix over a sequence of batched states.

    Trials whose combined message was retained by the guard are skipped
    (and counted in the accumulator's ``n_stale``).
    """
    acc = CorrelationAccumulator()
    for s in states:
        acc.add(s)
    return acc.result(min_trials)


# -- MSE decomposition ------------------------------------------------------


@dataclass
class MseDecomposition:
    """``MSE = term_corr - 2 Re(term_align) + term_energy`` and its direct estimate."""

    term_corr: float
    term_align: complex
    term_energy: float
    mse_direct: float
    mse_direct_se: float
    n_trials: int

    @property
    def mse_identity(self):
        return self.term_corr - 2.0 * self.term_align.real + self.term_energy

    @property
    def mse(self):
        return self.mse_identity


@dataclass
class MseAccumulator:
    """Sums over trials of ``||sum_l mu_l||^2``, ``x^H sum_l mu_l`` and ``||mu_bar - x||^2``.

    ``term_energy`` is the prior value ``M * sigma_x`` rather than a sample
    mean.
    """

    sigma_x: float = 1.0
    n_trials: int = 0
    m: int = 0
    corr: float = 0.0
    align: complex = 0j
    err: float = 0.0
    err_sq: float = 0.0
    n_stale: int = 0

    def add(self, state, x):
        contrib, keep = _contributions(state)
        self.n_stale += int(np.count_nonzero(~keep))
        x = np.asarray(x)[keep]
        total = np.sum(contrib, axis=1)
        e = np.sum(np.abs(state.bar_q.mu[keep] - x) ** 2, axis=-1)
        self.corr += float(np.sum(np.abs(total) ** 2))
        self.align += complex(np.sum(np.conj(x) * total))
        self.err += float(np.sum(e))
        self.err_sq += float(np.sum(e * e))
        self.n_trials += int(contrib.shape[0])
        self.m = x.shape[-1]
        return self

    def merge(self, other):
        self.corr += other.corr
        self.align += other.align
        self.err += other.err
        self.err_sq += other.err_sq
        self.n_trials += other.n_trials
        self.n_stale += other.n_stale
        self.m = self.m or other.m
        return self

    def result(self, min_trials=MIN_TRIALS):
        n = self.n_trials
        if n < min_trials:
            raise InsufficientTrials(f"{n} trials, need at least {min_trials}")
        mean = self.err / n
        var = max(self.err_sq / n - mean * mean, 0.0) * n / max(n - 1, 1)
        return MseDecomposition(
            term_corr=self.corr / n,
            term_align=self.align / n,
            term_energy=self.m * self.sigma_x,
            mse_direct=mean,
            mse_direct_se=float(np.sqrt(var / n)),
            n_trials=n,
        )


def mse_decomposition(states, x_truths, sigma_x=1.0, min_trials=MIN_TRIALS):
    """MSE decomposition of the denoiser input from batched states and transmitted symbols."""
    acc = MseAccumulator(sigma_x)
    for s, x in zip(states, x_truths):
        acc.add(s, x)
    return acc.result(min_trials)


# -- denoiser input / output histograms -------------------------------------


def default_input_edges():
    return np.linspace(-40.0, 40.0, 161)


def default_output_edges(sigma_x=1.0):
    return np.linspace(0.0, sigma_x, 101)


def _bin(values, edges):
    """Counts with an underflow bin in front and an overflow bin at the end.

    Inner bins are ``[lo, hi)`` except the last inner bin, which also takes
    values equal to the top edge.
    """
    values = np.ravel(values)
    idx = np.searchsorted(edges, values, side="right")
    idx[values == edges[-1]] -= 1
    return np.bincount(idx, minlength=len(edges) + 1).astype(np.int64)


@dataclass
class DenoiserIoStats:
    """Histograms of ``Re[gamma_bar mu_bar]`` (input) and ``v_hat`` (output).

    ``counts_*`` have ``len(edges_*) + 1`` entries: underflow, the inner
    bins, overflow.  ``n_small_v`` counts outputs below ``small_v``.
    """

    edges_in: np.ndarray
    edges_out: np.ndarray
    small_v: float
    counts_in: np.ndarray = None
    counts_out: np.ndarray = None
    n_samples: int = 0
    n_small_v: int = 0

    def __post_init__(self):
        self.edges_in = np.asarray(self.edges_in, dtype=float)
        self.edges_out = np.asarray(self.edges_out, dtype=float)
        if self.counts_in is None:
            self.counts_in = np.zeros(len(self.edges_in) + 1, dtype=np.int64)
        if self.counts_out is None:
            self.counts_out = np.zeros(len(self.edges_out) + 1, dtype=np.int64)

    def add(self, state):
        u = np.real(state.bar_q.gamma * state.bar_q.mu)
        v = state.den.v_hat
        self.counts_in += _bin(u, self.edges_in)
        self.counts_out += _bin(v, self.edges_out)
        self.n_samples += v.size
        self.n_small_v += int(np.count_nonzero(v < self.small_v))
        return self

    def merge(self, other):
        self.counts_in += other.counts_in
        self.counts_out += other.counts_out
        self.n_samples += other.n_samples
        self.n_small_v += other.n_small_v
        return self

    @property
    def small_v_fraction(self):
        return self.n_small_v / self.n_samples if self.n_samples else 0.0

    def bins(self, which="in"):
        """Rows ``(lo, hi, count)`` including the open-ended outer bins."""
        edges, counts = (
            (self.edges_in, self.counts_in) if which == "in" else (self.edges_out, self.counts_out)
        )
        lo = np.concatenate([[-np.inf], edges])
        hi = np.concatenate([edges, [np.inf]])
        return list(zip(lo, hi, counts))


def denoiser_io_stats(states, edges_in=None, edges_out=None, sigma_x=1.0, small_v=0.01):
    """Histogram the denoiser input and output variance over batched states.

    ``small_v`` is relative to ``sigma_x``.
    """
    stats = DenoiserIoStats(
        default_input_edges() if edges_in is None else edges_in,
        default_output_edges(sigma_x) if edges_out is None else edges_out,
        small_v * sigma_x,
    )
    for s in states:
        stats.add(s)
    return stats


# -- operation counts -------------------------------------------------------


@dataclass
class FlopsEstimate:
    """Leading-order complex multiplication counts.

    Constants are taken as 1 for every term (``M^3`` for an ``M x M``
    inversion, ``M N^2`` for a Gram product, ``M Q`` for the denoiser).
    """

    per_iteration: int
    total: int
    breakdown: dict = field(default_factory=dict)


def _filter_cost(m, rows, count):
    return count * (m * rows * rows + rows ** 3)


def flops_estimate(cfg, n, m, q):
    """Operation count of one detector run.

    LMMSE-EP: ``M^3 + M^2 N``; MF-EP: ``M N``; NOvEP and the ablation
    without subtraction: ``L (M N_b^2 + N_b^3)``; OvEP adds
    ``(L - 1)(M N~_b^2 + N~_b^3)`` for the overlaps.  Every variant adds
    ``M Q`` for the denoiser, and the per-iteration count is multiplied by
    ``cfg.t_max``.
    """
    plan, v = cfg.plan, cfg.variant
    if v is Variant.LMMSE_EP:
        blocks, overlaps = m ** 3 + m * m * n, 0
    elif v is Variant.MF_EP:
        blocks, overlaps = m * n, 0
    else:
        blocks = _filter_cost(m, plan.n_b, plan.l)
        overlaps = _filter_cost(m, plan.n_tilde, plan.l - 1) if v is Variant.OVEP else 0
    den = m * q
    per_iter = int(blocks + overlaps + den)
    breakdown = {"block_filters": int(blocks), "overlap_filters": int(overlaps), "denoiser": int(den)}
    return FlopsEstimate(per_iter, per_iter * int(cfg.t_max), breakdown)


def lmmse_flops(n, m):
    """One-shot LMMSE: a Gram product and one ``M x M`` inversion."""
    per = int(m ** 3 + m * m * n)
    return FlopsEstimate(per, per, {"block_filters": per, "overlap_filters": 0, "denoiser": 0})
