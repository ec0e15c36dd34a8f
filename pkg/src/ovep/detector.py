"""Block-partitioned expectation propagation detectors.

One engine covers the whole family.  The measurement vector is cut into
``L`` windows of ``n_b`` rows taken every ``n_s`` rows; neighbouring
windows share ``n_b - n_s`` rows (the overlapping parts).  Each window and
each overlap runs a small LMMSE filter fed by an extrinsic Gaussian
message, the filter outputs are combined with the overlaps subtracted,
and a QAM denoiser closes the loop.

Special cases:

* ``n_b = n_s = n`` (one block): LMMSE-EP
* ``n_b = n_s = 1`` (scalar blocks): MF-EP
* ``n_b = n_s < n``: NOvEP (non-overlapping blocks)
* ``n_s < n_b``: OvEP; the ``ovep-nosub`` ablation drops the overlap terms.

All arrays carry a leading batch axis inside the engine so that many
independent trials are detected in one pass.  Messages are stored as
stacks: ``block_q.mu`` has shape ``(B, L, M)``.
"""

import copy
import enum
from dataclasses import dataclass, field

import numpy as np

from ovep.errors import ConfigError, InvalidPartition, NotConverged, NotPositiveDefinite
from ovep.linalg import regularized_gram_solve
from ovep.modem import DenoiserOutput, denoise

GUARD_EPS = 1e-12


class Variant(str, enum.Enum):
    OVEP = "ovep"
    OVEP_NOSUB = "ovep-nosub"
    NOVEP = "novep"
    LMMSE_EP = "lmmse-ep"
    MF_EP = "mf-ep"

    @property
    def subtracts_overlaps(self):
        return self is Variant.OVEP


@dataclass(frozen=True)
class PartitionPlan:
    """Sliding-window partition of ``n`` measurements (0-based indices)."""

    n: int
    n_b: int
    n_s: int

    @property
    def n_tilde(self):
        return self.n_b - self.n_s

    @property
    def l(self):
        return (self.n - self.n_b) // self.n_s + 1

    @property
    def block_indices(self):
        starts = np.arange(self.l) * self.n_s
        return starts[:, None] + np.arange(self.n_b)

    @property
    def overlap_indices(self):
        starts = (np.arange(self.l - 1) + 1) * self.n_s
        return starts[:, None] + np.arange(self.n_tilde)

    @property
    def has_overlaps(self):
        return self.n_tilde > 0 and self.l > 1


def make_partition(n, n_b, n_s):
    """Build the window partition; ``(n - n_b)`` must be a multiple of ``n_s``."""
    if not 1 <= n_s <= n_b <= n:
        raise InvalidPartition(f"need 1 <= n_s <= n_b <= n, got n_s={n_s}, n_b={n_b}, n={n}")
    if (n - n_b) % n_s:
        raise InvalidPartition(f"(n - n_b) = {n - n_b} is not divisible by n_s = {n_s}")
    return PartitionPlan(int(n), int(n_b), int(n_s))


@dataclass
class GaussianMessage:
    """Per-user Gaussian factor ``exp(-gamma |x - mu|^2)``; arrays share one shape."""

    mu: np.ndarray
    gamma: np.ndarray

    @classmethod
    def zeros(cls, shape):
        return cls(np.zeros(shape, dtype=complex), np.zeros(shape))

    @classmethod
    def prior(cls, shape, beta_x):
        return cls(np.zeros(shape, dtype=complex), np.full(shape, 1.0 / beta_x))

    def copy(self):
        return GaussianMessage(self.mu.copy(), self.gamma.copy())


@dataclass
class FilterOutput:
    mu_u: np.ndarray
    gamma_u: np.ndarray
    sigma_u_diag: np.ndarray


@dataclass
class EpState:
    """Complete iteration state of one batch of detector runs.

    ``overlap_q`` holds ``L`` messages; the last one is the permanent zero
    message standing in for the missing overlap after the final block.
    ``change`` is the per-trial largest iterate change of the last
    iteration (see :func:`_iterate_change`), ``guards`` counts entries
    where a non-positive precision forced a message to be retained.
    """

    block_w: GaussianMessage
    overlap_w: GaussianMessage
    block_q: GaussianMessage
    overlap_q: GaussianMessage
    bar_q: GaussianMessage
    den: DenoiserOutput
    block_u: FilterOutput | None = None
    overlap_u: FilterOutput | None = None
    bar_fresh: np.ndarray | None = None
    iter: int = 0
    change: np.ndarray = field(default_factory=lambda: np.array([np.inf]))
    guards: np.ndarray = field(default_factory=lambda: np.zeros(1, dtype=np.int64))

    def snapshot(self):
        return copy.deepcopy(self)


@dataclass(frozen=True)
class DetectorConfig:
    plan: PartitionPlan
    t_max: int = 32
    damping: float = 0.5
    beta_x: float = 10.0
    variant: Variant = Variant.OVEP
    tol: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if self.t_max < 1:
            raise ConfigError("t_max must be at least 1")
        if not 0.0 <= self.damping <= 1.0:
            raise ConfigError("damping must lie in [0, 1]")
        if self.beta_x <= 0:
            raise ConfigError("beta_x must be positive")
        plan, v = self.plan, self.variant
        if v in (Variant.NOVEP, Variant.LMMSE_EP, Variant.MF_EP) and plan.n_s != plan.n_b:
            raise ConfigError(f"{v.value} requires n_s == n_b")
        if v is Variant.LMMSE_EP and plan.n_b != plan.n:
            raise ConfigError("lmmse-ep requires a single block (n_b == n)")
        if v is Variant.MF_EP and plan.n_b != 1:
            raise ConfigError("mf-ep requires scalar blocks (n_b == 1)")

    @classmethod
    def for_variant(cls, variant, n, n_b=2, n_s=None, t_max=None, **kw):
        """Configuration with the default partition and iteration count of a variant."""
        variant = Variant(variant)
        if variant is Variant.LMMSE_EP:
            n_b = n_s = n
        elif variant is Variant.MF_EP:
            n_b = n_s = 1
        elif variant is Variant.NOVEP:
            n_s = n_b
        elif n_s is None:
            n_s = 1
        if t_max is None:
            t_max = DEFAULT_ITERATIONS[variant]
        return cls(make_partition(n, n_b, n_s), t_max=t_max, variant=variant, **kw)


DEFAULT_ITERATIONS = {
    Variant.LMMSE_EP: 16,
    Variant.NOVEP: 32,
    Variant.OVEP: 32,
    Variant.OVEP_NOSUB: 32,
    Variant.MF_EP: 32,
}


# -- single steps -----------------------------------------------------------


def lmmse_filter(h, y, w, sigma_z, hy=None, gram=None):
    """Gaussian posterior of ``x`` from rows ``(h, y)`` and the pseudo-prior ``w``.

    ``Sigma = (sigma_z^{-1} H^H H + D(w.gamma))^{-1}`` and
    ``mu = Sigma (sigma_z^{-1} H^H y + w.gamma * w.mu)``; only the diagonal
    of ``Sigma`` is returned.
    """
    sigma_z = np.asarray(sigma_z, dtype=float)
    if hy is None:
        hy = (np.conj(np.swapaxes(h, -1, -2)) @ y[..., None])[..., 0]
    rhs = hy / sigma_z[..., None] + w.gamma * w.mu
    diag, mu_u = regularized_gram_solve(h, w.gamma, sigma_z, rhs, gram=gram)
    return FilterOutput(mu_u, 1.0 / diag, diag)


block_filter = lmmse_filter
overlap_filter = lmmse_filter


def _divide_out(gamma_a, nat_a, gamma_b, nat_b, prev):
    """Natural-parameter difference ``a / b`` with the non-positive-precision guard.

    Entries where the resulting precision is below ``GUARD_EPS`` keep the
    values of ``prev``.  Returns the message and the boolean guard mask.
    """
    gamma = gamma_a - gamma_b
    fired = gamma < GUARD_EPS
    safe = np.where(fired, 1.0, gamma)
    mu = (nat_a - nat_b) / safe
    if prev is not None:
        gamma = np.where(fired, prev.gamma, gamma)
        mu = np.where(fired, prev.mu, mu)
    return GaussianMessage(mu, gamma), fired


def extrinsic_from_filter(f, w, prev=None):
    """Extrinsic filter output ``q = u / w``: ``gamma_q = gamma_u - gamma_w``."""
    return _divide_out(f.gamma_u, f.gamma_u * f.mu_u, w.gamma, w.gamma * w.mu, prev)


def combine(block_q, overlap_q, prev=None, subtract=True):
    """Denoiser input ``gamma_bar = sum_l (gamma_l - gamma~_l)``, precision-weighted mean.

    ``block_q`` and ``overlap_q`` are stacks over the block axis (second to
    last).  With ``subtract=False`` the overlap terms are ignored.
    """
    g = np.sum(block_q.gamma, axis=-2)
    nat = np.sum(block_q.gamma * block_q.mu, axis=-2)
    if subtract:
        g_o = np.sum(overlap_q.gamma, axis=-2)
        nat_o = np.sum(overlap_q.gamma * overlap_q.mu, axis=-2)
    else:
        g_o, nat_o = 0.0, 0.0
    return _divide_out(g, nat, g_o, nat_o, prev)


def extrinsic_to_filters(den, q, prev_w, damping):
    """Damped extrinsic messages ``w = posterior / q`` for every filter in the stack.

    The undamped target is ``gamma* = gamma_hat - gamma_q`` and
    ``mu* = (gamma_hat x_hat - gamma_q mu_q) / gamma*``; guarded entries
    take ``prev_w``.  Damping blends ``gamma`` and ``gamma * mu`` with weight
    ``damping`` on the previous message.
    """
    g_hat = np.expand_dims(den.gamma_hat, -2)
    x_hat = np.expand_dims(den.x_hat, -2)
    target, fired = _divide_out(g_hat, g_hat * x_hat, q.gamma, q.gamma * q.mu, prev_w)
    if damping == 0.0:
        return target, fired
    a = 1.0 - damping
    gamma = a * target.gamma + damping * prev_w.gamma
    nat = a * target.gamma * target.mu + damping * prev_w.gamma * prev_w.mu
    return GaussianMessage(nat / gamma, gamma), fired


# -- the iteration ----------------------------------------------------------


@dataclass
class _Partitioned:
    """Block/overlap views of a batch of channels and measurements."""

    hb: np.ndarray
    hyb: np.ndarray
    gram_b: np.ndarray | None
    ho: np.ndarray | None
    hyo: np.ndarray | None


def _partition(h, y, plan, with_overlaps):
    bi = plan.block_indices
    hb = h[..., bi, :]
    yb = y[..., bi]
    hbh = np.conj(np.swapaxes(hb, -1, -2))
    hyb = (hbh @ yb[..., None])[..., 0]
    gram_b = hbh @ hb if plan.n_b >= h.shape[-1] else None
    ho = hyo = None
    if with_overlaps:
        oi = plan.overlap_indices
        ho = h[..., oi, :]
        hyo = (np.conj(np.swapaxes(ho, -1, -2)) @ y[..., oi][..., None])[..., 0]
    return _Partitioned(hb, hyb, gram_b, ho, hyo)


def _iterate_change(old, new):
    """Largest change of the extrinsic filter inputs, per trial.

    Precision changes are measured relative to ``max(gamma, 1)`` so that
    saturated (very confident) messages do not dominate through round-off.
    """

    def rel(a, b):
        return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1.0)

    parts = [
        np.abs(old.mu - new.mu).reshape(old.mu.shape[0], -1),
        rel(old.gamma, new.gamma).reshape(old.mu.shape[0], -1),
    ]
    return np.max(np.concatenate(parts, axis=1), axis=1)


def init_state(batch, m, plan, beta_x, sigma_x=1.0):
    """Algorithm state before the first iteration.

    Filter inputs start at ``CN(0, beta_x)``.  Filter outputs start as zero
    (uninformative) messages and the denoiser input as the same broad
    prior; those are the values a guard falls back on in iteration one.
    """
    l = plan.l
    return EpState(
        block_w=GaussianMessage.prior((batch, l, m), beta_x),
        overlap_w=GaussianMessage.prior((batch, max(l - 1, 0), m), beta_x),
        block_q=GaussianMessage.zeros((batch, l, m)),
        overlap_q=GaussianMessage.zeros((batch, l, m)),
        bar_q=GaussianMessage.prior((batch, m), beta_x),
        den=DenoiserOutput(np.zeros((batch, m), dtype=complex), np.full((batch, m), sigma_x)),
        change=np.full(batch, np.inf),
        guards=np.zeros(batch, dtype=np.int64),
    )


def ep_iteration(state, parts, sigma_z, c, cfg):
    """Advance ``state`` by one iteration in place."""
    variant = cfg.variant
    sz = sigma_z[:, None]
    guards = state.guards

    # LMMSE filters in the block parts
    fu = lmmse_filter(parts.hb, None, state.block_w, sz, hy=parts.hyb, gram=parts.gram_b)
    state.block_q, fired = extrinsic_from_filter(fu, state.block_w, state.block_q)
    state.block_u = fu
    guards += fired.sum(axis=(1, 2))

    # LMMSE filters in the overlapping parts
    if parts.ho is not None:
        fo = lmmse_filter(parts.ho, None, state.overlap_w, sz, hy=parts.hyo)
        prev = GaussianMessage(state.overlap_q.mu[:, :-1], state.overlap_q.gamma[:, :-1])
        oq, fired = extrinsic_from_filter(fo, state.overlap_w, prev)
        state.overlap_q.mu[:, :-1] = oq.mu
        state.overlap_q.gamma[:, :-1] = oq.gamma
        state.overlap_u = fo
        guards += fired.sum(axis=(1, 2))

    # combining, overlaps subtracted
    state.bar_q, fired = combine(
        state.block_q, state.overlap_q, state.bar_q, subtract=variant.subtracts_overlaps
    )
    state.bar_fresh = ~fired
    guards += fired.sum(axis=1)

    # MMSE denoiser
    state.den = denoise(state.bar_q.mu, state.bar_q.gamma, c)

    # extrinsic messages back to the filters
    old_w = GaussianMessage(state.block_w.mu, state.block_w.gamma)
    state.block_w, fired = extrinsic_to_filters(state.den, state.block_q, state.block_w, cfg.damping)
    guards += fired.sum(axis=(1, 2))
    change = _iterate_change(old_w, state.block_w)
    if parts.ho is not None:
        old_o = state.overlap_w
        prev = GaussianMessage(state.overlap_q.mu[:, :-1], state.overlap_q.gamma[:, :-1])
        state.overlap_w, fired = extrinsic_to_filters(state.den, prev, state.overlap_w, cfg.damping)
        guards += fired.sum(axis=(1, 2))
        change = np.maximum(change, _iterate_change(old_o, state.overlap_w))
    state.change = change
    state.iter += 1
    return state


def run_ep_batch(h, y, sigma_z, c, cfg, on_iteration=None):
    """Run the detector on a batch ``h: (B, N, M)``, ``y: (B, N)``.

    ``sigma_z`` is a scalar or a ``(B,)`` array.  ``on_iteration`` is called
    with the live state after every iteration; it must copy whatever it
    keeps.  Stops after ``cfg.t_max`` iterations, or earlier once every
    trial's iterate change is below ``cfg.tol``.
    """
    h = np.asarray(h, dtype=complex)
    y = np.asarray(y, dtype=complex)
    batch, n, m = h.shape
    if n != cfg.plan.n:
        raise ConfigError(f"channel has {n} rows, partition expects {cfg.plan.n}")
    sigma_z = np.broadcast_to(np.asarray(sigma_z, dtype=float), (batch,))
    with_overlaps = cfg.variant.subtracts_overlaps and cfg.plan.has_overlaps
    parts = _partition(h, y, cfg.plan, with_overlaps)
    state = init_state(batch, m, cfg.plan, cfg.beta_x, c.sigma_x)
    for _ in range(cfg.t_max):
        ep_iteration(state, parts, sigma_z, c, cfg)
        if on_iteration is not None:
            on_iteration(state)
        if cfg.tol is not None and np.all(state.change < cfg.tol):
            break
    return state


def run_ep(ch, y, c, cfg, trace=False):
    """Detect one channel use.

    Returns the final :class:`DenoiserOutput` (unbatched) and, when
    ``trace`` is true, the list of per-iteration :class:`EpState`
    snapshots (batch axis of length 1), otherwise an empty list.
    """
    snaps = []
    hook = (lambda s: snaps.append(s.snapshot())) if trace else None
    state = run_ep_batch(ch.h[None], np.asarray(y)[None], ch.sigma_z, c, cfg, on_iteration=hook)
    return DenoiserOutput(state.den.x_hat[0], state.den.v_hat[0]), snaps


@dataclass
class FastResult:
    """Denoiser outputs of every iteration from :func:`run_ep_fast`, shape ``(B, T, M)``."""

    x_iters: np.ndarray
    v_iters: np.ndarray
    guards: np.ndarray

    @property
    def den(self):
        return DenoiserOutput(self.x_iters[:, -1], self.v_iters[:, -1])


def run_ep_fast(h, y, sigma_z, c, cfg):
    """Compiled equivalent of :func:`run_ep_batch` for Monte Carlo use.

    Runs exactly ``cfg.t_max`` iterations (``cfg.tol`` is ignored) and
    returns the denoiser output of every iteration.
    """
    from ovep import _kernels

    h = np.ascontiguousarray(h, dtype=complex)
    y = np.ascontiguousarray(y, dtype=complex)
    batch, n, m = h.shape
    if n != cfg.plan.n:
        raise ConfigError(f"channel has {n} rows, partition expects {cfg.plan.n}")
    sz = np.ascontiguousarray(np.broadcast_to(np.asarray(sigma_z, dtype=float), (batch,)))
    plan = cfg.plan
    subtract = cfg.variant.subtracts_overlaps and plan.has_overlaps
    oidx = plan.overlap_indices if subtract else np.zeros((0, 0), dtype=np.int64)
    x_iters = np.empty((batch, cfg.t_max, m), dtype=complex)
    v_iters = np.empty((batch, cfg.t_max, m))
    status = np.zeros(batch, dtype=np.int64)
    guards = np.zeros(batch, dtype=np.int64)
    _kernels.ep_batch(
        h, y, sz, np.ascontiguousarray(c.points), plan.block_indices.astype(np.int64),
        np.ascontiguousarray(oidx, dtype=np.int64), subtract, cfg.t_max, float(cfg.damping),
        float(cfg.beta_x), x_iters, v_iters, status, guards,
    )
    if np.any(status):
        raise NotPositiveDefinite("filter matrix lost positive definiteness")
    return FastResult(x_iters, v_iters, guards)


# -- classic LMMSE ----------------------------------------------------------


def lmmse_detect(h, y, sigma_z, sigma_x):
    """Batched one-shot LMMSE estimate ``(H^H H / sigma_z + I / sigma_x)^{-1} H^H y / sigma_z``."""
    h = np.asarray(h, dtype=complex)
    y = np.asarray(y, dtype=complex)
    sigma_z = np.asarray(sigma_z, dtype=float)
    hy = (np.conj(np.swapaxes(h, -1, -2)) @ y[..., None])[..., 0]
    d = np.full(hy.shape, 1.0 / sigma_x)
    diag, x_hat = regularized_gram_solve(h, d, sigma_z, hy / sigma_z[..., None])
    return DenoiserOutput(x_hat, diag)


def lmmse_baseline(ch, y, c):
    """One-shot LMMSE for a single channel use; hard decisions via ``demap_hard``."""
    return lmmse_detect(ch.h, y, ch.sigma_z, c.sigma_x)


# -- fixed point check ------------------------------------------------------


@dataclass
class FixedPointReport:
    gamma_deviation: float
    mu_deviation: float
    tol: float

    @property
    def passed(self):
        return self.gamma_deviation < self.tol and self.mu_deviation < self.tol


def verify_fixed_point(state, tol):
    """Check that all filter outputs and the denoiser output agree.

    At a fixed point every block filter, every overlap filter and the
    denoiser report the same per-user mean and precision.  Precisions are
    compared relative to the denoiser precision, means in absolute terms.
    The check is done per trial and the worst trial is reported.

    Raises
    ------
    NotConverged
        If the last iterate change of any trial is not below ``tol``.
    """
    if state.iter == 0 or np.any(~(state.change < tol)):
        raise NotConverged(f"iterate change {np.max(state.change):.3e} is not below {tol:.1e}")
    g_hat = state.den.gamma_hat
    gammas = [state.block_u.gamma_u, g_hat[:, None, :]]
    mus = [state.block_u.mu_u, state.den.x_hat[:, None, :]]
    if state.overlap_u is not None:
        gammas.append(state.overlap_u.gamma_u)
        mus.append(state.overlap_u.mu_u)
    g = np.concatenate(gammas, axis=1) / g_hat[:, None, :]
    mu = np.concatenate(mus, axis=1)
    g_dev = np.max(np.max(g, axis=1) - np.min(g, axis=1))
    mu_dev = max(np.max(np.abs(mu[b][:, None, :] - mu[b][None, :, :])) for b in range(mu.shape[0]))
    return FixedPointReport(float(g_dev), float(mu_dev), tol)
