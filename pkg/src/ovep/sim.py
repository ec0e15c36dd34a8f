"""Monte Carlo harness: BER sweeps, per-iteration BER, first-iteration diagnostics.

Randomness is keyed per trial.  Trial ``i`` at SNR index ``s`` draws its
channel, its bits and its noise from three independent streams spawned
from ``SeedSequence(seed, spawn_key=(s, i))``.  Every detector sees the
same draws (paired comparison), and the outcome does not depend on how
trials are split between workers.

Trials are processed in fixed-size chunks.  Chunks may run on a thread
pool, but partial results are always reduced in chunk order, so the
emitted CSV files are byte-identical for any thread count.
"""

import csv
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from ovep.channel import CorrelationSpec, complex_normal, correlation_sqrt
from ovep.detector import DetectorConfig, Variant, lmmse_detect, run_ep_batch, run_ep_fast
from ovep.diagnostics import (
    CorrelationAccumulator,
    DenoiserIoStats,
    MseAccumulator,
    default_input_edges,
    default_output_edges,
    flops_estimate,
    lmmse_flops,
)
from ovep.errors import ConfigError
from ovep.modem import Constellation, demap_hard, map_bits

log = logging.getLogger(__name__)

LMMSE = "lmmse"
DETECTORS = (LMMSE,) + tuple(v.value for v in Variant)
DIAG_VARIANTS = ("novep", "ovep-nosub", "ovep")

SCHEMAS = {
    "ber": ("variant", "snr_db", "iterations", "trials", "bits", "bit_errors", "ber", "ber_stderr"),
    "iters": ("variant", "snr_db", "iteration", "ber", "ber_stderr"),
    "phi": ("variant", "rho", "l", "l_prime", "abs_phi", "re_phi", "im_phi"),
    "mse": ("variant", "snr_db", "term_corr", "term_align_re", "term_energy", "mse_direct", "mse_identity"),
    "hist_in": ("variant", "bin_lo", "bin_hi", "count"),
    "hist_out": ("variant", "bin_lo", "bin_hi", "count"),
    "flops": ("variant", "n", "m", "nb", "ns", "q", "t", "flops_per_iter", "flops_total"),
}


@dataclass(frozen=True)
class SimConfig:
    """Parameters of one experiment.

    ``t_max`` overrides the per-detector default iteration counts when
    set.  ``n_s`` applies to the overlapping variants only; NOvEP always
    uses ``n_s = n_b``.
    """

    n: int = 32
    m: int = 24
    q: int = 4
    rho: float = 0.0
    snr_db: tuple = (0.0, 4.0, 8.0, 12.0, 16.0, 20.0)
    detectors: tuple = ("lmmse", "lmmse-ep", "novep", "ovep-nosub", "ovep")
    n_b: int = 2
    n_s: int = 1
    t_max: int | None = None
    damping: float = 0.5
    beta_x: float = 10.0
    sigma_x: float = 1.0
    n_trials: int = 1000
    seed: int = 0
    threads: int = 1
    chunk: int = 200
    diag_snr_db: float = 12.0
    out: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "snr_db", tuple(float(s) for s in np.atleast_1d(self.snr_db)))
        object.__setattr__(self, "detectors", tuple(self.detectors))
        if not self.snr_db:
            raise ConfigError("snr list is empty")
        if not self.detectors:
            raise ConfigError("no detector selected")
        for d in self.detectors:
            if d not in DETECTORS:
                raise ConfigError(f"unknown detector {d!r}; choose from {', '.join(DETECTORS)}")
        if len(set(self.detectors)) != len(self.detectors):
            raise ConfigError("detector listed twice")
        if self.n_trials < 1:
            raise ConfigError("n_trials must be at least 1")
        if self.threads < 1 or self.chunk < 1:
            raise ConfigError("threads and chunk must be positive")
        if self.sigma_x <= 0:
            raise ConfigError("sigma_x must be positive")
        if self.m < 1:
            raise ConfigError("m must be positive")
        CorrelationSpec(self.rho, self.n)
        self.constellation()
        for d in self.detectors:
            self.detector_config(d)

    def constellation(self):
        return Constellation(self.q, self.sigma_x)

    def detector_config(self, name, **overrides):
        """``DetectorConfig`` of a detector name, ``None`` for one-shot LMMSE."""
        if name == LMMSE:
            return None
        kw = dict(t_max=self.t_max, damping=self.damping, beta_x=self.beta_x)
        kw.update(overrides)
        return DetectorConfig.for_variant(name, self.n, n_b=self.n_b, n_s=self.n_s, **kw)

    def iterations(self, name):
        cfg = self.detector_config(name)
        return 1 if cfg is None else cfg.t_max


@dataclass
class TrialRecord:
    """Outcome of one detector on one trial."""

    trial: int
    seed: tuple
    variant: str
    snr_db: float
    bit_errors: int
    bits: int
    iter_errors: np.ndarray | None = None
    guards: int = 0


@dataclass
class BerCell:
    """Bit-error counts of one (detector, SNR) pair, per iteration."""

    variant: str
    snr_db: float
    trials: int
    bits: int
    errors: np.ndarray
    guards: int = 0

    @property
    def iterations(self):
        return len(self.errors)

    def ber(self, iteration=-1):
        return self.errors[iteration] / self.bits if self.bits else 0.0

    def stderr(self, iteration=-1):
        p = self.ber(iteration)
        return float(np.sqrt(p * (1.0 - p) / self.bits)) if self.bits else 0.0

    def merge(self, other):
        self.trials += other.trials
        self.bits += other.bits
        self.errors = self.errors + other.errors
        self.guards += other.guards
        return self


@dataclass
class SweepResult:
    """Aggregates of one run; each filled attribute maps to one CSV table."""

    config: SimConfig
    ber: list | None = None
    per_iteration: bool = False
    phi: dict | None = None
    mse: dict | None = None
    hist: dict | None = None
    flops: list | None = None
    records: list = field(default_factory=list)

    def cell(self, variant, snr_db):
        for c in self.ber or ():
            if c.variant == variant and c.snr_db == float(snr_db):
                return c
        raise KeyError((variant, snr_db))

    def tables(self):
        """Rows of every computed table, keyed by schema name."""
        out = {}
        if self.ber is not None:
            out["ber"] = [
                (c.variant, c.snr_db, c.iterations, c.trials, c.bits, int(c.errors[-1]), c.ber(), c.stderr())
                for c in self.ber
            ]
            if self.per_iteration:
                out["iters"] = [
                    (c.variant, c.snr_db, t + 1, c.ber(t), c.stderr(t))
                    for c in self.ber
                    for t in range(c.iterations)
                ]
        if self.phi is not None:
            rows = []
            for v, d in self.phi.items():
                l = d.phi.shape[0]
                for i in range(l):
                    for j in range(l):
                        z = d.phi[i, j]
                        rows.append((v, self.config.rho, i + 1, j + 1, abs(z), z.real, z.imag))
            out["phi"] = rows
        if self.mse is not None:
            out["mse"] = [
                (v, snr, d.term_corr, d.term_align.real, d.term_energy, d.mse_direct, d.mse_identity)
                for (v, snr), d in self.mse.items()
            ]
        if self.hist is not None:
            for which in ("in", "out"):
                out["hist_" + which] = [
                    (v, lo, hi, int(cnt)) for v, s in self.hist.items() for lo, hi, cnt in s.bins(which)
                ]
        if self.flops is not None:
            out["flops"] = list(self.flops)
        return out


# -- trial generation -------------------------------------------------------


def trial_streams(seed, snr_idx, trial):
    """Independent generators for the channel, the bits and the noise of one trial."""
    ss = np.random.SeedSequence(seed, spawn_key=(snr_idx, trial))
    return [np.random.default_rng(s) for s in ss.spawn(3)]


@dataclass
class TrialBatch:
    h: np.ndarray
    bits: np.ndarray
    x: np.ndarray
    y: np.ndarray
    sigma_z: float
    start: int


def draw_trials(cfg, snr_idx, start, stop):
    """Channel uses ``start .. stop - 1`` at SNR index ``snr_idx``, stacked."""
    c = cfg.constellation()
    root = correlation_sqrt(CorrelationSpec(cfg.rho, cfg.n))
    sigma_z = cfg.sigma_x / 10.0 ** (cfg.snr_db[snr_idx] / 10.0)
    count = stop - start
    h = np.empty((count, cfg.n, cfg.m), dtype=complex)
    bits = np.empty((count, cfg.m * c.bits_per_symbol), dtype=np.uint8)
    z = np.empty((count, cfg.n), dtype=complex)
    for k in range(count):
        gh, gx, gz = trial_streams(cfg.seed, snr_idx, start + k)
        h[k] = root @ complex_normal(gh, (cfg.n, cfg.m))
        bits[k] = gx.integers(0, 2, bits.shape[1], dtype=np.uint8)
        z[k] = complex_normal(gz, (cfg.n,), sigma_z)
    x = map_bits(bits, c)
    y = np.einsum("bnm,bm->bn", h, x) + z
    return TrialBatch(h, bits, x, y, sigma_z, start)


def _chunks(cfg):
    return [
        (s, a, min(a + cfg.chunk, cfg.n_trials))
        for s in range(len(cfg.snr_db))
        for a in range(0, cfg.n_trials, cfg.chunk)
    ]


def _ordered_map(fn, items, threads):
    if threads == 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# -- BER --------------------------------------------------------------------


def _detect_errors(cfg, name, batch, c):
    """Per-trial bit errors at every iteration, shape ``(B, T)``, plus guard counts."""
    dc = cfg.detector_config(name)
    if dc is None:
        x_iters = lmmse_detect(batch.h, batch.y, batch.sigma_z, c.sigma_x).x_hat[:, None, :]
        guards = np.zeros(len(batch.h), dtype=np.int64)
    else:
        res = run_ep_fast(batch.h, batch.y, batch.sigma_z, c, dc)
        x_iters, guards = res.x_iters, res.guards
    decided = demap_hard(x_iters, c)
    errors = np.count_nonzero(decided != batch.bits[:, None, :], axis=-1)
    return errors, guards


def _ber_chunk(cfg, keep_records, item):
    snr_idx, start, stop = item
    c = cfg.constellation()
    batch = draw_trials(cfg, snr_idx, start, stop)
    snr = cfg.snr_db[snr_idx]
    nbits = batch.bits.shape[1]
    cells, records = [], []
    for name in cfg.detectors:
        errors, guards = _detect_errors(cfg, name, batch, c)
        cells.append(BerCell(name, snr, stop - start, nbits * (stop - start),
                             errors.sum(axis=0), int(guards.sum())))
        if keep_records:
            for k in range(stop - start):
                records.append(TrialRecord(start + k, (cfg.seed, snr_idx, start + k), name, snr,
                                           int(errors[k, -1]), nbits, errors[k].copy(), int(guards[k])))
    return cells, records


def _ber_run(cfg, per_iteration, keep_records):
    parts = _ordered_map(lambda it: _ber_chunk(cfg, keep_records, it), _chunks(cfg), cfg.threads)
    merged = {}
    records = []
    for cells, recs in parts:
        for cell in cells:
            key = (cell.variant, cell.snr_db)
            if key in merged:
                merged[key].merge(cell)
            else:
                merged[key] = cell
        records.extend(recs)
    # rows ordered by detector, then SNR
    rows = [merged[(d, s)] for d in cfg.detectors for s in cfg.snr_db]
    for cell in rows:
        if cell.errors[-1] == 0:
            log.warning("%s at %.2f dB: no bit errors in %d bits", cell.variant, cell.snr_db, cell.bits)
    return SweepResult(cfg, ber=rows, per_iteration=per_iteration, records=records)


def run_ber_sweep(cfg, keep_records=False):
    """BER after the last iteration for every (detector, SNR) pair."""
    return _ber_run(cfg, False, keep_records)


def run_iteration_sweep(cfg, keep_records=False):
    """As :func:`run_ber_sweep`, additionally reporting the BER after every iteration."""
    return _ber_run(cfg, True, keep_records)


# -- first-iteration diagnostics ---------------------------------------------


def _diag_snr_list(cfg):
    snrs = list(cfg.snr_db)
    if cfg.diag_snr_db not in snrs:
        snrs.append(float(cfg.diag_snr_db))
    return tuple(snrs)


def _diag_chunk(cfg, variants, edges, item):
    snr_idx, start, stop = item
    c = cfg.constellation()
    batch = draw_trials(cfg, snr_idx, start, stop)
    at_diag = cfg.snr_db[snr_idx] == cfg.diag_snr_db
    out = {}
    for v in variants:
        dc = cfg.detector_config(v, t_max=1)
        state = run_ep_batch(batch.h, batch.y, batch.sigma_z, c, dc)
        mse = MseAccumulator(cfg.sigma_x).add(state, batch.x)
        phi = hist = None
        if at_diag:
            phi = CorrelationAccumulator().add(state)
            hist = DenoiserIoStats(edges[0], edges[1], 0.01 * cfg.sigma_x).add(state)
        out[v] = (mse, phi, hist)
    return snr_idx, out


def run_diagnostics(cfg, edges_in=None, edges_out=None):
    """First-iteration statistics for the block variants.

    The MSE decomposition is computed at every SNR; the correlation matrix
    and the histograms at ``cfg.diag_snr_db`` (added to the SNR list when
    missing).  Variants default to NOvEP, the ablation without subtraction
    and OvEP; other EP detectors in ``cfg.detectors`` are included too.
    """
    dcfg = replace(cfg, snr_db=_diag_snr_list(cfg))
    variants = [d for d in cfg.detectors if d != LMMSE] or list(DIAG_VARIANTS)
    edges = (
        default_input_edges() if edges_in is None else np.asarray(edges_in, dtype=float),
        default_output_edges(cfg.sigma_x) if edges_out is None else np.asarray(edges_out, dtype=float),
    )
    parts = _ordered_map(lambda it: _diag_chunk(dcfg, variants, edges, it), _chunks(dcfg), cfg.threads)
    mse_acc, phi_acc, hist_acc = {}, {}, {}
    for snr_idx, out in parts:
        snr = dcfg.snr_db[snr_idx]
        for v, (mse, phi, hist) in out.items():
            key = (v, snr)
            mse_acc[key] = mse_acc[key].merge(mse) if key in mse_acc else mse
            if phi is not None:
                phi_acc[v] = phi_acc[v].merge(phi) if v in phi_acc else phi
                hist_acc[v] = hist_acc[v].merge(hist) if v in hist_acc else hist
    mse = {(v, s): mse_acc[(v, s)].result(min_trials=1) for v in variants for s in dcfg.snr_db}
    phi = {v: phi_acc[v].result() for v in variants}
    hist = {v: hist_acc[v] for v in variants}
    return SweepResult(dcfg, phi=phi, mse=mse, hist=hist)


# -- operation counts --------------------------------------------------------


def run_flops(cfg, sizes=None):
    """FLOPs rows for every detector; ``sizes`` is a list of ``(n, m)`` pairs."""
    sizes = sizes or [(cfg.n, cfg.m)]
    rows = []
    for n, m in sizes:
        sub = replace(cfg, n=n, m=m)
        for name in cfg.detectors:
            dc = sub.detector_config(name)
            if dc is None:
                est, nb, ns, t = lmmse_flops(n, m), n, n, 1
            else:
                est, nb, ns, t = flops_estimate(dc, n, m, cfg.q), dc.plan.n_b, dc.plan.n_s, dc.t_max
            rows.append((name, n, m, nb, ns, cfg.q, t, est.per_iteration, est.total))
    return SweepResult(cfg, flops=rows)


# -- CSV --------------------------------------------------------------------


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.9g}"
    return str(v)


def emit_csv(result, path):
    """Write every table of ``result`` as ``<path>/<schema>.csv``; returns the file paths."""
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {path}: {exc}") from exc
    written = []
    for name, rows in result.tables().items():
        fn = os.path.join(path, name + ".csv")
        try:
            with open(fn, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(SCHEMAS[name])
                for row in rows:
                    w.writerow([_fmt(v) for v in row])
        except OSError as exc:
            raise OSError(f"cannot write {fn}: {exc}") from exc
        written.append(fn)
    return written


def read_csv(fn):
    """Parse a file written by :func:`emit_csv`; numeric fields come back as floats."""

    def conv(s):
        try:
            return float(s)
        except ValueError:
            return s

    with open(fn, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        return header, [[conv(s) for s in row] for row in r]
