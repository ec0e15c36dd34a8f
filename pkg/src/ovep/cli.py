"""Command line front end: ``ovep {ber,iters,diag,flops} [options]``.

Exit status is 0 on success, 2 for an invalid configuration and 3 when a
numerical failure aborts the run.
"""

import argparse
import logging
import sys

from ovep import sim
from ovep.errors import ConfigError, NumericalError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _float_list(text):
    try:
        return [float(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _int_list(text):
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _add_common(p, multi_size=False):
    if multi_size:
        p.add_argument("--n", type=_int_list, default=[32], help="BS antennas, comma list (default 32)")
        p.add_argument("--m", type=_int_list, default=None,
                       help="users, comma list matching --n (default round(n / 1.33))")
    else:
        p.add_argument("--n", type=int, default=32, help="BS antennas (default 32)")
        p.add_argument("--m", type=int, default=24, help="single-antenna users (default 24)")
    p.add_argument("--q", type=int, default=4, choices=(4, 16), help="QAM order")
    p.add_argument("--rho", type=float, default=0.0, help="BS-side correlation coefficient")
    p.add_argument("--snr", type=_float_list, default=[0.0, 4.0, 8.0, 12.0, 16.0, 20.0],
                   help="SNR list in dB, e.g. 0,4,8")
    p.add_argument("--detector", action="append", choices=sim.DETECTORS, default=None,
                   help="detector to run (repeatable)")
    p.add_argument("--nb", type=int, default=2, help="block size")
    p.add_argument("--ns", type=int, default=1, help="shift size of the overlapping variants")
    p.add_argument("--iters", type=int, default=None, help="iteration count for every EP detector")
    p.add_argument("--damping", type=float, default=0.5)
    p.add_argument("--beta-x", type=float, default=10.0, help="initial prior variance")
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0, help="master seed")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", default=".", help="output directory for the CSV files")


def build_parser():
    parser = argparse.ArgumentParser(prog="ovep", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("ber", help="BER versus SNR (ber.csv)")
    _add_common(p)
    p = sub.add_parser("iters", help="BER versus iteration (ber.csv, iters.csv)")
    _add_common(p)
    p = sub.add_parser("diag", help="first-iteration diagnostics (phi, mse, hist_in, hist_out)")
    _add_common(p)
    p.add_argument("--diag-snr", type=float, default=12.0,
                   help="SNR in dB of the correlation matrix and histograms")
    p = sub.add_parser("flops", help="operation counts (flops.csv)")
    _add_common(p, multi_size=True)
    return parser


def _config(args, **kw):
    defaults = {
        "ber": list(sim.SimConfig.detectors),
        "iters": list(sim.SimConfig.detectors),
        "diag": list(sim.DIAG_VARIANTS),
        "flops": ["mf-ep", "novep", "ovep", "lmmse-ep"],
    }
    return sim.SimConfig(
        q=args.q,
        rho=args.rho,
        snr_db=tuple(args.snr),
        detectors=tuple(args.detector or defaults[args.command]),
        n_b=args.nb,
        n_s=args.ns,
        t_max=args.iters,
        damping=args.damping,
        beta_x=args.beta_x,
        n_trials=args.trials,
        seed=args.seed,
        threads=args.threads,
        out=args.out,
        **kw,
    )


def _summary(result):
    for c in result.ber or ():
        print(f"{c.variant:>11s} {c.snr_db:7.2f} dB  BER {c.ber():.3e}  ({int(c.errors[-1])}/{c.bits})")
    for (v, snr), d in (result.mse or {}).items():
        print(f"{v:>11s} {snr:7.2f} dB  corr {d.term_corr:9.3f}  align {d.term_align.real:8.3f}"
              f"  mse {d.mse_direct:8.3f}")
    for v, d in (result.phi or {}).items():
        print(f"{v:>11s} mean off-diagonal |phi| {d.mean_offdiag():.4f}")
    for row in result.flops or ():
        print(f"{row[0]:>11s} N={row[1]:<4d} M={row[2]:<4d} total {row[8]}")


def run(args):
    if args.command == "flops":
        ns = args.n
        ms = args.m or [int(round(n / 1.33)) for n in ns]
        if len(ms) != len(ns):
            raise ConfigError("--m needs one entry per --n")
        cfg = _config(args, n=ns[0], m=ms[0])
        result = sim.run_flops(cfg, list(zip(ns, ms)))
    else:
        extra = {"diag_snr_db": args.diag_snr} if args.command == "diag" else {}
        cfg = _config(args, n=args.n, m=args.m, **extra)
        fn = {"ber": sim.run_ber_sweep, "iters": sim.run_iteration_sweep, "diag": sim.run_diagnostics}
        result = fn[args.command](cfg)
    for path in sim.emit_csv(result, args.out):
        print(f"wrote {path}")
    _summary(result)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run(args)
    except ConfigError as exc:
        print(f"ovep: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"ovep: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
