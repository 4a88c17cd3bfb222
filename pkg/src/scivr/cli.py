"""Command-line front end.

Exit codes: 0 on success, 2 on configuration or usage errors, and 3 when
no requested method could produce a spectrum at all.
"""

import argparse
import sys

import numpy as np

from . import dvr as _dvr
from . import orchestrator as orch
from . import spectrum as _sp

# configs above this many trajectories need an explicit opt-in
LARGE_N = 200000


def _common(sub):
    sub.add_argument("--seed", type=int, default=None,
                     help="override the config seed")
    sub.add_argument("--threads", type=int, default=None,
                     help="override the config worker count")
    sub.add_argument("--out", default=None,
                     help="override the output directory")


def build_parser():
    p = argparse.ArgumentParser(
        prog="scivr",
        description="trajectory-based vibrational power spectra with "
                    "exact grid cross-checks")
    sp = p.add_subparsers(dest="command", required=True)

    r = sp.add_parser("run", help="execute one config end to end")
    r.add_argument("config", help="config file path or bundled name")
    r.add_argument("--large", action="store_true",
                   help="allow ensembles beyond %d trajectories" % LARGE_N)
    _common(r)

    c = sp.add_parser("compare",
                      help="run several configs over one system and "
                           "tabulate methods side by side")
    c.add_argument("configs", nargs="+",
                   help="config file paths or bundled names")
    c.add_argument("--large", action="store_true",
                   help="allow ensembles beyond %d trajectories" % LARGE_N)
    _common(c)

    d = sp.add_parser("dvr", help="solve only the grid-reference block")
    d.add_argument("config", help="config file path or bundled name")
    _common(d)

    k = sp.add_parser("peaks", help="list peaks of a spectrum file")
    k.add_argument("spectrum", help="two-column spectrum file")
    k.add_argument("--floor", type=float, default=0.05,
                   help="peak floor as a fraction of the tallest "
                        "intensity (default 0.05)")
    k.add_argument("--emin", type=float, default=None)
    k.add_argument("--emax", type=float, default=None)
    k.add_argument("--out", default=None,
                   help="write the table here instead of stdout")
    return p


def _check_large(cfgs, large):
    for c in cfgs:
        n = c.values["sampling.n"]
        if n > LARGE_N and not large:
            raise orch.ConfigError(
                "field sampling.n: %d trajectories need --large" % n)


def _cmd_run(args):
    cfg = orch.load_config(args.config)
    _check_large([cfg], args.large)
    summary = orch.run(cfg, out=args.out, seed=args.seed,
                       threads=args.threads)
    sys.stdout.write(summary.as_text())
    print("artifacts in %s" % summary.out_dir)
    return 0


def _cmd_compare(args):
    cfgs = [orch.load_config(c) for c in args.configs]
    _check_large(cfgs, args.large)
    text = orch.compare_methods(cfgs, out=args.out, seed=args.seed,
                                threads=args.threads)
    sys.stdout.write(text)
    return 0


def _cmd_dvr(args):
    cfg = orch.load_config(args.config)
    v = cfg.values
    if not v["dvr.enabled"]:
        raise orch.ConfigError("field dvr.enabled: config has no grid-"
                               "reference block")
    spec = cfg.pes_spec()
    levels, _ = _dvr.solve_grid(spec, cfg.dvr_grid(spec), v["dvr.states"],
                                check_residual=v["dvr.residual_tol"])
    shown = cfg.to_output_units(levels)
    for e in shown:
        print("%.10g" % e)
    if args.out:
        import os
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, "dvr_reference.dat")
        with open(path, "w") as fh:
            fh.write("# reference levels (%s), one per line\n"
                     % v["spectrum.units"])
            for e in shown:
                fh.write("%.10e\n" % e)
        print("written to %s" % path)
    return 0


def _cmd_peaks(args):
    data = np.loadtxt(args.spectrum)
    if data.ndim != 2 or data.shape[1] < 2:
        raise orch.ConfigError("spectrum file must have two columns")
    grid = _sp.SpectrumGrid(data[:, 0], data[:, 1], {})
    if args.emin is not None or args.emax is not None:
        grid = grid.crop(-np.inf if args.emin is None else args.emin,
                         np.inf if args.emax is None else args.emax)
    table = _sp.find_peaks(grid, min_height_fraction=args.floor)
    lines = ["%.10g %.10g" % (e, h)
             for e, h in zip(table.peaks, table.heights)]
    text = "\n".join(lines) + ("\n" if lines else "")
    if args.out:
        with open(args.out, "w") as fh:
            fh.write("# columns: energy, height\n")
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    handler = {"run": _cmd_run, "compare": _cmd_compare,
               "dvr": _cmd_dvr, "peaks": _cmd_peaks}[args.command]
    try:
        return handler(args)
    except orch.ConfigError as err:
        print("config error: %s" % err, file=sys.stderr)
        return 2
    except (OSError, ValueError) as err:
        print("error: %s" % err, file=sys.stderr)
        return 2
    except _sp.MethodInapplicable as err:
        print("inapplicable: %s" % err, file=sys.stderr)
        if err.detail:
            for k, v in sorted(err.detail.items()):
                print("  %s: %s" % (k, v), file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
