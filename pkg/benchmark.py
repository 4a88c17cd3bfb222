"""Timing comparison between the compiled stepper and the numpy fallback.

Runs the same chunk workload through both backends on each model surface
and reports steps * trajectories per second, plus the largest deviation
between the two position records as a sanity check. Invoke with

    python benchmark.py [--n 500] [--steps 2000] [--substeps 2]
"""
import argparse
import time

import numpy as np

from scivr import backends, dynamics, pes, spectrum


def time_backend(name, spec, q0, p0, dt, steps, kicks, drifts, repeat=3):
    advance = backends.get_advance(name)
    n, F = q0.shape
    best = np.inf
    out = dynamics.alloc_out(n, F, steps)
    for _ in range(repeat):
        state = dynamics.ChunkState(spec, q0, p0)
        t0 = time.perf_counter()
        advance(spec, state, dt, kicks, drifts, out, steps)
        best = min(best, time.perf_counter() - t0)
    return best, out["q"].copy()


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=500, help="trajectories")
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--substeps", type=int, default=2)
    ap.add_argument("--dt", type=float, default=0.05)
    args = ap.parse_args()

    avail = backends.available_backends()
    print("backends:", ", ".join(avail))
    if "compiled" not in avail:
        print("compiled extension missing; timing the fallback only")

    cases = [
        pes.PesSpec("Harmonic", {"omega": [1.0, 1.3]}),
        pes.PesSpec("HenonHeiles", {"lambda": 0.11803}),
        pes.PesSpec("MorseQuartic", {"D": 0.2, "beta": 0.02, "lambda": 1e-6}),
        pes.PesSpec("Morse1D", {"D": 0.2}),
    ]
    kicks, drifts = dynamics.stage_coefficients("suzuki4", args.substeps)
    work = args.n * args.steps
    header = "%-13s %12s %12s %9s %10s" % (
        "surface", "numpy", "compiled", "speedup", "max|dq|")
    print(header)
    print("-" * len(header))
    for spec in cases:
        chi = spectrum.CoherentState.from_model(spec)
        # small sampling widths keep every trajectory bound, so both
        # backends are timed on regular dynamics rather than on overflow
        q0, p0 = spectrum.sample_husimi(chi, args.n, 2024, width_scale=0.2)
        t_np, q_np = time_backend(
            "numpy", spec, q0, p0, args.dt, args.steps, kicks, drifts)
        row = "%-13s %10.0f/s" % (spec.kind, work / t_np)
        if "compiled" in avail:
            t_c, q_c = time_backend(
                "compiled", spec, q0, p0, args.dt, args.steps, kicks, drifts)
            dq = float(np.max(np.abs(q_np - q_c)))
            row += " %10.0f/s %8.1fx %10.2e" % (work / t_c, t_np / t_c, dq)
        print(row)


if __name__ == "__main__":
    main()
