"""Selection between the compiled propagation kernel and the numpy fallback.

The compiled extension is optional; when it failed to build (or when the
environment variable SCIVR_BACKEND forces "numpy") the pure-numpy stepper in
dynamics.py is used. Both implementations advance the same state layout with
the same operation order, so they agree to floating-point noise over regular
stretches of trajectory.
"""
import os

import numpy as np

from . import dynamics as _dynamics

try:
    from . import _kernels as _kernels
except ImportError:
    _kernels = None


def available_backends():
    names = ["numpy"]
    if _kernels is not None:
        names.insert(0, "compiled")
    return names


def default_backend():
    env = os.environ.get("SCIVR_BACKEND", "auto").lower()
    if env in ("compiled", "numpy"):
        if env == "compiled" and _kernels is None:
            raise RuntimeError("SCIVR_BACKEND=compiled but the extension is missing")
        return env
    return "compiled" if _kernels is not None else "numpy"


def _advance_compiled(spec, state, dt, kicks, drifts, out, nk):
    has_r = state.R is not None
    dummy_r = np.zeros((1, 1, 1), dtype=complex)
    dummy_or = np.zeros((1, 1, 1, 1), dtype=complex)
    _kernels.advance_chunk(
        spec.kind_id,
        spec.kernel_params,
        float(dt),
        np.ascontiguousarray(kicks),
        np.ascontiguousarray(drifts),
        state.q,
        state.p,
        state.S,
        state.M,
        state.R if has_r else dummy_r,
        state.V,
        state.grad,
        state.K,
        state.lag,
        out["q"],
        out["p"],
        out["S"],
        out["M"],
        out["K"],
        out["R"] if has_r else dummy_or,
        int(nk),
        1 if has_r else 0,
    )


def get_advance(name=None):
    """Stepper callable for a backend name (None means the default)."""
    name = name or default_backend()
    if name == "numpy":
        return _dynamics.advance_chunk_numpy
    if name == "compiled":
        if _kernels is None:
            raise RuntimeError("compiled backend requested but unavailable")
        return _advance_compiled
    raise ValueError("unknown backend %r" % (name,))
