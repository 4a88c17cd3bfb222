"""Symplectic propagation of trajectories, monodromy and log-derivative data.

The classical map is a 4th-order composition of kick/drift stages written in
kick-drift-...-kick order, so the force and Hessian at the end of every step
double as the first stage of the next one and as the stored per-step series.
The monodromy matrix is advanced by the tangent map of the same discrete
stages (kick: M_p -= d*dt*K M_q, drift: M_q += c*dt*M_p) with the Hessian of
the corresponding kick, which makes M the exact Jacobian of the numerical
flow. The complex log-derivative matrix R follows the two-stage scheme
kick R -= d*dt*K, drift R <- (I + c*dt*R)^-1 R, which is identically
P Q^-1 of the same tangent map, so it diverges only where Q would.
"""
import numpy as np

from . import pes as _pes

HBAR = 1.0

# Suzuki fractal 4th-order composition, kick-first form. Five elementary
# leapfrogs S2(w h) with w = (p, p, 1-4p, p, p), p = 1/(4 - 4^(1/3)).
_SUZ_P = 1.0 / (4.0 - 4.0 ** (1.0 / 3.0))
_SUZ_W3 = 1.0 - 4.0 * _SUZ_P
SUZUKI4 = {
    "kicks": np.array(
        [
            0.5 * _SUZ_P,
            _SUZ_P,
            0.5 * (_SUZ_P + _SUZ_W3),
            0.5 * (_SUZ_P + _SUZ_W3),
            _SUZ_P,
            0.5 * _SUZ_P,
        ]
    ),
    "drifts": np.array([_SUZ_P, _SUZ_P, _SUZ_W3, _SUZ_P, _SUZ_P]),
}

_FR_TH = 1.0 / (2.0 - 2.0 ** (1.0 / 3.0))
FOREST_RUTH4 = {
    "kicks": np.array(
        [0.5 * _FR_TH, 0.5 * (1.0 - _FR_TH), 0.5 * (1.0 - _FR_TH), 0.5 * _FR_TH]
    ),
    "drifts": np.array([_FR_TH, 1.0 - 2.0 * _FR_TH, _FR_TH]),
}

_SCHEMES = {"suzuki4": SUZUKI4, "forest_ruth4": FOREST_RUTH4}


def stage_coefficients(name="suzuki4", substeps=1):
    """Kick/drift coefficient arrays for a named composition scheme.

    substeps > 1 chains that many sweeps of the composition inside one
    recorded step, merging the adjacent boundary kicks, so the map stays
    kick-first with a single force evaluation shared across the seam.
    """
    try:
        sch = _SCHEMES[name]
    except KeyError:
        raise ValueError("unknown integrator scheme %r" % (name,))
    m = int(substeps)
    if m < 1:
        raise ValueError("substeps must be a positive integer")
    k, d = sch["kicks"] / m, sch["drifts"] / m
    if m == 1:
        return k.copy(), d.copy()
    kicks = list(k)
    drifts = list(d)
    for _ in range(m - 1):
        kicks[-1] += k[0]
        kicks.extend(k[1:])
        drifts.extend(d)
    return np.array(kicks), np.array(drifts)


def action_increment(p, V, dt):
    """Trapezoidal action increase from the Lagrangian |p|^2/2 - V.

    Scalars are treated as a constant integrand over one step of length dt;
    arrays are endpoint series (momentum rows in the last axis when p carries
    more than one degree of freedom).
    """
    p = np.asarray(p, dtype=float)
    V = np.asarray(V, dtype=float)
    kin = p * p / 2.0 if p.ndim == V.ndim else np.sum(p * p, axis=-1) / 2.0
    lag = kin - V
    if lag.ndim == 0 or lag.size == 1:
        return dt * float(np.ravel(lag)[0])
    return float(np.trapezoid(lag, dx=dt))


class ChunkState:
    """Mutable per-chunk propagation state for n trajectories."""

    def __init__(self, spec, q0, p0, with_riccati=False, gamma=None):
        q0 = np.atleast_2d(np.asarray(q0, dtype=float))
        p0 = np.atleast_2d(np.asarray(p0, dtype=float))
        n, F = q0.shape
        if F != spec.ndim or p0.shape != q0.shape:
            raise ValueError("initial conditions do not match pes dimension")
        self.spec = spec
        self.n, self.F = n, F
        # own copies: the steppers advance these buffers in place
        self.q = np.array(q0, dtype=float, order="C", copy=True)
        self.p = np.array(p0, dtype=float, order="C", copy=True)
        self.S = np.zeros(n)
        self.M = np.zeros((n, 2 * F, 2 * F))
        idx = np.arange(2 * F)
        self.M[:, idx, idx] = 1.0
        self.R = None
        if with_riccati:
            g = np.broadcast_to(np.asarray(gamma, dtype=float), (F,))
            self.R = np.zeros((n, F, F), dtype=complex)
            self.R[:, np.arange(F), np.arange(F)] = -1j * HBAR * g
        # stage cache: V, grad, K at the current configuration
        V, g_, K = _pes.value_grad_hess(spec, self.q)
        self.V, self.grad, self.K = V, g_, K
        self.lag = np.sum(self.p * self.p, axis=1) / 2.0 - self.V


def _riccati_drift(R, h):
    """In-place R <- (I + h R)^-1 R for stacked complex (n, F, F)."""
    F = R.shape[-1]
    if F == 1:
        R[:, 0, 0] /= 1.0 + h * R[:, 0, 0]
        return
    if F == 2:
        a = 1.0 + h * R[:, 0, 0]
        b = h * R[:, 0, 1]
        c = h * R[:, 1, 0]
        d = 1.0 + h * R[:, 1, 1]
        det = a * d - b * c
        r00 = (d * R[:, 0, 0] - b * R[:, 1, 0]) / det
        r01 = (d * R[:, 0, 1] - b * R[:, 1, 1]) / det
        r10 = (-c * R[:, 0, 0] + a * R[:, 1, 0]) / det
        r11 = (-c * R[:, 0, 1] + a * R[:, 1, 1]) / det
        R[:, 0, 0], R[:, 0, 1], R[:, 1, 0], R[:, 1, 1] = r00, r01, r10, r11
        return
    eye = np.eye(F)
    A = eye[None, :, :] + h * R
    R[...] = np.linalg.solve(A, R)


def advance_chunk_numpy(spec, state, dt, kicks, drifts, out, nk):
    """Advance a chunk nk steps, recording post-step data.

    out is a dict of preallocated arrays keyed by 'q', 'p', 'S', 'M', 'K'
    and (when state.R is not None) 'R'; leading axis length >= nk. Entries
    hold the state after steps 1..nk relative to the current state.
    """
    F = state.F
    q, p, S, M, R = state.q, state.p, state.S, state.M, state.R
    Mp = M[:, :F, :]
    Mq = M[:, F:, :]
    nstage = kicks.shape[0]
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for k in range(nk):
            grad, K = state.grad, state.K
            for s in range(nstage):
                dts = kicks[s] * dt
                p -= dts * grad
                Mp -= dts * np.einsum("nij,njk->nik", K, Mq)
                if R is not None:
                    R -= dts * K
                if s == nstage - 1:
                    break
                h = drifts[s] * dt
                q += h * p
                Mq += h * Mp
                if R is not None:
                    _riccati_drift(R, h)
                V, grad, K = _pes.value_grad_hess(spec, q)
            state.V, state.grad, state.K = V, grad, K
            lag = np.sum(p * p, axis=1) / 2.0 - V
            S += 0.5 * dt * (state.lag + lag)
            state.lag = lag
            out["q"][k] = q
            out["p"][k] = p
            out["S"][k] = S
            out["M"][k] = M
            out["K"][k] = K
            if R is not None:
                out["R"][k] = R


def alloc_out(n, F, nk, with_riccati=False):
    """Preallocated output block for advance_chunk calls."""
    out = {
        "q": np.empty((nk, n, F)),
        "p": np.empty((nk, n, F)),
        "S": np.empty((nk, n)),
        "M": np.empty((nk, n, 2 * F, 2 * F)),
        "K": np.empty((nk, n, F, F)),
    }
    if with_riccati:
        out["R"] = np.empty((nk, n, F, F), dtype=complex)
    return out


class TrajectoryRecord:
    """Full per-step history of a single trajectory.

    Arrays carry nsteps+1 rows (step 0 is the initial condition). first_bad
    is the first step index whose state stopped being finite (monodromy or
    phase-space overflow), or None when the whole record is usable.
    """

    def __init__(self, spec, dt, q, p, S, M, K, R=None):
        self.spec = spec
        self.dt = dt
        self.nsteps = q.shape[0] - 1
        self.q, self.p, self.S, self.M, self.K, self.R = q, p, S, M, K, R
        self.first_bad = _first_bad_step(q, p, S, M, R)

    @property
    def times(self):
        return self.dt * np.arange(self.nsteps + 1)

    def usable_steps(self):
        """Number of leading steps with finite data (record length if all)."""
        return self.q.shape[0] if self.first_bad is None else self.first_bad


def _first_bad_step(q, p, S, M, R=None, limit=1e300):
    flat_bad = ~np.isfinite(S)
    flat_bad |= ~np.all(np.isfinite(q), axis=-1)
    flat_bad |= ~np.all(np.isfinite(p), axis=-1)
    mflat = np.abs(M).reshape(M.shape[0], -1)
    flat_bad |= ~np.all(mflat <= limit, axis=-1)
    if R is not None:
        rflat = np.abs(R).reshape(R.shape[0], -1)
        flat_bad |= ~np.all(rflat <= limit, axis=-1)
    idx = np.nonzero(flat_bad)[0]
    return int(idx[0]) if idx.size else None


def propagate(spec, z0, dt, nsteps, scheme="suzuki4", with_riccati=False,
              gamma=None, backend=None, substeps=1):
    """Propagate one trajectory and keep its whole history.

    z0 is a (q, p) pair of F-vectors. Used for reference trajectories, for
    sensitivity checks and for the central-trajectory prefactor; ensemble
    work goes through the chunked streaming path instead.
    """
    from . import backends as _backends

    q0, p0 = (np.asarray(v, dtype=float).reshape(1, -1) for v in z0)
    if dt <= 0:
        raise ValueError("dt must be positive")
    if not (np.all(np.isfinite(q0)) and np.all(np.isfinite(p0))):
        raise ValueError("initial condition must be finite")
    kicks, drifts = stage_coefficients(scheme, substeps)
    state = ChunkState(spec, q0, p0, with_riccati=with_riccati, gamma=gamma)
    F = spec.ndim
    out = alloc_out(1, F, nsteps, with_riccati=with_riccati)
    advance = _backends.get_advance(backend)
    advance(spec, state, dt, kicks, drifts, out, nsteps)

    def series(first, rest):
        return np.concatenate([first[None, ...], rest[:, 0]], axis=0)

    qs = series(q0[0], out["q"])
    ps = series(p0[0], out["p"])
    Ss = np.concatenate([[0.0], out["S"][:, 0]])
    eye = np.eye(2 * F)
    Ms = series(eye, out["M"])
    K0 = _pes.value_grad_hess(spec, q0)[2][0]
    Ks = series(K0, out["K"])
    Rs = None
    if with_riccati:
        g = np.broadcast_to(np.asarray(gamma, dtype=float), (F,))
        R0 = np.diag(-1j * HBAR * g).astype(complex)
        Rs = series(R0, out["R"])
    return TrajectoryRecord(spec, dt, qs, ps, Ss, Ms, Ks, Rs)


def propagate_riccati(spec, traj, gamma, scheme="suzuki4", backend=None,
                      substeps=1):
    """Log-derivative series R_t along an already-propagated record.

    Re-runs the record's initial condition with the Riccati stages enabled
    (stage-resolved, so the result matches P Q^-1 of the tangent map) and
    returns the complex (nsteps+1, F, F) series together with the
    accumulated integral of Tr R on the step grid, evaluated through the
    log-determinant identity so it carries no quadrature error.
    """
    rec = propagate(
        spec,
        (traj.q[0], traj.p[0]),
        traj.dt,
        traj.nsteps,
        scheme=scheme,
        with_riccati=True,
        gamma=gamma,
        backend=backend,
        substeps=substeps,
    )
    from .prefactor import trace_integral_from_monodromy

    return rec.R, trace_integral_from_monodromy(rec.M, gamma)
