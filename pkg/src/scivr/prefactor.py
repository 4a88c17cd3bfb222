"""Semiclassical pre-exponential factor C_t and its approximations.

The exact factor is a square-root determinant over monodromy blocks,
C_t = sqrt(det[(M_qq + gamma^-1 M_pp gamma + (i/hbar) gamma^-1 M_pq
- i hbar M_qp gamma)/2]), and every approximation here replaces that
determinant with cheaper per-step data: the log-derivative matrix R_t,
its analytic per-mode expansions R_t^(n), instantaneous frequencies
(Johnson), the equilibrium frequencies (harmonic), decoupled normal-mode
scalars (adiabatic), or the single central trajectory (poor person's).

Branch tracking never picks square-root signs step by step. The complex
determinant series is built first, its argument is unwrapped along time,
and the half-angle defines a continuous C_t with C_0 = +1. This is valid
while the determinant rotates less than pi per step, which the step sizes
used here guarantee away from flagged divergences; the largest per-step
phase move is recorded as a diagnostic.

Phases follow the convention C_t = |C_t| exp(i phi_t / hbar) with phi
real and phi_0 = 0. The time-averaged estimator consumes only phi_t.
"""
import numpy as np

from .dynamics import HBAR, stage_coefficients


class PrefactorSeries:
    """Continuous-branch prefactor history for a batch of trajectories.

    C has shape (nsteps+1,) or (nsteps+1, n); phi matches. max_jump is the
    largest per-step |delta phi| seen while unwrapping (>= pi means the
    branch choice was at risk and the trajectory should not be trusted).
    flags marks trajectories with divergent or held steps.
    """

    def __init__(self, method, C, phi, max_jump=0.0, flags=None):
        self.method = method
        self.C = C
        self.phi = phi
        self.max_jump = float(max_jump)
        self.flags = flags

    @property
    def nsteps(self):
        return self.C.shape[0] - 1


def unwrap_phase(series, axis=0):
    """Continuous phase (in units of action) of a complex series.

    Removes 2*pi jumps along the time axis and anchors the phase of the
    first sample in (-pi, pi]; for prefactor use the first sample is 1,
    so the result starts at exactly zero.
    """
    series = np.asarray(series)
    return HBAR * np.unwrap(np.angle(series), axis=axis)


def _halfangle_sqrt(det_series, axis=0):
    """Continuous square root of a complex determinant series.

    Returns (C, phi, max_jump): the root with C_0 following the principal
    branch of the first sample, its continuous phase, and the largest
    per-step move of the underlying determinant argument.
    """
    theta = np.unwrap(np.angle(det_series), axis=axis)
    if det_series.ndim > 0 and det_series.shape[axis] > 1:
        dth = np.abs(np.diff(theta, axis=axis))
        max_jump = 0.5 * float(dth.max()) if dth.size else 0.0
    else:
        max_jump = 0.0
    phi = 0.5 * HBAR * theta
    C = np.sqrt(np.abs(det_series)) * np.exp(0.5j * theta)
    return C, phi, max_jump


def _blocks(M, F):
    Mpp = M[..., :F, :F]
    Mpq = M[..., :F, F:]
    Mqp = M[..., F:, :F]
    Mqq = M[..., F:, F:]
    return Mpp, Mpq, Mqp, Mqq


def _det(A):
    """Determinant of stacked small complex matrices, closed forms for F<=2."""
    F = A.shape[-1]
    if F == 1:
        return A[..., 0, 0]
    if F == 2:
        return A[..., 0, 0] * A[..., 1, 1] - A[..., 0, 1] * A[..., 1, 0]
    return np.linalg.det(A)


def exact_det_series(M, gamma, variant="monodromy"):
    """Complex determinant whose continuous square root is the exact C_t.

    M has shape (..., 2F, 2F) with (p; q) row blocks. Both printed exact
    formulations assemble the same matrix, in the monodromy-block order or
    through the auxiliary Q_t, P_t pair; the variants differ only in
    floating-point association order.
    """
    F = M.shape[-1] // 2
    g = np.broadcast_to(np.asarray(gamma, dtype=float), (F,))
    Mpp, Mpq, Mqp, Mqq = _blocks(M, F)
    grow = g[:, None]
    gcol = g[None, :]
    if variant == "monodromy":
        A = 0.5 * (
            Mqq
            + Mpp * (gcol / grow)
            + (1j / (HBAR * grow)) * Mpq
            - (1j * HBAR) * Mqp * gcol
        )
        return _det(A)
    if variant == "qp":
        Q = Mqq - 1j * HBAR * Mqp * gcol
        P = Mpq - 1j * HBAR * Mpp * gcol
        return _det(Q + (1j / (HBAR * grow)) * P) / 2.0**F
    raise ValueError("unknown exact-prefactor variant %r" % (variant,))


def prefactor_exact(M_series, gamma, variant="monodromy", method="ExactMonodromy"):
    """Exact prefactor from a monodromy series (nsteps+1, ..., 2F, 2F)."""
    d = exact_det_series(np.asarray(M_series), gamma, variant)
    bad = np.abs(d) < 1e-300
    flags = np.any(bad, axis=0) if d.ndim > 1 else bool(np.any(bad))
    C, phi, jump = _halfangle_sqrt(d, axis=0)
    return PrefactorSeries(method, C, phi, jump, flags)


def unwrap_block(theta, prev=None):
    """Unwrap angles along axis 0, continuing from a carried last row.

    prev is the final unwrapped row of the preceding block (None for the
    first block). Returns the unwrapped block without the carry row.
    """
    theta = np.asarray(theta, dtype=float)
    if prev is None:
        return np.unwrap(theta, axis=0)
    full = np.concatenate([np.asarray(prev, dtype=float)[None, ...], theta],
                          axis=0)
    return np.unwrap(full, axis=0)[1:]


def trace_integral_from_monodromy(M_series, gamma, prev_angle=None):
    """Accumulated integral of Tr R_t along the flow, in closed form.

    Because d(log det Q_t)/dt = Tr(P_t Q_t^-1) = Tr R_t, with Q_t built
    from the monodromy q-rows, the integral telescopes to log det Q_t
    exactly: kicks leave Q_t fixed and each drift integrates the log
    determinant in closed form, so there is no quadrature error for the
    stepped flow. The imaginary part is unwrapped along the series
    (continuing from prev_angle when accumulating block-wise).
    """
    M_series = np.asarray(M_series)
    F = M_series.shape[-1] // 2
    g = np.broadcast_to(np.asarray(gamma, dtype=float), (F,))
    Qt = M_series[..., F:, F:] - 1j * HBAR * M_series[..., F:, :F] * g[None, :]
    d = _det(Qt)
    theta = unwrap_block(np.angle(d), prev_angle)
    return np.log(np.abs(d)) + 1j * theta


def logderiv_det_series(R, gamma):
    """det[(I + (i/hbar gamma) R)/2] for stacked complex R (..., F, F)."""
    R = np.asarray(R)
    F = R.shape[-1]
    g = np.broadcast_to(np.asarray(gamma, dtype=float), (F,))
    eye = np.eye(F)
    B = 0.5 * (eye + (1j / (HBAR * g[:, None])) * R)
    return _det(B)


def prefactor_logderivative(R_series, trace_integral, gamma,
                            method="ExactLogDerivative"):
    """Exact prefactor from the log-derivative route.

    Multiplies the determinant part by exp(trace_integral) pointwise
    before taking the continuous square root: the two factors are
    individually singular wherever the q-block caustic makes R_t blow up,
    but their product stays finite and continuous, so unwrapping the
    product is the only branch choice that survives caustic crossings.
    trace_integral is the accumulated integral of Tr R on the same grid.
    """
    d = logderiv_det_series(R_series, gamma)
    d = d * np.exp(np.asarray(trace_integral))
    C, phi, jump = _halfangle_sqrt(d, axis=0)
    flags = ~np.all(np.isfinite(C), axis=0) if C.ndim > 1 else not np.all(
        np.isfinite(C))
    return PrefactorSeries(method, C, phi, jump, flags)


def eigh2(K):
    """Eigenvalues and vectors of stacked symmetric (..., F, F), F <= 2.

    Closed form for F=2 with a deterministic convention: eigenvalues
    ascending, each eigenvector's largest-magnitude component positive.
    Falls back to numpy for larger F.
    """
    K = np.asarray(K, dtype=float)
    F = K.shape[-1]
    if F == 1:
        w2 = K[..., 0].copy()
        U = np.ones(K.shape[:-2] + (1, 1))
        return w2, U
    if F != 2:
        return np.linalg.eigh(K)
    a = K[..., 0, 0]
    b = K[..., 1, 1]
    c = K[..., 0, 1]
    half = 0.5 * (a - b)
    r = np.hypot(half, c)
    mean = 0.5 * (a + b)
    w2 = np.stack([mean - r, mean + r], axis=-1)
    # eigenvector of the lower eigenvalue; the second is its perpendicular
    v0 = np.where(half >= 0, -c, half - r + (half - r == 0) * 1.0)
    v1 = np.where(half >= 0, half + r, c)
    # c == 0 keeps the axes themselves, ordered by the diagonal
    diag = np.abs(c) == 0
    v0 = np.where(diag, np.where(a <= b, 1.0, 0.0), v0)
    v1 = np.where(diag, np.where(a <= b, 0.0, 1.0), v1)
    norm = np.hypot(v0, v1)
    v0 = v0 / norm
    v1 = v1 / norm
    # sign convention: dominant component positive, first component on ties
    flip = np.where(
        np.abs(v0) > np.abs(v1), np.sign(v0), np.sign(v1 + (v1 == 0) * 1.0)
    )
    v0 = v0 * flip
    v1 = v1 * flip
    U = np.empty(K.shape)
    U[..., 0, 0] = v0
    U[..., 1, 0] = v1
    U[..., 0, 1] = -v1
    U[..., 1, 1] = v0
    return w2, U


def gamma_tilde(U, gamma):
    """Diagonal of U^T gamma U for diagonal gamma: the width each
    instantaneous mode sees."""
    F = U.shape[-1]
    g = np.broadcast_to(np.asarray(gamma, dtype=float), (F,))
    return np.einsum("...kj,k,...kj->...j", U, g, U)


def rt_n_scalars(w2, gtil, n, guard=1e-12):
    """Per-mode analytic log-derivative R^(n), purely imaginary.

    Iterates R^(k) = R^(k-1) + (-1)^k / 2^(2^k - 1) * d^(2^(k-1)) /
    prod_j R^(k-1-j)^(2^j) with d = hbar*gtil - w2/(hbar*gtil), starting
    from R^(1) = -(i/2)(hbar*gtil + w2/(hbar*gtil)). Denominators below
    the guard hold the previous order's value and set the flag.
    """
    if n < 1:
        raise ValueError("RtN order must be >= 1")
    w2 = np.asarray(w2, dtype=float)
    hg = HBAR * np.asarray(gtil, dtype=float)
    ratio = w2 / hg
    R = -0.5j * (hg + ratio)
    held = np.zeros(np.broadcast(w2, hg).shape, dtype=bool)
    if n == 1:
        return R, held
    d = hg - ratio
    orders = [R]
    dpow = d * d
    for k in range(2, n + 1):
        denom = orders[0]
        for j in range(1, k - 1):
            # denominator product: R^(k-1) * R^(k-2)^2 * ... * R^(1)^(2^(k-2))
            denom = denom * denom * orders[j]
        small = np.abs(denom) < guard
        held |= small
        corr = np.where(
            small, 0.0, ((-1.0) ** k / 2.0 ** (2**k - 1)) * dpow / np.where(
                small, 1.0, denom)
        )
        R = orders[-1] + corr
        orders.append(R)
        if k < n:
            dpow = dpow * dpow
    return orders[-1], held


def _scalar_log_prefactor(rt, gtil, dt, trace0=None):
    """Assemble C_t from per-mode imaginary scalars R on the step grid.

    rt has shape (nsteps+1, ..., F). Returns (C, phi, jump, trace_end)
    with the per-mode determinant product and a trapezoid trace integral.
    """
    gtil = np.asarray(gtil)
    b = 0.5 * (1.0 + (1j / (HBAR * gtil)) * rt)
    detb = np.prod(b, axis=-1)
    tr = np.sum(rt, axis=-1)
    steps = 0.5 * dt * (tr[1:] + tr[:-1])
    integral = np.concatenate(
        [np.zeros((1,) + tr.shape[1:], dtype=complex),
         np.cumsum(steps, axis=0)], axis=0)
    if trace0 is not None:
        integral = integral + trace0
    C, phi, jump = _halfangle_sqrt(detb, axis=0)
    C = C * np.exp(0.5 * integral)
    phi = phi + 0.5 * HBAR * np.imag(integral)
    return C, phi, jump


def prefactor_rt_n(K_series, gamma, dt, n, method=None):
    """Analytic n-th order log-derivative prefactor from the Hessian series.

    Each step the Hessian is diagonalized, the scalar recursion is
    evaluated per instantaneous mode, and the log-derivative formula is
    assembled with a trapezoid trace integral.
    """
    K_series = np.asarray(K_series)
    w2, U = eigh2(K_series)
    gtil = gamma_tilde(U, gamma)
    rt, held = rt_n_scalars(w2, gtil, n)
    C, phi, jump = _scalar_log_prefactor(rt, gtil, dt)
    flags = np.any(held, axis=(0, -1)) if held.ndim > 1 else bool(np.any(held))
    name = method or ("RtN(%d)" % n)
    return PrefactorSeries(name, C, phi, jump, flags)


def prefactor_harmonic(omega0, times, method="Harmonic"):
    """Equilibrium-frequency prefactor exp(-i sum_j omega_j t / 2)."""
    omega0 = np.atleast_1d(np.asarray(omega0, dtype=float))
    t = np.asarray(times, dtype=float)
    phi = -0.5 * HBAR * np.sum(omega0) * t
    return PrefactorSeries(method, np.exp(1j * phi / HBAR), phi, 0.0, None)


class JohnsonInapplicable(RuntimeError):
    """Negative instantaneous curvature under the fail policy.

    The phase needs real frequencies omega = sqrt(eig K); an imaginary
    frequency would turn the oscillating factor into an exponential blowup,
    so the method is reported as inapplicable for the run.
    """

    def __init__(self, step, count):
        self.step = step
        self.count = count
        super().__init__(
            "imaginary instantaneous frequency at step %d (%d occurrences)"
            % (step, count)
        )


def prefactor_johnson(K_series, gamma, dt, policy="fail", method="Johnson"):
    """Multichannel WKB phase from instantaneous frequencies.

    phi(t) = -(hbar/2) integral of sum_j omega_{tau,j}, trapezoid on the
    step grid. policy 'fail' raises JohnsonInapplicable on any negative
    Hessian eigenvalue; 'clamp_zero' drops that mode's contribution for
    the affected steps.
    """
    K_series = np.asarray(K_series)
    w2, _ = eigh2(K_series)
    neg = w2 < 0.0
    if np.any(neg):
        if policy == "fail":
            bad_steps = np.nonzero(np.any(neg, axis=tuple(range(1, neg.ndim))))[0]
            raise JohnsonInapplicable(int(bad_steps[0]), int(np.sum(neg)))
        if policy != "clamp_zero":
            raise ValueError("unknown Johnson policy %r" % (policy,))
    omega = np.sqrt(np.maximum(w2, 0.0))
    rate = np.sum(omega, axis=-1)
    steps = 0.5 * dt * (rate[1:] + rate[:-1])
    integral = np.concatenate(
        [np.zeros((1,) + rate.shape[1:]), np.cumsum(steps, axis=0)], axis=0)
    phi = -0.5 * HBAR * integral
    flags = np.any(neg, axis=(0, -1)) if neg.ndim > 1 else bool(np.any(neg))
    return PrefactorSeries(method, np.exp(1j * phi / HBAR), phi, 0.0, flags)


def adiabatic_advance(Q, P, w2, dt, kicks, drifts):
    """One recorded step of the decoupled normal-mode scalars, in place.

    Q and P are complex (..., F); w2 is the squared frequency held fixed
    over the step. Uses the same kick-first composition as the trajectory
    itself (the final kick of a step and the first of the next share the
    frozen w2 of their own steps, so stages stay explicit).
    """
    nstage = kicks.shape[0]
    for s in range(nstage - 1):
        P -= (kicks[s] * dt) * w2 * Q
        Q += (drifts[s] * dt) * P
    P -= (kicks[nstage - 1] * dt) * w2 * Q


def prefactor_adiabatic(K_series, gamma, dt, scheme="suzuki4", substeps=1,
                        method="Adiabatic"):
    """Adiabatic prefactor: decoupled evolution of per-mode Q, P scalars.

    The Hessian is diagonalized each step; the scalar pairs evolve against
    the squared frequencies frozen over that step (mode mixing neglected).
    Chaotic modes grow without bound; overflowing trajectories are flagged
    rather than raised, matching the per-trajectory divergence handling of
    the estimators.
    """
    K_series = np.asarray(K_series)
    nk = K_series.shape[0] - 1
    w2, U = eigh2(K_series)
    gtil = gamma_tilde(U, gamma)
    F = K_series.shape[-1]
    lead = K_series.shape[1:-2]
    kicks, drifts = stage_coefficients(scheme, substeps)
    Q = np.ones(lead + (F,), dtype=complex)
    P = -1j * HBAR * gtil[0] * np.ones(lead + (F,), dtype=complex)
    detb = np.empty((nk + 1,) + lead, dtype=complex)
    b0 = 0.5 * (Q + (1j / (HBAR * gtil[0])) * P)
    detb[0] = np.prod(b0, axis=-1)
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(nk):
            adiabatic_advance(Q, P, w2[k], dt, kicks, drifts)
            b = 0.5 * (Q + (1j / (HBAR * gtil[k + 1])) * P)
            detb[k + 1] = np.prod(b, axis=-1)
    finite = np.isfinite(detb)
    flags = ~np.all(finite, axis=0) if detb.ndim > 1 else not np.all(finite)
    detb[~finite] = 1.0  # keep unwrap defined; flagged data is discarded
    C, phi, jump = _halfangle_sqrt(detb, axis=0)
    return PrefactorSeries(method, C, phi, jump, flags)


def prefactor_pps(central, n=None):
    """Poor person's factor: the central trajectory's series for everyone.

    With n given, the series is broadcast to (nsteps+1, n); otherwise the
    single-trajectory series is returned unchanged under the new tag.
    """
    C = central.C
    phi = central.phi
    if C.ndim > 1:
        C = C[:, 0]
        phi = phi[:, 0]
    if n is not None:
        C = np.broadcast_to(C[:, None], (C.shape[0], n))
        phi = np.broadcast_to(phi[:, None], (phi.shape[0], n))
    return PrefactorSeries("PoorPersons", C, phi, central.max_jump, None)
