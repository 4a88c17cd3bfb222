"""Analytic model potential-energy surfaces.

All surfaces live in unit-mass mass-scaled coordinates, so the kinetic energy
is |p|^2/2 and the Hessian doubles as the squared-frequency matrix. Energies,
lengths and momenta are atomic units with hbar = 1; wavenumber inputs are
converted once at construction.
"""
import numpy as np

# hartree per cm^-1, documented in every output header
CM1_TO_AU = 4.556335e-6

# integer tags shared with the compiled kernel
KIND_HARMONIC = 0
KIND_HENON_HEILES = 1
KIND_MORSE_QUARTIC = 2
KIND_MORSE_1D = 3

_KIND_NAMES = {
    "Harmonic": KIND_HARMONIC,
    "HenonHeiles": KIND_HENON_HEILES,
    "MorseQuartic": KIND_MORSE_QUARTIC,
    "Morse1D": KIND_MORSE_1D,
}


class PesError(ValueError):
    """Raised for invalid surface parameters or mismatched dimensions."""


def morse_alpha(D, omega):
    """Morse range parameter giving harmonic frequency omega at unit mass.

    The small-oscillation expansion of D*(1 - exp(-alpha*q))^2 is
    D*alpha^2*q^2, so matching 0.5*omega^2*q^2 requires 2*D*alpha^2 = omega^2.
    """
    if D <= 0 or omega <= 0:
        raise PesError("morse_alpha requires D > 0 and omega > 0")
    return omega / np.sqrt(2.0 * D)


class PesSpec:
    """Validated surface description.

    Parameters are stored twice: as a readable dict and as the flat float
    vector the propagation kernels consume.
    """

    def __init__(self, kind, params):
        if kind not in _KIND_NAMES:
            raise PesError("unknown pes kind %r" % (kind,))
        self.kind = kind
        self.kind_id = _KIND_NAMES[kind]
        self.params = dict(params)
        self._build()

    def _build(self):
        p = self.params
        if self.kind == "Harmonic":
            omega = np.atleast_1d(np.asarray(p.get("omega", 1.0), dtype=float))
            if omega.ndim != 1 or omega.size < 1 or np.any(omega < 0):
                raise PesError("Harmonic needs a vector of non-negative frequencies")
            self.ndim = omega.size
            self.omega = omega
            self.kernel_params = omega**2
        elif self.kind == "HenonHeiles":
            lam = float(p.get("lambda", 0.11803))
            self.ndim = 2
            self.lam = lam
            self.kernel_params = np.array([lam])
        elif self.kind == "MorseQuartic":
            D = float(p.get("D", 0.2))
            lam = float(p.get("lambda", 1e-6))
            beta = float(p.get("beta", 0.02))
            if D <= 0:
                raise PesError("MorseQuartic needs D > 0")
            if "alpha1" in p and "alpha2" in p:
                a1, a2 = float(p["alpha1"]), float(p["alpha2"])
            else:
                w1 = float(p.get("omega1_cm", 3000.0)) * CM1_TO_AU
                w2 = float(p.get("omega2_cm", 1700.0)) * CM1_TO_AU
                a1, a2 = morse_alpha(D, w1), morse_alpha(D, w2)
            qeq = np.asarray(p.get("q_eq", (0.0, 0.0)), dtype=float).reshape(2)
            self.ndim = 2
            self.D, self.lam, self.beta = D, lam, beta
            self.alpha = np.array([a1, a2])
            self.qeq = qeq
            self.kernel_params = np.array([D, a1, a2, beta, lam, qeq[0], qeq[1]])
        elif self.kind == "Morse1D":
            D = float(p.get("D", 0.2))
            if D <= 0:
                raise PesError("Morse1D needs D > 0")
            if "alpha" in p:
                a = float(p["alpha"])
            else:
                w = float(p.get("omega_cm", 3000.0)) * CM1_TO_AU
                a = morse_alpha(D, w)
            qeq = float(p.get("q_eq", 0.0))
            self.ndim = 1
            self.D, self.alpha1d, self.qeq1d = D, a, qeq
            self.kernel_params = np.array([D, a, qeq])
        self.kernel_params = np.ascontiguousarray(self.kernel_params, dtype=float)

    def equilibrium(self):
        """Configuration where V = 0 and the gradient vanishes."""
        if self.kind == "MorseQuartic":
            return self.qeq.copy()
        if self.kind == "Morse1D":
            return np.array([self.qeq1d])
        return np.zeros(self.ndim)

    def harmonic_frequencies(self):
        """Frequencies from the Hessian at equilibrium (omega_j = sqrt eig).

        For axis-aligned modes the diagonal is taken directly so mode j
        stays attached to coordinate j; eigvalsh would sort the values
        and scramble per-axis reference widths.
        """
        hess = value_grad_hess(self, self.equilibrium()[None, :])[2][0]
        off = hess - np.diag(np.diagonal(hess))
        scale = max(np.max(np.abs(np.diagonal(hess))), 1e-300)
        if np.max(np.abs(off)) <= 1e-12 * scale:
            w2 = np.diagonal(hess).copy()
        else:
            w2 = np.linalg.eigvalsh(hess)
        return np.sqrt(np.maximum(w2, 0.0))

    def __eq__(self, other):
        return (
            isinstance(other, PesSpec)
            and self.kind == other.kind
            and np.array_equal(self.kernel_params, other.kernel_params)
        )

    def __repr__(self):
        return "PesSpec(%s, %s)" % (self.kind, self.params)


def value_grad_hess(spec, q):
    """Batched V, gradient and Hessian.

    q has shape (..., F); returns arrays of shape (...), (..., F) and
    (..., F, F). Everything is written with elementwise numpy primitives in a
    fixed evaluation order so the compiled kernel can reproduce the same
    floating-point results.
    """
    q = np.asarray(q, dtype=float)
    if q.shape[-1] != spec.ndim:
        raise PesError(
            "dimension mismatch: pes %s expects F=%d, got %d"
            % (spec.kind, spec.ndim, q.shape[-1])
        )
    base = q.shape[:-1]
    F = spec.ndim
    hess = np.zeros(base + (F, F))

    if spec.kind == "Harmonic":
        w2 = spec.kernel_params
        V = 0.5 * np.sum(w2 * q * q, axis=-1)
        grad = w2 * q
        idx = np.arange(F)
        hess[..., idx, idx] = w2
        return V, grad, hess

    if spec.kind == "HenonHeiles":
        lam = spec.lam
        x, y = q[..., 0], q[..., 1]
        V = 0.5 * (x * x + y * y) + lam * (x * x * y - y * y * y / 3.0)
        grad = np.empty_like(q)
        grad[..., 0] = x + 2.0 * lam * x * y
        grad[..., 1] = y + lam * (x * x - y * y)
        hess[..., 0, 0] = 1.0 + 2.0 * lam * y
        hess[..., 1, 1] = 1.0 - 2.0 * lam * y
        hess[..., 0, 1] = 2.0 * lam * x
        hess[..., 1, 0] = hess[..., 0, 1]
        return V, grad, hess

    if spec.kind == "MorseQuartic":
        D, beta, lam = spec.D, spec.beta, spec.lam
        u = q - spec.qeq
        u2 = u * u
        e = np.exp(-spec.alpha * u)
        one_m = 1.0 - e
        morse = D * one_m * one_m
        V = (
            morse[..., 0]
            + morse[..., 1]
            + lam
            * (
                0.25 * beta * (u2[..., 0] * u2[..., 0] + u2[..., 1] * u2[..., 1])
                + u2[..., 0] * u2[..., 1]
            )
        )
        grad = 2.0 * D * spec.alpha * e * one_m
        grad = grad + lam * np.stack(
            [
                beta * u2[..., 0] * u[..., 0] + 2.0 * u[..., 0] * u2[..., 1],
                beta * u2[..., 1] * u[..., 1] + 2.0 * u[..., 1] * u2[..., 0],
            ],
            axis=-1,
        )
        diag = 2.0 * D * (spec.alpha * spec.alpha) * e * (2.0 * e - 1.0)
        hess[..., 0, 0] = diag[..., 0] + lam * (
            3.0 * beta * u2[..., 0] + 2.0 * u2[..., 1]
        )
        hess[..., 1, 1] = diag[..., 1] + lam * (
            3.0 * beta * u2[..., 1] + 2.0 * u2[..., 0]
        )
        hess[..., 0, 1] = 4.0 * lam * u[..., 0] * u[..., 1]
        hess[..., 1, 0] = hess[..., 0, 1]
        return V, grad, hess

    # Morse1D
    D, a = spec.D, spec.alpha1d
    u = q[..., 0] - spec.qeq1d
    e = np.exp(-a * u)
    one_m = 1.0 - e
    V = D * one_m * one_m
    grad = np.empty_like(q)
    grad[..., 0] = 2.0 * D * a * e * one_m
    hess[..., 0, 0] = 2.0 * D * a * a * e * (2.0 * e - 1.0)
    return V, grad, hess


def evaluate(spec, q):
    """Single-configuration surface query returning a plain dict."""
    q = np.asarray(q, dtype=float)
    V, grad, hess = value_grad_hess(spec, q[None, :])
    return {"V": float(V[0]), "grad": grad[0], "hess": hess[0]}
