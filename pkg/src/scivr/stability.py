"""Trajectory quality control: rejection criteria and monodromy taming.

Chaotic trajectories corrupt the semiclassical integrand long before they
overflow, so ensembles are filtered by two per-step tests (a symplecticity
determinant check and a prefactor-magnitude cap) or healed in place by
zeroing the unstable eigendirections of the monodromy matrix. A rejected
trajectory still contributes every step before its rejection; a tamed one
keeps evolving on the modified matrix.

The determinant deviation is a roundoff statistic as much as a dynamics
statistic: det(M^T M) equals one in exact arithmetic for every symplectic
map, and what the test actually detects is the cancellation error of the
determinant evaluation amplified by the trajectory's local instability.
The evaluation order is therefore fixed (closed-form cofactor expansion)
rather than left to a pivoting library routine, so rejection fractions
are reproducible across platforms.
"""
import numpy as np


TOL_DET_DEFAULT = 1e-5
EPS_THR_DEFAULT = 1.15e3
MAX_MODES_DEFAULT = 2

# relative test deciding when a complex eigenvalue counts as real
IM_TOL = 1e-8


def _det2_closed(A):
    return A[..., 0, 0] * A[..., 1, 1] - A[..., 0, 1] * A[..., 1, 0]


def _det3_closed(A):
    return (
        A[..., 0, 0] * (A[..., 1, 1] * A[..., 2, 2] - A[..., 1, 2] * A[..., 2, 1])
        - A[..., 0, 1] * (A[..., 1, 0] * A[..., 2, 2] - A[..., 1, 2] * A[..., 2, 0])
        + A[..., 0, 2] * (A[..., 1, 0] * A[..., 2, 1] - A[..., 1, 1] * A[..., 2, 0])
    )


def _det4_closed(A):
    out = 0.0
    for j in range(4):
        cols = [c for c in range(4) if c != j]
        minor = A[..., 1:, :][..., :, cols]
        term = A[..., 0, j] * _det3_closed(minor)
        out = out + (term if j % 2 == 0 else -term)
    return out


def det_closed(A):
    """Determinant by first-row cofactor expansion, fixed operation order.

    Stacked square matrices up to 4x4 in closed form; larger sizes fall
    back to the library routine (not used by the shipped models).
    """
    m = A.shape[-1]
    if m == 1:
        return A[..., 0, 0]
    if m == 2:
        return _det2_closed(A)
    if m == 3:
        return _det3_closed(A)
    if m == 4:
        return _det4_closed(A)
    return np.linalg.det(A)


def det_mtm(M, algorithm="cofactor_m"):
    """det(M^T M) of stacked monodromy matrices.

    algorithm selects the evaluation order, which sets the cancellation
    noise floor and with it the trip rate of the rejection test:
    'cofactor_m' squares the cofactor expansion of det(M) (the default:
    fixed operation order, library-independent trip statistics),
    'cofactor_g' expands det(M^T M) directly (far noisier), 'lu_g' uses
    the pivoted library determinant (quieter, backend-dependent).
    """
    M = np.asarray(M)
    if algorithm == "cofactor_g":
        G = np.swapaxes(M, -2, -1) @ M
        return det_closed(G)
    if algorithm == "cofactor_m":
        d = det_closed(M)
        return d * d
    if algorithm == "lu_g":
        G = np.swapaxes(M, -2, -1) @ M
        return np.linalg.det(G)
    raise ValueError("unknown determinant algorithm %r" % (algorithm,))


def check_det(M, algorithm="cofactor_m"):
    """Symplecticity deviation 1 - det(M^T M); reject when above tol."""
    return 1.0 - det_mtm(M, algorithm)


def check_kay(C_t, D_t):
    """Prefactor-magnitude rejection: |C_t|^2 >= D_t.

    True means reject from this step onward; the steps already accumulated
    stay in the estimator. D_t is conventionally the ensemble size, which
    leaves converged results unperturbed.
    """
    C_t = np.asarray(C_t)
    return (C_t.real**2 + C_t.imag**2) >= D_t


def first_failure(dev_series, tol):
    """First step index along axis 0 where dev > tol, else -1, per column."""
    bad = np.asarray(dev_series) > tol
    hit = bad.any(axis=0)
    idx = bad.argmax(axis=0)
    return np.where(hit, idx, -1)


def regularize(M, eps_thr=EPS_THR_DEFAULT, max_modes=MAX_MODES_DEFAULT,
               variant="both"):
    """Zero the most unstable real eigendirections of one monodromy matrix.

    Eigenvalues that are real (within a relative imaginary tolerance) and
    have |Re| >= eps_thr are tamed, largest magnitude first, at most
    max_modes of them. variant picks what is literally zeroed: the
    eigenvalue, the eigenvector column, or both; the reassembled matrix is
    the same sum over surviving modes either way, so the variants agree to
    roundoff. Returns (M_tilde, count). Matrices whose eigenvectors are
    too ill-conditioned to invert are returned unchanged with count -1,
    which callers treat as a rejection.
    """
    M = np.asarray(M, dtype=float)
    try:
        lam, V = np.linalg.eig(M)
        Vinv = np.linalg.inv(V)
    except np.linalg.LinAlgError:
        return M, -1
    real = np.abs(lam.imag) < IM_TOL * (1.0 + np.abs(lam))
    cand = np.nonzero(real & (np.abs(lam.real) >= eps_thr))[0]
    if cand.size == 0:
        return M, 0
    order = cand[np.argsort(-np.abs(lam.real[cand]))][:max_modes]
    lam_t = lam.copy()
    V_t = V.copy()
    Vinv_t = Vinv.copy()
    if variant in ("eigenvalue", "both"):
        lam_t[order] = 0.0
    if variant in ("eigenvector", "both"):
        V_t[:, order] = 0.0
        Vinv_t[order, :] = 0.0
    if variant not in ("eigenvalue", "eigenvector", "both"):
        raise ValueError("unknown taming variant %r" % (variant,))
    Mt = (V_t * lam_t) @ Vinv_t
    scale = np.abs(Mt).sum()
    if not np.isfinite(scale):
        return M, -1
    resid = np.abs(Mt.imag).sum()
    if scale > 0 and not resid < IM_TOL * scale:
        # conjugate pairs were split unevenly; treat as undecomposable
        return M, -1
    return np.ascontiguousarray(Mt.real), int(order.size)


def regularize_batch(M, eps_thr=EPS_THR_DEFAULT, max_modes=MAX_MODES_DEFAULT,
                     variant="both", out=None):
    """Tame a stack of matrices in place of (or into) out.

    Returns (M_tilde, counts) with counts -1 marking decomposition
    failures. The loop stays in Python: callers invoke this only for the
    few trajectories whose deviation test fired at the current step.
    """
    M = np.asarray(M, dtype=float)
    if out is None:
        out = np.array(M, copy=True)
    counts = np.zeros(M.shape[0], dtype=int)
    for i in range(M.shape[0]):
        out[i], counts[i] = regularize(M[i], eps_thr, max_modes, variant)
    return out, counts
