"""Sinc-DVR reference solver: exact levels to calibrate the spectra against.

Kinetic energy uses the uniform-grid sinc basis in its infinite-range
form, T_ij = (-1)^(i-j) hbar^2/(2 m dx^2) * (pi^2/3 or 2/(i-j)^2), per
axis; the potential is diagonal on the tensor grid. For cubically
unbounded surfaces the grid box doubles as the confining wall, so only
box sizes keeping the relevant states well inside are meaningful.

1D problems and small 2D grids diagonalize densely. Large 2D grids go
through a Lanczos solve whose matvec applies the two kinetic matrices
axis-wise on the reshaped vector, never forming the full Hamiltonian;
a fixed starting vector keeps the solve deterministic. Residuals are
checked either way.
"""
import numpy as np
from scipy.linalg import eigh
from scipy.sparse.linalg import LinearOperator, eigsh

from . import pes as _pes
from .dynamics import HBAR


class DvrGrid:
    """Uniform tensor grid: per-axis (min, max, n) with endpoints included."""

    def __init__(self, ranges):
        self.ranges = [(float(a), float(b), int(n)) for a, b, n in ranges]
        for a, b, n in self.ranges:
            if not (b > a and n >= 8):
                raise ValueError("each axis needs max > min and n >= 8")
        self.axes = [np.linspace(a, b, n) for a, b, n in self.ranges]
        self.dx = [ax[1] - ax[0] for ax in self.axes]
        self.shape = tuple(n for _, _, n in self.ranges)
        self.size = int(np.prod(self.shape))
        self.cell = float(np.prod(self.dx))

    @property
    def ndim(self):
        return len(self.ranges)

    @classmethod
    def cube(cls, lo, hi, n, ndim):
        return cls([(lo, hi, n)] * ndim)

    def doubled(self):
        return DvrGrid([(a, b, 2 * n) for a, b, n in self.ranges])

    def points(self):
        """Grid points as (size, ndim), axis 0 varying slowest."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)


def kinetic_matrix(n, dx, mass=1.0):
    """Sinc-basis kinetic matrix for a uniform grid of spacing dx."""
    i = np.arange(n)
    diff = i[:, None] - i[None, :]
    with np.errstate(divide="ignore"):
        T = 2.0 / diff.astype(float) ** 2
    T[diff == 0] = np.pi**2 / 3.0
    T *= np.where((diff % 2) == 0, 1.0, -1.0)
    return T * HBAR**2 / (2.0 * mass * dx**2)


class DvrNotConverged(RuntimeError):
    """Levels kept shifting under grid doubling.

    Carries the two finest-grid estimates so the caller can see how far
    apart they still are.
    """

    def __init__(self, coarse, fine, tol):
        self.coarse = np.asarray(coarse)
        self.fine = np.asarray(fine)
        self.tol = tol
        worst = float(np.max(np.abs(self.fine - self.coarse)))
        super().__init__(
            "levels shifted %.3e under grid doubling (tol %.1e)"
            % (worst, tol))


def _potential_on_grid(spec, grid):
    pts = grid.points()
    V = _pes.value_grad_hess(spec, pts)[0]
    if not np.all(np.isfinite(V)):
        raise ValueError("potential not finite on the grid")
    return V


def _solve_dense(spec, grid, n_states, want_vectors):
    V = _potential_on_grid(spec, grid)
    Ts = [kinetic_matrix(n, dx) for (_, _, n), dx
          in zip(grid.ranges, grid.dx)]
    if grid.ndim == 1:
        H = Ts[0] + np.diag(V)
    else:
        eyes = [np.eye(n) for n in grid.shape]
        H = np.diag(V)
        for ax, T in enumerate(Ts):
            ops = [T if k == ax else eyes[k] for k in range(grid.ndim)]
            term = ops[0]
            for op in ops[1:]:
                term = np.kron(term, op)
            H += term
        H = 0.5 * (H + H.T)
    if want_vectors:
        w, vec = eigh(H, subset_by_index=(0, n_states - 1))
        return w, vec
    w = eigh(H, subset_by_index=(0, n_states - 1), eigvals_only=True)
    return w, None


def _solve_lanczos(spec, grid, n_states, want_vectors):
    if grid.ndim != 2:
        raise ValueError("the Lanczos path handles 2D grids")
    nx, ny = grid.shape
    V = _potential_on_grid(spec, grid).reshape(nx, ny)
    Tx = kinetic_matrix(nx, grid.dx[0])
    Ty = kinetic_matrix(ny, grid.dx[1])

    def matvec(v):
        A = v.reshape(nx, ny)
        return (Tx @ A + A @ Ty.T + V * A).ravel()

    H = LinearOperator((grid.size, grid.size), matvec=matvec,
                       dtype=float)
    v0 = np.full(grid.size, 1.0 / np.sqrt(grid.size))
    ncv = min(grid.size, max(4 * n_states, n_states + 40))
    w, vec = eigsh(H, k=n_states, which="SA", v0=v0, ncv=ncv, tol=0)
    order = np.argsort(w)
    w = w[order]
    vec = vec[:, order]
    return w, (vec if want_vectors else None)


def _residual(spec, grid, w, vec):
    """max_k ||H psi_k - E_k psi_k|| over the returned states."""
    V = _potential_on_grid(spec, grid).reshape(grid.shape)
    Ts = [kinetic_matrix(n, dx) for (_, _, n), dx
          in zip(grid.ranges, grid.dx)]
    worst = 0.0
    for k in range(w.shape[0]):
        psi = vec[:, k].reshape(grid.shape)
        h = V * psi
        if grid.ndim == 1:
            h = h + Ts[0] @ psi
        else:
            h = h + Ts[0] @ psi + psi @ Ts[1].T
        r = np.linalg.norm((h - w[k] * psi).ravel())
        worst = max(worst, float(r))
    return worst


def solve_grid(spec, grid, n_states, eigenvectors=False, dense_limit=4096,
               check_residual=None):
    """Lowest n_states levels on one fixed grid, ascending.

    Returns (levels, vectors) with vectors None unless requested;
    vectors are unit-normalized over grid points (psi(x) = c / sqrt(cell)).
    check_residual, when set, verifies ||H psi - E psi|| below it for
    every returned state even when the caller wants no vectors.
    """
    n_states = int(n_states)
    if not 1 <= n_states <= grid.size:
        raise ValueError("n_states must lie in [1, grid size]")
    need_vec = eigenvectors or check_residual is not None
    if grid.ndim == 1 or grid.size <= dense_limit:
        w, vec = _solve_dense(spec, grid, n_states, need_vec)
    else:
        w, vec = _solve_lanczos(spec, grid, n_states, need_vec)
    if check_residual is not None:
        worst = _residual(spec, grid, w, vec)
        if not worst < check_residual:
            raise RuntimeError(
                "eigenpair residual %.3e exceeds %.1e" % (worst,
                                                          check_residual))
    return np.asarray(w, dtype=float), (vec if eigenvectors else None)


def dvr_solve(spec, grid, n_states, eigenvectors=False, refine=True,
              tol=1e-6, max_doublings=2, dense_limit=4096):
    """Converged lowest levels of the surface on (refinements of) grid.

    With refine, the grid doubles per axis until the levels move less
    than tol, up to max_doublings; DvrNotConverged carries the last two
    estimates otherwise. The levels of the finest solved grid are
    returned (with its eigenvectors and grid when requested).
    """
    levels, vec = solve_grid(spec, grid, n_states, eigenvectors,
                             dense_limit)
    if not refine:
        return (levels, vec, grid) if eigenvectors else levels
    for _ in range(max_doublings):
        fine = grid.doubled()
        levels2, vec2 = solve_grid(spec, fine, n_states, eigenvectors,
                                   dense_limit)
        if np.max(np.abs(levels2 - levels)) < tol:
            return (levels2, vec2, fine) if eigenvectors else levels2
        grid, levels, vec = fine, levels2, vec2
    coarse = levels
    fine = grid.doubled()
    levels2, _ = solve_grid(spec, fine, n_states, False, dense_limit)
    if np.max(np.abs(levels2 - coarse)) < tol:
        return (levels2, vec, grid) if eigenvectors else levels2
    raise DvrNotConverged(coarse, levels2, tol)


def reference_state_on_grid(chi, grid):
    """Normalized coherent-state values on the grid points."""
    pts = grid.points()
    g = chi.gamma
    norm = np.prod((g / np.pi) ** 0.25)
    dq = pts - chi.q
    phase = np.sum(chi.p * dq, axis=-1)
    return norm * np.exp(-0.5 * np.sum(g * dq**2, axis=-1)
                         + 1j * phase / HBAR)


def overlap_with_reference(eigenvector, chi, grid):
    """|<psi|chi>|^2 with the integral done as a grid sum.

    eigenvector is unit-normalized over grid points, so psi(x_i) is the
    coefficient divided by sqrt(cell volume); the sum then carries one
    factor of the cell volume.
    """
    c = np.asarray(eigenvector).ravel()
    chi_vals = reference_state_on_grid(chi, grid)
    ov = np.sum(np.conj(c) * chi_vals) * np.sqrt(grid.cell)
    return float(np.abs(ov) ** 2)


def morse_levels_1d(D, omega, nmax):
    """Bound Morse levels E_n = hbar w (n+1/2) - [hbar w (n+1/2)]^2 / 4D.

    Valid while the level ladder still rises (n + 1/2 < 2D / hbar w);
    callers should stay well inside the bound range.
    """
    n = np.arange(int(nmax))
    x = HBAR * omega * (n + 0.5)
    return x - x**2 / (4.0 * D)
