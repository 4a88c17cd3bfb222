"""Power spectra from trajectory ensembles: sampling, estimators, peaks.

The vibrational spectrum is the Fourier transform of the survival
amplitude of a coherent reference state. Two estimators are assembled
from the same streamed trajectory data:

  HK   averages C_t e^{iS_t/hbar} <chi|z_t><z_0|chi> over phase space,
       extends the series hermitian to negative times, windows it and
       transforms;
  TA   time-averages per trajectory first: I(E) is the ensemble average
       of |integral of e^{i(S_t + E t + phi_t)/hbar} <chi|z_t> dt|^2
       / (2 pi hbar T), with phi_t the unwrapped prefactor phase.

The TA form keeps only the phase of the prefactor, for every method,
the exact one included; the HK form carries the full complex factor.
Initial conditions are drawn around the reference center and unbiased
by importance weights, so the sampling width is a variance knob, not a
correctness knob (width_scale 1 is the bare Husimi density of the
reference state). Ensembles stream through in chunks of trajectories
and blocks of steps: nothing of size n_traj x nsteps is ever stored.

All prefactor methods ride one propagation sweep per chunk. Per-step
data needed by several methods at once (coherent overlaps, Hessian
eigenvalues, the exact determinant stream) is computed once per block
and shared through a small context object.
"""
import time
from collections import namedtuple

import numpy as np

from . import dynamics, pes as _pes, prefactor as pf, stability as st
from .dynamics import HBAR


class CoherentState:
    """Gaussian reference |chi>: center (q, p) and diagonal widths gamma."""

    def __init__(self, q, p, gamma):
        self.q = np.atleast_1d(np.asarray(q, dtype=float))
        self.p = np.atleast_1d(np.asarray(p, dtype=float))
        self.gamma = np.broadcast_to(
            np.asarray(gamma, dtype=float), self.q.shape).copy()
        if np.any(self.gamma <= 0):
            raise ValueError("coherent state widths must be positive")

    @property
    def ndim(self):
        return self.q.shape[0]

    @classmethod
    def from_model(cls, spec, n=0, gamma=None):
        """Reference at equilibrium with gamma_j = omega_j / hbar.

        The momentum along each mode carries the energy of harmonic level
        n_j, p_j = sqrt((2 n_j + 1) hbar omega_j), which spreads the
        reference over the first few states of that mode.
        """
        w = spec.harmonic_frequencies()
        nj = np.broadcast_to(np.asarray(n, dtype=float), w.shape)
        g = w / HBAR if gamma is None else gamma
        return cls(spec.equilibrium(), np.sqrt((2 * nj + 1) * HBAR * w), g)


def coherent_overlap(chi, q, p):
    """<chi|z> for phase-space points z = (q, p) with trailing mode axis.

    Per mode, the closed two-Gaussian integral
    exp(-g dq^2/4 - dp^2/(4 g hbar^2) - i (p + p_chi) dq / (2 hbar))
    with dq = q - q_chi, dp = p - p_chi.
    """
    g = chi.gamma
    dq = np.asarray(q, dtype=float) - chi.q
    dp = np.asarray(p, dtype=float) - chi.p
    ex = (-g * dq**2 / 4.0 - dp**2 / (4.0 * g * HBAR**2)
          - 1j * (np.asarray(p) + chi.p) * dq / (2.0 * HBAR))
    return np.exp(np.sum(ex, axis=-1))


def sample_husimi(chi, n, seed, width_scale=1.0, start=0):
    """Draw n phase-space points around the reference, reproducibly.

    Per mode, q ~ Normal(q_chi, s2/gamma) and p ~ Normal(p_chi,
    s2 gamma hbar^2) with s2 = width_scale; at width_scale 1 the density
    is the squared overlap |<z|chi>|^2. Trajectory start+i draws from
    its own generator seeded (seed, start+i), so a sample depends only
    on its global index, never on chunking or worker layout.
    Returns (q0, p0) of shape (n, F).
    """
    F = chi.ndim
    s2 = float(width_scale)
    if s2 <= 0:
        raise ValueError("width_scale must be positive")
    sq = np.sqrt(s2 / chi.gamma)
    sp = np.sqrt(s2 * chi.gamma) * HBAR
    q0 = np.empty((n, F))
    p0 = np.empty((n, F))
    for i in range(n):
        rng = np.random.default_rng([seed, start + i])
        q0[i] = chi.q + sq * rng.normal(size=F)
        p0[i] = chi.p + sp * rng.normal(size=F)
    return q0, p0


def log_weight(chi, q0, p0, width_scale=1.0):
    """log[(2 pi hbar)^-F / rho(z0)]: the phase-space importance weight.

    rho is the normalized density sample_husimi draws from. At
    width_scale 1 this is -log |<z0|chi>|^2, cancelling the coherent
    measure exactly.
    """
    s2 = float(width_scale)
    g = chi.gamma
    dq = np.asarray(q0, dtype=float) - chi.q
    dp = np.asarray(p0, dtype=float) - chi.p
    e = g * dq**2 / (2.0 * s2) + dp**2 / (2.0 * s2 * g * HBAR**2)
    return np.sum(e, axis=-1) + chi.ndim * np.log(s2)


class SpectrumGrid:
    """Uniform energy axis with intensities and run metadata."""

    def __init__(self, energies, intensities, meta=None):
        self.energies = np.asarray(energies)
        self.intensities = np.asarray(intensities)
        self.meta = dict(meta or {})

    def crop(self, emin, emax):
        m = (self.energies >= emin) & (self.energies <= emax)
        return SpectrumGrid(self.energies[m], self.intensities[m], self.meta)


class PeakTable:
    """Detected peaks, optionally paired against reference levels."""

    def __init__(self, peaks, heights, reference=None, pairs=None,
                 mae=None, unpaired=None):
        self.peaks = np.asarray(peaks)
        self.heights = np.asarray(heights)
        self.reference = reference
        self.pairs = pairs
        self.mae = mae
        self.unpaired = unpaired

    def __len__(self):
        return self.peaks.shape[0]


def pad_length(npts, pad_factor=4):
    """Transform length: next power of two >= pad_factor * npts."""
    m = int(npts) * int(pad_factor)
    return 1 << (m - 1).bit_length()


def energy_grid(dt, nsteps, pad_factor=4):
    """Energies addressed by the zero-padded transform of a run."""
    m = pad_length(nsteps + 1, pad_factor)
    return 2.0 * np.pi * HBAR * np.arange(m) / (m * dt)


class MethodInapplicable(RuntimeError):
    """A prefactor method cannot be evaluated for the configured run."""

    def __init__(self, method, reason, detail=None):
        self.method = method
        self.reason = reason
        self.detail = dict(detail or {})
        super().__init__("%s: %s" % (method, reason))


def _parse_rt_order(name):
    if len(name) > 1 and name[0] == "R" and name[1:].isdigit():
        return int(name[1:])
    return None


class _Carry(dict):
    """Per-chunk tracker state surviving across step blocks."""
    __getattr__ = dict.__getitem__
    __setattr__ = dict.__setitem__


class _Block:
    """Shared view of one recorded step block, lazily post-processed."""

    def __init__(self, engine, out, row0, nb):
        self.engine = engine
        self.out = out
        self.row0 = row0          # global index of the row before this block
        self.nb = nb
        self.rows = row0 + np.arange(1, nb + 1)
        self._eigs = None
        self._dexact = None

    @property
    def eigs(self):
        """(w2, gamma_tilde) per recorded row in the instantaneous basis."""
        if self._eigs is None:
            with np.errstate(invalid="ignore", over="ignore"):
                w2, U = pf.eigh2(self.out["K"][:self.nb])
                gt = pf.gamma_tilde(U, self.engine.chi.gamma)
            self._eigs = (w2, gt)
        return self._eigs

    @property
    def d_exact(self):
        if self._dexact is None:
            with np.errstate(invalid="ignore", over="ignore"):
                self._dexact = pf.exact_det_series(
                    self.out["M"][:self.nb], self.engine.chi.gamma)
        return self._dexact


def _halfangle_block(d, carry):
    """Continuous sqrt phase/magnitude of d across block boundaries."""
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        theta = pf.unwrap_block(np.angle(d), carry.get("theta"))
        amp = np.sqrt(np.abs(d))
    carry.theta = theta[-1].copy()
    return 0.5 * HBAR * theta, amp


def _truncate(stop, bad, rows, record=None):
    """Pull stop down to the first True row of bad; report fresh hits.

    bad is (nb, n) boolean over the block, rows the global row indices.
    When record is given it is or-ed with hits that actually shortened a
    trajectory.
    """
    hit = bad.any(axis=0)
    first = np.where(hit, rows[bad.argmax(axis=0)], np.iinfo(np.int64).max)
    newly = first < stop
    if record is not None:
        record |= newly
    np.minimum(stop, first, out=stop)


class _ExactTracker:
    """Exact prefactor with a rejection policy: none, det or kay."""

    def __init__(self, engine, policy):
        self.policy = policy
        self.det_tol = engine.det_tol
        self.det_algorithm = engine.det_algorithm
        self.kay = engine.kay_threshold
        self.rejected = None

    def start(self, n, w20, gt0):
        self.rejected = np.zeros(n, dtype=bool)
        return _Carry(theta=np.zeros(n))

    def block(self, blk, carry, stop):
        d = blk.d_exact
        phi, amp = _halfangle_block(d, carry)
        if self.policy == "det":
            with np.errstate(invalid="ignore", over="ignore"):
                dev = st.check_det(blk.out["M"][:blk.nb], self.det_algorithm)
            _truncate(stop, dev > self.det_tol, blk.rows, self.rejected)
        elif self.policy == "kay":
            with np.errstate(invalid="ignore", over="ignore"):
                mag2 = d.real * d.real + d.imag * d.imag
            _truncate(stop, mag2 >= self.kay, blk.rows, self.rejected)
        return phi, amp

    def stats(self):
        if self.policy == "none":
            return {}
        return {"n_rejected": int(self.rejected.sum())}


class _RegTracker:
    """Exact prefactor evaluated on a per-step tamed monodromy stream.

    The evolution itself stays untamed; every recorded step whose matrix
    carries a real eigenvalue past the threshold is tamed for evaluation
    only. Counts tamed steps and taming episodes (onset transitions) per
    trajectory. A failed eigendecomposition truncates like a rejection.
    """

    def __init__(self, engine):
        self.eps_thr = engine.eps_thr
        self.max_modes = engine.max_modes
        self.variant = engine.reg_variant
        self.gamma = engine.chi.gamma
        self.steps = None
        self.episodes = None
        self.failed = None

    def start(self, n, w20, gt0):
        self.steps = np.zeros(n, dtype=np.int64)
        self.episodes = np.zeros(n, dtype=np.int64)
        self.failed = np.zeros(n, dtype=bool)
        return _Carry(theta=np.zeros(n), prev=np.zeros(n, dtype=bool))

    def block(self, blk, carry, stop):
        M = blk.out["M"][:blk.nb]
        fin = np.isfinite(M).all(axis=(2, 3))
        with np.errstate(invalid="ignore", over="ignore"):
            # max row sum bounds every eigenvalue, a cheap prescreen
            norm = np.abs(np.where(fin[..., None, None], M, 0.0)
                          ).sum(axis=3).max(axis=2)
        d = blk.d_exact.copy()
        tamed = np.zeros(M.shape[:2], dtype=bool)
        failrow = np.full(M.shape[1], np.iinfo(np.int64).max)
        for b, i in zip(*np.nonzero(fin & (norm >= self.eps_thr))):
            if blk.rows[b] >= stop[i]:
                continue
            Mt, cnt = st.regularize(M[b, i], self.eps_thr, self.max_modes,
                                    self.variant)
            if cnt > 0:
                tamed[b, i] = True
                d[b, i] = pf.exact_det_series(Mt, self.gamma)
            elif cnt < 0:
                failrow[i] = min(failrow[i], blk.rows[b])
        self.failed |= failrow < stop
        np.minimum(stop, failrow, out=stop)
        self.steps += tamed.sum(axis=0)
        runs = np.concatenate([carry.prev[None, :], tamed], axis=0)
        self.episodes += (np.diff(runs.astype(np.int8), axis=0) == 1).sum(axis=0)
        carry.prev = tamed[-1].copy()
        return _halfangle_block(d, carry)

    def stats(self):
        return {
            "n_tamed": int((self.steps > 0).sum()),
            "max_tamed_steps": int(self.steps.max(initial=0)),
            "max_tamed_episodes": int(self.episodes.max(initial=0)),
            "n_decomposition_failures": int(self.failed.sum()),
        }


class _HarmonicTracker:
    """Equilibrium-frequency phase, the same for every trajectory."""

    def __init__(self, engine):
        self.rate = 0.5 * HBAR * float(
            np.sum(engine.spec.harmonic_frequencies()))
        self.dt = engine.dt

    def start(self, n, w20, gt0):
        return _Carry()

    def block(self, blk, carry, stop):
        phi = -self.rate * self.dt * blk.rows
        n = stop.shape[0]
        return np.broadcast_to(phi[:, None], (blk.nb, n)), None

    def stats(self):
        return {}


class _RtNTracker:
    """Per-mode analytic log-derivative scalars of a given order."""

    def __init__(self, engine, order):
        self.order = order
        self.dt = engine.dt
        self.held = None
        self._amp0 = None

    def start(self, n, w20, gt0):
        rt0, held0 = pf.rt_n_scalars(w20, gt0, self.order)
        self.held = held0.any(axis=-1).copy()
        b0 = 0.5 * (1.0 + (1j / (HBAR * gt0)) * rt0)
        d0 = np.prod(b0, axis=-1)
        self._amp0 = np.sqrt(np.abs(d0))
        return _Carry(theta=np.angle(d0), tr=np.sum(rt0, axis=-1),
                      integral=np.zeros(n, dtype=complex))

    def initial_amp(self):
        return self._amp0

    def block(self, blk, carry, stop):
        w2, gt = blk.eigs
        with np.errstate(invalid="ignore", over="ignore", divide="ignore"):
            rt, held = pf.rt_n_scalars(w2, gt, self.order)
            self.held |= held.any(axis=(0, -1))
            b = 0.5 * (1.0 + (1j / (HBAR * gt)) * rt)
            detb = np.prod(b, axis=-1)
            tr = np.sum(rt, axis=-1)
            prev = np.concatenate([carry.tr[None, :], tr[:-1]], axis=0)
            integral = carry.integral + np.cumsum(
                0.5 * self.dt * (prev + tr), axis=0)
        carry.tr = tr[-1].copy()
        carry.integral = integral[-1].copy()
        phi, amp = _halfangle_block(detb, carry)
        phi = phi + 0.5 * HBAR * np.imag(integral)
        amp = amp * np.exp(0.5 * np.real(integral))
        return phi, amp

    def stats(self):
        return {"n_denominator_held": int(self.held.sum())}


class _JohnsonTracker:
    """Instantaneous-frequency phase; negative curvature fails or clamps."""

    def __init__(self, engine):
        self.policy = engine.johnson_policy
        self.dt = engine.dt
        self.clamped = None

    def _check(self, w2, rows):
        neg = (w2 < 0.0) & np.isfinite(w2)
        if not neg.any():
            return neg
        if self.policy == "fail":
            where = np.nonzero(neg.any(axis=-1))
            step = int(rows[where[0][0]]) if rows.ndim else int(rows)
            raise MethodInapplicable(
                "Johnson", "imaginary instantaneous frequency",
                {"step": step, "count": int(neg.sum()),
                 "trajectory_in_chunk": int(where[-1][0])})
        if self.policy != "clamp_zero":
            raise ValueError("unknown Johnson policy %r" % (self.policy,))
        return neg

    def start(self, n, w20, gt0):
        self.clamped = np.zeros(n, dtype=bool)
        neg = self._check(w20, np.asarray(0))
        self.clamped |= neg.any(axis=-1)
        rate = np.sum(np.sqrt(np.maximum(w20, 0.0)), axis=-1)
        return _Carry(rate=rate, integral=np.zeros(n))

    def block(self, blk, carry, stop):
        w2, _ = blk.eigs
        live = blk.rows[:, None] < stop[None, :]
        neg = self._check(np.where(live[..., None], w2, 0.0), blk.rows)
        self.clamped |= neg.any(axis=(0, -1))
        with np.errstate(invalid="ignore"):
            rate = np.sum(np.sqrt(np.maximum(w2, 0.0)), axis=-1)
            prev = np.concatenate([carry.rate[None, :], rate[:-1]], axis=0)
            integral = carry.integral + np.cumsum(
                0.5 * self.dt * (prev + rate), axis=0)
        carry.rate = rate[-1].copy()
        carry.integral = integral[-1].copy()
        return -0.5 * HBAR * integral, None

    def stats(self):
        if self.policy == "fail":
            return {}
        return {"n_clamped": int(self.clamped.sum())}


class _AdiabaticTracker:
    """Decoupled normal-mode scalars advanced with the trajectory stepper."""

    def __init__(self, engine):
        self.kicks = engine.kicks
        self.drifts = engine.drifts
        self.dt = engine.dt
        self.overflowed = None

    def start(self, n, w20, gt0):
        self.overflowed = np.zeros(n, dtype=bool)
        F = w20.shape[-1]
        return _Carry(theta=np.zeros(n),
                      Q=np.ones((n, F), dtype=complex),
                      P=(-1j * HBAR * gt0).astype(complex),
                      w2prev=w20.copy())

    def block(self, blk, carry, stop):
        w2, gt = blk.eigs
        nb, n = w2.shape[:2]
        detb = np.empty((nb, n), dtype=complex)
        with np.errstate(over="ignore", invalid="ignore"):
            for k in range(nb):
                pf.adiabatic_advance(carry.Q, carry.P, carry.w2prev, self.dt,
                                     self.kicks, self.drifts)
                carry.w2prev = w2[k]
                bb = 0.5 * (carry.Q + (1j / (HBAR * gt[k])) * carry.P)
                detb[k] = np.prod(bb, axis=-1)
        bad = ~np.isfinite(detb)
        if bad.any():
            _truncate(stop, bad, blk.rows, self.overflowed)
            detb[bad] = 1.0  # keeps the unwrap defined; rows are masked
        return _halfangle_block(detb, carry)

    def stats(self):
        return {"n_overflowed": int(self.overflowed.sum())}


class _PPsTracker:
    """Central-trajectory prefactor broadcast over the whole ensemble."""

    def __init__(self, engine):
        self.phi_full = engine.pps_phi
        self.amp_full = engine.pps_amp

    def start(self, n, w20, gt0):
        return _Carry()

    def block(self, blk, carry, stop):
        rows = slice(blk.row0 + 1, blk.row0 + 1 + blk.nb)
        n = stop.shape[0]
        phi = np.broadcast_to(self.phi_full[rows, None], (blk.nb, n))
        amp = np.broadcast_to(self.amp_full[rows, None], (blk.nb, n))
        return phi, amp

    def stats(self):
        return {}


def _make_tracker(name, engine):
    if name in ("SC-IVR", "Exact"):
        return _ExactTracker(engine, "det")
    if name == "Kay":
        return _ExactTracker(engine, "kay")
    if name == "ExactNoFilter":
        return _ExactTracker(engine, "none")
    if name == "Regularization":
        return _RegTracker(engine)
    if name == "HO":
        return _HarmonicTracker(engine)
    order = _parse_rt_order(name)
    if order is not None:
        return _RtNTracker(engine, order)
    if name == "Johnson":
        return _JohnsonTracker(engine)
    if name == "Adiabatic":
        return _AdiabaticTracker(engine)
    if name == "PPs":
        return _PPsTracker(engine)
    raise ValueError("unknown prefactor method %r" % (name,))


KNOWN_METHODS = ("SC-IVR", "Exact", "Kay", "ExactNoFilter", "Regularization",
                 "HO", "Johnson", "Adiabatic", "PPs")


def is_known_method(name):
    return name in KNOWN_METHODS or _parse_rt_order(name) is not None


class RunStats:
    """Aggregated ensemble bookkeeping for one spectrum run."""

    def __init__(self):
        self.n_traj = 0
        self.n_diverged = 0
        self.earliest_divergence = None
        self.survival_t0 = None
        self.wall_seconds = 0.0
        self.per_method = {}

    def method(self, name):
        return self.per_method.setdefault(name, {})

    def as_dict(self):
        d = {
            "n_traj": self.n_traj,
            "n_diverged": self.n_diverged,
            "wall_seconds": round(self.wall_seconds, 3),
        }
        if self.earliest_divergence is not None:
            d["earliest_divergence"] = self.earliest_divergence
        if self.survival_t0 is not None:
            d["survival_t0"] = self.survival_t0
        d["per_method"] = {m: dict(v) for m, v in self.per_method.items()}
        return d


RunOutput = namedtuple("RunOutput", ["spectra", "stats"])


class SpectrumEngine:
    """One streaming pass over the ensemble, all methods, one estimator."""

    def __init__(self, spec, chi, methods, dt, nsteps, n_traj, seed,
                 estimator="TA", width_scale=1.0, pad_factor=4,
                 window="hann", det_tol=st.TOL_DET_DEFAULT,
                 det_algorithm="cofactor_m", kay_threshold=None,
                 eps_thr=st.EPS_THR_DEFAULT, max_modes=st.MAX_MODES_DEFAULT,
                 reg_variant="both", johnson_policy="fail", chunk=250,
                 block_steps=250, scheme="suzuki4", substeps=1, backend=None,
                 threads=1):
        if estimator not in ("TA", "HK"):
            raise ValueError("estimator must be 'TA' or 'HK'")
        if dt <= 0 or int(nsteps) < 1 or int(n_traj) < 1:
            raise ValueError("dt, nsteps and n_traj must be positive")
        if chi.ndim != spec.ndim:
            raise ValueError("reference state does not match pes dimension")
        self.spec = spec
        self.chi = chi
        self.methods = list(methods)
        seen = set()
        for m in self.methods:
            if not is_known_method(m):
                raise ValueError("unknown prefactor method %r" % (m,))
            if m in seen:
                raise ValueError("method %r listed twice" % (m,))
            seen.add(m)
        self.dt = float(dt)
        self.nsteps = int(nsteps)
        self.n_traj = int(n_traj)
        self.seed = int(seed)
        self.estimator = estimator
        self.width_scale = float(width_scale)
        self.pad_factor = int(pad_factor)
        self.window = window
        self.det_tol = float(det_tol)
        self.det_algorithm = det_algorithm
        self.kay_threshold = float(n_traj if kay_threshold is None
                                   else kay_threshold)
        self.eps_thr = float(eps_thr)
        self.max_modes = int(max_modes)
        self.reg_variant = reg_variant
        self.johnson_policy = johnson_policy
        self.chunk = int(chunk)
        self.block_steps = int(block_steps)
        self.scheme = scheme
        self.substeps = int(substeps)
        self.backend = backend
        self.threads = max(1, int(threads))
        self.kicks, self.drifts = dynamics.stage_coefficients(scheme, substeps)
        self.mpad = pad_length(self.nsteps + 1, self.pad_factor)
        self.energies = energy_grid(self.dt, self.nsteps, self.pad_factor)
        self.pps_phi = None
        self.pps_amp = None

    def _prepare_pps(self):
        """Propagate the reference center once for the shared prefactor."""
        rec = dynamics.propagate(
            self.spec, (self.chi.q, self.chi.p), self.dt, self.nsteps,
            scheme=self.scheme, backend=self.backend, substeps=self.substeps)
        if rec.first_bad is not None:
            raise MethodInapplicable(
                "PPs", "central trajectory diverged", {"step": rec.first_bad})
        ser = pf.prefactor_exact(rec.M, self.chi.gamma)
        self.pps_phi = ser.phi
        self.pps_amp = np.abs(ser.C)

    def run(self):
        t_start = time.time()
        stats = RunStats()
        stats.n_traj = self.n_traj
        dead = {}
        if "PPs" in self.methods:
            try:
                self._prepare_pps()
            except MethodInapplicable as err:
                dead["PPs"] = err

        K1 = self.nsteps + 1
        hk = self.estimator == "HK"
        acc = {m: (np.zeros(K1, dtype=complex) if hk else np.zeros(self.mpad))
               for m in self.methods}
        chunks = [(i0, min(self.chunk, self.n_traj - i0))
                  for i0 in range(0, self.n_traj, self.chunk)]
        results = [None] * len(chunks)
        live_methods = [m for m in self.methods if m not in dead]
        if self.threads > 1 and len(chunks) > 1:
            import concurrent.futures as cf
            with cf.ThreadPoolExecutor(self.threads) as ex:
                futs = {ex.submit(self._chunk, i0, nc, live_methods): k
                        for k, (i0, nc) in enumerate(chunks)}
                for fut in cf.as_completed(futs):
                    results[futs[fut]] = fut.result()
        else:
            for k, (i0, nc) in enumerate(chunks):
                results[k] = self._chunk(i0, nc, live_methods)

        # reduction in chunk-index order, independent of worker scheduling
        surv0 = 0.0
        tracker_agg = {}
        for res in results:
            surv0 += res["surv0"]
            stats.n_diverged += res["n_diverged"]
            if res["earliest_divergence"] is not None:
                cur = stats.earliest_divergence
                stats.earliest_divergence = (
                    res["earliest_divergence"] if cur is None
                    else min(cur, res["earliest_divergence"]))
            for m, err in res["dead"].items():
                dead.setdefault(m, err)
            for m in live_methods:
                if m not in dead and m in res["acc"]:
                    acc[m] += res["acc"][m]
            for m, upd in res["tracker_stats"].items():
                agg = tracker_agg.setdefault(m, {})
                for key, val in upd.items():
                    if key.startswith("max_"):
                        agg[key] = max(agg.get(key, 0), val)
                    else:
                        agg[key] = agg.get(key, 0) + val

        if hk:
            stats.survival_t0 = surv0 / self.n_traj
        for m, detail in tracker_agg.items():
            if m not in dead:
                stats.method(m).update(detail)
        for m, err in dead.items():
            stats.method(m)["inapplicable"] = err.reason
            stats.method(m).update(err.detail)

        meta = {
            "dt": self.dt, "nsteps": self.nsteps, "n_traj": self.n_traj,
            "seed": self.seed, "width_scale": self.width_scale,
            "estimator": self.estimator,
        }
        spectra = {}
        for m in self.methods:
            if m in dead:
                spectra[m] = None
                continue
            if hk:
                inten = self._hk_transform(acc[m] / self.n_traj)
            else:
                T = self.nsteps * self.dt
                inten = acc[m] * self.dt**2 / (
                    self.n_traj * 2.0 * np.pi * HBAR * T)
            spectra[m] = SpectrumGrid(self.energies, inten,
                                      dict(meta, method=m))
        stats.wall_seconds = time.time() - t_start
        if spectra and all(v is None for v in spectra.values()):
            raise MethodInapplicable(
                "all", "no method produced a spectrum",
                {m: e.reason for m, e in dead.items()})
        return RunOutput(spectra, stats)

    def _hk_transform(self, A):
        """I(E) from the one-sided survival series, hermitian-extended.

        I(E) = (dt / 2 pi hbar) [w_0 Re A_0 + 2 Re sum_k w_k A_k e^{iEt_k}]
        with a window w over the recorded span.
        """
        K1 = A.shape[0]
        k = np.arange(K1)
        if self.window == "hann":
            w = 0.5 * (1.0 + np.cos(np.pi * k / (K1 - 1)))
        elif self.window in ("none", "rect"):
            w = np.ones(K1)
        else:
            raise ValueError("unknown window %r" % (self.window,))
        wa = w * A
        g = np.fft.ifft(wa, n=self.mpad) * self.mpad
        return (self.dt / (2.0 * np.pi * HBAR)) * (2.0 * g.real - wa[0].real)

    def _chunk(self, i0, n, methods):
        chi = self.chi
        F = self.spec.ndim
        K1 = self.nsteps + 1
        hk = self.estimator == "HK"
        from . import backends as _backends
        advance = _backends.get_advance(self.backend)

        q0, p0 = sample_husimi(chi, n, self.seed, self.width_scale, start=i0)
        logw = log_weight(chi, q0, p0, self.width_scale)
        ov0 = coherent_overlap(chi, q0, p0)
        # (2 pi hbar)^-F <z0|chi> / rho, the HK phase-space weight
        hkw = np.conj(ov0) * np.exp(logw)

        state = dynamics.ChunkState(self.spec, q0, p0)
        with np.errstate(invalid="ignore", over="ignore"):
            w20, U0 = pf.eigh2(state.K)
            gt0 = pf.gamma_tilde(U0, chi.gamma)

        trackers = {}
        carries = {}
        stops = {}
        slabs = {}
        dead = {}
        for m in methods:
            tr = _make_tracker(m, self)
            try:
                carries[m] = tr.start(n, w20, gt0)
            except MethodInapplicable as err:
                err.detail["trajectory"] = i0 + err.detail.pop(
                    "trajectory_in_chunk", 0)
                dead[m] = err
                continue
            trackers[m] = tr
            stops[m] = np.full(n, K1, dtype=np.int64)
            slab = np.zeros((n, K1), dtype=complex)
            slab[:, 0] = ov0
            if hk and hasattr(tr, "initial_amp"):
                slab[:, 0] *= tr.initial_amp()
            slabs[m] = slab
        base_stop = np.full(n, K1, dtype=np.int64)

        nb_max = min(self.block_steps, self.nsteps)
        out = dynamics.alloc_out(n, F, nb_max)
        row0 = 0
        while row0 < self.nsteps:
            nb = min(nb_max, self.nsteps - row0)
            advance(self.spec, state, self.dt, self.kicks, self.drifts,
                    out, nb)
            blk = _Block(self, out, row0, nb)
            q = out["q"][:nb]
            p = out["p"][:nb]
            S = out["S"][:nb]
            badrow = (~np.isfinite(S)
                      | ~np.isfinite(q).all(axis=-1)
                      | ~np.isfinite(p).all(axis=-1)
                      | ~np.isfinite(out["M"][:nb]).all(axis=(-2, -1)))
            if badrow.any():
                _truncate(base_stop, badrow, blk.rows)
            with np.errstate(invalid="ignore", over="ignore"):
                base = np.exp(1j * S / HBAR) * coherent_overlap(chi, q, p)
            for m in list(trackers):
                stop = stops[m]
                np.minimum(stop, base_stop, out=stop)
                try:
                    phi, amp = trackers[m].block(blk, carries[m], stop)
                except MethodInapplicable as err:
                    err.detail["trajectory"] = i0 + err.detail.pop(
                        "trajectory_in_chunk", 0)
                    dead[m] = err
                    del trackers[m], carries[m], stops[m], slabs[m]
                    continue
                with np.errstate(invalid="ignore", over="ignore"):
                    f = base * np.exp(1j * phi / HBAR)
                    if hk and amp is not None:
                        f = f * amp
                # a prefactor evaluation that overflowed past the floating
                # range is a divergence point like any other: the usable
                # window ends on the last finite value, earlier steps stay
                badf = ~np.isfinite(f)
                if badf.any():
                    _truncate(stop, badf, blk.rows)
                live = blk.rows[:, None] < stop[None, :]
                slabs[m][:, row0 + 1:row0 + 1 + nb] = np.where(
                    live, f, 0.0).T
            row0 += nb

        res = {
            "acc": {}, "dead": dead, "tracker_stats": {},
            "surv0": float(np.real((ov0 * hkw).sum())),
            "n_diverged": int((base_stop < K1).sum()),
            "earliest_divergence": (int(base_stop.min())
                                    if (base_stop < K1).any() else None),
        }
        for m, tr in trackers.items():
            slab = slabs[m]
            stop = np.minimum(stops[m], base_stop)
            if hk:
                res["acc"][m] = (slab * hkw[:, None]).sum(axis=0)
            else:
                # trapezoid ends on each trajectory's usable window;
                # a single usable sample spans no interval at all
                slab[:, 0] *= 0.5
                slab[np.arange(n), stop - 1] *= 0.5
                slab[:, 0] *= stop > 1
                res["acc"][m] = _weighted_power(slab, logw, self.mpad)
            upd = tr.stats()
            if upd:
                res["tracker_stats"][m] = upd
        return res


def _weighted_power(slab, logw, mpad, batch=64):
    """Sum over trajectories of weight * |padded transform|^2."""
    n = slab.shape[0]
    acc = np.zeros(mpad)
    w = np.exp(logw)
    for k0 in range(0, n, batch):
        g = np.fft.ifft(slab[k0:k0 + batch], n=mpad, axis=1) * mpad
        acc += w[k0:k0 + batch] @ (g.real**2 + g.imag**2)
    return acc


def ensemble_spectra(spec, chi, methods, dt, nsteps, n_traj, seed, **kw):
    """Build a SpectrumEngine, run it, return (spectra, stats)."""
    eng = SpectrumEngine(spec, chi, methods, dt, nsteps, n_traj, seed, **kw)
    return eng.run()


def find_peaks(grid, min_height_fraction=0.05, min_separation=None):
    """Local maxima above a height floor, parabola-refined, merged.

    The floor is min_height_fraction times the tallest intensity. Each
    surviving maximum is refined by the parabola through its three
    samples; maxima closer than min_separation (default 5 grid spacings)
    merge into the taller one. Returns a PeakTable sorted by energy.
    """
    E = np.asarray(grid.energies, dtype=float)
    I = np.asarray(grid.intensities, dtype=float)
    if E.shape[0] < 3:
        return PeakTable(np.empty(0), np.empty(0))
    de = E[1] - E[0]
    if min_separation is None:
        min_separation = 5.0 * de
    floor = min_height_fraction * I.max()
    inner = (I[1:-1] >= I[:-2]) & (I[1:-1] > I[2:]) & (I[1:-1] > floor)
    idx = np.nonzero(inner)[0] + 1
    peaks = []
    heights = []
    for k in idx:
        y0, y1, y2 = I[k - 1], I[k], I[k + 1]
        denom = y0 - 2.0 * y1 + y2
        shift = 0.5 * (y0 - y2) / denom if denom != 0 else 0.0
        shift = float(np.clip(shift, -0.5, 0.5))
        peaks.append(E[k] + shift * de)
        heights.append(y1 - 0.25 * (y0 - y2) * shift)
    merged_p = []
    merged_h = []
    for e, h in zip(peaks, heights):
        if merged_p and e - merged_p[-1] < min_separation:
            if h > merged_h[-1]:
                merged_p[-1], merged_h[-1] = e, h
        else:
            merged_p.append(e)
            merged_h.append(h)
    return PeakTable(np.asarray(merged_p), np.asarray(merged_h))


def mae(peaks, reference_levels, pairing_window):
    """Order-preserving assignment of detected peaks to reference levels.

    Degenerate or unresolved reference levels often share a single
    detected peak, so the pairing cannot be one-to-one. Each reference
    takes exactly one peak, assignments never cross, and a peak may serve
    several consecutive references. Skipping a detected peak costs one
    pairing_window, which makes the alignment use every credible peak
    while ignoring far-off spurious ones. Peaks farther than the window
    from every reference are dropped up front. References whose assigned
    peak misses by more than the window are reported as unpaired and
    excluded from the mean.
    """
    heights = None
    if isinstance(peaks, PeakTable):
        heights = np.asarray(peaks.heights, dtype=float).ravel()
        peaks = peaks.peaks
    pk = np.asarray(peaks, dtype=float).ravel()
    order = np.argsort(pk)
    pk = pk[order]
    if heights is not None:
        heights = heights[order]
    ref = np.sort(np.asarray(reference_levels, dtype=float).ravel())
    if pk.size:
        near = np.min(np.abs(pk[:, None] - ref[None, :]), axis=1)
        keep = near <= pairing_window
        pk = pk[keep]
        if heights is not None:
            heights = heights[keep]
    if heights is None:
        heights = np.zeros_like(pk)
    R, P = ref.size, pk.size
    if R == 0 or P == 0:
        return PeakTable(pk, heights, reference=ref, pairs=[],
                         mae=None, unpaired=[float(r) for r in ref])

    skip = float(pairing_window)
    cost = np.abs(ref[:, None] - pk[None, :])
    # best[i, j]: cheapest assignment of refs 0..i with ref i on peak j
    best = np.full((R, P), np.inf)
    prev = np.zeros((R, P), dtype=int)
    best[0] = cost[0] + skip * np.arange(P)
    for i in range(1, R):
        run = np.inf
        arg = 0
        for j in range(P):
            # either reuse peak j for this reference too, or advance from
            # an earlier peak, paying for any peaks skipped in between
            reuse = best[i - 1, j]
            stepped = run + skip * j
            if reuse <= stepped:
                best[i, j] = cost[i, j] + reuse
                prev[i, j] = j
            else:
                best[i, j] = cost[i, j] + stepped
                prev[i, j] = arg
            c = best[i - 1, j] - skip * (j + 1)
            if c < run:
                run = c
                arg = j
    tail = best[R - 1] + skip * (P - 1 - np.arange(P))
    j = int(np.argmin(tail))
    take = np.empty(R, dtype=int)
    for i in range(R - 1, -1, -1):
        take[i] = j
        j = prev[i, j]

    pairs = []
    unpaired = []
    for i in range(R):
        d = abs(pk[take[i]] - ref[i])
        if d <= pairing_window:
            pairs.append((float(ref[i]), float(pk[take[i]])))
        else:
            unpaired.append(float(ref[i]))
    value = (float(np.mean([abs(e - r) for r, e in pairs]))
             if pairs else None)
    return PeakTable(pk, heights, reference=ref, pairs=pairs,
                     mae=value, unpaired=unpaired)
