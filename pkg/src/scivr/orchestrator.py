"""Campaign driver: configs, end-to-end runs, and file outputs.

A run ties a surface, a reference state, the trajectory ensemble and the
grid reference together and leaves a self-contained directory behind:
spectra as two-column text, a peak/assignment report per method, the
reference levels, a summary with the ensemble bookkeeping, and an echo
of the effective configuration that re-parses to the same run.

Configs are flat ``key = value`` text with dotted section names. Unknown
keys are rejected with the offending field path, values are checked on
parse, and every default is materialized in the echo so the file on disk
is the complete record of what ran. Energies are atomic units internally;
a config may declare ``spectrum.units = cm-1`` to read and write the
spectral axis in wavenumbers instead.
"""

import os
import re
import time

import numpy as np

from . import dvr as _dvr
from . import pes as _pes
from . import spectrum as _sp
from . import stability as _st

# hartree per cm^-1, written into output headers whenever wavenumbers
# are used anywhere
CM1 = 4.556335e-6


class ConfigError(ValueError):
    """Bad or missing config field; the message names the field path."""


def _parse_bool(s):
    if s.lower() in ("true", "yes", "on", "1"):
        return True
    if s.lower() in ("false", "no", "off", "0"):
        return False
    raise ValueError("not a boolean: %r" % (s,))


def _parse_vec(s):
    return tuple(float(x) for x in s.replace(",", " ").split())


def _parse_words(s):
    return tuple(w for w in s.replace(",", " ").split())


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return " ".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


# field path -> (parser, default); required fields carry the REQUIRED
# sentinel and None stands for "unset, resolved downstream"
REQUIRED = object()

_FIELDS = {
    "name": (str, ""),
    "pes.kind": (str, REQUIRED),
    "pes.lambda": (float, None),
    "pes.omega": (_parse_vec, None),
    "pes.omega_cm": (float, None),
    "pes.D": (float, None),
    "pes.beta": (float, None),
    "pes.omega1_cm": (float, None),
    "pes.omega2_cm": (float, None),
    "reference.q": (_parse_vec, None),
    "reference.p": (_parse_vec, None),
    "reference.p_rule": (str, "first-harmonic-level"),
    "reference.gamma": (_parse_vec, None),
    "sampling.n": (int, REQUIRED),
    "sampling.width_scale": (float, 1.0),
    "dynamics.dt": (float, REQUIRED),
    "dynamics.nsteps": (int, REQUIRED),
    "dynamics.substeps": (int, 1),
    "dynamics.scheme": (str, "suzuki4"),
    "estimator": (str, "TA"),
    "methods": (_parse_words, REQUIRED),
    "stability.det_tol": (float, _st.TOL_DET_DEFAULT),
    "stability.kay_threshold": (float, None),
    "stability.eps_thr": (float, _st.EPS_THR_DEFAULT),
    "stability.max_modes": (int, _st.MAX_MODES_DEFAULT),
    "stability.reg_variant": (str, "both"),
    "stability.johnson_policy": (str, "fail"),
    "spectrum.window": (str, "hann"),
    "spectrum.pad_factor": (int, 4),
    "spectrum.units": (str, "au"),
    "spectrum.emin": (float, None),
    "spectrum.emax": (float, None),
    "spectrum.peak_floor": (float, 0.05),
    "spectrum.pairing_window": (float, None),
    "dvr.enabled": (_parse_bool, False),
    "dvr.box": (_parse_vec, None),
    "dvr.n": (int, 128),
    "dvr.states": (int, 19),
    "dvr.residual_tol": (float, 1e-8),
    "seed": (int, 0),
    "threads": (int, 1),
    "output.dir": (str, ""),
}

_PES_FIELDS = {
    "Harmonic": ("pes.omega",),
    "HenonHeiles": ("pes.lambda",),
    "MorseQuartic": ("pes.lambda", "pes.D", "pes.beta",
                     "pes.omega1_cm", "pes.omega2_cm"),
    "Morse1D": ("pes.D", "pes.omega_cm"),
}


class RunConfig:
    """Validated, fully-defaulted description of one experiment."""

    def __init__(self, values):
        self.values = dict(values)
        self._check()

    @classmethod
    def parse(cls, text, name=""):
        values = {}
        for ln, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError("line %d: expected key = value, got %r"
                                  % (ln, raw.strip()))
            key, sval = (s.strip() for s in line.split("=", 1))
            if key not in _FIELDS:
                raise ConfigError("line %d: unknown field %r" % (ln, key))
            parser, _ = _FIELDS[key]
            try:
                values[key] = parser(sval)
            except Exception as exc:
                raise ConfigError("field %s: %s" % (key, exc))
        for key, (_, default) in _FIELDS.items():
            if key in values:
                continue
            if default is REQUIRED:
                raise ConfigError("field %s: required but missing" % key)
            values[key] = default
        if name and not values.get("name"):
            values["name"] = name
        return cls(values)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            text = fh.read()
        stem = os.path.splitext(os.path.basename(path))[0]
        return cls.parse(text, name=stem)

    def _check(self):
        v = self.values
        kind = v["pes.kind"]
        if kind not in _PES_FIELDS:
            raise ConfigError("field pes.kind: unknown kind %r" % kind)
        if v["sampling.n"] <= 0:
            raise ConfigError("field sampling.n: must be positive")
        if v["dynamics.dt"] <= 0:
            raise ConfigError("field dynamics.dt: must be positive")
        if v["dynamics.nsteps"] < 1:
            raise ConfigError("field dynamics.nsteps: must be >= 1")
        if v["dynamics.substeps"] < 1:
            raise ConfigError("field dynamics.substeps: must be >= 1")
        if v["estimator"] not in ("TA", "HK"):
            raise ConfigError("field estimator: must be TA or HK")
        if not v["methods"]:
            raise ConfigError("field methods: empty")
        for m in v["methods"]:
            if not _sp.is_known_method(m):
                raise ConfigError("field methods: unknown method %r" % m)
        for key in ("stability.det_tol", "stability.eps_thr",
                    "spectrum.peak_floor", "dvr.residual_tol",
                    "sampling.width_scale"):
            if v[key] is not None and v[key] <= 0:
                raise ConfigError("field %s: must be positive" % key)
        if v["stability.kay_threshold"] is not None \
                and v["stability.kay_threshold"] <= 0:
            raise ConfigError("field stability.kay_threshold: "
                              "must be positive")
        if v["spectrum.units"] not in ("au", "cm-1"):
            raise ConfigError("field spectrum.units: must be au or cm-1")
        if v["stability.johnson_policy"] not in ("fail", "clamp_zero"):
            raise ConfigError("field stability.johnson_policy: must be "
                              "fail or clamp_zero")
        if v["stability.reg_variant"] not in ("eigenvalue", "eigenvector",
                                              "both"):
            raise ConfigError("field stability.reg_variant: must be "
                              "eigenvalue, eigenvector or both")
        if v["spectrum.pairing_window"] is not None \
                and v["spectrum.pairing_window"] <= 0:
            raise ConfigError("field spectrum.pairing_window: "
                              "must be positive")
        if v["dvr.enabled"]:
            if v["dvr.box"] is None:
                raise ConfigError("field dvr.box: required when dvr "
                                  "is enabled")
            if len(v["dvr.box"]) != 2 or v["dvr.box"][0] >= v["dvr.box"][1]:
                raise ConfigError("field dvr.box: expected 'lo hi' with "
                                  "lo < hi")
            if v["dvr.n"] < 8:
                raise ConfigError("field dvr.n: too few grid points")
            if v["dvr.states"] < 1:
                raise ConfigError("field dvr.states: must be >= 1")
        for key in _PES_FIELDS[kind]:
            if v[key] is None:
                raise ConfigError("field %s: required for pes.kind %s"
                                  % (key, kind))
        if v["reference.p"] is not None \
                and v["reference.p_rule"] != "first-harmonic-level":
            raise ConfigError("field reference.p_rule: give either an "
                              "explicit reference.p or a rule, not both")

    # --- unit helpers -------------------------------------------------
    @property
    def unit_scale(self):
        """Multiply config-unit energies by this to get atomic units."""
        return CM1 if self.values["spectrum.units"] == "cm-1" else 1.0

    def to_output_units(self, energies_au):
        return np.asarray(energies_au) / self.unit_scale

    # --- builders -----------------------------------------------------
    def pes_spec(self):
        v = self.values
        kind = v["pes.kind"]
        params = {}
        if kind == "Harmonic":
            params["omega"] = list(v["pes.omega"])
        elif kind == "HenonHeiles":
            params["lambda"] = v["pes.lambda"]
        elif kind == "MorseQuartic":
            params = {"D": v["pes.D"], "beta": v["pes.beta"],
                      "lambda": v["pes.lambda"],
                      "omega1_cm": v["pes.omega1_cm"],
                      "omega2_cm": v["pes.omega2_cm"]}
        else:
            params = {"D": v["pes.D"], "omega_cm": v["pes.omega_cm"]}
        return _pes.PesSpec(kind, params)

    def reference_state(self, spec=None):
        v = self.values
        if spec is None:
            spec = self.pes_spec()
        if v["reference.p"] is None and v["reference.q"] is None \
                and v["reference.gamma"] is None:
            return _sp.CoherentState.from_model(spec, n=1)
        base = _sp.CoherentState.from_model(spec, n=1)
        q = v["reference.q"] if v["reference.q"] is not None else base.q
        p = v["reference.p"] if v["reference.p"] is not None else base.p
        g = (v["reference.gamma"] if v["reference.gamma"] is not None
             else base.gamma)
        if len(q) != spec.ndim or len(p) != spec.ndim \
                or len(g) != spec.ndim:
            raise ConfigError("field reference.*: dimension mismatch "
                              "with pes.kind %s" % spec.kind)
        return _sp.CoherentState(q, p, g)

    def engine(self, spec=None, chi=None, seed=None, threads=None):
        v = self.values
        if spec is None:
            spec = self.pes_spec()
        if chi is None:
            chi = self.reference_state(spec)
        return _sp.SpectrumEngine(
            spec, chi, list(v["methods"]),
            dt=v["dynamics.dt"], nsteps=v["dynamics.nsteps"],
            n_traj=v["sampling.n"],
            seed=v["seed"] if seed is None else seed,
            estimator=v["estimator"],
            width_scale=v["sampling.width_scale"],
            pad_factor=v["spectrum.pad_factor"],
            window=v["spectrum.window"],
            det_tol=v["stability.det_tol"],
            kay_threshold=v["stability.kay_threshold"],
            eps_thr=v["stability.eps_thr"],
            max_modes=v["stability.max_modes"],
            reg_variant=v["stability.reg_variant"],
            johnson_policy=v["stability.johnson_policy"],
            scheme=v["dynamics.scheme"],
            substeps=v["dynamics.substeps"],
            threads=v["threads"] if threads is None else threads)

    def dvr_grid(self, spec=None):
        v = self.values
        if spec is None:
            spec = self.pes_spec()
        lo, hi = v["dvr.box"]
        return _dvr.DvrGrid.cube(lo, hi, v["dvr.n"], spec.ndim)

    # --- echo ----------------------------------------------------------
    def to_text(self):
        lines = ["# effective configuration, every default materialized"]
        for key in sorted(_FIELDS):
            val = self.values[key]
            if val is None:
                continue
            lines.append("%s = %s" % (key, _fmt(val)))
        return "\n".join(lines) + "\n"

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.values == other.values

    def __ne__(self, other):
        return not self == other


def bundled_config_dir():
    return os.path.join(os.path.dirname(__file__), "configs")


def bundled_configs():
    d = bundled_config_dir()
    if not os.path.isdir(d):
        return []
    return sorted(os.path.splitext(f)[0] for f in os.listdir(d)
                  if f.endswith(".cfg"))


def load_config(path_or_name):
    """Load a config file, falling back to the bundled set by name."""
    if os.path.exists(path_or_name):
        return RunConfig.load(path_or_name)
    cand = os.path.join(bundled_config_dir(), path_or_name + ".cfg")
    if os.path.exists(cand):
        return RunConfig.load(cand)
    raise ConfigError("no such config file or bundled name: %r "
                      "(bundled: %s)"
                      % (path_or_name, ", ".join(bundled_configs())))


def _slug(method):
    return re.sub(r"[^a-z0-9]+", "_", method.lower()).strip("_")


class RunSummary:
    """Everything run() produced, with paths to the files it wrote."""

    def __init__(self, config, out_dir):
        self.config = config
        self.out_dir = out_dir
        self.spectrum_paths = {}
        self.peak_tables = {}
        self.mae = {}
        self.inapplicable = {}
        self.stats = None
        self.dvr_levels = None
        self.dvr_solve_seconds = None
        self.wall_seconds = None

    def as_text(self):
        cfg = self.config.values
        unit = cfg["spectrum.units"]
        out = []
        w = out.append
        w("run %s" % (cfg["name"] or "(unnamed)"))
        w("  pes %s  estimator %s  n %d  dt %g  nsteps %d  seed %d"
          % (cfg["pes.kind"], cfg["estimator"], cfg["sampling.n"],
             cfg["dynamics.dt"], cfg["dynamics.nsteps"], cfg["seed"]))
        w("  wall %.1f s" % self.wall_seconds)
        st = self.stats
        if st is not None:
            n = st.n_traj
            w("  trajectories %d, diverged %d%s" % (
                n, st.n_diverged,
                "" if st.earliest_divergence is None
                else " (earliest at step %d)" % st.earliest_divergence))
            if st.survival_t0 is not None:
                w("  survival amplitude at t=0: %.6f" % st.survival_t0)
            for m in cfg["methods"]:
                pm = st.per_method.get(m, {})
                if not pm:
                    continue
                parts = []
                if "inapplicable" in pm:
                    parts.append("inapplicable: %s" % pm["inapplicable"])
                if "n_rejected" in pm:
                    parts.append("rejected %d (%.1f%%)"
                                 % (pm["n_rejected"],
                                    100.0 * pm["n_rejected"] / n))
                if "n_tamed" in pm:
                    parts.append(
                        "tamed %d (%.1f%%), worst %d steps / %d episodes"
                        % (pm["n_tamed"], 100.0 * pm["n_tamed"] / n,
                           pm.get("max_tamed_steps", 0),
                           pm.get("max_tamed_episodes", 0)))
                if pm.get("n_decomposition_failures"):
                    parts.append("decomposition failures %d"
                                 % pm["n_decomposition_failures"])
                if pm.get("n_clamped"):
                    parts.append("clamped modes on %d trajectories"
                                 % pm["n_clamped"])
                if pm.get("n_overflowed"):
                    parts.append("scalar overflow on %d trajectories"
                                 % pm["n_overflowed"])
                if pm.get("n_denominator_held"):
                    parts.append("denominator guard on %d"
                                 % pm["n_denominator_held"])
                for k, val in sorted(pm.items()):
                    if k in ("inapplicable", "n_rejected", "n_tamed",
                             "max_tamed_steps", "max_tamed_episodes",
                             "n_decomposition_failures", "n_clamped",
                             "n_overflowed", "n_denominator_held",
                             "step", "count", "trajectory"):
                        continue
                    parts.append("%s %s" % (k, val))
                if parts:
                    w("  %-16s %s" % (m, "; ".join(parts)))
        if self.dvr_levels is not None:
            w("  reference levels (%s): %s" % (
                unit, " ".join("%.6g" % e for e in
                               self.config.to_output_units(
                                   self.dvr_levels))))
            w("  reference solve %.1f s" % self.dvr_solve_seconds)
        for m in cfg["methods"]:
            if m in self.inapplicable:
                w("  %-16s no spectrum (%s)" % (m, self.inapplicable[m]))
                continue
            tab = self.peak_tables.get(m)
            if tab is None:
                continue
            line = "  %-16s %d peaks" % (m, len(tab.peaks))
            if self.mae.get(m) is not None:
                line += ", MAE %.6g %s" % (
                    self.mae[m] / self.config.unit_scale, unit)
                if tab.unpaired:
                    line += ", %d reference levels unmatched" \
                        % len(tab.unpaired)
            w(line)
        return "\n".join(out) + "\n"


def _write_spectrum(path, config, grid, method):
    cfg = config.values
    scale = config.unit_scale
    with open(path, "w") as fh:
        fh.write("# power spectrum, method %s, estimator %s\n"
                 % (method, cfg["estimator"]))
        fh.write("# pes %s, n %d, dt %g, nsteps %d, seed %d, "
                 "width_scale %g\n"
                 % (cfg["pes.kind"], cfg["sampling.n"], cfg["dynamics.dt"],
                    cfg["dynamics.nsteps"], cfg["seed"],
                    cfg["sampling.width_scale"]))
        fh.write("# columns: energy (%s), intensity (arbitrary)\n"
                 % cfg["spectrum.units"])
        if cfg["spectrum.units"] == "cm-1":
            fh.write("# 1 cm-1 = %.6e hartree\n" % CM1)
        for e, i in zip(grid.energies / scale, grid.intensities):
            fh.write("%.10e %.10e\n" % (e, i))


def _write_peaks(path, config, method, table):
    cfg = config.values
    scale = config.unit_scale
    unit = cfg["spectrum.units"]
    with open(path, "w") as fh:
        fh.write("# peaks, method %s (%s)\n" % (method, unit))
        fh.write("# columns: energy, height\n")
        for e, h in zip(table.peaks / scale, table.heights):
            fh.write("%.10e %.10e\n" % (e, h))
        if table.pairs:
            fh.write("# assignment: reference -> peak (difference)\n")
            for r, e in table.pairs:
                fh.write("# %.10g -> %.10g (%+.3g)\n"
                         % (r / scale, e / scale, (e - r) / scale))
            fh.write("# MAE %.10g %s over %d reference levels\n"
                     % (table.mae / scale, unit, len(table.pairs)))
        for r in table.unpaired or ():
            fh.write("# unmatched reference level %.10g\n" % (r / scale))


def run(config, out=None, seed=None, threads=None, reference_levels=None):
    """Execute one config end to end and write its artifact directory."""
    cfg = config.values
    t0 = time.time()
    out_dir = out or cfg["output.dir"] or os.path.join(
        "runs", cfg["name"] or "run")
    os.makedirs(out_dir, exist_ok=True)
    spec = config.pes_spec()
    chi = config.reference_state(spec)
    summary = RunSummary(config, out_dir)

    ref = None
    if reference_levels is not None:
        ref = np.asarray(reference_levels, dtype=float)
        summary.dvr_levels = ref
        summary.dvr_solve_seconds = 0.0
    elif cfg["dvr.enabled"]:
        t_dvr = time.time()
        grid = config.dvr_grid(spec)
        ref, _ = _dvr.solve_grid(spec, grid, cfg["dvr.states"],
                                 check_residual=cfg["dvr.residual_tol"])
        summary.dvr_levels = ref
        summary.dvr_solve_seconds = time.time() - t_dvr
    if ref is not None:
        ref_path = os.path.join(out_dir, "dvr_reference.dat")
        with open(ref_path, "w") as fh:
            fh.write("# reference levels (%s), one per line\n"
                     % cfg["spectrum.units"])
            for e in config.to_output_units(ref):
                fh.write("%.10e\n" % e)
        summary.spectrum_paths["dvr_reference"] = ref_path

    engine = config.engine(spec, chi, seed=seed, threads=threads)
    spectra, stats = engine.run()
    summary.stats = stats

    pairing = cfg["spectrum.pairing_window"]
    emin, emax = cfg["spectrum.emin"], cfg["spectrum.emax"]
    for m in cfg["methods"]:
        grid = spectra[m]
        if grid is None:
            summary.inapplicable[m] = stats.per_method.get(m, {}).get(
                "inapplicable", "no spectrum")
            continue
        path = os.path.join(out_dir, "spectrum_%s.dat" % _slug(m))
        _write_spectrum(path, config, grid, m)
        summary.spectrum_paths[m] = path
        crop = grid
        if emin is not None or emax is not None:
            crop = grid.crop(
                -np.inf if emin is None else emin * config.unit_scale,
                np.inf if emax is None else emax * config.unit_scale)
        table = _sp.find_peaks(crop, cfg["spectrum.peak_floor"])
        if ref is not None and pairing is not None and len(table.peaks):
            table = _sp.mae(table, ref, pairing * config.unit_scale)
        summary.peak_tables[m] = table
        summary.mae[m] = table.mae
        _write_peaks(os.path.join(out_dir, "peaks_%s.dat" % _slug(m)),
                     config, m, table)

    with open(os.path.join(out_dir, "config.txt"), "w") as fh:
        fh.write(config.to_text())
    summary.wall_seconds = time.time() - t0
    with open(os.path.join(out_dir, "summary.txt"), "w") as fh:
        fh.write(summary.as_text())
    if len(summary.inapplicable) == len(cfg["methods"]):
        raise _sp.MethodInapplicable(
            "all requested methods",
            "no method produced a spectrum",
            dict(summary.inapplicable))
    return summary


def compare_methods(configs, out=None, seed=None, threads=None):
    """Run several configs over one system and tabulate them side by side.

    All configs must share the surface and the reference state. Rows are
    the reference levels of the first config carrying a grid-reference
    block, columns are (config, method) spectra; the footer carries each
    column's MAE. Returns the table as tab-separated text.
    """
    if not configs:
        raise ConfigError("compare: no configs given")
    spec0 = configs[0].pes_spec()
    chi0 = configs[0].reference_state(spec0)
    for c in configs[1:]:
        if c.pes_spec() != spec0:
            raise ConfigError("compare: configs disagree on the surface")
        chi = c.reference_state()
        if not (np.allclose(chi.q, chi0.q) and np.allclose(chi.p, chi0.p)
                and np.allclose(chi.gamma, chi0.gamma)):
            raise ConfigError("compare: configs disagree on the "
                              "reference state")
    ref_cfg = None
    for c in configs:
        if c.values["dvr.enabled"]:
            ref_cfg = c
            break
    if ref_cfg is None:
        raise ConfigError("compare: no config carries a dvr block for "
                          "the reference levels")
    ref, _ = _dvr.solve_grid(
        spec0, ref_cfg.dvr_grid(spec0), ref_cfg.values["dvr.states"],
        check_residual=ref_cfg.values["dvr.residual_tol"])

    columns = []
    for k, c in enumerate(configs):
        sub = out and os.path.join(out, c.values["name"] or "cfg%d" % k)
        summary = run(c, out=sub, seed=seed, threads=threads,
                      reference_levels=ref)
        for m in c.values["methods"]:
            label = m if len(configs) == 1 else \
                "%s:%s" % (c.values["name"] or "cfg%d" % k, m)
            columns.append((label, c, summary, m))

    scale = ref_cfg.unit_scale
    unit = ref_cfg.values["spectrum.units"]
    header = ["level (%s)" % unit] + [lab for lab, _, _, _ in columns]
    rows = []
    for i, r in enumerate(ref):
        row = ["%.6g" % (r / scale)]
        for _, c, summary, m in columns:
            tab = summary.peak_tables.get(m)
            cell = "-"
            if tab is not None and tab.pairs:
                for rr, e in tab.pairs:
                    if abs(rr - r) < 1e-12:
                        cell = "%.6g" % (e / scale)
                        break
            row.append(cell)
        rows.append(row)
    footer = ["MAE"]
    for _, c, summary, m in columns:
        v = summary.mae.get(m)
        footer.append("-" if v is None else "%.6g" % (v / scale))
    rows.append(footer)

    lines = ["\t".join(header)]
    lines += ["\t".join(r) for r in rows]
    text = "\n".join(lines) + "\n"
    if out:
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, "comparison.tsv"), "w") as fh:
            fh.write(text)
    return text
