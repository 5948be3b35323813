"""Command line driver: `akglab <command> <config.ini>`.

Exit codes: 0 success, 1 configuration error, 2 gap collapse, 3 solver
non-convergence, 4 failed acceptance assertion.
"""
import argparse
import configparser
import csv
import hashlib
import json
import logging
import os
import subprocess
import sys
import time

import numpy as np

from . import __version__
from .errors import ConfigurationError, DomainError, GapError, SolverError

log = logging.getLogger("akglab")

COMMANDS = ("selfcheck", "eig-bench", "pekar", "akg", "skg", "compare", "counterterm",
            "dressing-check", "kernel-identity", "fluct", "gap")

# section -> key -> default; the default's type fixes the parser
DEFAULTS = {
    "grid": {"L": 3.0, "N": 32},
    "tolerances": {"eig_tol": 1e-9, "cg_tol": 1e-10, "pekar_tol": 1e-7, "gap_floor": 1e-3,
                   "block": 4},
    "integrators": {"dt": 1e-3, "micro_dt_max": 5e-4, "picard_T_max": 0.5,
                    "skg_scheme": "strang", "refresh_every": 25},
    "run": {"seed": 0, "output_dir": "runs"},
    "initial": {"amplitude": 0.1, "smooth": 6.0},
    "pekar": {"theta": 0.5, "max_iter": 400},
    "akg": {"T": 1.0, "output_every": 10, "force_free_field": False, "snapshots": False},
    "skg": {"eps": 0.3, "T": 0.25, "output_every": 25},
    "compare": {"eps_list": [0.4, 0.3, 0.2], "T": 0.12, "dt": 1e-3, "amplitude": 0.3,
                "micro_dt_max": 5e-4, "scheme": "triple_jump", "richardson": True},
    "eig": {"harmonic": [12.0, 24, 12.0, 32], "coulomb": [16.0, 48, 16.0, 64, 20.0, 64]},
    "counterterm": {"lambda_list": [20.0, 40.0, 80.0, 160.0], "nodes_per_panel": 2},
    "dressing": {"pairs": [4.0, 64.0, 2.0, 40.0, 8.0, 200.0]},
    "kernel": {"K": 4.0, "Lambda": 8.0, "L": 2.4, "N": 40, "L_refine": 3.0, "N_refine": 32,
               "mode_cap": 512},
    "fluct": {"T": 1.0, "dt": 1e-3, "lambda_modes": 8.0, "Lambda": 8.0, "L": 2.4, "N": 32,
              "free_field": False},
    "gap": {"eta_rel": 0.05, "T": 2.0, "dt": 1e-2, "n_probes": 8, "output_every": 10},
}


# -- config -----------------------------------------------------------------------

def _parse_value(default, raw, where):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, list):
            return [float(v) for v in raw.replace(",", " ").split()]
        return raw.strip()
    except ValueError:
        raise ConfigurationError(f"{where}: cannot parse {raw!r}") from None


def load_config(path):
    if not os.path.isfile(path):
        raise ConfigurationError(f"config file not found: {path}")
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read(path)
    except configparser.Error as exc:
        raise ConfigurationError(f"{path}: {exc}") from None
    cfg = {s: dict(v) for s, v in DEFAULTS.items()}
    for sec in cp.sections():
        if sec not in DEFAULTS:
            raise ConfigurationError(f"unknown section [{sec}]")
        for key, raw in cp.items(sec):
            if key not in DEFAULTS[sec]:
                raise ConfigurationError(f"unknown key {key!r} in [{sec}]")
            cfg[sec][key] = _parse_value(DEFAULTS[sec][key], raw, f"[{sec}] {key}")
    validate_config(cfg)
    return cfg


def validate_config(cfg):
    for key, v in cfg["tolerances"].items():
        if v <= 0:
            raise ConfigurationError(f"tolerance {key} must be positive")
    N = cfg["grid"]["N"]
    if N % 2 or N < 8:
        raise ConfigurationError(f"N must be even and >= 8, got {N}")
    for e in cfg["compare"]["eps_list"] + [cfg["skg"]["eps"]]:
        if not 0 < e <= 1:
            raise ConfigurationError(f"eps values must lie in (0, 1], got {e}")
    if cfg["kernel"]["K"] > cfg["kernel"]["Lambda"]:
        raise ConfigurationError("need K <= Lambda")
    if len(cfg["dressing"]["pairs"]) % 2:
        raise ConfigurationError("dressing pairs must come as K, Lambda")


def config_hash(cfg):
    blob = json.dumps(cfg, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def version_string():
    try:
        out = subprocess.run(["git", "describe", "--tags", "--always", "--dirty"],
                             cwd=os.path.dirname(__file__), capture_output=True,
                             text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def tolerances(cfg):
    from .schrodinger import Tolerances
    t = cfg["tolerances"]
    return Tolerances(eig_tol=t["eig_tol"], cg_tol=t["cg_tol"], gap_floor=t["gap_floor"],
                      block=t["block"])


# -- reporting --------------------------------------------------------------------

class Report:
    def __init__(self, out_dir):
        self.out_dir = out_dir
        self.assertions = []
        self.extra = {}

    def check(self, name, value, bound, ok):
        value = float(value)
        self.assertions.append({"name": name, "value": value, "bound": bound, "pass": bool(ok)})
        log.info("%s %s: %.6g (bound %s)", "PASS" if ok else "FAIL", name, value, bound)

    def path(self, name):
        return os.path.join(self.out_dir, name)

    @property
    def ok(self):
        return all(a["pass"] for a in self.assertions)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        for r in rows:
            wr.writerow([v if isinstance(v, str) else f"{v:.17g}" for v in r])


# -- shared setup ------------------------------------------------------------------

def _grid(cfg, L=None, N=None):
    from .spectral import GridSpec
    return GridSpec(float(L if L is not None else cfg["grid"]["L"]),
                    int(N if N is not None else cfg["grid"]["N"]))


def _pekar(cfg, grid, rep=None):
    from .pekar import pekar_minimize
    from .spectral import write_fgrid
    p = pekar_minimize(grid, theta=cfg["pekar"]["theta"], tol=cfg["tolerances"]["pekar_tol"],
                       max_iter=cfg["pekar"]["max_iter"], tols=tolerances(cfg))
    if rep is not None:
        write_fgrid(rep.path("phi_star.fgrid"), grid, p.phi_star)
        write_fgrid(rep.path("psi_star.fgrid"), grid, p.psi_star)
        with open(rep.path("pekar.json"), "w") as fh:
            json.dump({"L": grid.L, "N": grid.N, "E_star": p.E_star, "E_pekar": p.E_pekar,
                       "fixed_point_residual": p.fixed_point_residual,
                       "iterations": p.iterations, "e": p.bundle.e, "gap": p.bundle.gap},
                      fh, indent=1)
    return p


def _initial_field(cfg, p, amplitude=None):
    from .pekar import random_field
    from .spectral import weighted_norm
    grid = p.grid
    a = cfg["initial"]["amplitude"] if amplitude is None else amplitude
    d = random_field(grid, np.random.default_rng(cfg["run"]["seed"]), cfg["initial"]["smooth"])
    d *= a * weighted_norm(grid, p.phi_star, 0.5) / weighted_norm(grid, d, 0.5)
    return p.phi_star + d


# -- commands ------------------------------------------------------------------------

def cmd_selfcheck(cfg, rep):
    from .schrodinger import potential_from_field, source_from_wave, expectation
    from .spectral import (CutoffPair, dressing_kernels, inner_k, norm_x, read_fgrid,
                           to_momentum, to_position, weighted_norm, write_fgrid)
    grid = _grid(cfg)
    rng = np.random.default_rng(cfg["run"]["seed"])
    psi = rng.standard_normal(grid.shape) + 1j * rng.standard_normal(grid.shape)
    back = to_position(grid, to_momentum(grid, psi))
    rep.check("roundtrip", norm_x(grid, back - psi) / norm_x(grid, psi), 1e-12,
              norm_x(grid, back - psi) <= 1e-12 * norm_x(grid, psi))
    pars = weighted_norm(grid, to_momentum(grid, psi), 0.0) / (
        (2 * np.pi) ** 1.5 * norm_x(grid, psi)) - 1
    rep.check("parseval", abs(pars), 1e-12, abs(pars) <= 1e-12)
    phi = rng.standard_normal(grid.shape) + 1j * rng.standard_normal(grid.shape)
    u = np.exp(-grid.r2)
    u /= norm_x(grid, u)
    lhs = expectation(grid, potential_from_field(grid, phi), u)
    rhs = 2 * np.real(inner_k(grid, phi, source_from_wave(grid, u)))
    rep.check("adjoint_pair", abs(lhs - rhs) / abs(rhs), 1e-10, abs(lhs - rhs) <= 1e-10 * abs(rhs))
    K, lam = 4.0, 0.9 * grid.k_max
    G, B = dressing_kernels(grid, CutoffPair(K, lam))
    glam = np.where(grid.kabs <= lam, grid.g, 0.0)
    err = float(np.max(np.abs(G + grid.k2 * B - glam)))
    rep.check("dressing_split", err, 1e-14, err <= 1e-14)
    write_fgrid(rep.path("selfcheck.fgrid"), grid, phi)
    g2, phi2 = read_fgrid(rep.path("selfcheck.fgrid"))
    rep.check("fgrid_roundtrip", float(np.max(np.abs(phi2 - phi))), 0.0,
              g2 == grid and np.array_equal(phi2, phi))


def cmd_eig_bench(cfg, rep):
    from .schrodinger import (Tolerances, ground_state, harmonic_potential,
                              truncated_coulomb_potential)
    t = tolerances(cfg)
    rows = []
    h = cfg["eig"]["harmonic"]
    for L, N in zip(h[::2], h[1::2]):
        g = _grid(cfg, L, int(N))
        b = ground_state(g, V=harmonic_potential(g), tol=t)
        rows.append(["harmonic", L, N, b.e, b.lambda1, b.gap, b.residual])
    c = cfg["eig"]["coulomb"]
    # the n = 2 level of the Coulomb problem is fourfold degenerate
    tc = Tolerances(eig_tol=t.eig_tol, cg_tol=t.cg_tol, gap_floor=t.gap_floor,
                    block=max(t.block, 6))
    for L, N in zip(c[::2], c[1::2]):
        g = _grid(cfg, L, int(N))
        b = ground_state(g, V=truncated_coulomb_potential(g), tol=tc)
        rows.append(["coulomb", L, N, b.e, b.lambda1, b.gap, b.residual])
    write_csv(rep.path("eig_bench.csv"), ["potential", "L", "N", "e", "lambda1", "gap",
                                          "residual"], rows)
    hl = [r for r in rows if r[0] == "harmonic"][-1]
    cl = [r for r in rows if r[0] == "coulomb"][-1]
    rep.check("harmonic_e", abs(hl[3] - 3) / 3, 0.01, abs(hl[3] - 3) <= 0.03)
    rep.check("harmonic_gap", abs(hl[5] - 2) / 2, 0.01, abs(hl[5] - 2) <= 0.02)
    rep.check("coulomb_e", abs(cl[3] + 1), 0.01, abs(cl[3] + 1) <= 0.01)


def cmd_pekar(cfg, rep):
    p = _pekar(cfg, _grid(cfg), rep)
    tol = cfg["tolerances"]["pekar_tol"]
    rep.check("fixed_point_residual", p.fixed_point_residual, tol, p.fixed_point_residual <= tol)
    rep.check("gap_positive", p.bundle.gap, cfg["tolerances"]["gap_floor"],
              p.bundle.gap >= cfg["tolerances"]["gap_floor"])
    rep.extra.update(E_star=p.E_star, E_pekar=p.E_pekar, e=p.bundle.e, gap=p.bundle.gap)


def cmd_akg(cfg, rep):
    from .akg import AkgModel, run_akg
    grid = _grid(cfg)
    p = _pekar(cfg, grid)
    a = cfg["akg"]
    phi0 = _initial_field(cfg, p)
    model = AkgModel(grid, tolerances(cfg), dt_max=max(1e-2, cfg["integrators"]["dt"]),
                     force_free=a["force_free_field"])
    snap = None
    if a["snapshots"]:
        snap = rep.path("snapshots")
        os.makedirs(snap, exist_ok=True)
    rec, s = run_akg(model, phi0, a["T"], cfg["integrators"]["dt"],
                     output_every=a["output_every"], snapshot_dir=snap)
    rec.write_csv(rep.path("trajectory.csv"))
    if rec.collapse_time is not None:
        raise GapError(f"gap collapsed at t={rec.collapse_time:.6g}")
    if a["force_free_field"]:
        col = rec.column("phi_l2")
        d = float(np.max(np.abs(col - col[0])) / col[0])
        rep.check("phi_norm_constant", d, 1e-12, d <= 1e-12)
    else:
        E = rec.column("E_field")
        d = float(np.max(np.abs(E - E[0])) / abs(E[0]))
        rep.check("energy_drift", d, 1e-6, d <= 1e-6)


def cmd_skg(cfg, rep):
    from .skg import SkgModel, semiclassical_energy, skg_init, skg_step
    from .schrodinger import ground_state
    from .spectral import norm_x
    grid = _grid(cfg)
    p = _pekar(cfg, grid)
    phi0 = _initial_field(cfg, p)
    it = cfg["integrators"]
    model = SkgModel(grid, tolerances(cfg), micro_dt_max=it["micro_dt_max"],
                     refresh_every=it["refresh_every"], scheme=it["skg_scheme"])
    eps, T = cfg["skg"]["eps"], cfg["skg"]["T"]
    b0 = ground_state(grid, phi0, tol=model.tols)
    st = skg_init(model, b0.psi, phi0, eps, bundle=b0)
    ds = eps ** 2 * model.micro_dt_max
    n = int(np.ceil(T / ds - 1e-9))
    ds = T / n
    rows = []
    m0, E0 = st.mass, st.E_semi
    mass_dev = en_dev = 0.0
    for i in range(n + 1):
        if i:
            st = skg_step(model, st, ds)
        if i % cfg["skg"]["output_every"] == 0 or i == n:
            m = float(norm_x(grid, st.psi))
            E = semiclassical_energy(grid, st.psi, st.phi)
            mass_dev = max(mass_dev, abs(m - m0))
            en_dev = max(en_dev, abs(E - E0) / abs(E0))
            rows.append([st.s, m, E, st.phase_integral])
    write_csv(rep.path("skg.csv"), ["s", "mass", "E_semi", "phase_integral"], rows)
    rep.check("mass_drift", mass_dev, 1e-10, mass_dev <= 1e-10)
    rep.check("energy_drift", en_dev, 1e-5, en_dev <= 1e-5)


def cmd_compare(cfg, rep):
    from .skg import SkgModel, compare_to_akg, write_sweep_csv
    grid = _grid(cfg)
    p = _pekar(cfg, grid)
    c = cfg["compare"]
    phi0 = _initial_field(cfg, p, c["amplitude"])
    model = SkgModel(grid, tolerances(cfg), micro_dt_max=c["micro_dt_max"],
                     refresh_every=cfg["integrators"]["refresh_every"], scheme=c["scheme"])
    out = compare_to_akg(model, phi0, c["eps_list"], c["T"], c["dt"],
                         richardson=c["richardson"])
    write_sweep_csv(rep.path("sweep.csv"), out["rows"])
    rows = out["rows"]
    for key in ("field_err", "particle_err"):
        e = [r[key] for r in rows]
        dec = all(a > b for a, b in zip(e, e[1:]))
        rep.check(f"{key}_decreasing", float(dec), 1, dec)
    for key in ("order_field", "order_particle"):
        rep.check(key, out[key], 0.25, out[key] >= 0.25)
    rep.extra.update(order_field=out["order_field"], order_particle=out["order_particle"],
                     wall_per_eps={str(r["eps"]): r["wall_seconds"] for r in rows})


def cmd_counterterm(cfg, rep):
    from .fluctuations import counterterm_growth
    grid = _grid(cfg)
    p = _pekar(cfg, grid)
    c = cfg["counterterm"]
    out = counterterm_growth(grid, p.phi_star, p.bundle, c["lambda_list"], tolerances(cfg),
                             c["nodes_per_panel"])
    write_csv(rep.path("counterterm.csv"), ["Lambda", "c"],
              list(zip(out["Lambda"], out["c"])))
    rel = out["slope"] / (4 * np.pi) - 1
    rep.check("slope_vs_4pi", abs(rel), 0.15, abs(rel) <= 0.15)
    mono = bool(np.all(np.diff(out["c"]) > 0))
    rep.check("monotone", float(mono), 1, mono)
    rep.extra.update(slope=out["slope"], n_solves=out["n_solves"])


def cmd_dressing_check(cfg, rep):
    from .spectral import dressing_scalar_identity
    pr = cfg["dressing"]["pairs"]
    rows = []
    for K, lam in zip(pr[::2], pr[1::2]):
        kB2, gb, comb, target = dressing_scalar_identity(K, lam)
        rel = abs(comb / target - 1)
        rows.append([K, lam, kB2, gb, comb, target, rel])
        rep.check(f"identity_K{K:g}_L{lam:g}", rel, 0.005, rel <= 0.005)
    write_csv(rep.path("dressing.csv"), ["K", "Lambda", "kB2", "two_re_GB", "combination",
                                         "target", "rel_err"], rows)


def cmd_kernel_identity(cfg, rep):
    from .fluctuations import build_modes, verify_kernel_identity, write_kernel
    k = cfg["kernel"]
    t = tolerances(cfg)
    rows = []
    for tag, L, N in (("base", k["L"], k["N"]), ("refined", k["L_refine"], k["N_refine"])):
        grid = _grid(cfg, L, N)
        p = _pekar(cfg, grid)
        modes = build_modes(grid, k["Lambda"], k["mode_cap"])
        r = verify_kernel_identity(grid, p.phi_star, p.bundle, modes, k["K"], k["Lambda"], t)
        rows.append([tag, L, N, modes.n, r["block_dev"], r["scale"], r["scalar_gap"],
                     r["lattice_gap"], r["continuum_gap"], r["rel_gap_err"]])
        if tag == "base":
            write_kernel(rep.path("kernel_undressed.bin"), r["undressed"], t)
            write_kernel(rep.path("kernel_dressed.bin"), r["dressed"], t)
            bound = 10 * t.cg_tol * r["scale"]
            rep.check("block_deviation", r["block_dev"], bound, r["block_dev"] <= bound)
            rep.check("mode_count", modes.n, 128, modes.n <= 128)
        rep.check(f"scalar_gap_{tag}", abs(r["rel_gap_err"]), 0.05, abs(r["rel_gap_err"]) <= 0.05)
    write_csv(rep.path("kernel_identity.csv"),
              ["level", "L", "N", "n_modes", "block_dev", "scale", "scalar_gap", "lattice_gap",
               "continuum_gap", "rel_gap_err"], rows)


def cmd_fluct(cfg, rep):
    from .fluctuations import (BogoliubovFrame, FrozenKernel, QuadKernel, assemble_bog_kernel,
                               build_modes, propagate_bogoliubov, write_n_csv)
    f = cfg["fluct"]
    grid = _grid(cfg, f["L"], f["N"])
    modes = build_modes(grid, f["lambda_modes"], cfg["kernel"]["mode_cap"])
    if f["free_field"]:
        n = modes.n
        kern = QuadKernel(np.diag(modes.omega).astype(complex), np.zeros((n, n), complex),
                          0.0, modes)
    else:
        p = _pekar(cfg, grid)
        kern = assemble_bog_kernel(grid, p.phi_star, p.bundle, modes, f["Lambda"],
                                   tolerances(cfg))
    frame, rows = propagate_bogoliubov(BogoliubovFrame.vacuum(modes.n), FrozenKernel(kern),
                                       f["dt"], f["T"])
    write_n_csv(rep.path("n_expect.csv"), rows)
    drift = max(r[2] for r in rows)
    rep.check("invariant_drift", drift, 1e-8, drift <= 1e-8)
    if f["free_field"]:
        nmax = max(r[1] for r in rows)
        rep.check("free_field_N", nmax, 1e-12, nmax <= 1e-12)


def cmd_gap(cfg, rep):
    from .pekar import coercivity_probe, global_gap_experiment
    from .spectral import weighted_norm
    grid = _grid(cfg)
    p = _pekar(cfg, grid)
    g = cfg["gap"]
    eta = g["eta_rel"] * weighted_norm(grid, p.phi_star, 0.5)
    smooth = cfg["initial"]["smooth"]
    pr = coercivity_probe(p, g["n_probes"], eta, seed=cfg["run"]["seed"], smooth=smooth,
                          tols=tolerances(cfg))
    ex = global_gap_experiment(p, eta, g["T"], g["dt"], pr["min"], seed=cfg["run"]["seed"] + 1,
                               smooth=smooth, tols=tolerances(cfg), output_every=g["output_every"])
    ex.record.write_csv(rep.path("trajectory.csv"))
    write_csv(rep.path("gap.csv"), ["t", "gap", "dist"], list(zip(ex.times, ex.gaps, ex.dists)))
    write_csv(rep.path("probes.csv"), ["ratio"], [[r] for r in pr["ratios"]])
    rep.check("gap_min", ex.gaps.min(), ex.gap_bound, ex.gap_ok)
    rep.check("dist_max", ex.dists.max(), ex.dist_bound, ex.dist_ok)
    rep.check("probe_min", pr["min"], 0.0, pr["min"] > 0)
    rep.check("probe_max", pr["max"], 1.0, pr["max"] <= 1 + 1e-6)


HANDLERS = {"selfcheck": cmd_selfcheck, "eig-bench": cmd_eig_bench, "pekar": cmd_pekar,
            "akg": cmd_akg, "skg": cmd_skg, "compare": cmd_compare,
            "counterterm": cmd_counterterm, "dressing-check": cmd_dressing_check,
            "kernel-identity": cmd_kernel_identity, "fluct": cmd_fluct, "gap": cmd_gap}


def run(command, config_path, output_dir=None):
    """Run one command; returns the process exit code."""
    t0 = time.perf_counter()
    try:
        cfg = load_config(config_path)
    except ConfigurationError as exc:
        log.error("%s", exc)
        return 1
    h = config_hash(cfg)
    out = os.path.join(output_dir or cfg["run"]["output_dir"], f"{command}-{h}")
    os.makedirs(out, exist_ok=True)
    rep = Report(out)
    code = 0
    error = None
    try:
        HANDLERS[command](cfg, rep)
        if not rep.ok:
            code = 4
    except (ConfigurationError, DomainError) as exc:
        code, error = 1, str(exc)
    except GapError as exc:
        code, error = 2, str(exc)
    except SolverError as exc:
        code, error = 3, str(exc)
    if error:
        log.error("%s", error)
    summary = {"command": command, "config_hash": h, "version": version_string(),
               "wall_seconds": time.perf_counter() - t0, "assertions": rep.assertions,
               "exit_code": code, "config": cfg, **rep.extra}
    if error:
        summary["error"] = error
    with open(os.path.join(out, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=1, default=str)
    return code


def main(argv=None):
    ap = argparse.ArgumentParser(prog="akglab", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("config", help="INI configuration file")
    ap.add_argument("-o", "--output-dir", help="overrides [run] output_dir")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    return run(args.command, args.config, args.output_dir)


if __name__ == "__main__":
    sys.exit(main())
