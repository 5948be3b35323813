"""Acceptance criteria 1-11 at their stated tolerances.

Each test prints one `criterion N: PASS|FAIL ...` line; the lines are
repeated in the terminal summary.  The whole module takes roughly 40
minutes on one core.
"""
import csv
import json
import pathlib
import time

import numpy as np
import pytest

from akglab.akg import AkgModel, akg_init, akg_picard_solve, akg_step, run_akg
from akglab.cli import run
from akglab.fluctuations import (BogoliubovFrame, FrozenKernel, QuadKernel,
                                 assemble_bog_kernel, build_modes, counterterm_growth,
                                 propagate_bogoliubov, verify_kernel_identity)
from akglab.pekar import coercivity_probe, global_gap_experiment, pekar_minimize
from akglab.schrodinger import (Tolerances, ground_state, ground_state_velocity,
                                harmonic_potential, hellmann_feynman_rate, source_from_wave,
                                truncated_coulomb_potential)
from akglab.skg import SkgModel, semiclassical_energy, skg_init, skg_step
from akglab.spectral import GridSpec, dressing_scalar_identity, norm_x, weighted_norm
from conftest import perturbed, record_criterion

pytestmark = pytest.mark.slow

PINNED_FIELD = [4.7196743643e-05, 1.5540625332e-05, 3.6273575691e-06]
PINNED_PARTICLE = [8.0000958428e-04, 4.5007180690e-04, 1.8186813860e-04]
CONFIG = pathlib.Path(__file__).resolve().parents[1] / "configs" / "default.ini"


def test_criterion_1_eigensolver_oracles():
    t0 = time.perf_counter()
    study = []
    for L, N in [(12.0, 24), (12.0, 32)]:
        g = GridSpec(L, N)
        b = ground_state(g, V=harmonic_potential(g))
        study.append(("harmonic", L, N, b.e, b.gap))
    # the n = 2 Coulomb level is fourfold degenerate: a block of 6
    tc = Tolerances(block=6)
    for L, N in [(16.0, 48), (16.0, 64), (20.0, 64)]:
        g = GridSpec(L, N)
        b = ground_state(g, V=truncated_coulomb_potential(g), tol=tc)
        study.append(("coulomb", L, N, b.e, b.gap))
    for row in study:
        print("  %-8s L=%4.1f N=%3d e=%.6f gap=%.6f" % row)
    h = [r for r in study if r[0] == "harmonic"][-1]
    c = [r for r in study if r[0] == "coulomb"][-1]
    wall = time.perf_counter() - t0
    ok = (abs(h[3] - 3) <= 0.03 and abs(h[4] - 2) <= 0.02 and abs(c[3] + 1) <= 0.01
          and wall <= 300)
    record_criterion(1, ok, f"harmonic (e, gap) = ({h[3]:.6f}, {h[4]:.6f}), "
                            f"coulomb e = {c[3]:.6f}, {wall:.0f} s")
    assert ok


def test_criterion_2_akg_energy(pekar32):
    p = pekar32
    t0 = time.perf_counter()
    rec, _ = run_akg(AkgModel(p.grid), perturbed(p, 0.1, 0), 1.0, 1e-3, output_every=10)
    E = rec.column("E_field")
    drift = float(np.max(np.abs(E - E[0])) / abs(E[0]))
    wall = time.perf_counter() - t0
    ok = rec.collapse_time is None and drift <= 1e-6 and wall <= 600
    record_criterion(2, ok, f"relative E_field drift {drift:.3e} (bound 1e-6), {wall:.0f} s")
    assert ok


def test_criterion_3_picard_vs_stepper(pekar32):
    p = pekar32
    g = p.grid
    m = AkgModel(g)
    phi0 = perturbed(p, 0.1, 2)
    t0 = time.perf_counter()
    node_dt, step_dt = 1.25e-3, 1.25e-4
    t, U, hist = akg_picard_solve(m, phi0, 0.1, 1e-10, node_dt)
    s = akg_init(m, phi0)
    per = int(round(node_dt / step_dt))
    err = 0.0
    for j in range(1, len(t)):
        for _ in range(per):
            s = akg_step(m, s, step_dt)
        err = max(err, weighted_norm(g, s.phi - U[j], 0.0))
    wall = time.perf_counter() - t0
    ok = err <= 1e-6 and wall <= 600
    record_criterion(3, ok, f"sup-t L2 difference {err:.3e} (bound 1e-6), "
                            f"{len(hist)} Picard sweeps, {wall:.0f} s")
    assert ok


def test_criterion_4_skg_conservation(pekar32):
    p = pekar32
    g = p.grid
    phi0 = perturbed(p, 0.1, 0)
    b = ground_state(g, phi0, warm_start=p.bundle)
    m = SkgModel(g, micro_dt_max=5e-4)
    eps, T = 0.3, 0.25
    t0 = time.perf_counter()
    st = skg_init(m, b.psi, phi0, eps, bundle=b)
    n = int(np.ceil(T / (eps ** 2 * m.micro_dt_max) - 1e-9))
    mass_dev = en_dev = 0.0
    for i in range(n):
        st = skg_step(m, st, T / n)
        if (i + 1) % 25 == 0 or i == n - 1:
            mass_dev = max(mass_dev, abs(float(norm_x(g, st.psi)) - st.mass))
            en_dev = max(en_dev, abs(semiclassical_energy(g, st.psi, st.phi) - st.E_semi)
                         / abs(st.E_semi))
    wall = time.perf_counter() - t0
    ok = mass_dev <= 1e-10 and en_dev <= 1e-5 and wall <= 900
    record_criterion(4, ok, f"mass drift {mass_dev:.2e}, energy drift {en_dev:.2e} "
                            f"over {n} steps, {wall:.0f} s")
    assert ok


def test_criterion_5_skg_to_akg(tmp_path):
    # runs through the CLI on the shipped default config
    t0 = time.perf_counter()
    code = run("compare", str(CONFIG), str(tmp_path))
    wall = time.perf_counter() - t0
    (out,) = list(tmp_path.glob("compare-*"))
    summ = json.loads((out / "summary.json").read_text())
    rows = list(csv.DictReader(open(out / "sweep.csv")))
    assert [float(r["eps"]) for r in rows] == [0.4, 0.3, 0.2]
    field = [float(r["field_err"]) for r in rows]
    part = [float(r["particle_err"]) for r in rows]
    for r in rows:
        print("  eps=%s field_err=%s particle_err=%s" % (r["eps"], r["field_err"],
                                                        r["particle_err"]))
    dec = all(a > b for a, b in zip(field, field[1:])) and all(
        a > b for a, b in zip(part, part[1:]))
    of, op = summ["order_field"], summ["order_particle"]
    ok = code == 0 and dec and of >= 0.25 and op >= 0.25 and wall <= 1800
    record_criterion(5, ok, f"orders field {of:.2f}, particle {op:.2f}, "
                            f"decreasing={dec}, exit {code}, {wall:.0f} s")
    assert ok
    # smoke values of the default config, pinned after the first converged run
    assert np.allclose(field, PINNED_FIELD, rtol=1e-4)
    assert np.allclose(part, PINNED_PARTICLE, rtol=1e-4)


def test_criterion_6_counterterm(pekar32):
    p = pekar32
    t0 = time.perf_counter()
    out = counterterm_growth(p.grid, p.phi_star, p.bundle, [20.0, 40.0, 80.0, 160.0])
    wall = time.perf_counter() - t0
    rel = out["slope"] / (4 * np.pi) - 1
    ok = abs(rel) <= 0.15 and out["n_solves"] <= 26 * 8 and wall <= 1200
    record_criterion(6, ok, f"slope {out['slope']:.4f} vs 4 pi ({rel:+.2%}), "
                            f"{out['n_solves']} solves, {wall:.0f} s")
    assert ok


def test_criterion_7_dressing_scalar():
    t0 = time.perf_counter()
    errs = []
    for K, lam in [(4.0, 64.0), (2.0, 40.0), (8.0, 200.0)]:
        _, _, comb, target = dressing_scalar_identity(K, lam)
        errs.append(abs(comb / target - 1))
    wall = time.perf_counter() - t0
    ok = max(errs) <= 5e-3 and wall <= 1.0
    record_criterion(7, ok, f"max relative error {max(errs):.1e} over 3 pairs, {wall:.3f} s")
    assert ok


def test_criterion_8_kernel_identity():
    t0 = time.perf_counter()
    tol = Tolerances()
    res = []
    for L, N in [(2.4, 40), (3.0, 32)]:
        g = GridSpec(L, N)
        p = pekar_minimize(g)
        modes = build_modes(g, 8.0)
        res.append((modes.n, verify_kernel_identity(g, p.phi_star, p.bundle, modes, 4.0, 8.0,
                                                    tol)))
    wall = time.perf_counter() - t0
    (n0, base), (n1, ref) = res
    bound = 10 * tol.cg_tol * base["scale"]
    ok = (n0 <= 128 and base["block_dev"] <= bound
          and abs(base["rel_gap_err"]) <= 0.05 and abs(ref["rel_gap_err"]) <= 0.05
          and wall <= 1200)
    record_criterion(8, ok, f"{n0} modes, block deviation {base['block_dev']:.2e} "
                            f"(bound {bound:.2e}), scalar gap vs 4 pi ln 8: "
                            f"{base['rel_gap_err']:+.2%} -> {ref['rel_gap_err']:+.2%}, {wall:.0f} s")
    assert ok


def test_criterion_9_frame_invariants():
    t0 = time.perf_counter()
    g = GridSpec(2.4, 32)
    p = pekar_minimize(g)
    modes = build_modes(g, 8.0)
    kern = assemble_bog_kernel(g, p.phi_star, p.bundle, modes, 8.0)
    _, rows = propagate_bogoliubov(BogoliubovFrame.vacuum(modes.n), FrozenKernel(kern),
                                   1e-3, 1.0)
    drift = max(r[2] for r in rows)
    n = modes.n
    free = QuadKernel(np.diag(modes.omega).astype(complex), np.zeros((n, n), complex), 0.0,
                      modes)
    _, frows = propagate_bogoliubov(BogoliubovFrame.vacuum(n), FrozenKernel(free), 1e-3, 1.0)
    nfree = max(r[1] for r in frows)
    wall = time.perf_counter() - t0
    ok = drift <= 1e-8 and nfree <= 1e-12 and wall <= 120
    record_criterion(9, ok, f"invariant drift {drift:.2e}, free-field <N> {nfree:.1e}, "
                            f"final <N> {rows[-1][1]:.3e}, {wall:.0f} s")
    assert ok


def test_criterion_10_adiabatic_consistency(pekar32):
    p = pekar32
    g = p.grid
    m = AkgModel(g)
    t0 = time.perf_counter()
    s = akg_init(m, perturbed(p, 0.1, 7))
    h = 1e-3
    rate_err = vel_err = 0.0
    for _ in range(5):
        for _ in range(10):
            s = akg_step(m, s, 1e-3)
        phi, b = s.phi, s.bundle
        phidot = -1j * (g.omega * phi + source_from_wave(g, b.psi))
        rate = hellmann_feynman_rate(g, b, phidot)
        vel = ground_state_velocity(g, phi, b)
        bs = {c: ground_state(g, phi + c * h * phidot, warm_start=b) for c in (-2, -1, 1, 2)}
        fd_e = (8 * (bs[1].e - bs[-1].e) - (bs[2].e - bs[-2].e)) / (12 * h)
        fd_psi = (8 * (bs[1].psi - bs[-1].psi) - (bs[2].psi - bs[-2].psi)) / (12 * h)
        rate_err = max(rate_err, abs(rate - fd_e) / abs(fd_e))
        vel_err = max(vel_err, norm_x(g, vel - fd_psi))
    wall = time.perf_counter() - t0
    ok = rate_err <= 1e-5 and vel_err <= 1e-4 and wall <= 600
    record_criterion(10, ok, f"rate rel err {rate_err:.1e}, velocity L2 err {vel_err:.1e} "
                             f"at 5 points, {wall:.0f} s")
    assert ok


def test_criterion_11_gap_persistence(pekar32):
    p = pekar32
    g = p.grid
    t0 = time.perf_counter()
    eta = 0.05 * weighted_norm(g, p.phi_star, 0.5)
    pr = coercivity_probe(p, 8, eta, seed=3, smooth=6.0)
    ex = global_gap_experiment(p, eta, 2.0, 1e-2, pr["min"], seed=5, smooth=6.0,
                               output_every=10)
    wall = time.perf_counter() - t0
    ok = (ex.gap_ok and np.all(pr["ratios"] > 0) and np.all(pr["ratios"] <= 1)
          and wall <= 1200)
    record_criterion(11, ok, f"min gap {ex.gaps.min():.3f} (bound {ex.gap_bound:.3f}), "
                             f"probe ratios [{pr['min']:.5f}, {pr['max']:.5f}], "
                             f"max dist {ex.dists.max():.4f} (eta/sqrt(c) "
                             f"{ex.dist_bound:.4f}), {wall:.0f} s")
    assert ok
