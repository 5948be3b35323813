"""Adiabatic Klein-Gordon dynamics: i d/dt phi = omega phi + sigma(psi_phi).

The particle is slaved to the ground state of h_phi, re-solved (warm
started) at every stage.  Two independent solvers are provided: an
exponential midpoint stepper and a Picard iteration of the Duhamel map.
"""
from dataclasses import dataclass, field
import csv
import logging
import os

import numpy as np

from .errors import ConfigurationError, GapError, NoBoundStateError, SolverError
from .schrodinger import DEFAULT_TOL, GroundStateBundle, ground_state, source_from_wave
from .spectral import inner_k, weighted_norm, write_fgrid

log = logging.getLogger(__name__)

RUNNING = "running"
GAP_COLLAPSED = "gap_collapsed"
TRAJECTORY_HEADER = ["t", "phi_l2", "phi_h_half", "e", "lambda1", "gap", "E_field", "mu"]


@dataclass
class AkgState:
    t: float
    phi: np.ndarray
    bundle: GroundStateBundle
    mu: float
    E_field: float
    status: str = RUNNING
    # ground state one step back, used only to extrapolate warm starts
    psi_prev: np.ndarray = field(default=None, repr=False)


@dataclass
class AkgModel:
    """Grid plus solver settings; `force_free` switches the source off."""
    grid: object
    tols: object = DEFAULT_TOL
    dt_max: float = 1e-2
    force_free: bool = False
    e_offset: float = 0.0

    def source(self, bundle):
        if self.force_free:
            return np.zeros(self.grid.shape, dtype=complex)
        return source_from_wave(self.grid, bundle.psi)

    def solve(self, phi, warm=None, guess=None):
        b = ground_state(self.grid, phi, warm_start=warm, tol=self.tols, guess=guess)
        if self.e_offset:
            b.e += self.e_offset
            b.lambda1 += self.e_offset
        return b


def field_energy(grid, phi, bundle, include_e=True):
    """E_field = e(phi) + ||phi||^2_{h_{1/2}}."""
    e = bundle.e if include_e else 0.0
    return e + weighted_norm(grid, phi, 0.5) ** 2


def mu_integrand(grid, phi, bundle, sigma):
    """Im<phi, d phi> + ||phi||^2_{1/2} + e with d phi = -i(omega phi + sigma)."""
    dphi = -1j * (grid.omega * phi + sigma)
    return float(np.imag(inner_k(grid, phi, dphi))) + weighted_norm(grid, phi, 0.5) ** 2 + bundle.e


def akg_init(model, phi0):
    b = model.solve(phi0)
    if not b.bound:
        raise NoBoundStateError(f"no bound state: e = {b.e:.6g}")
    if b.gap < model.tols.gap_floor:
        raise GapError(f"gap too small: {b.gap:.3g}")
    return AkgState(t=0.0, phi=phi0.copy(), bundle=b, mu=0.0,
                    E_field=field_energy(model.grid, phi0, b))


def akg_step(model, s, dt):
    """One exponential midpoint step of size dt (negative dt steps back)."""
    if s.status != RUNNING:
        raise GapError(f"stepping refused: state status is {s.status}")
    if abs(dt) > model.dt_max * (1 + 1e-12):
        raise ConfigurationError(f"|dt| = {abs(dt)} exceeds dt_max = {model.dt_max}")
    grid = model.grid
    w = grid.omega
    half = np.exp(-0.5j * w * dt)
    sig0 = model.source(s.bundle)
    phi_p = half * (s.phi - 0.5j * dt * sig0)
    psi0 = s.bundle.psi
    guess = None if s.psi_prev is None else 1.5 * psi0 - 0.5 * s.psi_prev
    b_p = model.solve(phi_p, warm=s.bundle, guess=guess)
    sig_p = model.source(b_p)
    phi_n = half * half * s.phi - 1j * dt * half * sig_p
    b_n = model.solve(phi_n, warm=b_p, guess=2 * b_p.psi - psi0)
    mu = s.mu + dt * mu_integrand(grid, phi_p, b_p, sig_p)
    status = RUNNING
    if b_n.gap < model.tols.gap_floor or b_p.gap < model.tols.gap_floor:
        status = GAP_COLLAPSED
        log.warning("gap collapsed at t=%.6g (gap %.3g)", s.t + dt, b_n.gap)
    return AkgState(t=s.t + dt, phi=phi_n, bundle=b_n, mu=mu,
                    E_field=field_energy(grid, phi_n, b_n), status=status, psi_prev=psi0)


@dataclass
class TrajectoryRecord:
    rows: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)
    collapse_time: float = None

    def add(self, grid, s, **diag):
        b = s.bundle
        self.rows.append([s.t, weighted_norm(grid, s.phi, 0.0), weighted_norm(grid, s.phi, 0.5),
                          b.e, b.lambda1, b.gap, s.E_field, s.mu])
        self.diagnostics.append(dict(residual=b.residual, iterations=b.iterations, **diag))

    def column(self, name):
        i = TRAJECTORY_HEADER.index(name)
        return np.array([r[i] for r in self.rows])

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(TRAJECTORY_HEADER)
            for r in self.rows:
                wr.writerow([f"{v:.17g}" for v in r])


def run_akg(model, phi0, T, dt, output_every=1, snapshot_dir=None, callback=None,
            state=None):
    """Drive akg_step to time T; stops early on gap collapse."""
    s = akg_init(model, phi0) if state is None else state
    rec = TrajectoryRecord()
    rec.add(model.grid, s)
    if callback is not None:
        callback(s)
    n = int(round(T / dt))
    for i in range(1, n + 1):
        s = akg_step(model, s, dt)
        if callback is not None:
            callback(s)
        if i % output_every == 0 or i == n or s.status != RUNNING:
            rec.add(model.grid, s)
            if snapshot_dir is not None:
                write_fgrid(os.path.join(snapshot_dir, f"phi_{i:06d}.fgrid"), model.grid, s.phi)
        if s.status != RUNNING:
            rec.collapse_time = s.t
            break
    return rec, s


def _phi_functions(z):
    """phi1(z) = (e^z - 1)/z and phi2(z) = (e^z - 1 - z)/z^2, elementwise."""
    z = np.asarray(z, dtype=complex)
    small = np.abs(z) < 0.5
    zs = np.where(small, z, 0.0)
    p1 = np.zeros_like(z)
    p2 = np.zeros_like(z)
    term1 = np.ones_like(z)
    term2 = np.full_like(z, 0.5)
    for n in range(1, 16):
        p1 += term1
        p2 += term2
        term1 = term1 * zs / (n + 1)
        term2 = term2 * zs / (n + 2)
    zb = np.where(small, 1.0, z)
    e = np.exp(zb)
    p1 = np.where(small, p1, (e - 1) / zb)
    p2 = np.where(small, p2, (e - 1 - zb) / zb ** 2)
    return p1, p2


def akg_picard_solve(model, phi0, T, tol, dt, max_sweeps=60, T_max=0.5):
    """Fixed-point iteration of the Duhamel map on a uniform node grid.

    phi(t) = e^{-i omega t} (phi0 - i int_0^t e^{i omega s} sigma(s) ds), with
    sigma interpolated linearly between nodes and the oscillatory factor
    integrated exactly.  Returns (node times, list of fields, residual history).
    """
    if T > T_max:
        raise ConfigurationError(f"T = {T} exceeds picard_T_max = {T_max}")
    grid = model.grid
    w = grid.omega
    n = int(round(T / dt))
    t = np.linspace(0.0, T, n + 1)
    if n == 0:
        return t, [phi0.copy()], []
    h = T / n
    p1, p2 = _phi_functions(1j * w * h)
    w_left, w_right = h * p2, h * (p1 - p2)
    U = [np.exp(-1j * w * tj) * phi0 for tj in t]
    bundles = [None] * (n + 1)
    history = []
    for sweep in range(max_sweeps):
        src = []
        warm = bundles[0]
        for j in range(n + 1):
            b = model.solve(U[j], warm=bundles[j] if bundles[j] is not None else warm)
            if b.gap < model.tols.gap_floor:
                raise GapError(f"gap collapsed at Picard node t={t[j]:.6g}")
            bundles[j] = warm = b
            src.append(model.source(b))
        acc = np.zeros_like(phi0, dtype=complex)
        new = [phi0.astype(complex)]
        for j in range(1, n + 1):
            acc = acc + np.exp(1j * w * t[j - 1]) * (w_left * src[j - 1] + w_right * src[j])
            new.append(np.exp(-1j * w * t[j]) * (phi0 - 1j * acc))
        diff = max(weighted_norm(grid, a - b, 0.5) for a, b in zip(new, U))
        history.append(diff)
        U = new
        log.info("Picard sweep %d: residual %.3e", sweep + 1, diff)
        if diff <= tol:
            return t, U, history
    raise SolverError(f"Picard iteration not contracted after {max_sweeps} sweeps",
                      residual=history[-1], history=history)
