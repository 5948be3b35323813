"""Pekar minimizer, distance to the minimizer manifold and coercivity probes."""
from dataclasses import dataclass
import logging

import numpy as np
from scipy import optimize

from .errors import GapError, SolverError
from .schrodinger import (DEFAULT_TOL, GroundStateBundle, ground_state, kinetic,
                          source_from_wave)
from .spectral import inner_x, to_position, translate_field, weighted_norm

log = logging.getLogger(__name__)


@dataclass
class PekarResult:
    grid: object
    psi_star: np.ndarray
    phi_star: np.ndarray
    E_star: float
    E_pekar: float
    fixed_point_residual: float
    iterations: int
    bundle: GroundStateBundle
    residual_trace: list


def pekar_functional(grid, psi):
    """<psi, p^2 psi> - || omega^{-1/2} sigma(psi) ||^2."""
    kin = float(np.real(inner_x(grid, psi, kinetic(grid, psi))))
    return kin - weighted_norm(grid, source_from_wave(grid, psi), -0.5) ** 2


def field_from_wave(grid, psi):
    """-omega^{-1} sigma(psi): the field slaved to a given density."""
    return -source_from_wave(grid, psi) / grid.omega


def fixed_point_residual(grid, phi, psi):
    """|| omega phi + sigma(psi) ||_{L^2}."""
    return weighted_norm(grid, grid.omega * phi + source_from_wave(grid, psi), 0.0)


def barycenter(grid, psi):
    """Periodic barycenter of |psi|^2 (circular mean per axis)."""
    rho = np.abs(psi) ** 2
    c = []
    for axis in range(3):
        marg = rho.sum(axis=tuple(a for a in range(3) if a != axis))
        z = np.sum(marg * np.exp(2j * np.pi * grid.x1 / grid.L))
        c.append(np.angle(z) * grid.L / (2 * np.pi))
    return np.array(c)


def _seed(grid):
    x, y, z = grid.xyz
    w = grid.L / 12
    psi = np.exp(-grid.r2 / (2 * w * w))
    return psi / np.sqrt(np.sum(psi ** 2) * grid.dv)


def _scf(grid, phi, bundle, theta, tol, max_iter, tols, trace):
    it = 0
    while True:
        bundle = ground_state(grid, phi, warm_start=bundle, tol=tols)
        res = fixed_point_residual(grid, phi, bundle.psi)
        trace.append(res)
        if res <= tol:
            return phi, bundle, it
        if it >= max_iter:
            raise SolverError(f"self-consistent iteration stalled at residual {res:.3g}",
                              residual=res, history=list(trace))
        phi = (1 - theta) * phi + theta * field_from_wave(grid, bundle.psi)
        it += 1


def pekar_minimize(grid, seed_psi=None, theta=0.5, tol=1e-7, max_iter=400,
                   tols=DEFAULT_TOL, recenter=True):
    """Damped self-consistent iteration phi -> -omega^{-1} sigma(psi_phi)."""
    psi = _seed(grid) if seed_psi is None else seed_psi
    phi = field_from_wave(grid, psi)
    trace = []
    phi, bundle, its = _scf(grid, phi, None, theta, tol, max_iter, tols, trace)
    if recenter:
        c = barycenter(grid, bundle.psi)
        phi = translate_field(grid, phi, -c)
        # re-solve at the shifted field; a few polishing sweeps restore the
        # residual lost to interpolation
        phi, bundle, more = _scf(grid, phi, None, theta, tol, max_iter, tols, trace)
        its += more
    psi = bundle.psi
    E_star = bundle.e + weighted_norm(grid, phi, 0.5) ** 2
    return PekarResult(grid=grid, psi_star=psi, phi_star=phi, E_star=E_star,
                       E_pekar=pekar_functional(grid, psi),
                       fixed_point_residual=trace[-1], iterations=its,
                       bundle=bundle, residual_trace=trace)


# -- manifold distance ---------------------------------------------------------

def _cross(grid, u, phi_star, y):
    """Re sum_k omega conj(u) e^{-iky} phi_star dk and its gradient in y."""
    kx, ky, kz = grid.kvec
    w = grid.omega * np.conj(u) * phi_star * np.exp(-1j * (kx * y[0] + ky * y[1] + kz * y[2]))
    val = np.real(np.sum(w)) * grid.dk
    grad = np.array([np.real(np.sum(-1j * kk * w)) for kk in (kx, ky, kz)]) * grid.dk
    return val, grad


def manifold_distance(u, p):
    """min_y || u - T_y phi_star ||_{h_{1/2}} and the minimizing y."""
    grid = p.grid
    nu = weighted_norm(grid, u, 0.5) ** 2
    nphi = weighted_norm(grid, p.phi_star, 0.5) ** 2
    # coarse scan: C(y) = (2 pi)^3 Re to_position(omega u_bar phi_star) at y = -x
    prod = grid.omega * np.conj(u) * p.phi_star
    scan = (2 * np.pi) ** 3 * np.real(to_position(grid, prod))
    j = np.unravel_index(np.argmax(scan), scan.shape)
    y0 = -np.array([grid.x1[i] for i in j])

    def f(y):
        val, grad = _cross(grid, u, p.phi_star, y)
        return -2 * val, -2 * grad

    sol = optimize.minimize(f, y0, jac=True, method="BFGS",
                            options={"gtol": 1e-13, "maxiter": 200})
    y = sol.x
    d2 = nu + nphi + sol.fun
    y = (y + grid.L / 2) % grid.L - grid.L / 2
    return float(np.sqrt(max(d2, 0.0))), y


# -- coercivity -----------------------------------------------------------------

def random_field(grid, rng, smooth=None):
    """Complex Gaussian field, optionally damped at large |k|."""
    z = rng.standard_normal(grid.shape) + 1j * rng.standard_normal(grid.shape)
    if smooth is not None:
        z = z * np.exp(-grid.k2 / (2 * smooth ** 2))
    return z


def field_energy_of(grid, u, warm=None, tols=DEFAULT_TOL):
    b = ground_state(grid, u, warm_start=warm, tol=tols)
    return b.e + weighted_norm(grid, u, 0.5) ** 2, b


def coercivity_probe(p, n_samples, radius, seed=0, smooth=None, tols=DEFAULT_TOL,
                     directions=None):
    """Ratios (E_field(u) - E_star) / dist(u, M)^2 for u = phi_star + delta."""
    grid = p.grid
    ratios, resampled = [], 0
    dirs = list(directions) if directions is not None else []
    for i in range(n_samples if directions is None else len(dirs)):
        rng = np.random.default_rng([seed, i])
        while True:
            d = dirs[i] if directions is not None else random_field(grid, rng, smooth)
            d = d * (radius / weighted_norm(grid, d, 0.5))
            u = p.phi_star + d
            E, b = field_energy_of(grid, u, p.bundle, tols)
            if b.bound and b.gap >= tols.gap_floor:
                break
            if directions is not None:
                raise GapError("probe direction left the bound-state region")
            resampled += 1
        dist, _ = manifold_distance(u, p)
        ratios.append((E - p.E_star) / dist ** 2)
    ratios = np.array(ratios)
    return {"ratios": ratios, "min": float(ratios.min()), "max": float(ratios.max()),
            "resampled": resampled}


# -- global gap experiment --------------------------------------------------------

@dataclass
class GapExperiment:
    record: object
    times: np.ndarray
    gaps: np.ndarray
    dists: np.ndarray
    gap_star: float
    gap_bound: float
    dist_bound: float
    eta: float

    @property
    def gap_ok(self):
        return bool(np.all(self.gaps >= self.gap_bound))

    @property
    def dist_ok(self):
        return bool(np.all(self.dists <= self.dist_bound))


def global_gap_experiment(p, eta, T, dt, c_min, seed=0, smooth=None, tols=DEFAULT_TOL,
                          output_every=1, delta=None):
    """aKG from phi_star + delta, ||delta||_{h_{1/2}} = eta, tracking gap and dist to M."""
    from .akg import AkgModel, run_akg

    grid = p.grid
    if delta is None:
        delta = random_field(grid, np.random.default_rng(seed), smooth)
    nd = weighted_norm(grid, delta, 0.5)
    phi0 = p.phi_star + (delta * (eta / nd) if nd > 0 else delta)
    model = AkgModel(grid, tols, dt_max=max(dt, 1e-2))
    times, gaps, dists = [], [], []

    def watch(s):
        if round(s.t / dt) % output_every == 0:
            times.append(s.t)
            gaps.append(s.bundle.gap)
            dists.append(manifold_distance(s.phi, p)[0])

    rec, _ = run_akg(model, phi0, T, dt, output_every=output_every, callback=watch)
    if rec.collapse_time is not None:
        raise GapError(f"gap collapsed at t={rec.collapse_time:.6g}")
    bound = eta / np.sqrt(c_min) if c_min > 0 else np.inf
    return GapExperiment(record=rec, times=np.array(times), gaps=np.array(gaps),
                         dists=np.array(dists), gap_star=p.bundle.gap,
                         gap_bound=0.5 * p.bundle.gap, dist_bound=float(bound), eta=eta)


def tangent_direction(p, axis):
    """d/dy_j T_y phi_star at y = 0, i.e. -i k_j phi_star."""
    return -1j * p.grid.kvec[axis] * p.phi_star
