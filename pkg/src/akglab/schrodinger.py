"""The particle Hamiltonian h_phi = p^2 + V_phi on the periodic grid.

Potential and source maps form an adjoint pair:
    <psi, V_phi psi> = 2 Re <phi, sigma(psi)>   (sum over k with weight dk)
which is what makes the discrete aKG/SKG flows conserve energy exactly in
the semi-discrete sense.
"""
from dataclasses import dataclass, field
import logging

import numpy as np
import scipy.fft as sfft

from .errors import GapError, NoBoundStateError, SolverError
from .spectral import (FFT_WORKERS, inner_x, norm_x, to_momentum, to_position)

log = logging.getLogger(__name__)

_AX = (-3, -2, -1)


@dataclass
class Tolerances:
    eig_tol: float = 1e-9
    cg_tol: float = 1e-10
    gap_floor: float = 1e-3
    e_tol: float = 1e-10
    eig_max_iter: int = 400
    cg_max_iter: int = 2000
    block: int = 4
    warmup_steps: int = 60


DEFAULT_TOL = Tolerances()


@dataclass
class GroundStateBundle:
    psi: np.ndarray
    e: float
    lambda1: float
    gap: float
    residual: float
    iterations: int
    # remaining Ritz vectors, kept only to warm-start the next solve
    block: np.ndarray = field(default=None, repr=False)
    bound: bool = True


@dataclass
class ResolventSolve:
    solution: np.ndarray
    residual: float
    iterations: int


# -- potential and source ----------------------------------------------------

def potential_from_field(grid, phi):
    """V_phi(x) = 2 Re int conj(phi(k)) omega^{-1/2} e^{-ikx} dk.

    Equivalently 2 Re int phi(k) omega^{-1/2} e^{ikx} dk, evaluated with one
    inverse transform.
    """
    grid.check(phi)
    v = to_position(grid, grid.g * phi)
    return 2.0 * (2 * np.pi) ** 3 * v.real


def source_from_wave(grid, psi):
    """sigma(psi)(k) = omega^{-1/2} int e^{-ikx} |psi(x)|^2 dx."""
    grid.check(psi)
    rho = np.abs(psi) ** 2
    return grid.g * to_momentum(grid, rho)


def kinetic(grid, u):
    """p^2 u, applied spectrally (translation invariant, no phase needed)."""
    if np.isrealobj(u):
        uh = sfft.rfftn(u, axes=_AX, workers=FFT_WORKERS)
        uh *= grid.k2[:, :, : grid.N // 2 + 1]
        return sfft.irfftn(uh, s=grid.shape, axes=_AX, workers=FFT_WORKERS)
    uh = sfft.fftn(u, axes=_AX, workers=FFT_WORKERS)
    uh *= grid.k2
    return sfft.ifftn(uh, axes=_AX, workers=FFT_WORKERS)


def fourier_multiplier(grid, u, mult):
    """Apply a diagonal-in-k operator given on the full DFT lattice."""
    if np.isrealobj(u) and np.isrealobj(mult):
        uh = sfft.rfftn(u, axes=_AX, workers=FFT_WORKERS)
        uh *= mult[..., : grid.N // 2 + 1]
        return sfft.irfftn(uh, s=grid.shape, axes=_AX, workers=FFT_WORKERS)
    uh = sfft.fftn(u, axes=_AX, workers=FFT_WORKERS)
    uh *= mult
    return sfft.ifftn(uh, axes=_AX, workers=FFT_WORKERS)


def apply_h(grid, V, u):
    return kinetic(grid, u) + V * u


def expectation(grid, V, psi):
    """<psi, V psi> for a real potential."""
    return float(np.sum(V * np.abs(psi) ** 2) * grid.dv)


# -- eigensolver ---------------------------------------------------------------

def _gaussian_block(grid, V, m):
    """Cold-start block: Gaussian times 1, x, y, z, ... around the well."""
    j = np.unravel_index(np.argmin(V), V.shape)
    c = [grid.x1[i] for i in j]
    x, y, z = grid.xyz
    # periodic displacement from the well centre
    d = [(a - ci + grid.L / 2) % grid.L - grid.L / 2 for a, ci in zip((x, y, z), c)]
    r2 = d[0] ** 2 + d[1] ** 2 + d[2] ** 2
    w = grid.L / 10
    base = np.exp(-r2 / (2 * w * w))
    vecs = [base, d[0] * base, d[1] * base, d[2] * base,
            (r2 - 3 * w * w) * base, d[0] * d[1] * base]
    while len(vecs) < m:
        vecs.append(vecs[-1] * d[len(vecs) % 3])
    return np.array(vecs[:m])


def _orthonormalize(X):
    """Orthonormal rows spanning X (rows are Euclidean vectors)."""
    q, r = np.linalg.qr(X.T)
    keep = np.abs(np.diag(r)) > 1e-12 * np.abs(r).max()
    return q[:, keep].T


def _imaginary_time(grid, V, X, steps):
    """Normalized split-step imaginary-time relaxation of a block."""
    if steps <= 0:
        return X
    vmax = max(np.abs(V).max(), 1.0)
    tau = 0.5 / vmax
    half = np.exp(-0.5 * tau * V)
    kin = np.exp(-tau * grid.k2)
    shape = (X.shape[0],) + grid.shape
    Y = X.reshape(shape)
    for _ in range(steps):
        Y = half * Y
        Y = fourier_multiplier(grid, Y, kin)
        Y = half * Y
        Y = _orthonormalize(Y.reshape(X.shape[0], -1)).reshape(shape)
    return Y.reshape(X.shape[0], -1)


def _rayleigh_ritz(S, AS, m):
    """Ritz pairs of span(S) (rows), with S orthonormalized in the small space."""
    G = S @ S.T
    G = 0.5 * (G + G.T)
    d, U = np.linalg.eigh(G)
    keep = d > 1e-13 * d.max()
    T = U[:, keep] / np.sqrt(d[keep])
    H = T.T @ (S @ AS.T) @ T
    H = 0.5 * (H + H.T)
    vals, C = np.linalg.eigh(H)
    C = T @ C[:, :m]
    return vals[:m], C.T @ S, C.T @ AS, C


def lobpcg(apply_A, X, precond, tol, max_iter, n_check):
    """Locally optimal block preconditioned eigensolver (real symmetric A).

    Rows of X are trial vectors; A is applied only to the new preconditioned
    residual directions, A X and A P being carried along.  Returns
    (values, vectors, residual norms of the first n_check, iterations).
    """
    m = X.shape[0]
    X = _orthonormalize(X)
    if X.shape[0] < m:
        raise SolverError("initial block is rank deficient")
    theta, X, AX, _ = _rayleigh_ritz(X, apply_A(X), m)
    P = AP = None
    res = None
    for it in range(1, max_iter + 1):
        if it % 20 == 0:
            # refresh A X to stop the carried product from drifting
            X = _orthonormalize(X)
            theta, X, AX, _ = _rayleigh_ritz(X, apply_A(X), m)
            P = AP = None
        R = AX - theta[:, None] * X
        res = np.linalg.norm(R, axis=1)
        if np.all(res[:n_check] <= tol):
            return theta, X, res[:n_check], it
        active = res > 0.1 * tol
        W = precond(R[active], theta[active])
        W -= (W @ X.T) @ X
        W /= np.linalg.norm(W, axis=1)[:, None]
        AW = apply_A(W)
        if P is None:
            S, AS = np.vstack([X, W]), np.vstack([AX, AW])
        else:
            S, AS = np.vstack([X, W, P]), np.vstack([AX, AW, AP])
        theta, Xn, AXn, C = _rayleigh_ritz(S, AS, m)
        # P: the part of the update outside the old X
        Cp = C.copy()
        Cp[:m] = 0.0
        P, AP = Cp.T @ S, Cp.T @ AS
        pn = np.linalg.norm(P, axis=1)
        ok = pn > 1e-300
        P, AP = P[ok] / pn[ok, None], AP[ok] / pn[ok, None]
        if P.shape[0] == 0:
            P = AP = None
        X, AX = Xn, AXn
    raise SolverError(f"eigensolver did not converge in {max_iter} iterations",
                      residual=float(np.max(res[:n_check])))


def ground_state(grid, phi=None, warm_start=None, tol=DEFAULT_TOL, V=None, guess=None):
    """Two lowest eigenpairs of h = p^2 + V_phi.

    `V` injects a potential directly (oracle hook), bypassing phi.
    `warm_start` may be a previous bundle or a wavefunction; `guess`
    replaces the ground-state row of a warm block (e.g. an extrapolation
    along a trajectory).
    """
    if V is None:
        V = potential_from_field(grid, phi)
    grid.check(V)
    n = grid.N ** 3
    m = tol.block

    def apply_A(X):
        Y = X.reshape((X.shape[0],) + grid.shape)
        return apply_h(grid, V, Y).reshape(X.shape[0], n)

    prev = None
    if isinstance(warm_start, GroundStateBundle):
        prev = warm_start.psi
        if warm_start.block is not None and warm_start.block.shape[0] == m:
            X0 = warm_start.block.copy()
        else:
            X0 = _gaussian_block(grid, V, m).reshape(m, n)
            X0[0] = prev.real.ravel()
        if guess is not None:
            X0[0] = np.real(guess).ravel()
    elif warm_start is not None:
        prev = warm_start
        X0 = _gaussian_block(grid, V, m).reshape(m, n)
        X0[0] = np.real(warm_start).ravel()
    else:
        X0 = _gaussian_block(grid, V, m).reshape(m, n)
        X0 = _imaginary_time(grid, V, _orthonormalize(X0), tol.warmup_steps)

    k2 = grid.k2

    def precond(R, theta):
        # half the ground-energy magnitude converged fastest on deep wells
        shift = 0.5 * abs(theta[0]) + 1.0
        Y = R.reshape((R.shape[0],) + grid.shape)
        return fourier_multiplier(grid, Y, 1.0 / (k2 + shift)).reshape(R.shape[0], n)

    # Euclidean-normalized rows: residual norm equals the L^2 residual of the
    # L^2-normalized state
    theta, X, res, its = lobpcg(apply_A, X0, precond, tol.eig_tol, tol.eig_max_iter, 2)
    psi = X[0].reshape(grid.shape) / np.sqrt(grid.dv)
    psi = fix_sign(grid, psi, prev)
    e, lam1 = float(theta[0]), float(theta[1])
    bundle = GroundStateBundle(psi=psi, e=e, lambda1=lam1, gap=lam1 - e,
                               residual=float(res[0]), iterations=its,
                               block=X.copy(), bound=e < -tol.e_tol)
    # residual reported for the normalized ground state
    bundle.residual = float(norm_x(grid, apply_h(grid, V, psi) - e * psi))
    return bundle


def fix_sign(grid, psi, prev=None):
    """Make sum(psi) real positive; along a trajectory also <prev, psi> > 0."""
    s = np.sum(psi)
    if abs(s) > 0:
        psi = psi * (np.conj(s) / abs(s))
    if np.isrealobj(psi) or np.allclose(psi.imag, 0):
        psi = np.real(psi)
    if prev is not None and np.real(inner_x(grid, prev, psi)) < 0:
        psi = -psi
    return psi


def require_bound(bundle, tol=DEFAULT_TOL):
    if not bundle.bound:
        raise NoBoundStateError(f"no bound state: e = {bundle.e:.6g} >= 0")
    if bundle.gap < tol.gap_floor:
        raise GapError(f"gap too small: {bundle.gap:.3g} < {tol.gap_floor:.3g}")
    return bundle


# -- reduced resolvent -------------------------------------------------------

def projected_pcg(apply_A, precond, project, b, tol, max_iter, inner):
    """Batched projected preconditioned CG for Q A Q u = b, b in range(Q).

    Leading axes of b index independent right-hand sides.  Returns
    (u, relative residual per rhs, iterations).
    """
    x = np.zeros_like(b)
    r = b.copy()
    bnorm = np.sqrt(np.maximum(inner(b, b).real, 0.0))
    bnorm = np.where(bnorm > 0, bnorm, 1.0)
    z = project(precond(r))
    p = z.copy()
    rz = inner(r, z).real
    expand = (slice(None),) * np.ndim(rz) + (None,) * 3
    for it in range(1, max_iter + 1):
        rel = np.sqrt(np.maximum(inner(r, r).real, 0.0)) / bnorm
        if np.all(rel <= tol):
            return x, rel, it - 1
        Ap = project(apply_A(p))
        pAp = inner(p, Ap).real
        active = rel > tol
        alpha = np.where(active & (pAp > 0), rz / np.where(pAp > 0, pAp, 1.0), 0.0)
        x = x + alpha[expand] * p
        r = r - alpha[expand] * Ap
        z = project(precond(r))
        rz_new = inner(r, z).real
        beta = np.where(active, rz_new / np.where(rz != 0, rz, 1.0), 0.0)
        p = z + beta[expand] * p
        rz = rz_new
    rel = np.sqrt(np.maximum(inner(r, r).real, 0.0)) / bnorm
    raise SolverError(f"CG did not converge in {max_iter} iterations",
                      residual=float(np.max(rel)))


def resolvent_parts(grid, V, bundle, tol=DEFAULT_TOL, shift_k=None, chi=None):
    """Operator, preconditioner and projector for the reduced resolvent.

    With shift_k the kinetic term becomes (p + k)^2 (Bloch-shifted form used
    for non-lattice momenta); chi then replaces psi as the projected vector.
    """
    e = bundle.e
    psi = bundle.psi if chi is None else chi
    if shift_k is None:
        kin = grid.k2
    else:
        kx, ky, kz = grid.kvec
        kin = (kx + shift_k[0]) ** 2 + (ky + shift_k[1]) ** 2 + (kz + shift_k[2]) ** 2
    pre = 1.0 / (kin + abs(e) + 1.0)

    def apply_A(u):
        return fourier_multiplier(grid, u, kin) + (V - e) * u

    def precond(u):
        return fourier_multiplier(grid, u, pre)

    def project(u):
        c = inner_x(grid, psi, u)
        return u - np.asarray(c)[..., None, None, None] * psi

    def inner(a, b):
        return inner_x(grid, a, b)

    return apply_A, precond, project, inner


def apply_reduced_resolvent(grid, phi, bundle, v, tol=DEFAULT_TOL, V=None):
    """u = R v with R = Q (h - e)^{-1} Q, by projected CG.

    v may carry leading batch axes.
    """
    if bundle.gap < tol.gap_floor:
        raise GapError(f"gap too small: {bundle.gap:.3g} < {tol.gap_floor:.3g}")
    if V is None:
        V = potential_from_field(grid, phi)
    apply_A, precond, project, inner = resolvent_parts(grid, V, bundle, tol)
    b = project(v if np.iscomplexobj(v) else v.astype(float))
    u, _, its = projected_pcg(apply_A, precond, project, b, tol.cg_tol,
                              tol.cg_max_iter, inner)
    u = project(u)
    bnorm = np.maximum(norm_x(grid, b), 1e-300)
    rel = norm_x(grid, apply_A(u) - b) / bnorm
    return ResolventSolve(solution=u, residual=float(np.max(rel)), iterations=its)


# -- adiabatic rates -----------------------------------------------------------

def hellmann_feynman_rate(grid, bundle, phidot):
    """d e / dt = <psi, V_{phidot} psi>."""
    return expectation(grid, potential_from_field(grid, phidot), bundle.psi)


def ground_state_velocity(grid, phi, bundle, tol=DEFAULT_TOL):
    """d psi_phi / dt along aKG: R V_{i omega phi} psi."""
    W = potential_from_field(grid, 1j * grid.omega * phi)
    return apply_reduced_resolvent(grid, phi, bundle, W * bundle.psi, tol).solution


# -- oracle potentials -----------------------------------------------------------

def harmonic_potential(grid):
    """V = |x|^2: spectrum 3, 5, 7, ... (for p^2 + |x|^2)."""
    return grid.r2.copy()


def truncated_coulomb_potential(grid, charge=2.0, R=None):
    """-charge/|x| cut off at |x| = R, built from its exact Fourier transform.

    V_hat(k) = -4 pi charge (1 - cos kR)/k^2 and V_hat(0) = -2 pi charge R^2 is
    finite, so the lattice values carry no point singularity.  With charge 2
    the ground energy of p^2 + V approaches -1 when R and the box are large.
    """
    if R is None:
        R = 0.98 * grid.L / 2
    k2 = grid.k2
    kabs = grid.kabs
    with np.errstate(divide="ignore", invalid="ignore"):
        vh = -4 * np.pi * charge * (1 - np.cos(kabs * R)) / k2
    vh[0, 0, 0] = -2 * np.pi * charge * R * R
    return np.real(to_position(grid, vh))
