"""Quadratic (Bogoliubov) fluctuation kernels on a finite set of lattice modes.

Mode operators are discretized as A_k = sqrt(dk) a_k, so a quadratic form
    sum h(k,l) A_k^* A_l + 1/2 sum (b(k,l) A_k^* A_l^* + h.c.) + c
is stored as (h_block, b_block, c_scalar).  The field operator of the
coupling is phi(G) = int g_k (e^{-ikx} a_k^* + e^{ikx} a_k) dk, matching the
classical potential V_phi.

Dressed kernel: with the coupling written as A = int (a_k^* X_k + a_k Y_k) dk,
    X_k = e^{-ikx} (g_k + 2 B_k k.p),   Y_k = e^{ikx} (g_k + 2 B_k (|k|^2 + k.p)),
where g_k = omega^{-1/2} on |k| <= K and B_k = |k|^{-5/2} on K < |k| <= Lambda.
"""
from dataclasses import dataclass, field
import csv
import json
import logging

import numpy as np
from scipy import linalg

from .errors import ConfigurationError, GapError, SolverError
from .schrodinger import (DEFAULT_TOL, fourier_multiplier, potential_from_field,
                          projected_pcg, resolvent_parts)
from .spectral import CutoffPair, dressing_kernels, inner_x, norm_x, to_momentum

log = logging.getLogger(__name__)

N_HEADER = ["t", "N_expect", "inv_drift"]


# -- modes -----------------------------------------------------------------------

@dataclass
class ModeSet:
    grid: object
    index: np.ndarray  # (n, 3) integer DFT indices
    kvec: np.ndarray  # (n, 3) momenta
    weight: float  # dk per mode
    neg: np.ndarray  # position of -k in the list
    radius: float = np.inf

    @property
    def n(self):
        return len(self.kvec)

    @property
    def kabs(self):
        return np.sqrt(np.sum(self.kvec ** 2, axis=1))

    @property
    def omega(self):
        g = self.grid
        return g.omega[tuple(self.index.T)]


def build_modes(grid, lam_modes, mode_cap=512, include_zero=False):
    """Lattice momenta with |k| <= lam_modes, sorted by |k| and closed under k -> -k."""
    if lam_modes >= grid.k_max:
        raise ConfigurationError(
            f"mode radius {lam_modes} must stay below the Nyquist radius {grid.k_max:.6g}")
    n = int(np.floor(lam_modes / grid.dk1))
    r = np.arange(-n, n + 1)
    I = np.stack(np.meshgrid(r, r, r, indexing="ij"), -1).reshape(-1, 3)
    k = I * grid.dk1
    kk = np.sqrt(np.sum(k ** 2, axis=1))
    keep = kk <= lam_modes * (1 + 1e-12)
    if not include_zero:
        keep &= kk > 0
    I, k, kk = I[keep], k[keep], kk[keep]
    order = np.lexsort((I[:, 2], I[:, 1], I[:, 0], np.round(kk, 12)))
    I, k = I[order], k[order]
    if len(k) > mode_cap:
        raise ConfigurationError(f"{len(k)} modes exceed mode_cap = {mode_cap}")
    pos = {tuple(v): j for j, v in enumerate(I)}
    neg = np.array([pos[tuple(-v)] for v in I])
    return ModeSet(grid=grid, index=I % grid.N, kvec=k, weight=grid.dk, neg=neg,
                   radius=float(lam_modes))


@dataclass
class QuadKernel:
    h_block: np.ndarray
    b_block: np.ndarray
    c_scalar: float
    modes: ModeSet = field(repr=False, default=None)
    meta: dict = field(default_factory=dict)

    def structure_errors(self):
        h, b = self.h_block, self.b_block
        return {"hermitian": float(np.max(np.abs(h - h.conj().T))),
                "symmetric": float(np.max(np.abs(b - b.T)))}


# -- helpers --------------------------------------------------------------------

def _plane(grid, k, sign):
    x, y, z = grid.xyz
    return np.exp(sign * 1j * (k[0] * x + k[1] * y + k[2] * z))


def _k_dot_p(grid, k, u):
    kx, ky, kz = grid.kvec
    return fourier_multiplier(grid, u.astype(complex), k[0] * kx + k[1] * ky + k[2] * kz)


def _solve_batch(grid, V, bundle, rhs, tol, chunk=32):
    """R applied to a stack of right-hand sides (first axis)."""
    apply_A, precond, project, inner = resolvent_parts(grid, V, bundle, tol)
    out = np.empty_like(rhs)
    worst = 0.0
    for i in range(0, len(rhs), chunk):
        b = project(rhs[i:i + chunk])
        u, rel, _ = projected_pcg(apply_A, precond, project, b, tol.cg_tol,
                                  tol.cg_max_iter, inner)
        out[i:i + chunk] = project(u)
        worst = max(worst, float(np.max(rel)))
    return out, worst


def _check_gap(bundle, tol):
    if bundle.gap < tol.gap_floor:
        raise GapError(f"gap too small: {bundle.gap:.3g} < {tol.gap_floor:.3g}")


def _gram(grid, A, B):
    """Matrix of <A_i, B_j> over the last three axes."""
    n = A.shape[0]
    return (np.conj(A.reshape(n, -1)) @ B.reshape(B.shape[0], -1).T) * grid.dv


# -- undressed kernel -------------------------------------------------------------

def raw_kernel(grid, phi, bundle, modes, lam, tol=DEFAULT_TOL):
    """M(k,l) = <psi, G(.,k) R G(.,l) psi> with G(x,k) = g_k e^{-ikx} 1_{|k| <= lam}."""
    _check_gap(bundle, tol)
    V = potential_from_field(grid, phi)
    psi = bundle.psi
    g = modes.omega ** -0.5 * (modes.kabs <= lam * (1 + 1e-12))
    Z = np.stack([gk * _plane(grid, k, -1) * psi for k, gk in zip(modes.kvec, g)])
    RZ, res = _solve_batch(grid, V, bundle, Z, tol)
    # <psi G(.,k) f> = <conj(G(.,k)) psi, f> = <Z_{-k}, f>
    M = _gram(grid, Z[modes.neg], RZ)
    return M, res


def assemble_bog_kernel(grid, phi, bundle, modes, lam, tol=DEFAULT_TOL):
    M, res = raw_kernel(grid, phi, bundle, modes, lam, tol)
    w = modes.weight
    Mneg = M[:, modes.neg]  # M(k, -l)
    h = np.diag(modes.omega).astype(complex) - 2 * w * Mneg
    b = -2 * w * M
    c = -w * float(np.real(np.trace(Mneg)))
    return QuadKernel(h, b, c, modes, {"kind": "bog", "Lambda": lam, "cg_residual": res,
                                       "raw": M})


# -- dressed kernel ---------------------------------------------------------------

def _dressed_vectors(grid, psi, modes, K, lam):
    kabs = modes.kabs
    inner_ball = kabs <= K * (1 + 1e-12)
    shell = (~inner_ball) & (kabs <= lam * (1 + 1e-12))
    g = np.where(inner_ball, modes.omega ** -0.5, 0.0)
    B = np.where(shell, kabs ** -2.5, 0.0)
    X, Y = [], []
    for k, gk, bk, k2 in zip(modes.kvec, g, B, kabs ** 2):
        kp = _k_dot_p(grid, k, psi) if bk else 0.0
        X.append(_plane(grid, k, -1) * (gk * psi + 2 * bk * kp))
        Y.append(_plane(grid, k, 1) * (gk * psi + 2 * bk * (k2 * psi + kp)))
    return np.stack(X), np.stack(Y), B


def scalar_sigma_term(grid, psi, K, lam):
    """2 Re <sigma(psi), <psi, B psi>> = 2 sum_shell dk |k|^-3 |rho_hat(k)|^2."""
    G, B = dressing_kernels(grid, CutoffPair(K, lam))
    rho = to_momentum(grid, np.abs(psi) ** 2)
    return float(2 * np.sum(grid.g * B * np.abs(rho) ** 2) * grid.dk)


def assemble_dressed_kernel(grid, phi, bundle, modes, K, lam, tol=DEFAULT_TOL):
    _check_gap(bundle, tol)
    CutoffPair(K, lam).validate_for(grid)
    if lam > modes.radius * (1 + 1e-12):
        raise ConfigurationError(f"Lambda = {lam} exceeds the mode radius")
    V = potential_from_field(grid, phi)
    psi = bundle.psi
    X, Y, B = _dressed_vectors(grid, psi, modes, K, lam)
    RX, r1 = _solve_batch(grid, V, bundle, X, tol)
    RY, r2 = _solve_batch(grid, V, bundle, Y, tol)
    P = _gram(grid, Y, RX)  # <Y_k psi, R X_l psi>
    Qm = _gram(grid, Y, RY)
    S = _gram(grid, X, RX)
    w = modes.weight
    h = np.diag(modes.omega).astype(complex) - w * (Qm + S.T)
    b = -w * (P + P.T)
    c = -w * float(np.real(np.trace(S)))
    # D part: normal-ordered (a(kB) + a^*(kB))^2 in the state psi
    rho = to_momentum(grid, np.abs(psi) ** 2)
    kk = modes.kvec
    I = modes.index
    dot = kk @ kk.T
    BB = np.outer(B, B)
    N = grid.N
    diff = (I[:, None, :] - I[None, :, :]) % N
    summ = (I[:, None, :] + I[None, :, :]) % N
    rho_diff = rho[diff[..., 0], diff[..., 1], diff[..., 2]]
    rho_sum = rho[summ[..., 0], summ[..., 1], summ[..., 2]]
    h = h + 2 * w * dot * BB * rho_diff
    b = b + 2 * w * dot * BB * rho_sum
    c += 4 * np.pi * np.log(K) + scalar_sigma_term(grid, psi, K, lam)
    return QuadKernel(h, b, c, modes, {"kind": "dressed", "K": K, "Lambda": lam,
                                       "cg_residual": max(r1, r2)})


def lattice_scalar_gap(grid, K, lam):
    """4 pi ln K - ||kB||^2 + 2 Re<B, G_Lam> on the lattice: 4 pi ln K + sum_shell dk |k|^-3."""
    G, B = dressing_kernels(grid, CutoffPair(K, lam))
    k2 = grid.k2
    return float(4 * np.pi * np.log(K) - np.sum(k2 * B ** 2) * grid.dk
                 + 2 * np.sum(B * grid.g * (grid.kabs <= lam * (1 + 1e-12))) * grid.dk)


def verify_kernel_identity(grid, phi, bundle, modes, K, lam, tol=DEFAULT_TOL):
    """Compare dressed and undressed blocks; the scalar gap should be 4 pi ln Lambda."""
    und = assemble_bog_kernel(grid, phi, bundle, modes, lam, tol)
    dre = assemble_dressed_kernel(grid, phi, bundle, modes, K, lam, tol)
    dh = float(np.max(np.abs(dre.h_block - und.h_block)))
    db = float(np.max(np.abs(dre.b_block - und.b_block)))
    scale = float(max(np.max(np.abs(und.h_block - np.diag(np.diag(und.h_block)))),
                      np.max(np.abs(und.b_block))))
    gap = dre.c_scalar - und.c_scalar
    return {"n_modes": modes.n, "K": K, "Lambda": lam, "h_dev": dh, "b_dev": db,
            "block_dev": max(dh, db), "scale": scale, "scalar_gap": gap,
            "lattice_gap": lattice_scalar_gap(grid, K, lam),
            "continuum_gap": 4 * np.pi * np.log(lam),
            "rel_gap_err": gap / (4 * np.pi * np.log(lam)) - 1,
            "undressed": und, "dressed": dre}


# -- counterterm --------------------------------------------------------------------

def lebedev26():
    """26-point rule: faces, edges and corners of the cube, exact to degree 7."""
    dirs, wts = [], []
    for v in np.eye(3):
        for s in (1, -1):
            dirs.append(s * v)
            wts.append(1 / 21)
    for i in range(3):
        for j in range(i + 1, 3):
            for si in (1, -1):
                for sj in (1, -1):
                    v = np.zeros(3)
                    v[i], v[j] = si, sj
                    dirs.append(v / np.sqrt(2))
                    wts.append(4 / 105)
    for sx in (1, -1):
        for sy in (1, -1):
            for sz in (1, -1):
                dirs.append(np.array([sx, sy, sz]) / np.sqrt(3))
                wts.append(9 / 280)
    return np.array(dirs), 4 * np.pi * np.array(wts)


def radial_nodes(lam_list, n_per_panel=2):
    """Gauss-Legendre nodes: linear in r on [0, lam_0], in ln r on later panels.

    Returns (r, weight in dr, panel index).
    """
    x, w = np.polynomial.legendre.leggauss(n_per_panel)
    rs, ws, panel = [], [], []
    lo = 0.0
    for j, hi in enumerate(lam_list):
        if j == 0:
            r = lo + (hi - lo) * (x + 1) / 2
            wr = (hi - lo) / 2 * w
        else:
            a, b = np.log(lo), np.log(hi)
            u = a + (b - a) * (x + 1) / 2
            r = np.exp(u)
            wr = (b - a) / 2 * w * r
        rs.extend(r)
        ws.extend(wr)
        panel.extend([j] * n_per_panel)
        lo = hi
    return np.array(rs), np.array(ws), np.array(panel)


def bloch_projector(grid, psi, k):
    """Normalized image of the ground state in the fiber with Bloch momentum k.

    Fourier coefficient at lattice q is psi_hat(q + k); only q with
    |(q + k)_i| < k_max are resolved by the grid, the rest is set to zero.
    Returns None when nothing of psi survives.
    """
    u = _plane(grid, k, -1) * psi
    uh = np.fft.fftn(u)
    kx, ky, kz = grid.kvec
    km = grid.k_max
    mask = (np.abs(kx + k[0]) < km) & (np.abs(ky + k[1]) < km) & (np.abs(kz + k[2]) < km)
    chi = np.fft.ifftn(np.where(mask, uh, 0))
    n = norm_x(grid, chi)
    if n < 1e-8:
        return None
    return chi / n


def bloch_resolvent_expectation(grid, V, bundle, kvecs, tol=DEFAULT_TOL):
    """<e^{ikx} psi, R e^{ikx} psi> for a batch of (not necessarily lattice) momenta."""
    psi = bundle.psi
    out = np.empty(len(kvecs))
    for j, k in enumerate(kvecs):
        chi = bloch_projector(grid, psi, k)
        if chi is None:
            chi = np.zeros(grid.shape)
        apply_A, precond, project, inner = resolvent_parts(grid, V, bundle, tol,
                                                           shift_k=k, chi=chi)
        b = project(psi.astype(complex))
        u, rel, _ = projected_pcg(apply_A, precond, project, b, tol.cg_tol,
                                  tol.cg_max_iter, inner)
        out[j] = float(np.real(inner_x(grid, b, project(u))))
    return out


def counterterm_growth(grid, phi, bundle, lam_list, tol=DEFAULT_TOL, n_per_panel=2):
    """c(Lam) = int_{|k|<=Lam} omega^-1 <e^{ikx} psi, R e^{ikx} psi> dk on each lam_list entry.

    Returns values, the slope against ln Lam over the top half, node data.
    """
    _check_gap(bundle, tol)
    lam_list = np.asarray(lam_list, dtype=float)
    if np.any(np.diff(lam_list) <= 0):
        raise ConfigurationError("Lambda list must be strictly increasing")
    V = potential_from_field(grid, phi)
    dirs, dw = lebedev26()
    r, wr, panel = radial_nodes(lam_list, n_per_panel)
    F = np.empty((len(r), len(dirs)))
    for i, ri in enumerate(r):
        F[i] = bloch_resolvent_expectation(grid, V, bundle, ri * dirs, tol)
        log.info("counterterm node r=%.4g: mean F r^2 = %.5f", ri, np.dot(dw, F[i]) * ri * ri / (4 * np.pi))
    # int r^2 dr dOmega (1/r) F
    contrib = wr * r * (F @ dw)
    per_panel = np.array([contrib[panel == j].sum() for j in range(len(lam_list))])
    c = np.cumsum(per_panel)
    half = len(lam_list) // 2
    top = slice(half, None) if len(lam_list) >= 4 else slice(None)
    slope = float(np.polyfit(np.log(lam_list[top]), c[top], 1)[0])
    return {"Lambda": lam_list, "c": c, "slope": slope, "r": r, "F": F,
            "n_solves": F.size}


# -- Bogoliubov frames ------------------------------------------------------------------

@dataclass
class BogoliubovFrame:
    U: np.ndarray
    V: np.ndarray
    t: float = 0.0

    @classmethod
    def vacuum(cls, n):
        return cls(np.eye(n, dtype=complex), np.zeros((n, n), dtype=complex), 0.0)

    def invariant_drift(self):
        n = self.U.shape[0]
        a = self.U.conj().T @ self.U - self.V.conj().T @ self.V - np.eye(n)
        s = self.U.T @ self.V
        return float(max(np.linalg.norm(a), np.linalg.norm(s - s.T)))

    @property
    def n_expect(self):
        return float(np.sum(np.abs(self.V) ** 2))


def generator(kernel):
    h, b = kernel.h_block, kernel.b_block
    return np.block([[h, b], [-b.conj(), -h.conj()]])


class FrozenKernel:
    def __init__(self, kernel):
        self.kernel = kernel

    def __call__(self, t):
        return self.kernel


class InterpolatedKernel:
    """Blocks linearly interpolated between kernels assembled at given times."""

    def __init__(self, times, kernels):
        self.times = np.asarray(times, dtype=float)
        self.kernels = kernels

    def __call__(self, t):
        j = int(np.clip(np.searchsorted(self.times, t) - 1, 0, len(self.times) - 2))
        t0, t1 = self.times[j], self.times[j + 1]
        a = np.clip((t - t0) / (t1 - t0), 0.0, 1.0)
        k0, k1 = self.kernels[j], self.kernels[j + 1]
        return QuadKernel((1 - a) * k0.h_block + a * k1.h_block,
                          (1 - a) * k0.b_block + a * k1.b_block,
                          (1 - a) * k0.c_scalar + a * k1.c_scalar, k0.modes)


def propagate_bogoliubov(frame, kernel_source, dt, T, abort_drift=1e-6):
    """Implicit midpoint for i d/dt [U; V] = [[h, b], [-conj b, -conj h]] [U; V].

    Returns the final frame and rows (t, <N>, invariant drift).
    """
    n = frame.U.shape[0]
    steps = int(round(T / dt))
    W = np.vstack([frame.U, frame.V])
    t = frame.t
    rows = [(t, frame.n_expect, frame.invariant_drift())]
    frozen = isinstance(kernel_source, FrozenKernel)
    lu = None
    I2 = np.eye(2 * n)
    for i in range(steps):
        if lu is None or not frozen:
            G = generator(kernel_source(t + 0.5 * dt))
            lu = linalg.lu_factor(I2 + 0.5j * dt * G)
            rhs_op = I2 - 0.5j * dt * G
        W = linalg.lu_solve(lu, rhs_op @ W)
        t = frame.t + (i + 1) * dt
        f = BogoliubovFrame(W[:n], W[n:], t)
        drift = f.invariant_drift()
        if drift > abort_drift:
            raise SolverError(f"symplectic invariants violated at t={t:.6g}: drift {drift:.3g}",
                              residual=drift)
        rows.append((t, f.n_expect, drift))
    return BogoliubovFrame(W[:n], W[n:], t), rows


def write_n_csv(path, rows):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(N_HEADER)
        for r in rows:
            wr.writerow([f"{v:.17g}" for v in r])


def write_kernel(path, kernel, tol=DEFAULT_TOL):
    """One JSON header line, then h_block and b_block as little-endian complex128."""
    m = kernel.modes
    head = {"n_modes": m.n, "modes": m.kvec.tolist(), "meta": {
        k: v for k, v in kernel.meta.items() if np.isscalar(v) or isinstance(v, str)},
        "c_scalar": kernel.c_scalar, "cg_tol": tol.cg_tol, "eig_tol": tol.eig_tol,
        "payload": ["h_block", "b_block"], "dtype": "<c16"}
    with open(path, "wb") as fh:
        fh.write(json.dumps(head).encode() + b"\n")
        for a in (kernel.h_block, kernel.b_block):
            fh.write(np.ascontiguousarray(a, dtype="<c16").tobytes())


def read_kernel(path):
    with open(path, "rb") as fh:
        head = json.loads(fh.readline())
        n = head["n_modes"]
        data = np.frombuffer(fh.read(), dtype="<c16")
    h = data[: n * n].reshape(n, n)
    b = data[n * n: 2 * n * n].reshape(n, n)
    return head, h, b
