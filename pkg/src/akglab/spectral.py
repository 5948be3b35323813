"""Periodic grids, continuum-normalized Fourier transforms and dressing kernels.

Position arrays are stored in natural order, x_j = (j - N/2) dx, so the
origin sits at index N/2.  Momentum arrays use the standard DFT order
(index n <-> k = 2 pi n / L with n wrapped into [-N/2, N/2)).

Conventions:
    f_hat(k) = int e^{-ikx} f(x) dx      ->  dx^3 * sum_x
    f(x) = (2 pi)^-3 int e^{ikx} f_hat(k) dk
Field norms and pairings are plain integrals over k, i.e. sum_k (...) dk
with dk = (2 pi / L)^3.
"""
from dataclasses import dataclass
from functools import cached_property
import struct

import numpy as np
import scipy.fft as sfft
from scipy import integrate

from .errors import ConfigurationError, DomainError, GridMismatchError

# pocketfft is deterministic for a fixed thread count; one worker keeps
# results independent of the machine.
FFT_WORKERS = 1


def _cube_average_power(s):
    """Average of |u|^s over the unit cube [-1/2, 1/2]^3 (s > -3).

    The cube is split into six pyramids with apex at the origin; on each
    the radial part integrates in closed form.
    """
    face, _ = integrate.dblquad(lambda b, a: (1.0 + a * a + b * b) ** (s / 2),
                                -1.0, 1.0, -1.0, 1.0, epsabs=1e-14, epsrel=1e-13)
    radial = 0.5 ** (3 + s) / (3 + s)
    return 6.0 * radial * face


_HALF_POWER_AVG = None


def zero_mode_omega(dk1):
    """Effective |k| on the k=0 cell of side dk1.

    Chosen so that omega0^{-1/2} equals the cell average of |k|^{-1/2}.
    """
    global _HALF_POWER_AVG
    if _HALF_POWER_AVG is None:
        _HALF_POWER_AVG = _cube_average_power(-0.5)
    avg = _HALF_POWER_AVG * dk1 ** -0.5
    return avg ** -2.0


@dataclass(frozen=True)
class GridSpec:
    L: float
    N: int

    def __post_init__(self):
        if not (self.L > 0 and np.isfinite(self.L)):
            raise ConfigurationError(f"box length must be positive, got {self.L}")
        if int(self.N) != self.N or self.N < 8 or self.N % 2:
            raise ConfigurationError(f"N must be an even integer >= 8, got {self.N}")

    @property
    def shape(self):
        return (self.N, self.N, self.N)

    @property
    def dx(self):
        return self.L / self.N

    @property
    def dv(self):
        """Position cell volume dx^3."""
        return self.dx ** 3

    @property
    def dk1(self):
        return 2 * np.pi / self.L

    @property
    def dk(self):
        """Momentum cell weight (2 pi / L)^3."""
        return self.dk1 ** 3

    @property
    def k_max(self):
        """Nyquist radius (2 pi / L)(N / 2)."""
        return self.dk1 * self.N / 2

    @cached_property
    def x1(self):
        return (np.arange(self.N) - self.N // 2) * self.dx

    @cached_property
    def xyz(self):
        x = self.x1
        return x[:, None, None], x[None, :, None], x[None, None, :]

    @cached_property
    def r2(self):
        x, y, z = self.xyz
        return x * x + y * y + z * z

    @cached_property
    def k1(self):
        return sfft.fftfreq(self.N, d=1.0 / self.N) * self.dk1

    @cached_property
    def kvec(self):
        k = self.k1
        return k[:, None, None], k[None, :, None], k[None, None, :]

    @cached_property
    def k2(self):
        kx, ky, kz = self.kvec
        return kx * kx + ky * ky + kz * kz

    @cached_property
    def kabs(self):
        return np.sqrt(self.k2)

    @cached_property
    def omega(self):
        w = self.kabs.copy()
        w[0, 0, 0] = zero_mode_omega(self.dk1)
        return w

    @cached_property
    def g(self):
        """Coupling profile omega^{-1/2}."""
        return self.omega ** -0.5

    @cached_property
    def sign(self):
        """(-1)^(nx+ny+nz): phase from the centred position origin."""
        j = np.arange(self.N) % 2
        s = 1 - 2 * ((j[:, None, None] + j[None, :, None] + j[None, None, :]) % 2)
        return s.astype(float)

    def omega_power(self, p):
        return self.omega ** p

    def check(self, arr):
        if np.shape(arr)[-3:] != self.shape:
            raise GridMismatchError(
                f"array of shape {np.shape(arr)} does not live on grid N={self.N}")
        return arr


def to_momentum(grid, psi):
    """Continuum-normalized forward transform (acts on the last three axes)."""
    grid.check(psi)
    return grid.dv * grid.sign * sfft.fftn(psi, axes=(-3, -2, -1), workers=FFT_WORKERS)


def to_position(grid, spec):
    """Inverse of to_momentum."""
    grid.check(spec)
    return sfft.ifftn(grid.sign * spec, axes=(-3, -2, -1), workers=FFT_WORKERS) / grid.dv


def inner_x(grid, a, b):
    """<a, b> = sum conj(a) b dx^3 over the last three axes."""
    return np.sum(np.conj(a) * b, axis=(-3, -2, -1)) * grid.dv


def norm_x(grid, a):
    return np.sqrt(np.sum(np.abs(a) ** 2, axis=(-3, -2, -1)) * grid.dv)


def inner_k(grid, a, b):
    """<a, b> = sum conj(a) b dk."""
    return np.sum(np.conj(a) * b, axis=(-3, -2, -1)) * grid.dk


def weighted_norm(grid, phi, s):
    """(sum_k omega^{2s} |phi|^2 dk)^{1/2}."""
    if not -1.0 <= s <= 2.0:
        raise DomainError(f"weight exponent {s} outside [-1, 2]")
    grid.check(phi)
    w = grid.omega_power(2 * s) if s != 0 else 1.0
    return float(np.sqrt(np.sum(w * np.abs(phi) ** 2) * grid.dk))


def translate_field(grid, phi, y):
    """(T_y phi)(k) = e^{-iky} phi(k)."""
    kx, ky, kz = grid.kvec
    return np.exp(-1j * (kx * y[0] + ky * y[1] + kz * y[2])) * phi


@dataclass(frozen=True)
class CutoffPair:
    K: float
    Lam: float

    def __post_init__(self):
        if not self.K >= 2:
            raise DomainError(f"K must be >= 2, got {self.K}")
        if not self.Lam >= self.K:
            raise DomainError(f"need K <= Lambda, got K={self.K}, Lambda={self.Lam}")

    def validate_for(self, grid):
        if np.isfinite(self.Lam) and self.Lam > grid.k_max * (1 + 1e-12):
            raise DomainError(
                f"Lambda={self.Lam} exceeds the grid Nyquist radius {grid.k_max:.6g}")
        return self


def _le(a, b):
    return a <= b * (1 + 1e-12)


def dressing_kernels(grid, cut):
    """Lattice values of G_K and B_{K,Lambda}.

    G_K = omega^{-1/2} on |k| <= K (closed, zero mode included).
    B_{K,Lambda} = |k|^{-5/2} on K < |k| <= Lambda, so that
    G_K + |k|^2 B_{K,Lambda} = G_Lambda holds pointwise on the lattice.
    """
    cut.validate_for(grid)
    kabs = grid.kabs
    G = np.where(_le(kabs, cut.K), grid.g, 0.0)
    shell = (~_le(kabs, cut.K)) & _le(kabs, cut.Lam)
    B = np.zeros(grid.shape)
    B[shell] = kabs[shell] ** -2.5
    return G, B


def dressing_scalar_identity(K, Lam):
    """Continuum radial integrals of the scalar dressing terms.

    Returns (|| k B ||^2, 2 Re <G_Lam, B>, combination, 4 pi (ln K - ln Lam)).
    """
    if not K < Lam or not np.isfinite(Lam):
        raise DomainError(f"need K < Lambda < inf, got K={K}, Lambda={Lam}")
    def shell_integral(radial):
        # 4 pi int r^2 f(r) dr, written in u = ln r where the integrand is smooth
        val, _ = integrate.quad(lambda u: 4 * np.pi * np.exp(3 * u) * radial(np.exp(u)),
                                np.log(K), np.log(Lam), epsabs=0, epsrel=1e-13, limit=200)
        return val

    kB2 = shell_integral(lambda r: r * r * r ** -5.0)
    gb = shell_integral(lambda r: r ** -0.5 * r ** -2.5)
    two_re_gb = 2 * gb
    return kB2, two_re_gb, kB2 - two_re_gb, 4 * np.pi * (np.log(K) - np.log(Lam))


# .fgrid snapshot files -------------------------------------------------------

_HEADER = struct.Struct("<dI")


def write_fgrid(path, grid, arr):
    grid.check(arr)
    data = np.ascontiguousarray(arr, dtype=np.complex128)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(float(grid.L), int(grid.N)))
        fh.write(data.view("<f8").tobytes())


def read_fgrid(path):
    with open(path, "rb") as fh:
        L, N = _HEADER.unpack(fh.read(_HEADER.size))
        raw = np.frombuffer(fh.read(), dtype="<f8")
    if raw.size != 2 * N ** 3:
        raise ConfigurationError(f"{path}: payload size {raw.size} does not match N={N}")
    grid = GridSpec(L, N)
    return grid, raw.view(np.complex128).reshape(grid.shape).copy()
