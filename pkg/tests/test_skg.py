import numpy as np
import pytest

from akglab.akg import AkgModel
from akglab.errors import ConfigurationError
from akglab.schrodinger import ground_state
from akglab.skg import (SWEEP_HEADER, SkgModel, akg_reference, compare_to_akg,
                        particle_error, semiclassical_energy, skg_advance, skg_init, skg_step,
                        write_sweep_csv)
from akglab.spectral import GridSpec, norm_x, weighted_norm
from conftest import perturbed


def start(p, amplitude, seed):
    phi0 = perturbed(p, amplitude, seed)
    b = ground_state(p.grid, phi0, warm_start=p.bundle)
    return phi0, b


def test_free_gaussian_spreading():
    g = GridSpec(20.0, 48)
    a = 1.0
    psi = np.exp(-g.r2 / (2 * a * a)).astype(complex)
    psi /= norm_x(g, psi)
    m = SkgModel(g, force_free=True, micro_dt_max=2e-3)
    eps = 0.5
    st = skg_init(m, psi, np.zeros(g.shape, complex), eps)
    st = skg_advance(m, st, 0.25, eps ** 2 * m.micro_dt_max)
    t = st.s / eps ** 2
    x2 = float(np.sum(g.r2 * np.abs(st.psi) ** 2) * g.dv) / 3
    assert abs(x2 - (a * a / 2 + 2 * t * t / (a * a))) <= 1e-4
    assert abs(norm_x(g, st.psi) - 1) <= 1e-12


def test_mass_and_energy(pekar16):
    p = pekar16
    g = p.grid
    phi0, b = start(p, 0.1, 0)
    # the coarse grid carries weight near Nyquist, so use a short micro step
    m = SkgModel(g, micro_dt_max=2.5e-4)
    eps = 0.3
    st = skg_init(m, b.psi, phi0, eps, bundle=b)
    ds = eps ** 2 * m.micro_dt_max
    for _ in range(50):
        prev = float(norm_x(g, st.psi))
        st = skg_step(m, st, ds)
        assert abs(float(norm_x(g, st.psi)) - prev) <= 1e-12
    E = semiclassical_energy(g, st.psi, st.phi)
    assert abs(E - st.E_semi) <= 1e-5 * abs(st.E_semi)


def test_energy_two_assemblies(pekar16):
    # kinetic part in momentum space and the interaction as a field pairing
    p = pekar16
    g = p.grid
    phi0, b = start(p, 0.2, 1)
    psi = b.psi * np.exp(0.3j * g.xyz[0])
    from akglab.schrodinger import source_from_wave
    from akglab.spectral import inner_k, to_momentum
    kin = float(np.sum(g.k2 * np.abs(to_momentum(g, psi)) ** 2) * g.dk) / (2 * np.pi) ** 3
    inter = 2 * np.real(inner_k(g, phi0, source_from_wave(g, psi)))
    other = kin + weighted_norm(g, phi0, 0.5) ** 2 + inter
    assert np.isclose(semiclassical_energy(g, psi, phi0), other, rtol=1e-11)


def test_step_size_refused(pekar16):
    p = pekar16
    phi0, b = start(p, 0.1, 2)
    m = SkgModel(p.grid, micro_dt_max=1e-3)
    st = skg_init(m, b.psi, phi0, 0.3, bundle=b)
    with pytest.raises(ConfigurationError):
        skg_step(m, st, 0.3 ** 2 * 2e-3)
    with pytest.raises(ConfigurationError):
        skg_init(m, b.psi, phi0, 1.5)
    with pytest.raises(ConfigurationError):
        SkgModel(p.grid, scheme="rk4")


def test_energy_offset_is_a_gauge(pekar16):
    p = pekar16
    g = p.grid
    phi0, b = start(p, 0.1, 3)
    eps = 0.4
    out = []
    for off in (0.0, 7.5):
        m = SkgModel(g, e_offset=off, refresh_every=5)
        st = skg_init(m, b.psi, phi0, eps, bundle=b)
        st = skg_advance(m, st, 0.002, eps ** 2 * m.micro_dt_max)
        out.append(st)
    assert weighted_norm(g, out[0].phi - out[1].phi, 0.0) <= 1e-12 * weighted_norm(g, phi0, 0.0)
    u0 = np.exp(1j * out[0].phase_integral / eps ** 2) * out[0].psi
    u1 = np.exp(1j * out[1].phase_integral / eps ** 2) * out[1].psi
    assert norm_x(g, u0 - u1) <= 1e-9


@pytest.mark.parametrize("scheme,order", [("strang", 2), ("triple_jump", 4)])
def test_scheme_order(pekar16, scheme, order):
    p = pekar16
    g = p.grid
    phi0, b = start(p, 0.2, 4)
    eps = 0.5
    m = SkgModel(g, scheme=scheme, micro_dt_max=4e-3, refresh_every=10 ** 6)
    s_end = 0.004
    ends = []
    for n in (8, 16, 32):
        st = skg_init(m, b.psi, phi0, eps, bundle=b)
        for _ in range(n):
            st = skg_step(m, st, s_end / n)
        ends.append(st.psi)
    r = norm_x(g, ends[0] - ends[1]) / norm_x(g, ends[1] - ends[2])
    assert abs(np.log2(r) - order) < 0.4


def test_compare_self_consistency(pekar16, tmp_path):
    # a very small eps follows aKG closely; errors shrink with eps
    p = pekar16
    g = p.grid
    phi0, _ = start(p, 0.3, 5)
    m = SkgModel(g, micro_dt_max=5e-4, scheme="triple_jump")
    out = compare_to_akg(m, phi0, [0.4, 0.2], 0.008, 1e-3, n_checkpoints=2)
    rows = out["rows"]
    assert rows[1]["field_err"] < rows[0]["field_err"]
    assert rows[1]["particle_err"] < rows[0]["particle_err"]
    for r in rows:
        assert r["mass_drift"] <= 1e-10 and r["energy_drift"] <= 1e-5
    path = tmp_path / "sweep.csv"
    write_sweep_csv(path, rows)
    assert path.read_text().splitlines()[0] == ",".join(SWEEP_HEADER)


def test_akg_reference_richardson(pekar16):
    p = pekar16
    phi0, _ = start(p, 0.2, 6)
    m = AkgModel(p.grid)
    cps = np.array([0.004, 0.008])
    plain = akg_reference(m, phi0, cps, 1e-3, richardson=False)
    rich = akg_reference(m, phi0, cps, 1e-3)
    fine = akg_reference(m, phi0, cps, 2.5e-4, richardson=False)
    g = p.grid
    e_plain = weighted_norm(g, plain[-1][0] - fine[-1][0], 0.0)
    e_rich = weighted_norm(g, rich[-1][0] - fine[-1][0], 0.0)
    assert e_rich < 0.3 * e_plain
    with pytest.raises(ConfigurationError):
        akg_reference(m, phi0, np.array([0.0035, 0.007]), 1e-3)


def test_particle_error_phase():
    g = GridSpec(3.0, 8)
    psi = np.exp(-g.r2).astype(complex)
    psi /= norm_x(g, psi)

    class S:
        eps = 0.5
        phase_integral = 0.1
        psi = None

    st = S()
    st.psi = np.exp(-1j * 0.1 / 0.25) * psi
    assert particle_error(g, st, psi) < 1e-14
