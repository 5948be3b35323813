"""Spectral simulation of the classical and adiabatic field-particle dynamics
of the Nelson model, Pekar minimizers and Bogoliubov fluctuation kernels."""

__version__ = "0.1.0"
