"""Unit conversions and physical constants.

Convention: lengths are Angstrom at API boundaries and Bohr internally,
energies are eV at API boundaries and Hartree inside the integrators.
"""

HARTREE_EV = 27.211386          # 1 Hartree in eV
BOHR_ANGSTROM = 0.5291772       # 1 Bohr in Angstrom
ANGSTROM_BOHR = 1.0 / BOHR_ANGSTROM
EV_HARTREE = 1.0 / HARTREE_EV

KB_EV = 8.617333e-5             # Boltzmann constant, eV/K

# Conductance quantum 2 e^2 / h in siemens (CODATA e, h).
ELEMENTARY_CHARGE = 1.602176634e-19   # C
PLANCK_H = 6.62607015e-34             # J s
G0_SIEMENS = 2.0 * ELEMENTARY_CHARGE**2 / PLANCK_H


def ev_to_hartree(x):
    return x * EV_HARTREE


def hartree_to_ev(x):
    return x * HARTREE_EV


def angstrom_to_bohr(x):
    return x * ANGSTROM_BOHR


def bohr_to_angstrom(x):
    return x * BOHR_ANGSTROM
