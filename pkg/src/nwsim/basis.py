"""Fitting parameters for the semi-empirical models.

Each element carries per-shell Slater orbitals with ionization potentials,
onsite Hartree shifts and reference occupations, plus element-wide constants
(offsite weighting constant, vacuum-level shift, onsite spin-split matrix).
Parameter files are JSON, one record per element; see ``load_parameter_file``.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import number_for, symbol_for
from .units import ANGSTROM_BOHR

__all__ = [
    "SlaterOrbital",
    "ShellParameters",
    "ElementParameters",
    "ParameterError",
    "evaluate_slater_radial",
    "load_parameter_file",
    "save_parameter_file",
]

MAX_ANGULAR_MOMENTUM = 2


class ParameterError(ValueError):
    """Malformed or inconsistent basis parameters."""


@dataclass(frozen=True)
class SlaterOrbital:
    """Double-zeta Slater radial function.

    R(r) = r^(n-1)/sqrt((2n)!) * [C1 (2 eta1)^(n+1/2) exp(-eta1 r)
                                  + C2 (2 eta2)^(n+1/2) exp(-eta2 r)]

    with r in Bohr and eta in 1/Bohr. Weights are used as given and are not
    renormalized.
    """

    n: int
    l: int
    eta1: float
    eta2: float = 0.0
    c1: float = 1.0
    c2: float = 0.0

    def __post_init__(self):
        if self.n < 1:
            raise ParameterError("principal quantum number must be >= 1")
        if not 0 <= self.l < self.n:
            raise ParameterError("angular momentum must satisfy 0 <= l < n")
        if self.l > MAX_ANGULAR_MOMENTUM:
            raise ParameterError("angular momentum above l=2 is unsupported")
        if self.eta1 <= 0:
            raise ParameterError("leading Slater exponent must be positive")
        if self.eta2 < 0 or (self.eta2 == 0 and self.c2 != 0):
            raise ParameterError("second zeta requires a positive exponent")

    def decay_range(self, tol: float = 1e-10) -> float:
        """Radius (Bohr) beyond which |R(r)| stays below ``tol``."""
        eta = min(x for x in (self.eta1, self.eta2) if x > 0)
        r = 1.0
        for _ in range(200):
            if abs(evaluate_slater_radial(self, r)) < tol:
                return r
            r *= 1.25
        return r


def evaluate_slater_radial(orbital: SlaterOrbital, r) -> np.ndarray:
    """Radial amplitude R(r); r in Bohr, result in Bohr^(-3/2)."""
    r = np.asarray(r, dtype=float)
    if (r < 0).any():
        raise ParameterError("radius must be non-negative")
    n = orbital.n
    norm = 1.0 / math.sqrt(math.factorial(2 * n))
    value = orbital.c1 * (2 * orbital.eta1) ** (n + 0.5) * np.exp(-orbital.eta1 * r)
    if orbital.c2 != 0.0:
        value = value + orbital.c2 * (2 * orbital.eta2) ** (n + 0.5) * np.exp(
            -orbital.eta2 * r
        )
    return norm * r ** (n - 1) * value


@dataclass(frozen=True)
class ShellParameters:
    """One valence shell: orbital shape + energetics.

    ``orbital`` may be None for table-driven (Slater-Koster file) elements
    which never evaluate the radial function explicitly; ``l`` is then
    required directly.
    """

    orbital: SlaterOrbital | None
    energy: float          # ionization potential E, eV
    hartree_shift: float   # onsite Hartree shift U, eV
    occupation: float      # reference shell occupation q, electrons
    l: int = -1

    def __post_init__(self):
        if self.hartree_shift < 0:
            raise ParameterError("onsite Hartree shift must be non-negative")
        if self.orbital is not None:
            object.__setattr__(self, "l", self.orbital.l)
        elif self.l < 0:
            raise ParameterError("shell needs an orbital or an explicit l")


@dataclass(frozen=True)
class ElementParameters:
    """All fitted constants of one element."""

    z: int
    shells: tuple
    beta: float                 # offsite weighting constant
    vacuum_level: float         # eV
    spin_split: np.ndarray      # shell x shell matrix W, eV

    def __post_init__(self):
        object.__setattr__(self, "shells", tuple(self.shells))
        if not self.shells:
            raise ParameterError("element needs at least one shell")
        if self.beta <= 0:
            raise ParameterError("weighting constant must be positive")
        w = np.asarray(self.spin_split, dtype=float)
        nsh = len(self.shells)
        if w.shape != (nsh, nsh):
            raise ParameterError(
                f"spin-split matrix must be {nsh}x{nsh}, got {w.shape}"
            )
        w = 0.5 * (w + w.T)     # symmetrized, see parameter-file docs
        w.setflags(write=False)
        object.__setattr__(self, "spin_split", w)

    @property
    def symbol(self) -> str:
        return symbol_for(self.z)

    def aligned_energies(self) -> np.ndarray:
        """Onsite energies on the common vacuum zero: E - E_vac, eV."""
        return np.array([sh.energy - self.vacuum_level for sh in self.shells])

    def valence_electrons(self) -> float:
        return float(sum(sh.occupation for sh in self.shells))

    def interaction_range(self, tol: float = 1e-10) -> float:
        """Largest orbital decay range (Angstrom)."""
        r = max(
            sh.orbital.decay_range(tol)
            for sh in self.shells
            if sh.orbital is not None
        )
        return r / ANGSTROM_BOHR


def _shell_from_record(rec: dict) -> ShellParameters:
    eta = list(rec["eta_bohr_inv"])
    weights = list(rec["weights"])
    if len(eta) == 1:
        eta.append(0.0)
    if len(weights) == 1:
        weights.append(0.0)
    orbital = SlaterOrbital(
        n=int(rec["n"]),
        l=int(rec["l"]),
        eta1=float(eta[0]),
        eta2=float(eta[1]),
        c1=float(weights[0]),
        c2=float(weights[1]),
    )
    return ShellParameters(
        orbital=orbital,
        energy=float(rec["ionization_potential_eV"]),
        hartree_shift=float(rec["onsite_hartree_shift_eV"]),
        occupation=float(rec["occupation"]),
    )


_MANDATORY_SHELL_KEYS = {
    "n",
    "l",
    "eta_bohr_inv",
    "weights",
    "ionization_potential_eV",
    "onsite_hartree_shift_eV",
    "occupation",
}


def _element_from_record(rec: dict) -> ElementParameters:
    for key in ("symbol", "beta", "vacuum_level_eV", "shells"):
        if key not in rec:
            raise ParameterError(f"element record misses mandatory field {key!r}")
    shells = []
    for srec in rec["shells"]:
        missing = _MANDATORY_SHELL_KEYS - set(srec)
        if missing:
            raise ParameterError(
                f"shell record misses mandatory field(s) {sorted(missing)}"
            )
        shells.append(_shell_from_record(srec))
    nsh = len(shells)
    w = rec.get("onsite_spin_split_eV")
    w = np.zeros((nsh, nsh)) if w is None else np.asarray(w, dtype=float)
    return ElementParameters(
        z=number_for(rec["symbol"]),
        shells=shells,
        beta=float(rec["beta"]),
        vacuum_level=float(rec["vacuum_level_eV"]),
        spin_split=w,
    )


def load_parameter_file(path, table: dict | None = None) -> dict:
    """Read a JSON parameter file into {atomic number: ElementParameters}.

    A later file (or later record) overrides an earlier entry for the same
    element, with a warning.
    """
    path = Path(path)
    records = json.loads(path.read_text())
    if isinstance(records, dict):
        records = records.get("elements", [records])
    table = {} if table is None else dict(table)
    for rec in records:
        element = _element_from_record(rec)
        if element.z in table:
            warnings.warn(
                f"parameters for {element.symbol} redefined by {path}",
                stacklevel=2,
            )
        table[element.z] = element
    return table


def save_parameter_file(table: dict, path) -> None:
    records = []
    for element in table.values():
        records.append(
            {
                "symbol": element.symbol,
                "beta": element.beta,
                "vacuum_level_eV": element.vacuum_level,
                "shells": [
                    {
                        "n": sh.orbital.n,
                        "l": sh.orbital.l,
                        "eta_bohr_inv": [sh.orbital.eta1, sh.orbital.eta2],
                        "weights": [sh.orbital.c1, sh.orbital.c2],
                        "ionization_potential_eV": sh.energy,
                        "onsite_hartree_shift_eV": sh.hartree_shift,
                        "occupation": sh.occupation,
                    }
                    for sh in element.shells
                ],
                "onsite_spin_split_eV": element.spin_split.tolist(),
            }
        )
    Path(path).write_text(json.dumps(records, indent=2) + "\n")


def hydrogen_c2h4_parameters() -> ElementParameters:
    """The hydrogen single-zeta 1s parameter set used by the demo workflows."""
    return ElementParameters(
        z=1,
        shells=(
            ShellParameters(
                orbital=SlaterOrbital(n=1, l=0, eta1=0.87223, c1=0.50494),
                energy=-17.83841,
                hartree_shift=12.848,
                occupation=1.1988,
            ),
        ),
        beta=2.3,
        vacuum_level=-10.0,
        spin_split=np.array([[-1.887]]),
    )
