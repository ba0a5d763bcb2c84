"""NEGF transport: electrode bands, surface self-energies, Green's
functions, transmission, Landauer conductance/current, density matrices.

Matrix-level functions work on raw blocks; ``DeviceGreens`` wires a
``BlockPartition`` (plus lead potential shifts) into them. Energies are eV.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla

from .hamiltonian import BlockPartition
from .units import G0_SIEMENS, KB_EV

__all__ = [
    "TransportError",
    "BandSolution",
    "SelfEnergy",
    "TransmissionSpectrum",
    "DensityResult",
    "electrode_bands",
    "open_channel_count",
    "surface_self_energy",
    "transmission_at",
    "fermi",
    "fermi_occupation",
    "conductance",
    "landauer_current",
    "negf_density",
    "mulliken",
    "DeviceGreens",
]

DEFAULT_ETA = 1e-6          # eV, transmission broadening
DENSITY_ETA = 1e-3          # eV, real-axis density regularization
DECIMATION_TOL = 1e-12
MAX_DECIMATIONS = 100
GAMMA_PSD_TOL = -1e-10


class TransportError(RuntimeError):
    pass


@dataclass
class BandSolution:
    """Electrode band structure on a k grid (dimensionless phases)."""

    ks: np.ndarray
    energies: np.ndarray        # (nk, nbands), ascending per k
    coefficients: list | None = None

    def range(self):
        return float(self.energies.min()), float(self.energies.max())


@dataclass
class SelfEnergy:
    energy: float
    sigma: np.ndarray

    @property
    def gamma(self) -> np.ndarray:
        return 1j * (self.sigma - self.sigma.conj().T)

    def validate(self) -> None:
        g = self.gamma
        if not np.allclose(g, g.conj().T, atol=1e-10):
            raise TransportError("broadening matrix is not Hermitian")
        w = np.linalg.eigvalsh(g)
        if w.min() < GAMMA_PSD_TOL:
            raise TransportError(
                f"broadening matrix not positive semidefinite (min {w.min():.2e})"
            )


@dataclass
class TransmissionSpectrum:
    """T(E) samples; energies are relative to the average electrode Fermi
    level, ``energy_zero`` records that absolute reference."""

    energies: np.ndarray
    values: np.ndarray
    energy_zero: float = 0.0
    eta: float = DEFAULT_ETA

    def __post_init__(self):
        self.energies = np.asarray(self.energies, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.energies.shape != self.values.shape:
            raise TransportError("energy and transmission arrays differ in shape")

    def at(self, e: float) -> float:
        return float(np.interp(e, self.energies, self.values))

    def write_csv(self, path) -> None:
        lines = ["energy_eV,transmission"]
        for e, t in zip(self.energies, self.values):
            lines.append(f"{e:.17g},{t:.17g}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def read_csv(cls, path) -> "TransmissionSpectrum":
        rows = Path(path).read_text().splitlines()
        data = np.array([[float(x) for x in r.split(",")] for r in rows[1:]])
        return cls(energies=data[:, 0], values=data[:, 1])


@dataclass
class DensityResult:
    density: list                 # one matrix per spin channel
    populations: np.ndarray       # Mulliken electrons per atom (all spins)
    shell_populations: dict       # (atom, shell) -> per-spin tuple

    def total_electrons(self) -> float:
        return float(self.populations.sum())


def electrode_bands(h00, s00, h01, s01, ks) -> BandSolution:
    """Generalized eigenvalues of the Bloch-summed principal layers."""
    ks = np.asarray(ks, dtype=float)
    n = h00.shape[0]
    energies = np.empty((len(ks), n))
    for i, k in enumerate(ks):
        ph = np.exp(1j * k)
        hk = h00 + h01 * ph + h01.conj().T * np.conj(ph)
        sk = s00 + s01 * ph + s01.T * np.conj(ph)
        try:
            w = sla.eigh(hk, sk, eigvals_only=True)
        except np.linalg.LinAlgError as exc:
            raise TransportError(f"S(k) not positive definite at k={k}") from exc
        energies[i] = np.sort(w)
    return BandSolution(ks=ks, energies=energies)


def open_channel_count(bands: BandSolution, e: float) -> int:
    """Number of forward-moving band branches crossing energy ``e``.

    Counts sign changes of eps(k) - e along a half-zone k grid, one per
    propagating channel.
    """
    diff = bands.energies - e
    signs = np.sign(diff)
    signs[signs == 0] = 1
    return int(np.sum(signs[:-1] * signs[1:] < 0))


def _surface_decimation(a, alpha, beta):
    """Surface block of [A - alpha g beta]^-1 = g via Sancho-Rubio doubling."""
    es = a.copy()
    eb = a.copy()
    al = alpha.copy()
    be = beta.copy()
    for _ in range(MAX_DECIMATIONS):
        if np.linalg.norm(al) + np.linalg.norm(be) < DECIMATION_TOL:
            return np.linalg.inv(es)
        ginv = np.linalg.inv(eb)
        agb = al @ ginv @ be
        es = es - agb
        eb = eb - agb - be @ ginv @ al
        al = -al @ ginv @ al
        be = -be @ ginv @ be
    raise TransportError(
        f"surface decimation did not converge in {MAX_DECIMATIONS} doublings"
    )


def _surface_direct(a, alpha, beta):
    """Surface Green's function via the transfer-matrix eigenproblem.

    Solves (beta + a lam + alpha lam^2) u = 0, keeps the |lam| < 1 branch
    and returns g = [a + alpha F]^-1 with F the decaying transfer operator.
    """
    n = a.shape[0]
    zero = np.zeros_like(a)
    eye = np.eye(n, dtype=complex)
    lhs = np.block([[-a, -beta], [eye, zero]])
    rhs = np.block([[alpha, zero], [zero, eye]])
    lam, vecs = sla.eig(lhs, rhs)
    finite = np.isfinite(lam)
    order = np.argsort(np.where(finite, np.abs(lam), np.inf))
    idx = order[:n]
    if np.abs(lam[idx]).max() >= 1.0:
        raise TransportError(
            "transfer-matrix method found fewer than n decaying modes; "
            "increase the broadening"
        )
    phi = vecs[n:, idx]
    lam_d = lam[idx]
    f = phi @ np.diag(lam_d) @ np.linalg.inv(phi)
    return np.linalg.inv(a + alpha @ f)


def surface_self_energy(e, blocks, side: str = "left",
                        method: str = "recursion",
                        eta: float = DEFAULT_ETA) -> SelfEnergy:
    """Retarded surface self-energy of a semi-infinite electrode at e + i eta.

    ``blocks`` is (H00, S00, H01, S01) with H01 coupling a principal layer
    to the next one along +z; ``side`` selects which semi-infinite half the
    electrode occupies.
    """
    if eta <= 0:
        raise TransportError("broadening eta must be positive")
    h00, s00, h01, s01 = blocks
    z = e + 1j * eta
    a = z * s00 - h00
    b = z * s01 - h01                       # cell n -> n+1
    c = z * s01.T - h01.conj().T            # cell n+1 -> n
    if side not in ("left", "right"):
        raise TransportError("side must be 'left' or 'right'")
    solve = _surface_decimation if method == "recursion" else _surface_direct
    if method not in ("recursion", "direct"):
        raise TransportError("method must be 'recursion' or 'direct'")
    # sigma = tau^dag g tau with tau the physical lead->device coupling;
    # the sandwich form keeps the broadening matrix positive semidefinite
    if side == "right":
        g = solve(a, b, c)
        sigma = c.conj().T @ g @ c
    else:
        g = solve(a, c, b)
        sigma = b.conj().T @ g @ b
    return SelfEnergy(energy=e, sigma=sigma)


def transmission_at(e, h_d, s_d, sigma_l, sigma_r, eta: float = DEFAULT_ETA):
    """Landauer transmission T = Tr[Gamma_L G Gamma_R G^dag] at one energy.

    ``sigma_l``/``sigma_r`` are full device-size self-energy matrices.
    """
    n = h_d.shape[0]
    z = (e + 1j * eta)
    try:
        g = np.linalg.inv(z * s_d - h_d - sigma_l - sigma_r)
    except np.linalg.LinAlgError as exc:
        raise TransportError(
            f"singular Green function at E={e}; eta={eta} too small"
        ) from exc
    gamma_l = 1j * (sigma_l - sigma_l.conj().T)
    gamma_r = 1j * (sigma_r - sigma_r.conj().T)
    t = np.trace(gamma_l @ g @ gamma_r @ g.conj().T)
    return float(t.real)


def fermi(x):
    """Fermi function 1/(1 + exp(x)), overflow-safe."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x > 0
    out[pos] = np.exp(-x[pos]) / (1.0 + np.exp(-x[pos]))
    out[~pos] = 1.0 / (1.0 + np.exp(x[~pos]))
    return out if out.ndim else float(out)


def fermi_occupation(e, mu: float, temperature: float):
    """Occupation at energy ``e`` for chemical potential and temperature.

    Zero temperature is the analytic step with f = 1/2 at e == mu.
    """
    e = np.asarray(e, dtype=float)
    if temperature == 0.0:
        out = np.where(e < mu, 1.0, np.where(e > mu, 0.0, 0.5))
        return out if out.ndim else float(out)
    return fermi((e - mu) / (KB_EV * temperature))


def _require_coverage(spec: TransmissionSpectrum, lo: float, hi: float, what: str):
    if spec.energies[0] > lo + 1e-12 or spec.energies[-1] < hi - 1e-12:
        raise TransportError(
            f"spectrum [{spec.energies[0]:.3f}, {spec.energies[-1]:.3f}] eV "
            f"does not cover the {what} window [{lo:.3f}, {hi:.3f}] eV"
        )


def conductance(spec: TransmissionSpectrum, e_f: float,
                temperature: float) -> float:
    """Linear-response conductance G = G0 int T(E) (-df/dE) dE, in siemens.

    At zero temperature this is G0 T(e_f) exactly.
    """
    if temperature == 0.0:
        return G0_SIEMENS * spec.at(e_f)
    kt = KB_EV * temperature
    _require_coverage(spec, e_f - 10 * kt, e_f + 10 * kt, "thermal")
    grid = _refine_near(spec.energies, [e_f], kt)
    t = np.interp(grid, spec.energies, spec.values)
    x = (grid - e_f) / kt
    weight = fermi(x) * fermi(-x) / kt
    return float(G0_SIEMENS * np.trapezoid(t * weight, grid))


def _refine_near(energies, centers, kt, width: float = 10.0, per_kt: int = 8):
    extra = [energies]
    for c in centers:
        lo = max(c - width * kt, energies[0])
        hi = min(c + width * kt, energies[-1])
        n = max(int((hi - lo) / kt * per_kt), 16)
        extra.append(np.linspace(lo, hi, n))
    return np.unique(np.concatenate(extra))


def landauer_current(spec: TransmissionSpectrum, mu_l: float, mu_r: float,
                     temperature: float) -> float:
    """Two-terminal current I = (2e/h) int T(E) [f_L - f_R] dE, in amperes."""
    if mu_l == mu_r:
        return 0.0
    if temperature == 0.0:
        lo, hi = min(mu_l, mu_r), max(mu_l, mu_r)
        _require_coverage(spec, lo, hi, "bias")
        grid = np.unique(np.concatenate([
            spec.energies[(spec.energies > lo) & (spec.energies < hi)],
            [lo, hi],
        ]))
        t = np.interp(grid, spec.energies, spec.values)
        integral = float(np.trapezoid(t, grid))
        return G0_SIEMENS * integral * (1.0 if mu_l > mu_r else -1.0)
    kt = KB_EV * temperature
    lo = min(mu_l, mu_r) - 10 * kt
    hi = max(mu_l, mu_r) + 10 * kt
    _require_coverage(spec, lo, hi, "bias")
    grid = _refine_near(spec.energies, [mu_l, mu_r], kt)
    t = np.interp(grid, spec.energies, spec.values)
    occ = fermi_occupation(grid, mu_l, temperature) - fermi_occupation(
        grid, mu_r, temperature
    )
    return float(G0_SIEMENS * np.trapezoid(t * occ, grid))


def mulliken(density, s, atom_of, shell_of=None):
    """Mulliken populations m_mu = sum_{i in mu} sum_j D_ij S_ij.

    ``density`` is one matrix or a per-spin list; returns (per-atom totals,
    {(atom, shell) -> per-spin tuple}) when ``shell_of`` is given, else just
    the per-atom array.
    """
    mats = density if isinstance(density, (list, tuple)) else [density]
    atom_of = np.asarray(atom_of)
    n_atoms = int(atom_of.max()) + 1 if len(atom_of) else 0
    totals = np.zeros(n_atoms)
    shells: dict = {}
    for sigma, d in enumerate(mats):
        per_orbital = np.real(np.einsum("ij,ji->i", d, s))
        np.add.at(totals, atom_of, per_orbital)
        if shell_of is not None:
            for io, q in enumerate(per_orbital):
                key = (int(atom_of[io]), int(shell_of[io]))
                cur = shells.setdefault(key, [0.0] * len(mats))
                cur[sigma] += q
    if shell_of is None:
        return totals
    return totals, {k: tuple(v) for k, v in shells.items()}


def negf_density(h_d, s_d, sigma_l_of, sigma_r_of, mu_l, mu_r, temperature,
                 energies, eta: float = DENSITY_ETA, spin_degeneracy=2.0,
                 max_quadrature_error: float = 1e-4, max_depth: int = 24):
    """Real-axis NEGF density matrix.

    D = int dE/2pi [G (Gamma_L + eta S) G^dag f_L + G (Gamma_R + eta S) G^dag f_R]

    The eta S terms split the residual broadening democratically between the
    leads so bound states (Gamma = 0) acquire their equilibrium occupation.
    ``energies`` provides the initial quadrature knots; intervals are
    bisected adaptively (Simpson control on the electron count) until the
    estimated error is below ``max_quadrature_error`` electrons, else an
    error is raised.
    """
    energies = np.asarray(energies, dtype=float)
    if len(energies) < 8:
        raise TransportError("density grid too coarse")
    cache: dict = {}

    def integrand(e: float) -> np.ndarray:
        val = cache.get(e)
        if val is not None:
            return val
        sl = sigma_l_of(e)
        sr = sigma_r_of(e)
        g = np.linalg.inv((e + 1j * eta) * s_d - h_d - sl - sr)
        gl = 1j * (sl - sl.conj().T) + eta * s_d
        gr = 1j * (sr - sr.conj().T) + eta * s_d
        f_l = fermi_occupation(e, mu_l, temperature)
        f_r = fermi_occupation(e, mu_r, temperature)
        val = (f_l * (g @ gl @ g.conj().T) + f_r * (g @ gr @ g.conj().T)) / (
            2.0 * math.pi
        )
        cache[e] = val
        return val

    def electron_measure(mat) -> float:
        return abs(float(np.real(np.trace(mat @ s_d))))

    span = energies[-1] - energies[0]
    total = np.zeros_like(h_d, dtype=complex)
    unresolved = 0.0
    # stack of (a, b, f(a), f(m), f(b), depth)
    stack = []
    for a, b in zip(energies[:-1], energies[1:]):
        m = 0.5 * (a + b)
        stack.append((a, b, integrand(a), integrand(m), integrand(b), 0))
    while stack:
        a, b, fa, fm, fb, depth = stack.pop()
        h = b - a
        simpson = (h / 6.0) * (fa + 4.0 * fm + fb)
        lm, rm = 0.5 * (a + (a + b) / 2), 0.5 * ((a + b) / 2 + b)
        flm, frm = integrand(lm), integrand(rm)
        m = 0.5 * (a + b)
        fine = (h / 12.0) * (fa + 4.0 * flm + 2.0 * fm + 4.0 * frm + fb)
        err = electron_measure(fine - simpson) / 15.0
        # Richardson understates the error on barely-resolved Lorentzian
        # peaks: keep a generous safety margin per interval
        tol_here = max_quadrature_error * max(h / span, 1e-12) * 0.05
        if err < tol_here or depth >= max_depth:
            total += fine + (fine - simpson) / 15.0
            if depth >= max_depth:
                unresolved += err
        else:
            stack.append((a, m, fa, flm, fm, depth + 1))
            stack.append((m, b, fm, frm, fb, depth + 1))
    if unresolved > max_quadrature_error:
        raise TransportError(
            f"density quadrature error estimate {unresolved:.2e} electrons "
            f"exceeds {max_quadrature_error}; refine the energy grid"
        )
    d = spin_degeneracy * total
    return 0.5 * (d + d.conj().T)


class DeviceGreens:
    """NEGF driver for one partitioned device at fixed lead conditions.

    ``lead_shifts`` are uniform potential-energy offsets (eV) applied to the
    left/right electrode blocks; ``v_edge`` per side gives the device-side
    seam potentials used to shift the electrode-device coupling
    consistently with the Hartree convention.
    """

    def __init__(self, part: BlockPartition, h_d=None,
                 lead_shifts=(0.0, 0.0), v_atoms=None,
                 eta: float = DEFAULT_ETA, method: str = "recursion"):
        self.part = part
        self.h_d = part.h_d if h_d is None else h_d
        self.s_d = part.s_d
        self.eta = eta
        self.method = method
        self.lead_shifts = tuple(float(x) for x in lead_shifts)
        self.n = self.h_d.shape[0]
        if v_atoms is None:
            self._v_orb = None
        else:
            self._v_orb = np.asarray(v_atoms, dtype=float)[part.basis_d.atom]
        self._g_cache: dict = {}

    def update_device(self, h_d, v_atoms=None) -> None:
        """Swap the device Hamiltonian/potential, keeping the lead caches.

        Valid across SCF iterations at fixed lead blocks and shifts: the
        surface Green's functions are untouched, only the seam coupling is
        rebuilt from the new edge potentials.
        """
        self.h_d = h_d
        if v_atoms is None:
            self._v_orb = None
        else:
            self._v_orb = np.asarray(v_atoms, dtype=float)[self.part.basis_d.atom]

    def _side(self, side: str):
        if side == "left":
            v = self.part.left_v_orb
            if v is None:
                v = np.zeros(len(self.part.left_map))
            return self.part.left, self.part.left_map, self.lead_shifts[0], v
        v = self.part.right_v_orb
        if v is None:
            v = np.zeros(len(self.part.right_map))
        return self.part.right, self.part.right_map, self.lead_shifts[1], v

    def _surface_g(self, e: float, side: str, eta: float) -> np.ndarray:
        key = (side, float(e), float(eta))
        g = self._g_cache.get(key)
        if g is not None:
            return g
        (h00, s00, h01, s01), _omap, delta, _v = self._side(side)
        z = e + 1j * eta
        a = z * s00 - (h00 + delta * s00)
        b = z * s01 - (h01 + delta * s01)             # lead cell n -> n+1
        c = z * s01.T - (h01 + delta * s01).conj().T  # lead cell n+1 -> n
        solve = _surface_decimation if self.method == "recursion" else _surface_direct
        g = solve(a, b, c) if side == "right" else solve(a, c, b)
        self._g_cache[key] = g
        return g

    def sigma(self, e: float, side: str, eta=None) -> np.ndarray:
        """Full device-size retarded self-energy of one lead.

        The lead blocks (which already carry the electrode's own Hartree
        potential) are shifted uniformly by the side's alignment offset; in
        the seam coupling the device-side potential replaces the electrode
        one, per the H += (V_i+V_j)/2 S convention.
        """
        eta = self.eta if eta is None else eta
        (h00, s00, h01, s01), omap, delta, v_elec = self._side(side)
        g = self._surface_g(e, side, eta)
        z = e + 1j * eta
        if self._v_orb is None:
            v_dev = v_elec + delta
        else:
            v_dev = self._v_orb[omap]
        # device-side correction: swap the electrode potential for the
        # actual device-edge potential on the device column/row of h01
        corr = 0.5 * (delta + v_dev - v_elec)
        # sigma = tau^dag g tau keeps the broadening positive semidefinite
        if side == "right":
            # device last slab plays cell -1 of the right-infinite lead
            seam = h01 + corr[:, None] * s01      # device x lead
            tau = z * s01.T - seam.T              # lead x device
        else:
            # device first slab plays cell 0 right of the left-infinite lead
            seam = h01 + corr[None, :] * s01      # lead x device
            tau = z * s01 - seam
        sigma_small = tau.conj().T @ g @ tau
        sigma = np.zeros((self.n, self.n), dtype=complex)
        sigma[np.ix_(omap, omap)] = sigma_small
        return sigma

    def transmission(self, e: float) -> float:
        sl = self.sigma(e, "left")
        sr = self.sigma(e, "right")
        return transmission_at(e, self.h_d, self.s_d, sl, sr, eta=self.eta)

    def spectrum(self, energies, energy_zero: float = 0.0) -> TransmissionSpectrum:
        """T(E) on a grid given relative to ``energy_zero`` (absolute eV)."""
        values = np.array([self.transmission(energy_zero + e) for e in energies])
        return TransmissionSpectrum(
            energies=np.asarray(energies, dtype=float), values=values,
            energy_zero=energy_zero, eta=self.eta,
        )

    def density(self, mu_l, mu_r, temperature, energies,
                eta: float = DENSITY_ETA, spin_degeneracy=2.0) -> np.ndarray:
        return negf_density(
            self.h_d, self.s_d,
            lambda e: self.sigma(e, "left", eta=eta),
            lambda e: self.sigma(e, "right", eta=eta),
            mu_l, mu_r, temperature, energies,
            eta=eta, spin_degeneracy=spin_degeneracy,
        )
