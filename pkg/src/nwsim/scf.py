"""Self-consistent loops: bulk wires, two-probe devices, total energy.

The cycle couples density -> Mulliken populations -> Gaussian charges ->
Poisson -> onsite Hartree correction -> new density, mixing populations
linearly (optionally Pulay-accelerated) until max |dm| falls below the
tolerance.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.linalg as sla

from . import electrostatics as es
from .geometry import AtomicStructure, DeviceStructure, wrap
from .hamiltonian import OperatorPair, TightBindingModel, partition
from .transport import DeviceGreens, electrode_bands, mulliken
from .units import ANGSTROM_BOHR, KB_EV

__all__ = [
    "SCFError",
    "SCFSettings",
    "SCFState",
    "EnergyBreakdown",
    "fermi_search",
    "bulk_scf",
    "device_scf",
    "total_energy",
    "pair_potential_energy",
    "save_checkpoint",
    "load_checkpoint",
]


class SCFError(RuntimeError):
    pass


@dataclass(frozen=True)
class SCFSettings:
    mixing: float = 0.1
    tolerance: float = 1e-4            # electrons, max |dm| per atom
    max_iterations: int = 200
    temperature: float = 300.0         # K
    k_points: int = 100                # transport-axis sampling (bulk)
    mesh_cutoff: float = 20.0          # Hartree
    eta_density: float = 1e-3          # eV
    density_knots: int = 121
    density_below_bottom: float = 15.0  # eV of tail window under the bands
    pulay_depth: int = 0               # 0 = plain linear mixing
    pulay_start: int = 5
    poisson_tol: float = 1e-8

    def __post_init__(self):
        if not 0.0 < self.mixing <= 1.0:
            raise SCFError("mixing factor must be in (0, 1]")
        if self.tolerance <= 0:
            raise SCFError("tolerance must be positive")
        if self.max_iterations < 1:
            raise SCFError("need at least one iteration")

    def digest(self) -> str:
        payload = json.dumps(
            {k: getattr(self, k) for k in self.__dataclass_fields__},
            sort_keys=True,
        )
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass
class SCFState:
    converged: bool
    history: list
    fermi_levels: tuple              # bulk: (e_f,); device: (mu_L, mu_R)
    populations: np.ndarray
    shell_populations: dict
    charge_model: es.ChargeModel | None
    v_field: es.ScalarField | None
    v_atoms: np.ndarray | None
    h0_energy: float
    settings_digest: str = ""
    greens: DeviceGreens | None = None
    energy_zero: float = 0.0         # device average Fermi level
    delta_n: es.ScalarField | None = None
    iterations: int = 0

    @property
    def fermi_level(self) -> float:
        return self.fermi_levels[0]


@dataclass(frozen=True)
class EnergyBreakdown:
    band: float          # sum_ij D_ij H0_ij
    hartree: float       # self energy of the induced charge
    external: float      # induced charge in the external field
    spin: float
    pair: float

    @property
    def total(self) -> float:
        return self.band + self.hartree + self.external + self.spin + self.pair


def fermi_search(levels, n_electrons: float, temperature: float,
                 weights=None, spin_degeneracy: float = 2.0,
                 tol: float = 1e-10) -> float:
    """Chemical potential filling ``n_electrons`` into the level set.

    Bisection on N(mu) = sum_i w_i g f((e_i - mu)/kT) to ``tol`` electrons;
    at zero temperature the midgap value is returned when the filling lands
    between levels.
    """
    levels = np.asarray(levels, dtype=float).ravel()
    if weights is None:
        weights = np.ones_like(levels)
    else:
        weights = np.asarray(weights, dtype=float).ravel()
    capacity = spin_degeneracy * weights.sum()
    if not 0.0 <= n_electrons <= capacity + 1e-9:
        raise SCFError(
            f"cannot place {n_electrons} electrons in capacity {capacity}"
        )
    order = np.argsort(levels)
    levels = levels[order]
    weights = weights[order]

    def zero_t_mu():
        cumulative = np.cumsum(spin_degeneracy * weights)
        idx = int(np.searchsorted(cumulative, n_electrons - 1e-12))
        if idx >= len(levels):
            return float(levels[-1])
        if abs(cumulative[idx] - n_electrons) < 1e-12 and idx + 1 < len(levels):
            return 0.5 * float(levels[idx] + levels[idx + 1])
        return float(levels[idx])

    if temperature == 0.0:
        return zero_t_mu()
    kt = KB_EV * temperature

    def count(mu):
        x = (levels - mu) / kt
        from .transport import fermi

        return float(spin_degeneracy * np.sum(weights * fermi(x)))

    # inside a gap the count is numerically flat: prefer the midgap value
    # when it already satisfies the filling
    mu0 = zero_t_mu()
    if abs(count(mu0) - n_electrons) < tol:
        return mu0

    lo = float(levels[0]) - 60.0 * kt
    hi = float(levels[-1]) + 60.0 * kt
    mid = 0.5 * (lo + hi)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if count(mid) < n_electrons:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-13 * max(1.0, abs(mid)):
            break
    mid = 0.5 * (lo + hi)
    if abs(count(mid) - n_electrons) > tol:
        raise SCFError(
            f"Fermi search missed the target by {count(mid) - n_electrons:.2e}"
        )
    return mid


def _atom_widths(structure: AtomicStructure, params: dict) -> np.ndarray:
    """Gaussian width per atom from occupation-weighted shell shifts."""
    alphas = np.empty(len(structure))
    for i, z in enumerate(structure.numbers):
        el = params[int(z)]
        occ = np.array([sh.occupation for sh in el.shells])
        shifts = np.array([sh.hartree_shift for sh in el.shells])
        if occ.sum() > 0:
            u_eff = float((occ * shifts).sum() / occ.sum())
        else:
            u_eff = float(shifts.mean())
        alphas[i] = es.width_from_shift(u_eff)
    return alphas


def _reference_populations(structure: AtomicStructure, params: dict) -> np.ndarray:
    return np.array(
        [
            sum(sh.occupation for sh in params[int(z)].shells)
            for z in structure.numbers
        ]
    )


class _Mixer:
    """Linear mixing with optional Pulay (DIIS) acceleration."""

    def __init__(self, settings: SCFSettings):
        self.beta = settings.mixing
        self.depth = settings.pulay_depth
        self.start = settings.pulay_start
        self.inputs: list = []
        self.residuals: list = []
        self.iteration = 0

    def step(self, m_in: np.ndarray, m_out: np.ndarray) -> np.ndarray:
        self.iteration += 1
        residual = m_out - m_in
        if self.depth > 0:
            self.inputs.append(m_in.copy())
            self.residuals.append(residual.copy())
            self.inputs = self.inputs[-self.depth:]
            self.residuals = self.residuals[-self.depth:]
            if self.iteration > self.start and len(self.residuals) >= 2:
                n = len(self.residuals)
                b = np.empty((n + 1, n + 1))
                b[-1, :] = -1.0
                b[:, -1] = -1.0
                b[-1, -1] = 0.0
                for i in range(n):
                    for j in range(n):
                        b[i, j] = float(self.residuals[i] @ self.residuals[j])
                rhs = np.zeros(n + 1)
                rhs[-1] = -1.0
                try:
                    coeff = np.linalg.solve(b, rhs)[:n]
                    mixed = sum(
                        c * (mi + self.beta * ri)
                        for c, mi, ri in zip(coeff, self.inputs, self.residuals)
                    )
                    return np.asarray(mixed)
                except np.linalg.LinAlgError:
                    pass
        return m_in + self.beta * residual


def _bulk_hartree(structure, params, settings, delta_m, regions=()):
    """Poisson solve for a periodic wire; returns (v_field, v_atoms, rho)."""
    grid = es.grid_from_cutoff(
        structure.cell, settings.mesh_cutoff, periodic=(False, False, True)
    )
    positions = wrap(structure).positions * ANGSTROM_BOHR
    cm = es.ChargeModel(positions, delta_m, _atom_widths(structure, params))
    rho = es.deposit_gaussians(cm, grid)
    import warnings as _w

    with _w.catch_warnings():
        _w.simplefilter("ignore")
        v = es.solve_multigrid(
            rho, bc=("neumann", "neumann", "periodic"), regions=regions,
            tol=settings.poisson_tol,
        )
    v_atoms = es.sample_at_atoms(v, wrap(structure).positions)
    return v, v_atoms, rho, cm


def bulk_scf(structure: AtomicStructure, model: TightBindingModel,
             settings: SCFSettings = SCFSettings(), charge: float = 0.0,
             initial: SCFState | None = None) -> SCFState:
    """Self-consistent loop for a wire periodic along the transport axis.

    ``charge`` adds electrons (positive = extra electrons) on top of the
    neutral valence count, compensated by a uniform background in the
    periodic Poisson solve.
    """
    params = model.params
    basis, blocks = model.real_space_blocks(
        structure, model.n_images_for(structure)
    )
    nk = max(1, settings.k_points)
    ks = -math.pi + 2.0 * math.pi * (np.arange(nk) + 0.5) / nk
    weights = np.full(nk, 1.0 / nk)

    q0 = _reference_populations(structure, params)
    n_target = float(q0.sum() + charge)
    m_in = q0.copy() if initial is None else initial.populations.copy()
    mixer = _Mixer(settings)

    history = []
    converged = False
    v_field = v_atoms = rho = cm = None
    fermi_level = 0.0
    m_out = m_in
    shell_pops: dict = {}
    h0_energy = 0.0

    for iteration in range(1, settings.max_iterations + 1):
        delta_m = m_in - q0
        if np.abs(delta_m).max() > 1e-14:
            v_field, v_atoms, rho, cm = _bulk_hartree(
                structure, params, settings, delta_m
            )
        else:
            v_atoms = np.zeros(len(structure))

        m_acc = np.zeros(len(structure))
        shell_acc: dict = {}
        levels, level_weights, per_k = [], [], []
        for k, w in zip(ks, weights):
            op = model.bloch_pair(blocks, basis, k)
            h = op.h[0] + 0.5 * (
                v_atoms[basis.atom][:, None] + v_atoms[basis.atom][None, :]
            ) * op.s
            try:
                eps_k, c_k = sla.eigh(h, op.s)
            except np.linalg.LinAlgError as exc:
                raise SCFError(f"S(k) not positive definite at k={k}") from exc
            levels.append(eps_k)
            level_weights.append(np.full(len(eps_k), w))
            per_k.append((eps_k, c_k, op))
        levels = np.concatenate(levels)
        level_weights = np.concatenate(level_weights)
        fermi_level = fermi_search(
            levels, n_target, settings.temperature, weights=level_weights
        )

        h0_energy = 0.0
        for (eps_k, c_k, op), w in zip(per_k, weights):
            from .transport import fermi_occupation

            occ = 2.0 * fermi_occupation(
                eps_k, fermi_level, settings.temperature
            )
            d_k = (c_k * occ) @ c_k.conj().T
            pops, shells = mulliken([d_k], op.s, basis.atom, basis.shell)
            m_acc += w * pops
            for key, val in shells.items():
                shell_acc[key] = shell_acc.get(key, 0.0) + w * val[0]
            h0_energy += w * float(
                np.real(np.einsum("ij,ji->", d_k, op.h[0]))
            )
        m_out = m_acc
        shell_pops = {k: (v,) for k, v in shell_acc.items()}

        delta = float(np.abs(m_out - m_in).max())
        history.append(delta)
        if delta < settings.tolerance:
            converged = True
            break
        m_in = mixer.step(m_in, m_out)

    final_m = m_out
    delta_m = final_m - q0
    if np.abs(delta_m).max() > 1e-14 or charge != 0.0:
        v_field, v_atoms, rho, cm = _bulk_hartree(
            structure, params, settings, delta_m
        )
    else:
        grid = es.grid_from_cutoff(
            structure.cell, settings.mesh_cutoff, periodic=(False, False, True)
        )
        v_field = es.ScalarField(grid, np.zeros(grid.shape))
        v_atoms = np.zeros(len(structure))
        rho = es.ScalarField(grid, np.zeros(grid.shape))
        cm = es.ChargeModel(
            wrap(structure).positions * ANGSTROM_BOHR,
            np.zeros(len(structure)),
            _atom_widths(structure, params),
        )

    return SCFState(
        converged=converged,
        history=history,
        fermi_levels=(fermi_level,),
        populations=final_m,
        shell_populations=shell_pops,
        charge_model=cm,
        v_field=v_field,
        v_atoms=v_atoms,
        h0_energy=h0_energy,
        settings_digest=settings.digest(),
        delta_n=rho,
        iterations=len(history),
    )


def _electrode_plane(state: SCFState) -> np.ndarray:
    """Transport-averaged potential plane of a converged electrode (eV)."""
    return state.v_field.values.mean(axis=2)


def _blocks_band_bottom(blocks, n_k: int = 64) -> float:
    h0, s0, h1, s1 = blocks
    bands = electrode_bands(h0, s0, h1, s1, np.linspace(0, math.pi, n_k))
    return bands.range()[0]


def device_scf(device: DeviceStructure, model: TightBindingModel,
               settings: SCFSettings = SCFSettings(), bias: float = 0.0,
               electrode_states: tuple | None = None,
               initial: SCFState | None = None) -> SCFState:
    """Two-probe self-consistency under gate regions and drain bias.

    ``bias`` is the drain voltage in volt: lead chemical potentials sit at
    mu_avg +- bias/2 (left +), and the transport-axis Dirichlet boundary
    planes acquire the same offsets on top of the converged electrode
    potentials. ``initial`` warm-starts the population mixing.
    """
    params = model.params
    central = wrap(device.central)
    q_l, q_r = device.electrode_charges

    if electrode_states is None:
        left_state = bulk_scf(device.left_electrode, model, settings, charge=q_l)
        right_state = bulk_scf(device.right_electrode, model, settings, charge=q_r)
    else:
        left_state, right_state = electrode_states
    if not (left_state.converged and right_state.converged):
        raise SCFError("electrode SCF did not converge")

    e_f_l = left_state.fermi_level
    e_f_r = right_state.fermi_level
    mu_avg = 0.5 * (e_f_l + e_f_r)
    delta_l = mu_avg + 0.5 * bias - e_f_l
    delta_r = mu_avg - 0.5 * bias - e_f_r
    mu_l = mu_avg + 0.5 * bias
    mu_r = mu_avg - 0.5 * bias

    part = partition(
        device, model,
        electrode_potentials=(left_state.v_atoms, right_state.v_atoms),
    )
    basis = part.basis_d
    s_d = part.s_d
    h0_d = part.h_d

    grid = es.grid_from_cutoff(
        central.cell, settings.mesh_cutoff, periodic=(False, False, False)
    )
    plane_l = _electrode_plane(left_state)
    plane_r = _electrode_plane(right_state)
    if plane_l.shape != grid.shape[:2] or plane_r.shape != grid.shape[:2]:
        raise SCFError(
            "electrode and device grids disagree in the transverse plane; "
            "use equal cell cross sections and mesh cutoffs"
        )
    dirichlet = {
        (2, "lo"): plane_l + delta_l,
        (2, "hi"): plane_r + delta_r,
    }
    eps_field = es.dielectric_field(grid, device.regions, central.cell)

    bottom = min(_blocks_band_bottom(part.left) + delta_l,
                 _blocks_band_bottom(part.right) + delta_r)
    kt = KB_EV * max(settings.temperature, 1.0)
    e_lo = bottom - settings.density_below_bottom
    e_hi = max(mu_l, mu_r) + max(10.0 * kt, 1.0)
    knots = np.linspace(e_lo, e_hi, settings.density_knots)

    q0 = _reference_populations(central, params)
    # boundary slabs are electrode copies: their Mulliken sums would miss
    # the cross-seam overlap terms, so they stay pinned to the converged
    # electrode populations (which also anchors the seam electrostatics)
    pinned_values = np.full(len(central), np.nan)
    pinned_values[part.left_atoms] = left_state.populations
    pinned_values[part.right_atoms] = right_state.populations
    pinned = ~np.isnan(pinned_values)

    m_in = q0.copy() if initial is None else initial.populations.copy()
    m_in[pinned] = pinned_values[pinned]
    mixer = _Mixer(settings)
    positions = central.positions * ANGSTROM_BOHR
    widths = _atom_widths(central, params)

    history = []
    converged = False
    v_field = None
    v_atoms = np.zeros(len(central))
    m_out = m_in
    shell_pops: dict = {}
    h0_energy = 0.0
    greens = DeviceGreens(part, lead_shifts=(delta_l, delta_r))
    rho = None
    cm = None

    for iteration in range(1, settings.max_iterations + 1):
        delta_m = m_in - q0
        cm = es.ChargeModel(positions, delta_m, widths)
        rho = es.deposit_gaussians(cm, grid)
        v_field = es.solve_multigrid(
            rho, eps=eps_field, bc=("neumann", "neumann", "dirichlet"),
            regions=device.regions, dirichlet_values=dirichlet,
            tol=settings.poisson_tol,
        )
        v_atoms = es.sample_at_atoms(v_field, central.positions)

        h_d = h0_d + 0.5 * (
            v_atoms[basis.atom][:, None] + v_atoms[basis.atom][None, :]
        ) * s_d
        greens.update_device(h_d, v_atoms)
        d = greens.density(
            mu_l, mu_r, settings.temperature, knots, eta=settings.eta_density
        )
        m_out, shell_map = mulliken([d], s_d, basis.atom, basis.shell)
        m_out[pinned] = pinned_values[pinned]
        shell_pops = shell_map
        h0_energy = float(np.real(np.einsum("ij,ji->", d, h0_d)))

        delta = float(np.abs(m_out - m_in).max())
        history.append(delta)
        if delta < settings.tolerance:
            converged = True
            break
        m_in = mixer.step(m_in, m_out)

    return SCFState(
        converged=converged,
        history=history,
        fermi_levels=(mu_l, mu_r),
        populations=m_out,
        shell_populations=shell_pops,
        charge_model=cm,
        v_field=v_field,
        v_atoms=v_atoms,
        h0_energy=h0_energy,
        settings_digest=settings.digest(),
        greens=greens,
        energy_zero=mu_avg,
        delta_n=rho,
        iterations=len(history),
    )


def pair_potential_energy(structure: AtomicStructure, table) -> float:
    """Repulsive pair energy (eV): unique pairs, minimum-image convention."""
    from .geometry import pair_distances

    if table is None or len(structure) < 2:
        return 0.0
    d = pair_distances(structure) * ANGSTROM_BOHR
    total = 0.0
    for i in range(len(structure)):
        for j in range(i + 1, len(structure)):
            total += table.pair_potential(
                int(structure.numbers[i]), int(structure.numbers[j]), d[i, j]
            )
    return total


def total_energy(state: SCFState, structure: AtomicStructure, params: dict,
                 table=None, v_ext=None) -> EnergyBreakdown:
    """Five-term energy breakdown of a converged state.

    The Hartree term is the self-energy of the induced charge; whatever part
    of the stored potential is not generated by the induced charge itself
    (gates, boundary ramps) counts as the external field.
    """
    if not state.converged:
        raise SCFError("total energy requires a converged state")
    e_band = state.h0_energy

    e_hartree = 0.0
    e_ext = 0.0
    if state.delta_n is not None and np.abs(state.delta_n.values).max() > 0:
        grid = state.delta_n.grid
        import warnings as _w

        with _w.catch_warnings():
            _w.simplefilter("ignore")
            bc = tuple(
                "periodic" if p else "dirichlet" for p in grid.periodic
            )
            v_self = es.solve_multigrid(state.delta_n, bc=bc, tol=1e-8)
        dv = grid.point_volume()
        e_hartree = 0.5 * float(
            (v_self.values * state.delta_n.values).sum() * dv
        )
        if v_ext is not None:
            e_ext = float((v_ext.values * state.delta_n.values).sum() * dv)
        elif state.v_field is not None:
            v_rest = state.v_field.values - v_self.values
            e_ext = float((v_rest * state.delta_n.values).sum() * dv)

    e_spin = 0.0
    spins = {k: v for k, v in state.shell_populations.items() if len(v) == 2}
    if spins:
        moments: dict = {}
        for (atom, shell), (up, down) in spins.items():
            moments.setdefault(atom, {})[shell] = up - down
        for atom, shell_moments in moments.items():
            w = params[int(structure.numbers[atom])].spin_split
            for l1, m1 in shell_moments.items():
                for l2, m2 in shell_moments.items():
                    e_spin += -0.5 * w[l1, l2] * m1 * m2

    e_pair = pair_potential_energy(structure, table)
    return EnergyBreakdown(
        band=e_band, hartree=e_hartree, external=e_ext, spin=e_spin,
        pair=e_pair,
    )


def save_checkpoint(state: SCFState, path) -> None:
    """JSON checkpoint for warm starts across runs."""
    doc = {
        "converged": state.converged,
        "history": list(map(float, state.history)),
        "fermi_levels": list(map(float, state.fermi_levels)),
        "populations": state.populations.tolist(),
        "h0_energy": state.h0_energy,
        "energy_zero": state.energy_zero,
        "settings_digest": state.settings_digest,
        "iterations": state.iterations,
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_checkpoint(path) -> SCFState:
    doc = json.loads(Path(path).read_text())
    return SCFState(
        converged=doc["converged"],
        history=doc["history"],
        fermi_levels=tuple(doc["fermi_levels"]),
        populations=np.array(doc["populations"]),
        shell_populations={},
        charge_model=None,
        v_field=None,
        v_atoms=None,
        h0_energy=doc["h0_energy"],
        settings_digest=doc.get("settings_digest", ""),
        energy_zero=doc.get("energy_zero", 0.0),
        iterations=doc.get("iterations", 0),
    )
