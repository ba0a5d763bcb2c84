"""Overlap/Hamiltonian assembly and principal-layer partitioning.

The tight-binding model couples orbital pairs through tabulated two-center
channels; offsite Hamiltonian elements follow the chosen weighting scheme
(proportional to overlap) or come from a Slater-Koster table directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import AtomicStructure, DeviceStructure, match_atoms, wrap
from .sktable import SlaterKosterTable, build_huckel_table
from .twocenter import sk_rotate
from .units import ANGSTROM_BOHR

__all__ = [
    "AssemblyError",
    "OrbitalBasis",
    "OperatorPair",
    "BlockPartition",
    "TightBindingModel",
    "offsite_weight",
    "assemble",
    "apply_hartree",
    "apply_spin",
    "partition",
    "dump_matrices",
]

SCHEMES = ("wolfsberg", "hoffmann", "slater-koster")
LOCALITY_TOL = 1e-10     # eV; beyond-nearest-layer couplings must vanish
PD_CHECK_MAX_ORBITALS = 200


class AssemblyError(RuntimeError):
    """Hamiltonian assembly failed (missing parameters, locality, ...)."""


@dataclass(frozen=True)
class OrbitalBasis:
    """Flat orbital index for a structure: orbital -> (atom, shell, l, m)."""

    atom: np.ndarray
    shell: np.ndarray
    l: np.ndarray
    m: np.ndarray
    onsite_energy: np.ndarray     # eV, vacuum-aligned
    beta: np.ndarray
    atom_offsets: np.ndarray      # first orbital index of each atom
    atom_numbers: np.ndarray      # element Z per atom

    def __len__(self):
        return len(self.atom)

    @property
    def n_atoms(self):
        return len(self.atom_offsets) - 1

    def atom_slice(self, i: int) -> slice:
        return slice(self.atom_offsets[i], self.atom_offsets[i + 1])


@dataclass
class OperatorPair:
    """Overlap and Hamiltonian matrices sharing one orbital basis.

    ``h`` holds one matrix per spin channel; unpolarized calculations carry a
    single channel. ``k`` is the dimensionless Bloch phase along the
    transport axis when the matrices are Bloch sums.
    """

    s: np.ndarray
    h: list
    basis: OrbitalBasis
    k: float | None = None

    def validate(self, check_pd: bool = True) -> None:
        if not np.allclose(self.s, self.s.T, atol=1e-12):
            raise AssemblyError("overlap matrix is not symmetric")
        for hm in self.h:
            if not np.allclose(hm, hm.conj().T, atol=1e-12):
                raise AssemblyError("Hamiltonian is not Hermitian")
        if check_pd and len(self.basis) <= PD_CHECK_MAX_ORBITALS:
            w = np.linalg.eigvalsh(self.s)
            if w[0] <= 0:
                raise AssemblyError(
                    f"overlap matrix not positive definite (min eig {w[0]:.3e})"
                )

    def n_spin(self) -> int:
        return len(self.h)

    def copy(self) -> "OperatorPair":
        return OperatorPair(
            self.s.copy(), [hm.copy() for hm in self.h], self.basis, self.k
        )


def offsite_weight(scheme: str, e_i: float, e_j: float, beta_i: float,
                   beta_j: float, s_ij):
    """Offsite Hamiltonian element from onsite energies and the overlap.

    wolfsberg:  H = 1/2 beta (E_i + E_j) S, beta = (beta_i + beta_j)/2
    hoffmann:   H = 1/2 (beta + a^2 + (1-beta) a^4)(E_i + E_j) S,
                a = (E_i - E_j)/(E_i + E_j)
    """
    beta = 0.5 * (beta_i + beta_j)
    esum = e_i + e_j
    if scheme == "wolfsberg":
        return 0.5 * beta * esum * s_ij
    if scheme == "hoffmann":
        if esum == 0.0:
            raise AssemblyError("Hoffmann weighting undefined for E_i + E_j = 0")
        alpha = (e_i - e_j) / esum
        return 0.5 * (beta + alpha**2 + (1.0 - beta) * alpha**4) * esum * s_ij
    raise AssemblyError(f"unknown weighting scheme {scheme!r}")


class TightBindingModel:
    """Reusable calculator: parameters + channel tables + weighting scheme."""

    def __init__(self, params: dict, scheme: str = "wolfsberg",
                 table: SlaterKosterTable | None = None,
                 max_range: float = 10.0):
        scheme = scheme.lower().replace("slaterkoster", "slater-koster")
        if scheme not in SCHEMES:
            raise AssemblyError(f"unknown scheme {scheme!r}")
        self.params = dict(params)
        self.scheme = scheme
        self.max_range = max_range
        if table is None:
            if scheme == "slater-koster":
                raise AssemblyError("Slater-Koster scheme needs a table")
            table = build_huckel_table(self.params, max_range=max_range)
        self.table = table

    def interaction_range(self) -> float:
        """Largest tabulated pair cutoff, in Angstrom."""
        return self.table.max_cutoff() / ANGSTROM_BOHR

    def basis(self, structure: AtomicStructure) -> OrbitalBasis:
        atom, shell, ls, ms, energy, beta = [], [], [], [], [], []
        offsets = [0]
        for ia, z in enumerate(structure.numbers):
            if z not in self.params:
                raise AssemblyError(
                    f"no parameters for element Z={z} (atom {ia})"
                )
            el = self.params[z]
            aligned = el.aligned_energies()
            for isq, sh in enumerate(el.shells):
                for m in range(2 * sh.l + 1):
                    atom.append(ia)
                    shell.append(isq)
                    ls.append(sh.l)
                    ms.append(m)
                    energy.append(aligned[isq])
                    beta.append(el.beta)
            offsets.append(len(atom))
        return OrbitalBasis(
            atom=np.array(atom),
            shell=np.array(shell),
            l=np.array(ls),
            m=np.array(ms),
            onsite_energy=np.array(energy),
            beta=np.array(beta),
            atom_offsets=np.array(offsets),
            atom_numbers=np.array(structure.numbers),
        )

    def _pair_block(self, z1, z2, el1, el2, disp_bohr):
        """(S, H) blocks between the orbital sets of two atoms."""
        d = float(np.linalg.norm(disp_bohr))
        direction = disp_bohr / d
        n1 = sum(2 * sh.l + 1 for sh in el1.shells)
        n2 = sum(2 * sh.l + 1 for sh in el2.shells)
        sblk = np.zeros((n1, n2))
        hblk = np.zeros((n1, n2))
        e1 = el1.aligned_energies()
        e2 = el2.aligned_energies()
        row = 0
        for i1, sh1 in enumerate(el1.shells):
            col = 0
            for i2, sh2 in enumerate(el2.shells):
                l1, l2 = sh1.l, sh2.l
                s_comp = np.array([
                    self.table.interpolate(z1, z2, l1, l2, m, d, "S")
                    for m in range(min(l1, l2) + 1)
                ])
                if self.scheme == "slater-koster":
                    h_comp = np.array([
                        self.table.interpolate(z1, z2, l1, l2, m, d, "H")
                        for m in range(min(l1, l2) + 1)
                    ])
                for m1 in range(2 * l1 + 1):
                    for m2 in range(2 * l2 + 1):
                        sval = sk_rotate(l1, m1, l2, m2, direction, s_comp)
                        sblk[row + m1, col + m2] = sval
                        if self.scheme == "slater-koster":
                            hblk[row + m1, col + m2] = sk_rotate(
                                l1, m1, l2, m2, direction, h_comp
                            )
                        else:
                            hblk[row + m1, col + m2] = offsite_weight(
                                self.scheme, e1[i1], e2[i2],
                                el1.beta, el2.beta, sval,
                            )
                col += 2 * l2 + 1
            row += 2 * l1 + 1
        return sblk, hblk

    def real_space_blocks(self, structure: AtomicStructure, n_images: int):
        """Coupling blocks (S_n, H_n) of cell 0 to cell n along c, n >= 0.

        Transverse axes use the minimum-image convention (wires carry vacuum
        there); the onsite rule S = 1, H = E_i applies within each atom.
        """
        basis = self.basis(structure)
        norb = len(basis)
        cell = structure.cell.vectors
        cvec = cell[2]
        pos = wrap(structure).positions
        frac = pos @ np.linalg.inv(cell)
        cutoff_bohr = {}
        blocks = []
        for n in range(n_images + 1):
            s_n = np.zeros((norb, norb))
            h_n = np.zeros((norb, norb))
            if n == 0:
                np.fill_diagonal(s_n, 1.0)
                h_n[np.diag_indices(norb)] = basis.onsite_energy
            for ia in range(len(structure)):
                za = structure.numbers[ia]
                for ja in range(len(structure)):
                    if n == 0 and ja < ia:
                        continue
                    zb = structure.numbers[ja]
                    if n == 0 and ja == ia:
                        continue
                    dfrac = frac[ja] - frac[ia]
                    shift = np.array([round(dfrac[0]), round(dfrac[1]), 0.0])
                    disp = (dfrac - shift) @ cell + n * cvec
                    d_ang = np.linalg.norm(disp)
                    key = (za, zb)
                    if key not in cutoff_bohr:
                        cutoff_bohr[key] = self.table.cutoff(za, zb)
                    if d_ang * ANGSTROM_BOHR >= cutoff_bohr[key]:
                        continue
                    sblk, hblk = self._pair_block(
                        za, zb, self.params[za], self.params[zb],
                        disp * ANGSTROM_BOHR,
                    )
                    ra, rb = basis.atom_slice(ia), basis.atom_slice(ja)
                    s_n[ra, rb] += sblk
                    h_n[ra, rb] += hblk
                    if n == 0:
                        s_n[rb, ra] += sblk.T
                        h_n[rb, ra] += hblk.T
            blocks.append((s_n, h_n))
        return basis, blocks

    def bloch_pair(self, blocks, basis, k: float) -> OperatorPair:
        """Bloch sum of real-space blocks at dimensionless phase k."""
        s0, h0 = blocks[0]
        s = s0.astype(complex).copy()
        h = h0.astype(complex).copy()
        for n in range(1, len(blocks)):
            sn, hn = blocks[n]
            phase = np.exp(1j * k * n)
            s += sn * phase + sn.T * np.conj(phase)
            h += hn * phase + hn.T * np.conj(phase)
        if abs(k) < 1e-14 or abs(abs(k) - math.pi) < 1e-14:
            s, h = s.real, h.real
        return OperatorPair(s=(s + s.T.conj()) / 2 if np.iscomplexobj(s) else s,
                            h=[(h + h.conj().T) / 2], basis=basis, k=k)

    def cluster_pair(self, structure: AtomicStructure) -> OperatorPair:
        """Open-boundary (finite along c) operator pair."""
        basis, blocks = self.real_space_blocks(structure, n_images=0)
        s0, h0 = blocks[0]
        return OperatorPair(s=s0, h=[h0], basis=basis, k=None)

    def n_images_for(self, structure: AtomicStructure) -> int:
        c_len = float(np.linalg.norm(structure.cell.vectors[2]))
        return max(1, math.ceil(self.interaction_range() / c_len - 1e-9))


def assemble(structure: AtomicStructure, params: dict, scheme: str = "wolfsberg",
             k: float | None = None,
             table: SlaterKosterTable | None = None) -> OperatorPair:
    """One-shot overlap + Hamiltonian assembly.

    With ``k`` the structure is treated as periodic along the transport axis
    and the Bloch sum at that phase is returned; otherwise the structure is a
    finite cluster along c. Prefer a TightBindingModel when assembling
    repeatedly with the same parameters.
    """
    model = TightBindingModel(params, scheme=scheme, table=table)
    if k is None:
        op = model.cluster_pair(structure)
    else:
        if not -math.pi - 1e-12 <= k <= math.pi + 1e-12:
            raise AssemblyError("Bloch phase must lie in [-pi, pi]")
        basis, blocks = model.real_space_blocks(
            structure, model.n_images_for(structure)
        )
        op = model.bloch_pair(blocks, basis, k)
    op.validate()
    return op


def apply_hartree(op: OperatorPair, v_atoms) -> OperatorPair:
    """Add the site-resolved potential: H_ij += (V_i + V_j)/2 * S_ij."""
    v_atoms = np.asarray(v_atoms, dtype=float)
    if len(v_atoms) != op.basis.n_atoms:
        raise AssemblyError(
            f"need one potential per atom ({op.basis.n_atoms}), got {len(v_atoms)}"
        )
    v_orb = v_atoms[op.basis.atom]
    shift = 0.5 * (v_orb[:, None] + v_orb[None, :])
    return OperatorPair(
        s=op.s, h=[hm + shift * op.s for hm in op.h], basis=op.basis, k=op.k
    )


def apply_spin(op: OperatorPair, spin_populations, params: dict) -> OperatorPair:
    """Split into two spin channels from shell-resolved spin populations.

    ``spin_populations[(atom, shell)]`` = (m_up, m_down). The onsite spin
    split matrix W of each element couples the shells of one atom:
    dE_l = sum_l' W_[l,l'] (m_up - m_down)_l', and channel sigma gets
    H_ij +- S_ij (dE_i + dE_j)/2 with + for spin up.
    """
    if op.n_spin() != 1:
        raise AssemblyError("apply_spin expects an unpolarized operator pair")
    basis = op.basis
    d_e = np.zeros(len(basis))
    for ia in range(basis.n_atoms):
        el = params[int(basis.atom_numbers[ia])]
        w = el.spin_split
        if w.shape[0] != len(el.shells):
            raise AssemblyError("spin-split matrix shape mismatch")
        moments = np.zeros(len(el.shells))
        for ish in range(len(el.shells)):
            up, down = spin_populations[(ia, ish)]
            moments[ish] = up - down
        shifts = w @ moments
        sl = basis.atom_slice(ia)
        d_e[sl] = shifts[basis.shell[sl]]
    shift = 0.5 * (d_e[:, None] + d_e[None, :]) * op.s
    return OperatorPair(
        s=op.s, h=[op.h[0] + shift, op.h[0] - shift], basis=basis, k=op.k
    )


@dataclass
class BlockPartition:
    """Principal-layer blocks of a two-probe device."""

    h_d: np.ndarray
    s_d: np.ndarray
    basis_d: OrbitalBasis
    # per side: (H00, S00, H01, S01) of the periodic electrode
    left: tuple
    right: tuple
    # device orbital indices matching the electrode orbitals, per side
    left_map: np.ndarray
    right_map: np.ndarray
    left_basis: OrbitalBasis = None
    right_basis: OrbitalBasis = None
    # device atom indices of the electrode-copy slabs, electrode atom order
    left_atoms: np.ndarray = None
    right_atoms: np.ndarray = None
    # electrode Hartree potential per electrode orbital (eV)
    left_v_orb: np.ndarray = None
    right_v_orb: np.ndarray = None


def _electrode_blocks(model: TightBindingModel, electrode: AtomicStructure,
                      v_atoms=None):
    c_len = float(np.linalg.norm(electrode.cell.vectors[2]))
    reach = model.interaction_range()
    n_img = max(2, math.ceil(reach / c_len - 1e-9) + 1)
    basis, blocks = model.real_space_blocks(electrode, n_images=n_img)
    for n in range(2, len(blocks)):
        s_n, h_n = blocks[n]
        if max(np.abs(h_n).max(), np.abs(s_n).max()) > LOCALITY_TOL:
            raise AssemblyError(
                "electrode period too short for the interaction range: "
                f"layer-{n} coupling reaches {np.abs(h_n).max():.2e} eV; "
                "lengthen the electrode cell"
            )
    s0, h0 = blocks[0]
    s1, h1 = blocks[1]
    if v_atoms is not None:
        v_orb = np.asarray(v_atoms, dtype=float)[basis.atom]
        shift = 0.5 * (v_orb[:, None] + v_orb[None, :])
        h0 = h0 + shift * s0
        h1 = h1 + shift * s1     # the coupled image cell sees the same V
    else:
        v_orb = np.zeros(len(basis))
    return basis, (h0, s0, h1, s1), v_orb


def _orbital_map(basis_d: OrbitalBasis, atom_map) -> np.ndarray:
    """Device orbital indices for electrode orbitals, electrode order."""
    out = []
    for ia_elec, ia_dev in enumerate(atom_map):
        sl = basis_d.atom_slice(int(ia_dev))
        out.extend(range(sl.start, sl.stop))
    return np.array(out, dtype=int)


def partition(device: DeviceStructure, model: TightBindingModel,
              v_atoms=None, electrode_potentials=(None, None)) -> BlockPartition:
    """Extract NEGF blocks; verifies the principal-layer locality invariant.

    ``v_atoms`` optionally adds a Hartree potential (eV per central atom)
    to the device block; ``electrode_potentials`` carry the converged
    per-atom electrode potentials into the lead blocks.
    """
    central = wrap(device.central)
    op = model.cluster_pair(central)
    if v_atoms is not None:
        op = apply_hartree(op, v_atoms)
    basis_d = op.basis

    left_basis, left, left_v = _electrode_blocks(
        model, device.left_electrode, electrode_potentials[0]
    )
    right_basis, right, right_v = _electrode_blocks(
        model, device.right_electrode, electrode_potentials[1]
    )

    maps = []
    atom_maps = []
    for side, electrode in (("left", device.left_electrode),
                            ("right", device.right_electrode)):
        length = float(np.linalg.norm(electrode.cell.vectors[2]))
        c_len = float(np.linalg.norm(central.cell.vectors[2]))
        z = central.positions[:, 2]
        if side == "left":
            idx = np.nonzero(z < length - 1e-9)[0]
            shift = 0.0
        else:
            idx = np.nonzero(z >= c_len - length - 1e-9)[0]
            shift = c_len - length
        slab_pos = central.positions[idx].copy()
        slab_pos[:, 2] -= shift
        order = match_atoms(
            wrap(electrode).positions, electrode.numbers,
            slab_pos, central.numbers[idx], electrode.cell,
        )
        if order is None:
            raise AssemblyError(f"{side} slab does not match its electrode")
        atom_map = idx[order]
        atom_maps.append(atom_map)
        maps.append(_orbital_map(basis_d, atom_map))

    part = BlockPartition(
        h_d=op.h[0], s_d=op.s, basis_d=basis_d,
        left=left, right=right,
        left_map=maps[0], right_map=maps[1],
        left_basis=left_basis, right_basis=right_basis,
        left_atoms=atom_maps[0], right_atoms=atom_maps[1],
        left_v_orb=left_v, right_v_orb=right_v,
    )
    _verify_slab_consistency(part)
    return part


def _verify_slab_consistency(part: BlockPartition) -> None:
    """Leading device block must reproduce the electrode onsite block.

    Only the overlap is compared: the device Hamiltonian may carry an
    additional Hartree potential.
    """
    for name, (h00, s00, _h01, _s01), omap in (
        ("left", part.left, part.left_map),
        ("right", part.right, part.right_map),
    ):
        s_slab = part.s_d[np.ix_(omap, omap)]
        if not np.allclose(s_slab, s00, atol=1e-8):
            raise AssemblyError(
                f"{name} device slab overlap deviates from the electrode block"
            )


def dump_matrices(op: OperatorPair, path) -> None:
    """Plain-text (i, j, value) triplets for S and H, for external diffing."""
    lines = []
    for name, mat in [("S", op.s)] + [
        (f"H{sigma}", hm) for sigma, hm in enumerate(op.h)
    ]:
        lines.append(f"# {name}")
        for i in range(mat.shape[0]):
            for j in range(mat.shape[1]):
                v = mat[i, j]
                if v != 0:
                    if np.iscomplexobj(mat):
                        lines.append(f"{i} {j} {v.real!r} {v.imag!r}")
                    else:
                        lines.append(f"{i} {j} {float(v)!r}")
    from pathlib import Path

    Path(path).write_text("\n".join(lines) + "\n")
