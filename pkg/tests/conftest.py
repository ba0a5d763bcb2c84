import numpy as np
import pytest

from nwsim import geometry as geo
from nwsim.basis import (
    ElementParameters,
    ShellParameters,
    SlaterOrbital,
    hydrogen_c2h4_parameters,
)
from nwsim.hamiltonian import TightBindingModel
from nwsim.scf import SCFSettings


@pytest.fixture(scope="session")
def h_params():
    return {1: hydrogen_c2h4_parameters()}


@pytest.fixture(scope="session")
def h_model(h_params):
    # 4 A interaction range keeps toy chains cheap and local
    return TightBindingModel(h_params, scheme="wolfsberg", max_range=4.0)


@pytest.fixture(scope="session")
def toy_semiconductor_params():
    """Single-s-orbital element, one electron per atom: a dimerized chain
    of these is a textbook two-band semiconductor."""
    el = ElementParameters(
        z=1,
        shells=(
            ShellParameters(
                orbital=SlaterOrbital(n=1, l=0, eta1=1.4, c1=1.0),
                energy=-10.0,
                hartree_shift=10.0,
                occupation=1.0,
            ),
        ),
        beta=1.9,
        vacuum_level=0.0,
        spin_split=np.array([[0.0]]),
    )
    return {1: el}


@pytest.fixture(scope="session")
def toy_semiconductor_model(toy_semiconductor_params):
    return TightBindingModel(
        toy_semiconductor_params, scheme="wolfsberg", max_range=3.0
    )


def hydrogen_chain(spacing=1.1, cells=1, transverse=10.0):
    cell = geo.LatticeCell(np.diag([transverse, transverse, spacing]))
    chain = geo.AtomicStructure(
        cell, [1], [[transverse / 2, transverse / 2, spacing / 2]]
    )
    return geo.repeat(chain, 1, 1, cells) if cells > 1 else chain


def dimer_chain(cells=1, transverse=8.0, bond=0.9, period=2.2):
    cell = geo.LatticeCell(np.diag([transverse, transverse, period]))
    base = geo.AtomicStructure(
        cell,
        [1, 1],
        [[transverse / 2, transverse / 2, 0.0],
         [transverse / 2, transverse / 2, bond]],
    )
    return geo.repeat(base, 1, 1, cells) if cells > 1 else base


@pytest.fixture(scope="session")
def fast_scf_settings():
    return SCFSettings(k_points=48, mesh_cutoff=10.0, temperature=300.0,
                       mixing=0.1)


# 1-orbital orthogonal chain blocks (textbook lead), t = -1 eV
def toy_chain_blocks(t=-1.0, eps=0.0):
    h00 = np.array([[eps]])
    s00 = np.eye(1)
    h01 = np.array([[t]])
    s01 = np.zeros((1, 1))
    return h00, s00, h01, s01


def toy_chain_partition(n_sites=6, t=-1.0, eps=0.0):
    from nwsim.hamiltonian import BlockPartition, OrbitalBasis

    h_d = np.zeros((n_sites, n_sites))
    for i in range(n_sites - 1):
        h_d[i, i + 1] = h_d[i + 1, i] = t
    np.fill_diagonal(h_d, eps)
    s_d = np.eye(n_sites)
    basis = OrbitalBasis(
        atom=np.arange(n_sites),
        shell=np.zeros(n_sites, int),
        l=np.zeros(n_sites, int),
        m=np.zeros(n_sites, int),
        onsite_energy=np.full(n_sites, eps),
        beta=np.ones(n_sites),
        atom_offsets=np.arange(n_sites + 1),
        atom_numbers=np.ones(n_sites, int),
    )
    h00, s00, h01, s01 = toy_chain_blocks(t, eps)
    return BlockPartition(
        h_d=h_d, s_d=s_d, basis_d=basis,
        left=(h00, s00, h01, s01), right=(h00, s00, h01, s01),
        left_map=np.array([0]), right_map=np.array([n_sites - 1]),
        left_atoms=np.array([0]), right_atoms=np.array([n_sites - 1]),
    )


def chain_surface_sigma_closed_form(z, t):
    """Retarded surface self-energy of the 1-orbital chain at complex z."""
    disc = np.sqrt(z * z - 4 * t * t + 0j)
    g1 = (z + disc) / (2 * t * t)
    g2 = (z - disc) / (2 * t * t)
    g = g1 if abs(g1) < abs(g2) else g2
    return t * t * g
