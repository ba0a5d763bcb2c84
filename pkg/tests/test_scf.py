import math
from dataclasses import replace

import numpy as np
import pytest

from nwsim import geometry as geo
from nwsim.scf import (
    EnergyBreakdown,
    SCFError,
    SCFSettings,
    bulk_scf,
    device_scf,
    fermi_search,
    load_checkpoint,
    pair_potential_energy,
    save_checkpoint,
    total_energy,
)
from nwsim.sktable import PairTable, SlaterKosterTable

from conftest import dimer_chain, hydrogen_chain


class TestFermiSearch:
    def test_two_levels_midgap(self):
        assert fermi_search([-1.0, 1.0], 2.0, 0.0) == pytest.approx(0.0)

    def test_midgap_at_finite_temperature(self):
        ef = fermi_search([-1.0, 1.0], 2.0, 300.0)
        assert ef == pytest.approx(0.0, abs=1e-9)

    def test_half_filled_cosine_band_centered(self):
        ks = np.linspace(-math.pi, math.pi, 512, endpoint=False)
        levels = -2.0 * np.cos(ks)
        # half filling: one electron per site
        ef = fermi_search(levels, len(ks), 300.0)
        assert ef == pytest.approx(0.0, abs=1e-6)

    def test_monotone_in_filling(self):
        levels = [-1.0, 0.0, 1.0]
        previous = -np.inf
        for n in (1.0, 1.7, 2.4, 3.1, 4.2, 5.3):
            ef = fermi_search(levels, n, 500.0)
            assert ef > previous
            previous = ef

    def test_out_of_range_rejected(self):
        with pytest.raises(SCFError):
            fermi_search([-1.0, 1.0], 5.0, 300.0)
        with pytest.raises(SCFError):
            fermi_search([-1.0, 1.0], -0.1, 300.0)

    def test_bisection_accuracy(self):
        rng = np.random.default_rng(0)
        levels = np.sort(rng.uniform(-3, 3, 40))
        target = 31.7
        ef = fermi_search(levels, target, 700.0)
        from nwsim.transport import fermi

        kt = 8.617333e-5 * 700.0
        n = 2.0 * fermi((levels - ef) / kt).sum()
        assert n == pytest.approx(target, abs=1e-9)


class TestBulkSCF:
    def test_neutral_chain_converges_first_iteration(self, h_model,
                                                     fast_scf_settings):
        st = bulk_scf(hydrogen_chain(), h_model, fast_scf_settings)
        assert st.converged
        assert st.iterations == 1
        assert np.abs(st.populations - 1.1988).max() < 1e-9
        assert np.abs(st.v_atoms).max() == 0.0

    def test_charged_runs_shift_fermi_level(self, h_model, fast_scf_settings):
        st0 = bulk_scf(hydrogen_chain(), h_model, fast_scf_settings)
        stp = bulk_scf(hydrogen_chain(), h_model, fast_scf_settings,
                       charge=+0.01)
        stm = bulk_scf(hydrogen_chain(), h_model, fast_scf_settings,
                       charge=-0.01)
        assert stp.converged and stm.converged
        assert stm.fermi_level < st0.fermi_level < stp.fermi_level
        assert stp.populations.sum() == pytest.approx(1.2088, abs=1e-3)

    def test_mulliken_sum_rule_on_converged_state(self, h_model,
                                                  fast_scf_settings):
        st = bulk_scf(hydrogen_chain(cells=2), h_model, fast_scf_settings)
        assert st.populations.sum() == pytest.approx(2 * 1.1988, abs=1e-8)

    def test_fixed_point_stability(self, h_model, fast_scf_settings):
        st = bulk_scf(hydrogen_chain(), h_model, fast_scf_settings,
                      charge=0.005)
        again = bulk_scf(hydrogen_chain(), h_model, fast_scf_settings,
                         charge=0.005, initial=st)
        assert again.history[0] < fast_scf_settings.tolerance

    def test_unconverged_state_reported(self, h_model):
        settings = SCFSettings(k_points=24, mesh_cutoff=8.0,
                               max_iterations=2, mixing=0.01)
        st = bulk_scf(hydrogen_chain(), h_model, settings, charge=0.05)
        assert not st.converged
        assert len(st.history) == 2


class TestDeviceSCF:
    def neutral_device(self, h_model):
        wire = hydrogen_chain(cells=12)
        return geo.make_device(
            wire, interaction_range=h_model.interaction_range()
        )

    def test_neutral_symmetric_device(self, h_model, fast_scf_settings):
        dev = self.neutral_device(h_model)
        st = device_scf(dev, h_model, fast_scf_settings)
        assert st.converged
        # mirror-symmetric potential
        assert np.abs(st.v_atoms - st.v_atoms[::-1]).max() < 1e-6
        # interior populations match the bulk value
        n = len(st.populations)
        interior = st.populations[n // 3 : -n // 3]
        assert np.abs(interior - 1.1988).max() < 1e-3

    def test_pin_device_monotone_ramp(self, toy_semiconductor_model):
        wire = dimer_chain(cells=10)
        dev = geo.make_device(
            wire,
            interaction_range=toy_semiconductor_model.interaction_range(),
        )
        dev = replace(dev, electrode_charges=(0.02, -0.02))
        settings = SCFSettings(k_points=48, mesh_cutoff=10.0, mixing=0.1)
        st = device_scf(dev, toy_semiconductor_model, settings)
        assert st.converged
        assert st.iterations <= 200
        profile = st.v_field.values.mean(axis=(0, 1))
        diffs = np.diff(profile)
        assert (diffs > -1e-8).all()
        # direction: n-doped left (higher electrode Fermi) sits lower
        assert profile[0] < profile[-1]

    def test_warm_start_uses_fewer_iterations(self, toy_semiconductor_model):
        wire = dimer_chain(cells=8)
        dev = geo.make_device(
            wire,
            interaction_range=toy_semiconductor_model.interaction_range(),
        )
        dev = replace(dev, electrode_charges=(0.02, -0.02))
        settings = SCFSettings(k_points=32, mesh_cutoff=8.0, mixing=0.1)
        cold = device_scf(dev, toy_semiconductor_model, settings)
        warm = device_scf(dev, toy_semiconductor_model, settings,
                          initial=cold)
        assert warm.iterations < cold.iterations

    def test_unconverged_electrodes_rejected(self, h_model,
                                             fast_scf_settings):
        dev = self.neutral_device(h_model)
        bad = bulk_scf(
            dev.left_electrode, h_model,
            SCFSettings(k_points=16, mesh_cutoff=8.0, max_iterations=1,
                        mixing=0.01),
            charge=0.05,
        )
        with pytest.raises(SCFError, match="electrode"):
            device_scf(dev, h_model, fast_scf_settings,
                       electrode_states=(bad, bad))


class TestTotalEnergy:
    def test_neutral_state_band_term_only(self, h_model, fast_scf_settings,
                                          h_params):
        chain = hydrogen_chain()
        st = bulk_scf(chain, h_model, fast_scf_settings)
        breakdown = total_energy(st, chain, h_params)
        assert breakdown.hartree == 0.0
        assert breakdown.external == 0.0
        assert breakdown.spin == 0.0
        assert breakdown.pair == 0.0
        assert breakdown.total == breakdown.band
        assert breakdown.band < 0.0

    def test_total_is_sum_of_terms(self):
        b = EnergyBreakdown(band=-3.0, hartree=0.2, external=-0.1,
                            spin=-0.05, pair=0.4)
        assert b.total == pytest.approx(-3.0 + 0.2 - 0.1 - 0.05 + 0.4)

    def test_unconverged_rejected(self, h_model, h_params):
        settings = SCFSettings(k_points=16, mesh_cutoff=8.0,
                               max_iterations=1, mixing=0.01)
        st = bulk_scf(hydrogen_chain(), h_model, settings, charge=0.05)
        with pytest.raises(SCFError):
            total_energy(st, hydrogen_chain(), h_params)

    def test_spin_term_from_moments(self, h_model, fast_scf_settings,
                                    h_params):
        chain = hydrogen_chain()
        st = bulk_scf(chain, h_model, fast_scf_settings)
        # inject a spin imbalance by hand: m_up - m_down = 0.4
        st.shell_populations = {(0, 0): (0.8, 0.4)}
        breakdown = total_energy(st, chain, h_params)
        w = h_params[1].spin_split[0, 0]
        assert breakdown.spin == pytest.approx(-0.5 * w * 0.4 * 0.4)


class TestPairPotential:
    def table_with_pp(self):
        import numpy as np
        from nwsim.sktable import RepulsivePotential

        grid = np.linspace(0.5, 8.0, 16)
        zero = np.zeros(16)
        rep = RepulsivePotential(
            cutoff=6.0,
            segments=((0.5, 6.0, (0.3, -0.05, 0.0, 0.0)),),
        )
        pt = PairTable(grid=grid, overlap={(0, 0, 0): zero},
                       repulsive=rep)
        t = SlaterKosterTable()
        t.add_pair(1, 1, pt)
        return t

    def test_single_atom_zero(self):
        cell = geo.LatticeCell(np.eye(3) * 20)
        s = geo.AtomicStructure(cell, [1], [[10, 10, 10]])
        assert pair_potential_energy(s, self.table_with_pp()) == 0.0

    def test_pair_beyond_cutoff_zero(self):
        cell = geo.LatticeCell(np.eye(3) * 20)
        s = geo.AtomicStructure(cell, [1, 1],
                                [[5, 10, 10], [15, 10, 10]])
        # min-image distance 10 A = 18.9 bohr > 6 bohr cutoff
        assert pair_potential_energy(s, self.table_with_pp()) == 0.0

    def test_three_atoms_sum_pairwise(self):
        from nwsim.units import ANGSTROM_BOHR, HARTREE_EV

        cell = geo.LatticeCell(np.eye(3) * 30)
        d12, d13, d23 = 1.0, 2.0, 1.0
        s = geo.AtomicStructure(
            cell, [1, 1, 1],
            [[15, 15, 14], [15, 15, 15], [15, 15, 16]],
        )
        t = self.table_with_pp()

        def v(d_ang):
            x = d_ang * ANGSTROM_BOHR - 0.5
            return (0.3 - 0.05 * x) * HARTREE_EV

        expect = v(1.0) + v(2.0) + v(1.0)
        assert pair_potential_energy(s, t) == pytest.approx(expect, abs=1e-12)


class TestCheckpoints:
    def test_round_trip(self, h_model, fast_scf_settings, tmp_path):
        st = bulk_scf(hydrogen_chain(cells=2), h_model, fast_scf_settings,
                      charge=0.01)
        path = tmp_path / "state.json"
        save_checkpoint(st, path)
        back = load_checkpoint(path)
        assert back.converged == st.converged
        assert back.fermi_levels == tuple(st.fermi_levels)
        assert np.array_equal(back.populations, st.populations)
        assert back.settings_digest == st.settings_digest
