import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nwsim import geometry as geo


def si_bulk(a=5.4306):
    return geo.build_bulk_crystal(a, "diamond-cubic")


class TestBulkCrystal:
    def test_diamond_conventional_cell_has_8_atoms(self):
        s = si_bulk(5.43)
        assert len(s) == 8
        assert np.allclose(s.cell.vectors, np.eye(3) * 5.43)

    def test_germanium_lattice_constant(self):
        s = si_bulk(5.65)
        assert len(s) == 8
        assert s.cell.volume == pytest.approx(5.65**3)

    def test_zero_lattice_constant_rejected(self):
        with pytest.raises(geo.GeometryError):
            geo.build_bulk_crystal(0.0, "diamond-cubic")

    def test_unknown_prototype_rejected(self):
        with pytest.raises(geo.GeometryError):
            geo.build_bulk_crystal(5.43, "wurtzite")


class TestCleave:
    def test_100_surface_axis_and_density(self):
        s = si_bulk()
        surf = geo.cleave_surface(s, (1, 0, 0))
        # c axis along the surface normal (+z after orientation)
        c = surf.cell.vectors[2]
        assert abs(c[0]) < 1e-9 and abs(c[1]) < 1e-9 and c[2] > 0
        assert len(surf) / surf.cell.volume == pytest.approx(
            8 / s.cell.volume, rel=1e-9
        )

    @pytest.mark.parametrize("miller", [(1, 1, 0), (1, 1, 1), (2, 1, 0)])
    def test_density_preserved_other_planes(self, miller):
        s = si_bulk()
        surf = geo.cleave_surface(s, miller)
        assert len(surf) / surf.cell.volume == pytest.approx(
            8 / s.cell.volume, rel=1e-9
        )

    def test_zero_miller_rejected(self):
        with pytest.raises(geo.GeometryError):
            geo.cleave_surface(si_bulk(), (0, 0, 0))

    def test_non_coprime_rejected(self):
        with pytest.raises(geo.GeometryError):
            geo.cleave_surface(si_bulk(), (2, 0, 0))

    def test_repeat_commutes_with_cleave_on_atom_count(self):
        surf = geo.cleave_surface(si_bulk(), (1, 0, 0))
        a = geo.repeat(surf, 2, 2, 1)
        assert len(a) == 4 * len(surf)
        assert len(a) / a.cell.volume == pytest.approx(
            len(surf) / surf.cell.volume, rel=1e-9
        )


class TestRepeatWrap:
    def test_repeat_multiplies_atoms(self):
        s = si_bulk()
        r = geo.repeat(s, 2, 2, 1)
        assert len(r) == 32
        assert r.cell.volume == pytest.approx(4 * s.cell.volume)

    def test_repeat_identity(self):
        s = si_bulk()
        r = geo.repeat(s, 1, 1, 1)
        assert np.allclose(r.positions, s.positions)

    def test_repeat_rejects_zero(self):
        with pytest.raises(geo.GeometryError):
            geo.repeat(si_bulk(), 0, 1, 1)

    def test_repeat_preserves_density(self):
        s = si_bulk()
        r = geo.repeat(s, 3, 2, 4)
        assert len(r) / r.cell.volume == pytest.approx(
            len(s) / s.cell.volume, rel=1e-12
        )

    @given(st.lists(st.floats(-3, 3), min_size=3, max_size=3))
    @settings(max_examples=25, deadline=None)
    def test_wrap_idempotent(self, frac):
        cell = geo.LatticeCell(np.diag([4.0, 5.0, 6.0]))
        s = geo.AtomicStructure(cell, [14], [np.array(frac) @ cell.vectors])
        w1 = geo.wrap(s)
        w2 = geo.wrap(w1)
        assert np.allclose(w1.positions, w2.positions, atol=1e-12)
        assert (w1.fractional() >= 0).all() and (w1.fractional() < 1).all()


def build_paper_wire():
    """The Si(100) 2x2 wire workflow: cleave, repeat, pad, center, passivate."""
    surf = geo.cleave_surface(si_bulk(), (1, 0, 0))
    wire = geo.repeat(surf, 2, 2, 1)
    wire = geo.with_cell_lengths(wire, a=20.0, b=20.0)
    wire = geo.center(wire, "ab")
    return geo.passivate_hydrogen(wire)


class TestPassivation:
    def test_si100_wire_electrode_period_counts(self):
        wire = build_paper_wire()
        period = geo.repeat(wire, 1, 1, 2)   # one electrode period, 10.8612 A
        n_si = int((period.numbers == 14).sum())
        n_h = int((period.numbers == 1).sum())
        assert (n_si, n_h) == (32, 32)
        assert np.linalg.norm(period.cell.vectors[2]) == pytest.approx(
            10.8612, abs=1e-3
        )

    def test_bulk_crystal_unchanged(self):
        s = si_bulk()
        assert len(geo.passivate_hydrogen(s)) == len(s)

    def test_single_atom_gets_tetrahedral_hydrogens(self):
        cell = geo.LatticeCell(np.eye(3) * 20.0)
        s = geo.AtomicStructure(cell, [14], [[10.0, 10.0, 10.0]])
        p = geo.passivate_hydrogen(s)
        assert len(p) == 5
        d = p.positions[1:] - p.positions[0]
        d /= np.linalg.norm(d, axis=1)[:, None]
        for a, b in itertools.combinations(d, 2):
            angle = math.degrees(math.acos(np.clip(a @ b, -1, 1)))
            assert angle == pytest.approx(109.4712, abs=1e-3)

    def test_positions_untouched(self):
        wire = geo.cleave_surface(si_bulk(), (1, 0, 0))
        wire = geo.repeat(wire, 2, 2, 1)
        wire = geo.with_cell_lengths(wire, a=20.0, b=20.0)
        wire = geo.center(wire, "ab")
        p = geo.passivate_hydrogen(wire)
        assert np.allclose(p.positions[: len(wire)], wire.positions)

    def test_bond_length_matches_request(self):
        cell = geo.LatticeCell(np.eye(3) * 20.0)
        s = geo.AtomicStructure(cell, [14], [[10.0, 10.0, 10.0]])
        p = geo.passivate_hydrogen(s, bond_length=1.23)
        d = np.linalg.norm(p.positions[1:] - p.positions[0], axis=1)
        assert np.allclose(d, 1.23)

    def test_insufficient_vacuum_raises(self):
        cell = geo.LatticeCell(np.diag([1.4, 1.4, 20.0]))
        s = geo.AtomicStructure(cell, [14], [[0.7, 0.7, 10.0]])
        with pytest.raises(geo.GeometryError, match="vacuum"):
            geo.passivate_hydrogen(s)


class TestSubstitution:
    def test_pin_pattern_counts(self):
        # 56-atom wire, 9 B + 9 P + 38 Si
        cell = geo.LatticeCell(np.diag([5.43, 10.86, 60.0]))
        pos = [[1.36, 1.36, 1.0 + i] for i in range(56)]
        s = geo.AtomicStructure(cell, [14] * 56, pos)
        boron_sites = list(range(0, 27, 3))      # every third site: 9 sites
        phos_sites = list(range(29, 56, 3))
        s = geo.substitute_dopants(s, boron_sites, geo.number_for("B"))
        s = geo.substitute_dopants(s, phos_sites, geo.number_for("P"))
        assert int((s.numbers == 5).sum()) == 9
        assert int((s.numbers == 15).sum()) == 9
        assert int((s.numbers == 14).sum()) == 38
        assert len(s) == 56

    def test_empty_site_list_is_identity(self):
        s = si_bulk()
        s2 = geo.substitute_dopants(s, [], 5)
        assert np.array_equal(s2.numbers, s.numbers)

    def test_substitute_back_restores(self):
        s = si_bulk()
        doped = geo.substitute_dopants(s, [2, 5], 5)
        restored = geo.substitute_dopants(doped, [2, 5], 14)
        assert np.array_equal(restored.numbers, s.numbers)

    def test_out_of_range_rejected(self):
        with pytest.raises(geo.GeometryError):
            geo.substitute_dopants(si_bulk(), [99], 5)

    def test_double_doping_rejected(self):
        doped = geo.substitute_dopants(si_bulk(), [1], 5)
        with pytest.raises(geo.GeometryError):
            geo.substitute_dopants(doped, [1], 15)

    def test_positions_untouched(self):
        s = si_bulk()
        doped = geo.substitute_dopants(s, [0, 7], 15)
        assert np.allclose(doped.positions, s.positions)


class TestDevice:
    def wire(self, cells=8):
        cell = geo.LatticeCell(np.diag([8.0, 8.0, 1.2]))
        base = geo.AtomicStructure(cell, [1], [[4, 4, 0.6]])
        return geo.repeat(base, 1, 1, cells)

    def test_default_electrode_is_one_period(self):
        d = geo.make_device(self.wire())
        assert np.linalg.norm(d.left_electrode.cell.vectors[2]) == (
            pytest.approx(1.2)
        )

    def test_interaction_range_bumps_electrode_length(self):
        d = geo.make_device(self.wire(), interaction_range=4.0)
        # smallest multiple of 1.2 A not shorter than 4.0 A
        assert np.linalg.norm(d.left_electrode.cell.vectors[2]) == (
            pytest.approx(4.8)
        )

    def test_incommensurate_length_rejected(self):
        with pytest.raises(geo.GeometryError):
            geo.make_device(self.wire(), left_len=1.7)

    def test_too_short_central_rejected(self):
        with pytest.raises(geo.GeometryError):
            geo.make_device(self.wire(cells=2), left_len=2.4, right_len=2.4)

    def test_pristine_wire_gives_identical_electrodes(self):
        d = geo.make_device(self.wire())
        assert np.array_equal(
            d.left_electrode.numbers, d.right_electrode.numbers
        )
        assert np.allclose(
            d.left_electrode.positions, d.right_electrode.positions
        )

    def test_slab_match_invariant_enforced(self):
        wire = self.wire()
        # corrupt one end atom: device construction must refuse
        pos = wire.positions.copy()
        pos[0, 0] += 0.5
        broken = geo.AtomicStructure(wire.cell, wire.numbers, pos)
        with pytest.raises(geo.GeometryError):
            left = geo._extract_electrode(geo.wrap(self.wire()), 0.0, 1.2)
            geo.DeviceStructure(broken, left, left)

    def test_paper_appendix_lengths(self):
        wire = build_paper_wire()
        wire12 = geo.repeat(wire, 1, 1, 12)
        d = geo.make_device(wire12, interaction_range=10.0)
        assert np.linalg.norm(d.left_electrode.cell.vectors[2]) == (
            pytest.approx(10.8612, abs=2e-3)
        )
        assert np.linalg.norm(d.central.cell.vectors[2]) == (
            pytest.approx(65.1672, abs=1e-2)
        )


class TestTubeRegions:
    def device(self):
        cell = geo.LatticeCell(np.diag([20.0, 20.0, 1.2]))
        base = geo.AtomicStructure(cell, [1], [[10, 10, 0.6]])
        return geo.make_device(geo.repeat(base, 1, 1, 56))

    def test_paper_gate_geometry_accepted(self):
        d = self.device()
        gate = geo.TubeRegion("metallic", 0.0, (10, 10, 15), (10, 10, 50),
                              7.0, 3.0)
        d2 = geo.add_tube_region(d, gate)
        assert len(d2.regions) == 1

    @pytest.mark.parametrize("kappa", [3.9, 25.0])
    def test_dielectric_shells(self, kappa):
        d = self.device()
        shell = geo.TubeRegion("dielectric", kappa, (10, 10, 15),
                               (10, 10, 50), 5.0, 2.0)
        d2 = geo.add_tube_region(d, shell)
        assert d2.regions[0].value == kappa
        assert d2.regions[0].outer_radius == pytest.approx(7.0)

    def test_order_preserved(self):
        d = self.device()
        shell = geo.TubeRegion("dielectric", 3.9, (10, 10, 15), (10, 10, 50),
                               5.0, 2.0)
        gate = geo.TubeRegion("metallic", 0.0, (10, 10, 15), (10, 10, 50),
                              7.0, 3.0)
        d2 = geo.add_tube_region(geo.add_tube_region(d, shell), gate)
        assert d2.regions[0].kind == "dielectric"
        assert d2.regions[1].kind == "metallic"

    def test_tube_outside_cell_rejected(self):
        d = self.device()
        bad = geo.TubeRegion("metallic", 0.0, (10, 10, 15), (10, 10, 50),
                             18.0, 3.0)
        with pytest.raises(geo.GeometryError):
            geo.add_tube_region(d, bad)

    def test_degenerate_tube_rejected(self):
        with pytest.raises(geo.GeometryError):
            geo.TubeRegion("metallic", 0.0, (1, 1, 1), (1, 1, 1), 1.0, 1.0)

    def test_contains_shell_geometry(self):
        tube = geo.TubeRegion("dielectric", 3.9, (0, 0, 0), (0, 0, 10),
                              2.0, 1.0)
        inside = tube.contains(np.array([[2.5, 0, 5.0]]))[0]
        in_bore = tube.contains(np.array([[0.5, 0, 5.0]]))[0]
        beyond = tube.contains(np.array([[3.5, 0, 5.0]]))[0]
        off_axis_end = tube.contains(np.array([[2.5, 0, 11.0]]))[0]
        assert inside and not in_bore and not beyond and not off_axis_end


class TestXYZRoundTrip:
    def test_round_trip(self, tmp_path):
        wire = build_paper_wire()
        path = tmp_path / "wire.xyz"
        geo.write_xyz(wire, path)
        back = geo.read_xyz(path)
        assert np.array_equal(back.numbers, wire.numbers)
        assert np.allclose(back.positions, wire.positions, atol=1e-9)
        assert np.allclose(back.cell.vectors, wire.cell.vectors, atol=1e-9)
