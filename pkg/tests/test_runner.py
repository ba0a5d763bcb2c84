import json
from pathlib import Path

import numpy as np
import pytest

from nwsim import runner
from nwsim.basis import hydrogen_c2h4_parameters, save_parameter_file
from nwsim.outputs import (
    SweepResult,
    SweepRow,
    read_sweep_csv,
    write_outputs,
)
from nwsim.runner import (
    SpecError,
    extract_off_state,
    extract_vth,
    parse_device_spec,
)


def write_params(tmp_path) -> str:
    p = tmp_path / "h.json"
    save_parameter_file({1: hydrogen_c2h4_parameters()}, p)
    return str(p)


def minimal_spec(tmp_path, **overrides) -> Path:
    doc = {
        "schema": "nwsim-device-1",
        "geometry": {"builder": [
            {"op": "chain", "element": "H", "spacing_A": 1.1,
             "cell_A": [8.0, 8.0]},
            {"op": "repeat", "n": [1, 1, 8]},
        ]},
        "parameters": [write_params(tmp_path)],
    }
    doc.update(overrides)
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(doc, indent=2))
    return path


def cheap_spec(tmp_path, gates=(0.0,), drains=(0.0, 0.1), temps=(300.0,)):
    return minimal_spec(
        tmp_path,
        calculator={
            "scheme": "wolfsberg", "mesh_cutoff_ha": 6.0, "max_range_A": 3.0,
            "eta_ev": 1e-6, "k_points": 16,
            "spectrum": {"emin_eV": -3.0, "emax_eV": 3.0, "points": 41},
        },
        scf={"mixing": 0.1, "tolerance": 1e-3, "density_knots": 61,
             "k_points": 16},
        sweeps={"gate_V": list(gates), "drain_V": list(drains),
                "temperature_K": list(temps)},
    )


class TestSpecParsing:
    def test_minimal_spec_fills_defaults(self, tmp_path):
        spec = parse_device_spec(minimal_spec(tmp_path))
        assert spec.calculator["eta_ev"] == 1e-6
        assert spec.calculator["mesh_cutoff_ha"] == 20.0
        assert spec.calculator["spectrum"] == {
            "emin_eV": -4.0, "emax_eV": 4.0, "points": 301,
        }
        assert spec.gate_values == [0.0]
        assert spec.temperatures == [300.0]

    def test_round_trip_identity(self, tmp_path):
        spec = parse_device_spec(cheap_spec(tmp_path, gates=(0.0, 1.0)))
        again_path = tmp_path / "again.json"
        again_path.write_text(spec.to_json())
        spec2 = parse_device_spec(again_path)
        assert spec2.gate_values == spec.gate_values
        assert spec2.calculator == spec.calculator
        assert spec2.scf == spec.scf
        assert spec2.electrode_charges == spec.electrode_charges
        # a third pass serializes identically
        assert spec2.to_json() == spec.to_json()

    def test_gate_list_of_five(self, tmp_path):
        path = minimal_spec(
            tmp_path,
            sweeps={"gate_V": [1.0, 2.0, 3.0, 4.0, 5.0]},
        )
        spec = parse_device_spec(path)
        assert spec.gate_values == [1.0, 2.0, 3.0, 4.0, 5.0]

    def test_unknown_key_rejected_with_location(self, tmp_path):
        path = minimal_spec(tmp_path)
        doc = json.loads(path.read_text())
        doc["calculator"] = {"schem": "wolfsberg"}
        path.write_text(json.dumps(doc))
        with pytest.raises(SpecError, match="calculator.*schem"):
            parse_device_spec(path)

    def test_missing_parameter_file_rejected(self, tmp_path):
        path = minimal_spec(tmp_path, parameters=["nope.json"])
        with pytest.raises(SpecError, match="nope.json"):
            parse_device_spec(path)

    def test_empty_sweep_grid_rejected(self, tmp_path):
        path = minimal_spec(tmp_path, sweeps={"gate_V": []})
        with pytest.raises(SpecError, match="gate_V"):
            parse_device_spec(path)

    def test_wrong_schema_rejected(self, tmp_path):
        path = minimal_spec(tmp_path, schema="something-else")
        with pytest.raises(SpecError, match="schema"):
            parse_device_spec(path)

    def test_region_block_validated(self, tmp_path):
        path = minimal_spec(tmp_path, regions=[{"kind": "metallic"}])
        with pytest.raises(SpecError, match="regions"):
            parse_device_spec(path)


class TestGeometryBuilder:
    def test_chain_and_repeat(self, tmp_path):
        spec = parse_device_spec(cheap_spec(tmp_path))
        s = runner.build_geometry(spec)
        assert len(s) == 8
        assert np.linalg.norm(s.cell.vectors[2]) == pytest.approx(8.8)

    def test_crystal_pipeline(self, tmp_path):
        path = minimal_spec(
            tmp_path,
            geometry={"builder": [
                {"op": "bulk", "a": 5.4306, "prototype": "diamond-cubic"},
                {"op": "cleave", "miller": [1, 0, 0]},
                {"op": "repeat", "n": [2, 2, 1]},
                {"op": "cell_lengths", "a": 20.0, "b": 20.0},
                {"op": "center"},
                {"op": "passivate", "bond_length_A": 1.48},
                {"op": "wrap"},
            ]},
        )
        s = runner.build_geometry(parse_device_spec(path))
        assert int((s.numbers == 14).sum()) == 16
        assert int((s.numbers == 1).sum()) == 16

    def test_xyz_source(self, tmp_path):
        from nwsim import geometry as geo

        cell = geo.LatticeCell(np.diag([8, 8, 2.2]))
        s = geo.AtomicStructure(cell, [1, 1], [[4, 4, 0.5], [4, 4, 1.6]])
        geo.write_xyz(s, tmp_path / "w.xyz")
        path = minimal_spec(tmp_path, geometry={"xyz": str(tmp_path / "w.xyz")})
        back = runner.build_geometry(parse_device_spec(path))
        assert len(back) == 2

    def test_unknown_builder_op(self, tmp_path):
        path = minimal_spec(
            tmp_path, geometry={"builder": [{"op": "teleport"}]}
        )
        with pytest.raises(SpecError, match="teleport"):
            runner.build_geometry(parse_device_spec(path))


class TestSweep:
    def test_rows_order_and_zero_bias_identity(self, tmp_path):
        spec = parse_device_spec(
            cheap_spec(tmp_path, gates=(0.0, 0.5), drains=(0.0, 0.1, 0.2))
        )
        out = tmp_path / "out"
        result = runner.run_sweep(spec, out)
        assert len(result) == 6
        # ordering: gate outer, drain inner
        assert [(r.vg, r.vd) for r in result.rows] == [
            (0.0, 0.0), (0.0, 0.1), (0.0, 0.2),
            (0.5, 0.0), (0.5, 0.1), (0.5, 0.2),
        ]
        for r in result.rows:
            if r.vd == 0.0:
                assert abs(r.current) < 1e-15

    def test_rerun_is_byte_identical(self, tmp_path):
        spec = parse_device_spec(cheap_spec(tmp_path, drains=(0.0, 0.1)))
        out1, out2 = tmp_path / "o1", tmp_path / "o2"
        runner.run_sweep(spec, out1)
        runner.run_sweep(spec, out2)
        assert (out1 / "sweep.csv").read_bytes() == (
            out2 / "sweep.csv"
        ).read_bytes()

    def test_resume_after_interrupt_is_byte_identical(self, tmp_path):
        spec = parse_device_spec(
            cheap_spec(tmp_path, gates=(0.0, 0.4), drains=(0.0, 0.1))
        )
        ref_out = tmp_path / "ref"
        runner.run_sweep(spec, ref_out)
        reference = (ref_out / "sweep.csv").read_bytes()

        class Kill(Exception):
            pass

        out = tmp_path / "resumed"
        seen = []

        def killer(row):
            seen.append(row)
            if len(seen) == 2:
                raise Kill()

        with pytest.raises(Kill):
            runner.run_sweep(spec, out, progress=killer)
        assert not (out / "sweep.csv").exists()
        runner.run_sweep(spec, out, resume=True)
        assert (out / "sweep.csv").read_bytes() == reference

    def test_spectrum_files_written(self, tmp_path):
        spec = parse_device_spec(cheap_spec(tmp_path, drains=(0.0,)))
        out = tmp_path / "out"
        runner.run_sweep(spec, out)
        files = list(out.glob("transmission_*.csv"))
        assert len(files) == 1
        text = files[0].read_text().splitlines()
        assert text[0] == "energy_eV,transmission"
        assert len(text) == 42


def synthetic_transfer(shift=0.21, grid=None):
    grid = np.arange(0.0, 2.51, 0.5) if grid is None else grid
    current = (1e-5 * np.clip(grid - shift, 0.0, None)) ** 2
    return list(zip(grid, current))


class TestExtractVth:
    def test_recovers_paper_value(self):
        vth = extract_vth(synthetic_transfer(0.21))
        assert vth == pytest.approx(0.21, abs=0.01)

    def test_translation_covariance(self):
        base = extract_vth(synthetic_transfer(0.21))
        shifted_pts = [(v + 0.04, i) for v, i in synthetic_transfer(0.21)]
        shifted = extract_vth(shifted_pts)
        assert shifted == pytest.approx(base + 0.04, abs=1e-9)
        assert shifted == pytest.approx(0.25, abs=0.01)

    def test_flat_curve_rejected(self):
        with pytest.raises(ValueError, match="flat"):
            extract_vth([(0.0, 1e-9), (0.5, 1e-9), (1.0, 1e-9), (1.5, 1e-9)])

    def test_too_few_points_rejected(self):
        with pytest.raises(ValueError, match="4 points"):
            extract_vth([(0.0, 0.0), (1.0, 1e-6), (2.0, 4e-6)])

    def test_decreasing_curve_rejected(self):
        pts = [(v, 1e-6 * (3.0 - v) ** 2) for v in (0.0, 1.0, 2.0, 2.9)]
        with pytest.raises(ValueError, match="gm"):
            extract_vth(pts)


def ch5_result():
    """Synthetic sweep on the chapter protocol grid: 6 gates x 11 drains."""
    result = SweepResult()
    for vg in np.arange(0.0, 2.51, 0.5):
        for vd in np.arange(0.0, 2.01, 0.2):
            i = (1e-5 * max(vg - 0.21, 0.0)) ** 2 * np.tanh(vd / 0.5)
            g = 1e-6 * max(vg - 0.21, 0.0) + 1e-12
            result.append(SweepRow(
                vg=round(vg, 10), vd=round(vd, 10), temperature=300.0,
                current=i, conductance=g, converged=True, iterations=7,
            ))
    return result


class TestOffState:
    def test_protocol_grid_gives_11_pairs(self):
        off = extract_off_state(ch5_result(), 0.0)
        assert len(off) == 11
        assert [round(v, 10) for v, _, _ in off] == [
            round(x, 10) for x in np.arange(0.0, 2.01, 0.2)
        ]

    def test_off_grid_value_rejected(self):
        with pytest.raises(ValueError, match="not on the sweep grid"):
            extract_off_state(ch5_result(), 0.3)

    def test_zero_bias_row_matches_conductance_column(self):
        result = ch5_result()
        off = extract_off_state(result, 0.5)
        row = [r for r in result.rows if r.vg == 0.5 and r.vd == 0.0][0]
        assert off[0][2] == row.conductance


class TestOutputs:
    def test_csv_structure(self, tmp_path):
        result = ch5_result()
        paths = write_outputs(result, tmp_path)
        raw = paths["csv"].read_bytes().decode()
        lines = raw.split("\r\n")
        assert raw.count("\r\n") == 67   # RFC-4180 line endings throughout
        assert lines[0].startswith("vg_V,vd_V,temp_K,current_A")
        assert len([ln for ln in lines if ln]) == 67   # header + 66 rows

    def test_json_mirror_lossless(self, tmp_path):
        result = ch5_result()
        paths = write_outputs(result, tmp_path)
        mirrored = SweepResult.from_json(paths["json"].read_text())
        assert len(mirrored) == len(result)
        for a, b in zip(result.rows, mirrored.rows):
            assert a == b
        # CSV round-trips through the JSON mirror losslessly
        csv_back = read_sweep_csv(paths["csv"])
        for a, b in zip(csv_back.rows, mirrored.rows):
            assert a == b

    def test_svg_polyline_count_matches_gates(self, tmp_path):
        result = ch5_result()
        paths = write_outputs(result, tmp_path)
        svg = paths["svg_iv"].read_text()
        assert svg.count("<polyline") == 6
        assert 'version="1.1"' in svg

    def test_conductance_plot_log_axis_padding(self, tmp_path):
        result = ch5_result()
        paths = write_outputs(result, tmp_path)
        svg = paths["svg_conductance"].read_text()
        gs = [abs(r.conductance) for r in result.rows if r.conductance != 0]
        import math

        lo = math.floor(math.log10(min(gs))) - 1
        hi = math.ceil(math.log10(max(gs))) + 1
        assert f"log10 y-axis range {lo} to {hi}" in svg

    def test_empty_result_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            write_outputs(SweepResult(), tmp_path)
