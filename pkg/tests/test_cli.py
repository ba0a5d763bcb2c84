import json
from pathlib import Path

import numpy as np
import pytest

from nwsim.cli import EXIT_OK, EXIT_SPEC, main
from nwsim.outputs import read_sweep_csv

from test_runner import cheap_spec, minimal_spec


class TestGrids:
    def test_range_syntax(self):
        from nwsim.cli import _parse_grid

        assert _parse_grid("0:2:0.5") == [0.0, 0.5, 1.0, 1.5, 2.0]
        assert _parse_grid("1,2,3") == [1.0, 2.0, 3.0]


class TestBuild:
    def test_build_writes_geometry(self, tmp_path, capsys):
        spec = cheap_spec(tmp_path)
        code = main(["build", "--spec", str(spec), "--out",
                     str(tmp_path / "out")])
        assert code == EXIT_OK
        assert (tmp_path / "out" / "geometry.xyz").exists()
        info = json.loads((tmp_path / "out" / "device.json").read_text())
        assert info["atoms"] == 8

    def test_bad_spec_exits_2(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        code = main(["build", "--spec", str(bad), "--out",
                     str(tmp_path / "out")])
        assert code == EXIT_SPEC


class TestBands:
    def test_bands_csv(self, tmp_path):
        spec = cheap_spec(tmp_path)
        code = main(["bands", "--spec", str(spec), "--out",
                     str(tmp_path / "out"), "--kpoints", "31"])
        assert code == EXIT_OK
        lines = (tmp_path / "out" / "bands.csv").read_text().splitlines()
        assert lines[0].startswith("k,band0")
        assert len(lines) == 32


class TestTransmission:
    def test_single_point(self, tmp_path):
        spec = cheap_spec(tmp_path)
        code = main(["transmission", "--spec", str(spec), "--out",
                     str(tmp_path / "out")])
        assert code == EXIT_OK
        lines = (tmp_path / "out" / "transmission.csv").read_text().splitlines()
        assert lines[0] == "energy_eV,transmission"
        assert len(lines) == 42


class TestSweepCommand:
    def test_sweep_and_extract_and_plot(self, tmp_path, capsys):
        spec = cheap_spec(tmp_path, gates=(0.0,), drains=(0.0, 0.1))
        out = tmp_path / "out"
        code = main(["sweep", "--spec", str(spec), "--out", str(out)])
        assert code == EXIT_OK
        result = read_sweep_csv(out / "sweep.csv")
        assert len(result) == 2

        code = main(["plot", "--sweep-csv", str(out / "sweep.csv"),
                     "--out", str(out / "plots")])
        assert code == EXIT_OK
        assert (out / "plots" / "sweep_iv.svg").exists()

        code = main(["extract", "--sweep-csv", str(out / "sweep.csv"),
                     "--vg-off", "0.0", "--out", str(out)])
        assert code == EXIT_OK
        doc = json.loads((out / "extracted.json").read_text())
        assert len(doc["off_state"]) == 2

    def test_grid_overrides(self, tmp_path):
        spec = cheap_spec(tmp_path)
        out = tmp_path / "out"
        code = main(["sweep", "--spec", str(spec), "--out", str(out),
                     "--gate", "0:0.4:0.4", "--drain", "0,0.1"])
        assert code == EXIT_OK
        result = read_sweep_csv(out / "sweep.csv")
        assert len(result) == 4

    def test_extract_without_flags_is_usage_error(self, tmp_path):
        spec = cheap_spec(tmp_path, gates=(0.0,), drains=(0.0,))
        out = tmp_path / "out"
        main(["sweep", "--spec", str(spec), "--out", str(out)])
        code = main(["extract", "--sweep-csv", str(out / "sweep.csv")])
        assert code == EXIT_SPEC
