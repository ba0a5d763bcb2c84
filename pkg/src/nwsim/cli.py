"""Command-line interface.

Subcommands: build, bands, transmission, sweep, extract, plot. All paths
are explicit flags; nothing is written implicitly to the working directory.
Exit codes: 0 success, 2 spec/usage error, 3 at least one sweep point failed
to converge (results are still written).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import runner
from .geometry import GeometryError, write_xyz
from .outputs import read_sweep_csv, write_outputs
from .runner import SpecError, parse_device_spec
from .scf import SCFError, bulk_scf
from .transport import electrode_bands

EXIT_OK = 0
EXIT_SPEC = 2
EXIT_SCF = 3


def _parse_grid(text: str):
    """Parse 'a:b:step' ranges or comma lists into a float list."""
    if ":" in text:
        a, b, step = (float(x) for x in text.split(":"))
        n = int(round((b - a) / step)) + 1
        return [round(a + i * step, 12) for i in range(n)]
    return [float(x) for x in text.split(",") if x.strip()]


def _add_spec_out(p):
    p.add_argument("--spec", required=True, help="device spec JSON file")
    p.add_argument("--out", required=True, help="output directory")


def _cmd_build(args) -> int:
    spec = parse_device_spec(args.spec)
    structure = runner.build_geometry(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_xyz(structure, out / "geometry.xyz")
    model = runner.make_model(spec)
    device = runner.build_device(spec, model)
    info = {
        "atoms": len(structure),
        "cell_A": structure.cell.vectors.tolist(),
        "electrode_atoms": len(device.left_electrode),
        "electrode_length_A": float(
            np.linalg.norm(device.left_electrode.cell.vectors[2])
        ),
        "regions": len(device.regions),
    }
    (out / "device.json").write_text(json.dumps(info, indent=2) + "\n")
    print(f"wrote {out / 'geometry.xyz'} ({info['atoms']} atoms)")
    return EXIT_OK


def _cmd_bands(args) -> int:
    spec = parse_device_spec(args.spec)
    model = runner.make_model(spec)
    device = runner.build_device(spec, model)
    from .hamiltonian import partition

    part = partition(device, model)
    ks = np.linspace(0.0, np.pi, args.kpoints)
    h00, s00, h01, s01 = part.left
    bands = electrode_bands(h00, s00, h01, s01, ks)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["k," + ",".join(f"band{i}" for i in range(bands.energies.shape[1]))]
    for k, row in zip(bands.ks, bands.energies):
        lines.append(f"{k:.17g}," + ",".join(f"{e:.17g}" for e in row))
    (out / "bands.csv").write_text("\n".join(lines) + "\n")
    print(f"wrote {out / 'bands.csv'}")
    return EXIT_OK


def _cmd_transmission(args) -> int:
    spec = parse_device_spec(args.spec)
    model = runner.make_model(spec)
    device = runner.build_device(spec, model, gate_v=args.gate)
    settings = runner.replace_temperature(spec.scf, args.temp)
    from .scf import device_scf

    state = device_scf(device, model, settings, bias=args.drain)
    sp = spec.calculator["spectrum"]
    energies = np.linspace(sp["emin_eV"], sp["emax_eV"], int(sp["points"]))
    greens = state.greens
    greens.eta = spec.calculator["eta_ev"]
    spectrum = runner.compute_spectrum(greens, energies, state.energy_zero)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "transmission.csv"
    spectrum.write_csv(path)
    print(f"wrote {path} (converged={state.converged})")
    return EXIT_OK if state.converged else EXIT_SCF


def _cmd_sweep(args) -> int:
    spec = parse_device_spec(args.spec)
    if args.gate:
        spec.gate_values = _parse_grid(args.gate)
    if args.drain:
        spec.drain_values = _parse_grid(args.drain)
    if args.temp:
        spec.temperatures = _parse_grid(args.temp)

    def progress(row):
        print(
            f"T={row.temperature:g} K VG={row.vg:g} V VD={row.vd:g} V -> "
            f"I={row.current:.6g} A G={row.conductance:.6g} S "
            f"({'ok' if row.converged else 'UNCONVERGED'}, "
            f"{row.iterations} it)",
            flush=True,
        )

    result = runner.run_sweep(spec, args.out, resume=args.resume,
                              progress=progress)
    n_fail = sum(1 for r in result.rows if not r.converged)
    print(f"{len(result)} rows written to {args.out}")
    return EXIT_SCF if n_fail else EXIT_OK


def _cmd_extract(args) -> int:
    result = read_sweep_csv(args.sweep_csv)
    out = {}
    if args.vd is not None:
        transfer = result.transfer(args.vd)
        out["vth_V"] = runner.extract_vth(transfer)
    if args.vg_off is not None:
        off = runner.extract_off_state(result, args.vg_off)
        out["off_state"] = [
            {"vd_V": vd, "current_A": i, "conductance_S": g}
            for vd, i, g in off
        ]
    if not out:
        print("nothing to extract: pass --vd and/or --vg-off", file=sys.stderr)
        return EXIT_SPEC
    text = json.dumps(out, indent=2)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "extracted.json").write_text(text + "\n")
    print(text)
    return EXIT_OK


def _cmd_plot(args) -> int:
    result = read_sweep_csv(args.sweep_csv)
    paths = write_outputs(result, args.out, formats=("svg",))
    for p in paths.values():
        print(f"wrote {p}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="nwsim",
        description="semi-empirical tight-binding + NEGF nanowire simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build", help="materialize the spec geometry")
    _add_spec_out(p)
    p.set_defaults(func=_cmd_build)

    p = sub.add_parser("bands", help="electrode band structure")
    _add_spec_out(p)
    p.add_argument("--kpoints", type=int, default=100)
    p.set_defaults(func=_cmd_bands)

    p = sub.add_parser("transmission", help="single-point T(E)")
    _add_spec_out(p)
    p.add_argument("--gate", type=float, default=0.0)
    p.add_argument("--drain", type=float, default=0.0)
    p.add_argument("--temp", type=float, default=300.0)
    p.set_defaults(func=_cmd_transmission)

    p = sub.add_parser("sweep", help="gate/drain/temperature sweep")
    _add_spec_out(p)
    p.add_argument("--gate", help="a:b:step or comma list (V)")
    p.add_argument("--drain", help="a:b:step or comma list (V)")
    p.add_argument("--temp", help="comma list (K)")
    p.add_argument("--resume", action="store_true",
                   help="continue an interrupted sweep")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("extract", help="V_TH / off-state from a sweep CSV")
    p.add_argument("--sweep-csv", required=True)
    p.add_argument("--vd", type=float, help="drain voltage of the transfer curve")
    p.add_argument("--vg-off", type=float, help="off-state gate voltage")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_extract)

    p = sub.add_parser("plot", help="SVG characteristic plots from a sweep CSV")
    p.add_argument("--sweep-csv", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_plot)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (SpecError, GeometryError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SPEC
    except SCFError as exc:
        print(f"scf error: {exc}", file=sys.stderr)
        return EXIT_SCF


if __name__ == "__main__":
    sys.exit(main())
