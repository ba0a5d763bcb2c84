"""Declarative device specs and the gate/drain/temperature sweep driver.

A device spec is a versioned JSON document naming the geometry (inline
builder steps or an XYZ file), parameter files, calculator settings, spatial
regions, electrode charges and sweep grids. ``run_sweep`` executes the
protocol (gate outer, drain inner), warm-starting each point from its
predecessor and flushing partial results so interrupted runs resume.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import geometry as geo
from .basis import load_parameter_file
from .hamiltonian import TightBindingModel
from .outputs import SweepResult, SweepRow, write_outputs
from .scf import SCFSettings, bulk_scf, device_scf
from .sktable import parse_skf, SlaterKosterTable
from .transport import (
    TransmissionSpectrum,
    conductance,
    landauer_current,
)

__all__ = [
    "SpecError",
    "DeviceSpec",
    "parse_device_spec",
    "build_geometry",
    "build_device",
    "make_model",
    "run_sweep",
    "extract_vth",
    "extract_off_state",
]

SCHEMA = "nwsim-device-1"

DEFAULTS = {
    "scheme": "wolfsberg",
    "mesh_cutoff_ha": 20.0,
    "k_points": 100,
    "eta_ev": 1e-6,
    "max_range_A": 10.0,
    "spectrum": {"emin_eV": -4.0, "emax_eV": 4.0, "points": 301},
}


class SpecError(ValueError):
    """Invalid device specification file."""


@dataclass
class DeviceSpec:
    geometry: dict
    parameter_files: list
    skf_files: list
    calculator: dict
    scf: SCFSettings
    regions: list
    electrode_charges: tuple
    electrode_lengths: tuple          # (left, right) in A or None
    gate_values: list
    drain_values: list
    temperatures: list
    source_path: str = ""

    def to_json(self) -> str:
        doc = {
            "schema": SCHEMA,
            "geometry": self.geometry,
            "parameters": list(self.parameter_files),
            "skf": list(self.skf_files),
            "calculator": dict(self.calculator),
            "scf": {
                "mixing": self.scf.mixing,
                "tolerance": self.scf.tolerance,
                "max_iterations": self.scf.max_iterations,
                "k_points": self.scf.k_points,
                "eta_density_eV": self.scf.eta_density,
                "density_knots": self.scf.density_knots,
                "pulay_depth": self.scf.pulay_depth,
            },
            "regions": list(self.regions),
            "electrode_charges": list(self.electrode_charges),
            "electrode_lengths_A": list(self.electrode_lengths),
            "sweeps": {
                "gate_V": list(self.gate_values),
                "drain_V": list(self.drain_values),
                "temperature_K": list(self.temperatures),
            },
        }
        return json.dumps(doc, indent=2) + "\n"


_TOP_KEYS = {
    "schema", "geometry", "parameters", "skf", "calculator", "scf",
    "regions", "electrode_charges", "electrode_lengths_A", "sweeps",
}
_CALC_KEYS = {
    "scheme", "mesh_cutoff_ha", "k_points", "eta_ev", "max_range_A",
    "spectrum",
}
_SCF_KEYS = {
    "mixing", "tolerance", "max_iterations", "eta_density_eV",
    "density_knots", "pulay_depth", "k_points",
}
_REGION_KEYS = {
    "kind", "value", "start_point_A", "end_point_A", "inner_radius_A",
    "thickness_A", "gate",
}


def _reject_unknown(mapping: dict, allowed: set, where: str):
    unknown = set(mapping) - allowed
    if unknown:
        raise SpecError(f"{where}: unknown key(s) {sorted(unknown)}")


def parse_device_spec(path) -> DeviceSpec:
    """Load and validate a device spec; defaults are filled in."""
    path = Path(path)
    if not path.exists():
        raise SpecError(f"spec file {path} does not exist")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SpecError(f"{path}: {exc}") from None
    if not isinstance(doc, dict):
        raise SpecError(f"{path}: top level must be an object")
    _reject_unknown(doc, _TOP_KEYS, str(path))
    if doc.get("schema") != SCHEMA:
        raise SpecError(
            f"{path}: schema must be {SCHEMA!r}, got {doc.get('schema')!r}"
        )
    if "geometry" not in doc:
        raise SpecError(f"{path}: missing geometry section")

    calculator = dict(DEFAULTS)
    spectrum = dict(DEFAULTS["spectrum"])
    user_calc = doc.get("calculator", {})
    _reject_unknown(user_calc, _CALC_KEYS, f"{path}:calculator")
    spectrum.update(user_calc.get("spectrum", {}))
    calculator.update({k: v for k, v in user_calc.items() if k != "spectrum"})
    calculator["spectrum"] = spectrum

    scf_doc = dict(doc.get("scf", {}))
    _reject_unknown(scf_doc, _SCF_KEYS, f"{path}:scf")
    scf = SCFSettings(
        mixing=scf_doc.get("mixing", 0.1),
        tolerance=scf_doc.get("tolerance", 1e-4),
        max_iterations=int(scf_doc.get("max_iterations", 200)),
        k_points=int(scf_doc.get("k_points", calculator["k_points"])),
        mesh_cutoff=calculator["mesh_cutoff_ha"],
        eta_density=scf_doc.get("eta_density_eV", 1e-3),
        density_knots=int(scf_doc.get("density_knots", 121)),
        pulay_depth=int(scf_doc.get("pulay_depth", 0)),
    )

    params = list(doc.get("parameters", []))
    skf = list(doc.get("skf", []))
    if not params and not skf:
        raise SpecError(f"{path}: no parameter or .skf files given")
    base = path.parent
    for p in params + skf:
        if not (base / p).exists() and not Path(p).exists():
            raise SpecError(f"{path}: referenced file {p!r} does not exist")

    regions = []
    for i, reg in enumerate(doc.get("regions", [])):
        _reject_unknown(reg, _REGION_KEYS, f"{path}:regions[{i}]")
        for key in ("kind", "value", "start_point_A", "end_point_A",
                    "inner_radius_A", "thickness_A"):
            if key not in reg:
                raise SpecError(f"{path}:regions[{i}]: missing {key!r}")
        regions.append(dict(reg))

    sweeps = doc.get("sweeps", {})
    _reject_unknown(sweeps, {"gate_V", "drain_V", "temperature_K"},
                    f"{path}:sweeps")
    gates = [float(x) for x in sweeps.get("gate_V", [0.0])]
    drains = [float(x) for x in sweeps.get("drain_V", [0.0])]
    temps = [float(x) for x in sweeps.get("temperature_K", [300.0])]
    for name, grid in (("gate_V", gates), ("drain_V", drains),
                       ("temperature_K", temps)):
        if not grid:
            raise SpecError(f"{path}: sweep grid {name} is empty")

    charges = doc.get("electrode_charges", [0.0, 0.0])
    if len(charges) != 2:
        raise SpecError(f"{path}: electrode_charges needs two values")
    lengths = doc.get("electrode_lengths_A", [None, None])

    return DeviceSpec(
        geometry=doc["geometry"],
        parameter_files=params,
        skf_files=skf,
        calculator=calculator,
        scf=scf,
        regions=regions,
        electrode_charges=tuple(float(q) for q in charges),
        electrode_lengths=tuple(lengths),
        gate_values=gates,
        drain_values=drains,
        temperatures=temps,
        source_path=str(path),
    )


_BUILDER_OPS = {
    "bulk", "cleave", "repeat", "cell_lengths", "center", "wrap",
    "passivate", "substitute", "chain",
}


def build_geometry(spec: DeviceSpec) -> geo.AtomicStructure:
    """Materialize the spec's geometry: XYZ file or inline builder steps."""
    gdoc = spec.geometry
    base = Path(spec.source_path).parent if spec.source_path else Path(".")
    if "xyz" in gdoc:
        p = Path(gdoc["xyz"])
        if not p.exists():
            p = base / gdoc["xyz"]
        return geo.read_xyz(p)
    steps = gdoc.get("builder")
    if not steps:
        raise SpecError("geometry needs either 'xyz' or 'builder' steps")
    s = None
    for i, step in enumerate(steps):
        op = step.get("op")
        if op not in _BUILDER_OPS:
            raise SpecError(f"geometry.builder[{i}]: unknown op {op!r}")
        if op == "bulk":
            s = geo.build_bulk_crystal(step["a"], step.get(
                "prototype", "diamond-cubic"))
        elif op == "chain":
            a, b = step.get("cell_A", [10.0, 10.0])
            spacing = step["spacing_A"]
            z = geo.number_for(step.get("element", "H"))
            cell = geo.LatticeCell(np.diag([a, b, spacing]))
            s = geo.AtomicStructure(cell, [z], [[a / 2, b / 2, spacing / 2]])
        elif s is None:
            raise SpecError(f"geometry.builder[{i}]: {op} before a structure")
        elif op == "cleave":
            s = geo.cleave_surface(s, step["miller"])
        elif op == "repeat":
            s = geo.repeat(s, *step["n"])
        elif op == "cell_lengths":
            s = geo.with_cell_lengths(s, step.get("a"), step.get("b"),
                                      step.get("c"))
        elif op == "center":
            s = geo.center(s, step.get("axes", "ab"))
        elif op == "wrap":
            s = geo.wrap(s)
        elif op == "passivate":
            s = geo.passivate_hydrogen(s, step.get("bond_length_A", 1.48))
        elif op == "substitute":
            s = geo.substitute_dopants(
                s, step["sites"], geo.number_for(step["element"])
            )
    return s


def make_model(spec: DeviceSpec) -> TightBindingModel:
    base = Path(spec.source_path).parent if spec.source_path else Path(".")

    def resolve(p):
        return p if Path(p).exists() else base / p

    params = {}
    for p in spec.parameter_files:
        params = load_parameter_file(resolve(p), params)
    table = None
    if spec.skf_files:
        table = SlaterKosterTable()
        for p in spec.skf_files:
            pair, entry = parse_skf(resolve(p))
            table.add_pair(*pair, entry)
    scheme = spec.calculator["scheme"]
    return TightBindingModel(
        params, scheme=scheme, table=table if scheme == "slater-koster" else None,
        max_range=spec.calculator["max_range_A"],
    )


def _regions_for_gate(spec: DeviceSpec, gate_v: float):
    out = []
    for reg in spec.regions:
        value = reg["value"]
        if reg["kind"] == "metallic" and reg.get("gate", True):
            value = gate_v
        out.append(
            geo.TubeRegion(
                kind=reg["kind"], value=value,
                start_point=reg["start_point_A"],
                end_point=reg["end_point_A"],
                inner_radius=reg["inner_radius_A"],
                thickness=reg["thickness_A"],
            )
        )
    return tuple(out)


def build_device(spec: DeviceSpec, model: TightBindingModel,
                 gate_v: float = 0.0) -> geo.DeviceStructure:
    wire = build_geometry(spec)
    left, right = spec.electrode_lengths
    device = geo.make_device(
        wire, left, right, interaction_range=model.interaction_range()
    )
    device = replace(
        device,
        electrode_charges=spec.electrode_charges,
        regions=_regions_for_gate(spec, gate_v),
    )
    return device


def _thread_count() -> int:
    try:
        return max(1, int(os.environ.get("NWSIM_THREADS", "1")))
    except ValueError:
        return 1


def compute_spectrum(greens, energies, energy_zero: float) -> TransmissionSpectrum:
    """T(E) over the grid; energy points are independent work items."""
    energies = np.asarray(energies, dtype=float)
    workers = _thread_count()
    if workers == 1:
        values = [greens.transmission(energy_zero + e) for e in energies]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            values = list(
                pool.map(lambda e: greens.transmission(energy_zero + e),
                         energies)
            )
    return TransmissionSpectrum(
        energies=energies, values=np.array(values),
        energy_zero=energy_zero, eta=greens.eta,
    )


def run_sweep(spec: DeviceSpec, out_dir, resume: bool = False,
              progress=None) -> SweepResult:
    """Execute the sweep protocol; returns the full result table.

    Rows are ordered temperature, then gate (outer), then drain (inner).
    After every point the partial result is flushed to
    ``out_dir/sweep_checkpoint.json`` so an interrupted run resumes; per
    point the transmission spectrum lands in a CSV next to it.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    checkpoint_path = out_dir / "sweep_checkpoint.json"

    done: dict = {}
    if resume and checkpoint_path.exists():
        prior = SweepResult.from_json(checkpoint_path.read_text())
        done = {row.key(): row for row in prior.rows}

    model = make_model(spec)
    sp = spec.calculator["spectrum"]
    energies = np.linspace(sp["emin_eV"], sp["emax_eV"], int(sp["points"]))
    eta = spec.calculator["eta_ev"]

    from .scf import load_checkpoint, save_checkpoint

    def _state_path(key) -> Path:
        return out_dir / ("scfstate_" + "_".join(key) + ".json")

    def _resolve_warm(ref):
        if ref is None:
            return None
        kind, payload = ref
        if kind == "state":
            return payload
        p = _state_path(payload)
        return load_checkpoint(p) if p.exists() else None

    result = SweepResult()
    for temperature in spec.temperatures:
        scf_settings = replace_temperature(spec.scf, temperature)
        electrode_states = None
        prev_gate_seed = None
        for vg in spec.gate_values:
            warm_ref = prev_gate_seed
            this_gate_seed = None
            for iv, vd in enumerate(spec.drain_values):
                key = (f"{temperature:.12g}", f"{vg:.12g}", f"{vd:.12g}")
                if key in done:
                    result.append(done[key])
                    warm_ref = ("key", key)
                    if iv == 0:
                        this_gate_seed = ("key", key)
                    continue
                device = build_device(spec, model, gate_v=vg)
                if electrode_states is None:
                    electrode_states = (
                        bulk_scf(device.left_electrode, model, scf_settings,
                                 charge=device.electrode_charges[0]),
                        bulk_scf(device.right_electrode, model, scf_settings,
                                 charge=device.electrode_charges[1]),
                    )
                state = device_scf(
                    device, model, scf_settings, bias=vd,
                    electrode_states=electrode_states,
                    initial=_resolve_warm(warm_ref),
                )
                save_checkpoint(state, _state_path(key))
                warm_ref = ("state", state)
                if iv == 0:
                    this_gate_seed = ("state", state)

                greens = state.greens
                greens.eta = eta
                spectrum = compute_spectrum(greens, energies, state.energy_zero)
                spectrum.write_csv(
                    out_dir / _spectrum_name(temperature, vg, vd)
                )
                current = landauer_current(
                    spectrum, 0.5 * vd, -0.5 * vd, temperature
                )
                g_val = conductance(spectrum, 0.0, temperature)
                row = SweepRow(
                    vg=vg, vd=vd, temperature=temperature,
                    current=current, conductance=g_val,
                    converged=state.converged, iterations=state.iterations,
                )
                result.append(row)
                checkpoint_path.write_text(result.to_json())
                if progress is not None:
                    progress(row)
            prev_gate_seed = this_gate_seed
    # canonical outputs rewritten from the complete table
    checkpoint_path.write_text(result.to_json())
    write_outputs(result, out_dir)
    return result


def _spectrum_name(temperature, vg, vd) -> str:
    return (
        f"transmission_T{temperature:g}K_VG{vg:g}V_VD{vd:g}V.csv"
        .replace("-", "m")
    )


def replace_temperature(settings: SCFSettings, temperature: float):
    from dataclasses import replace as drep

    return drep(settings, temperature=temperature)


def extract_vth(transfer_points) -> float:
    """Threshold voltage via maximum-transconductance extrapolation.

    ``transfer_points`` are (V_G, I_D) pairs at fixed drain voltage. The
    saturation-regime transfer curve is linearized as sqrt(I_D); the tangent
    at its steepest point is extended to zero and the V_G intercept is the
    threshold. Exactly covariant under rigid V_G translation.
    """
    pts = sorted((float(v), float(i)) for v, i in transfer_points)
    if len(pts) < 4:
        raise ValueError("threshold extraction needs at least 4 points")
    vg = np.array([p[0] for p in pts])
    cur = np.array([abs(p[1]) for p in pts])
    if cur.max() - cur.min() <= 0.0:
        raise ValueError("flat transfer curve: no turn-on to extrapolate")
    root = np.sqrt(cur)
    gm = np.gradient(root, vg)
    k = int(np.argmax(gm))
    if gm[k] <= 0:
        raise ValueError("non-monotone turn-on: no positive-gm region")
    return float(vg[k] - root[k] / gm[k])


def extract_off_state(result: SweepResult, vg_off: float) -> list:
    """Off-state rows at V_G = vg_off: (V_D, I_off, G_off) per drain value."""
    gates = result.gate_values()
    if not any(abs(vg_off - v) < 1e-12 for v in gates):
        raise ValueError(
            f"V_G = {vg_off} is not on the sweep grid {gates}"
        )
    rows = [r for r in result.rows if abs(r.vg - vg_off) < 1e-12]
    return [(r.vd, r.current, r.conductance) for r in rows]
