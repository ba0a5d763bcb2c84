"""Tabulated two-center matrix elements (Slater-Koster tables).

Tables hold, per ordered element pair, the distance-resolved channel values
s(d, l1, l2, m) for the Hamiltonian (eV) and the overlap (dimensionless) on a
Bohr grid, plus an optional repulsive pair potential. They can be parsed
from DFTB-consortium .skf files or generated from Slater-orbital bases.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline

from .basis import ElementParameters, ShellParameters
from .geometry import number_for, symbol_for
from .twocenter import sk_decompose
from .units import ANGSTROM_BOHR, HARTREE_EV

__all__ = [
    "PairTable",
    "SlaterKosterTable",
    "SkfFormatError",
    "parse_skf",
    "write_skf",
    "build_huckel_table",
]

# column order of the 10 H (then 10 S) integrals in an .skf line
SKF_CHANNELS = (
    (2, 2, 0), (2, 2, 1), (2, 2, 2),
    (1, 2, 0), (1, 2, 1),
    (1, 1, 0), (1, 1, 1),
    (0, 2, 0),
    (0, 1, 0),
    (0, 0, 0),
)


class SkfFormatError(ValueError):
    """Malformed Slater-Koster file."""


@dataclass
class RepulsivePotential:
    """Repulsive pair potential: cubic-spline segments plus exp short range.

    Energies in eV, distances in Bohr, following the .skf spline block.
    """

    cutoff: float
    exp_coeffs: tuple = (0.0, 0.0, 0.0)
    segments: tuple = ()        # (start, end, (c0, c1, ...)) per segment

    def __call__(self, d: float) -> float:
        if d >= self.cutoff or not self.segments:
            return 0.0
        if d < self.segments[0][0]:
            a1, a2, a3 = self.exp_coeffs
            return (math.exp(-a1 * d + a2) + a3) * HARTREE_EV
        for start, end, coeffs in self.segments:
            if start <= d <= end + 1e-12:
                x = d - start
                return sum(c * x**k for k, c in enumerate(coeffs)) * HARTREE_EV
        return 0.0


@dataclass
class PairTable:
    """Channel samples for one ordered element pair (first orbital on z1)."""

    grid: np.ndarray                      # Bohr, strictly increasing
    hamiltonian: dict = field(default_factory=dict)   # (l1,l2,m) -> eV samples
    overlap: dict = field(default_factory=dict)       # (l1,l2,m) -> samples
    repulsive: RepulsivePotential | None = None
    onsite_energies: dict = field(default_factory=dict)   # l -> eV (homo files)
    hubbard: dict = field(default_factory=dict)            # l -> eV
    occupations: dict = field(default_factory=dict)        # l -> electrons
    _splines: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)
        if (np.diff(self.grid) <= 0).any():
            raise SkfFormatError("table distance grid must be strictly increasing")

    @property
    def cutoff(self) -> float:
        return float(self.grid[-1])

    def channels(self):
        return sorted(set(self.hamiltonian) | set(self.overlap))

    def value(self, l1, l2, m, d, which: str):
        store = self.hamiltonian if which == "H" else self.overlap
        key = (l1, l2, m)
        if key not in store:
            raise KeyError(key)
        spline = self._splines.get((which, key))
        if spline is None:
            spline = CubicSpline(self.grid, store[key], extrapolate=True)
            self._splines[(which, key)] = spline
        d = np.asarray(d, dtype=float)
        out = spline(d)
        return np.where(d >= self.cutoff, 0.0, out)


class SlaterKosterTable:
    """Lookup of tabulated two-center integrals for many element pairs."""

    def __init__(self):
        self.pairs: dict = {}

    def add_pair(self, z1: int, z2: int, table: PairTable) -> None:
        self.pairs[(z1, z2)] = table

    def has_pair(self, z1: int, z2: int) -> bool:
        return (z1, z2) in self.pairs or (z2, z1) in self.pairs

    def cutoff(self, z1: int, z2: int) -> float:
        entry = self.pairs.get((z1, z2)) or self.pairs.get((z2, z1))
        if entry is None:
            raise KeyError(f"no table for element pair ({z1}, {z2})")
        return entry.cutoff

    def max_cutoff(self) -> float:
        return max(t.cutoff for t in self.pairs.values())

    def interpolate(self, z1, z2, l1, l2, m, d, which: str):
        """Channel value for orbital l1 on element z1, l2 on z2, distance d (Bohr).

        Exactly zero at and beyond the pair cutoff. Missing direct entries
        fall back on the exchanged pair via the parity rule
        s(l2, l1, m | z2, z1) = (-1)^(l1+l2) s(l1, l2, m | z1, z2).
        """
        if which not in ("H", "S"):
            raise ValueError("which must be 'H' or 'S'")
        if np.any(np.asarray(d) <= 0):
            raise ValueError("distance must be positive")
        attempts = (
            ((z1, z2), (l1, l2, m), 1.0),
            ((z2, z1), (l2, l1, m), (-1.0) ** (l1 + l2)),
            ((z1, z2), (l2, l1, m), (-1.0) ** (l1 + l2)) if z1 == z2 else None,
        )
        pair_seen = False
        for attempt in attempts:
            if attempt is None:
                continue
            pair_key, channel, sign = attempt
            entry = self.pairs.get(pair_key)
            if entry is None:
                continue
            pair_seen = True
            try:
                return sign * entry.value(*channel, d, which)
            except KeyError:
                continue
        if not pair_seen:
            raise KeyError(f"no table for element pair ({z1}, {z2})")
        raise KeyError(
            f"pair ({symbol_for(z1)}, {symbol_for(z2)}) lacks channel "
            f"(l1={l1}, l2={l2}, m={m})"
        )

    def pair_potential(self, z1, z2, d) -> float:
        """Repulsive pair energy (eV) at distance d (Bohr)."""
        entry = self.pairs.get((z1, z2)) or self.pairs.get((z2, z1))
        if entry is None:
            raise KeyError(f"no table for element pair ({z1}, {z2})")
        if entry.repulsive is None:
            return 0.0
        return entry.repulsive(float(d))


def _parse_floats(line: str, count: int, lineno: int, path) -> list:
    parts = line.replace(",", " ").split()
    if len(parts) != count:
        raise SkfFormatError(
            f"{path}:{lineno}: expected {count} columns, found {len(parts)}"
        )
    try:
        return [float(p) for p in parts]
    except ValueError as exc:
        raise SkfFormatError(f"{path}:{lineno}: {exc}") from None


def parse_skf(path, elements: tuple | None = None) -> tuple:
    """Parse a DFTB-style .skf file.

    Returns ``((z1, z2), PairTable)``. The element pair is taken from the
    file name (``X-Y.skf``) unless given explicitly. Homo-nuclear files also
    carry onsite energies, Hubbard parameters and occupations.
    """
    path = Path(path)
    if elements is None:
        stem = path.name.split(".")[0]
        try:
            s1, s2 = stem.split("-")
            elements = (number_for(s1), number_for(s2))
        except (ValueError, Exception):
            raise SkfFormatError(
                f"cannot infer element pair from file name {path.name!r}"
            )
    z1, z2 = elements
    homo = z1 == z2

    lines = path.read_text().splitlines()
    if not lines:
        raise SkfFormatError(f"{path}: empty file")
    head = lines[0].replace(",", " ").split()
    if len(head) < 2:
        raise SkfFormatError(f"{path}:1: header needs grid spacing and point count")
    try:
        grid_dist = float(head[0])
        n_points = int(float(head[1]))
    except ValueError:
        raise SkfFormatError(f"{path}:1: malformed header") from None
    if grid_dist <= 0 or n_points < 2:
        raise SkfFormatError(f"{path}:1: invalid grid specification")

    lineno = 1
    onsite, hubbard, occupations = {}, {}, {}
    if homo:
        lineno += 1
        if len(lines) < lineno:
            raise SkfFormatError(f"{path}: missing atomic parameter line")
        vals = _parse_floats(lines[lineno - 1], 10, lineno, path)
        e_d, e_p, e_s, _spe, u_d, u_p, u_s, f_d, f_p, f_s = vals
        onsite = {0: e_s * HARTREE_EV, 1: e_p * HARTREE_EV, 2: e_d * HARTREE_EV}
        hubbard = {0: u_s * HARTREE_EV, 1: u_p * HARTREE_EV, 2: u_d * HARTREE_EV}
        occupations = {0: f_s, 1: f_p, 2: f_d}

    lineno += 1
    if len(lines) < lineno:
        raise SkfFormatError(f"{path}: missing mass/polynomial line")
    poly = _parse_floats(lines[lineno - 1], 20, lineno, path)

    h_cols = np.empty((n_points, 10))
    s_cols = np.empty((n_points, 10))
    for i in range(n_points):
        lineno += 1
        if len(lines) < lineno:
            raise SkfFormatError(
                f"{path}: integral table truncated at line {lineno}"
            )
        row = _parse_floats(lines[lineno - 1], 20, lineno, path)
        h_cols[i] = row[:10]
        s_cols[i] = row[10:]

    grid = grid_dist * np.arange(1, n_points + 1)
    hamiltonian = {}
    overlap = {}
    for col, channel in enumerate(SKF_CHANNELS):
        hamiltonian[channel] = h_cols[:, col] * HARTREE_EV
        overlap[channel] = s_cols[:, col].copy()

    repulsive = _parse_spline_block(lines, lineno, path)
    if repulsive is None and any(abs(c) > 0 for c in poly[1:9]):
        # polynomial repulsion: sum_k c_k (rcut - r)^k, k = 2..9
        rcut = poly[9]
        coeffs = poly[1:9]

        def poly_segments():
            xs = np.linspace(0.2, rcut, 48)
            vals = [
                sum(c * (rcut - x) ** (k + 2) for k, c in enumerate(coeffs))
                for x in xs
            ]
            spline = CubicSpline(xs, vals)
            segs = []
            for a, b in zip(xs[:-1], xs[1:]):
                c = spline.c[::-1, np.searchsorted(xs, a, side="right") - 1]
                segs.append((float(a), float(b), tuple(float(v) for v in c)))
            return tuple(segs)

        repulsive = RepulsivePotential(cutoff=rcut, segments=poly_segments())

    table = PairTable(
        grid=grid,
        hamiltonian=hamiltonian,
        overlap=overlap,
        repulsive=repulsive,
        onsite_energies=onsite,
        hubbard=hubbard,
        occupations=occupations,
    )
    return (z1, z2), table


def _parse_spline_block(lines, lineno, path):
    for i in range(lineno, len(lines)):
        if lines[i].strip().lower() == "spline":
            start = i + 1
            break
    else:
        return None
    header = _parse_floats(lines[start], 2, start + 1, path)
    n_int, cutoff = int(header[0]), header[1]
    exp_coeffs = tuple(_parse_floats(lines[start + 1], 3, start + 2, path))
    segments = []
    for j in range(n_int):
        row_line = start + 2 + j
        want = 8 if j == n_int - 1 else 6
        row = _parse_floats(lines[row_line], want, row_line + 1, path)
        segments.append((row[0], row[1], tuple(row[2:])))
    return RepulsivePotential(cutoff=cutoff, exp_coeffs=exp_coeffs,
                              segments=tuple(segments))


def write_skf(pair, table: PairTable, path) -> None:
    """Serialize a PairTable back to the .skf layout (inverse of parse_skf)."""
    z1, z2 = pair
    homo = z1 == z2
    grid_dist = float(table.grid[1] - table.grid[0])
    n = len(table.grid)
    lines = [f"{grid_dist!r} {n}"]
    if homo:
        e = {l: table.onsite_energies.get(l, 0.0) / HARTREE_EV for l in (0, 1, 2)}
        u = {l: table.hubbard.get(l, 0.0) / HARTREE_EV for l in (0, 1, 2)}
        f = {l: table.occupations.get(l, 0.0) for l in (0, 1, 2)}
        lines.append(
            " ".join(
                repr(v)
                for v in (e[2], e[1], e[0], 0.0, u[2], u[1], u[0], f[2], f[1], f[0])
            )
        )
    lines.append(" ".join(["0.0"] * 20))
    for i in range(n):
        row = [table.hamiltonian[ch][i] / HARTREE_EV for ch in SKF_CHANNELS]
        row += [table.overlap[ch][i] for ch in SKF_CHANNELS]
        lines.append(" ".join(repr(float(v)) for v in row))
    rep = table.repulsive
    if rep is not None and rep.segments:
        lines.append("Spline")
        lines.append(f"{len(rep.segments)} {rep.cutoff!r}")
        lines.append(" ".join(repr(float(c)) for c in rep.exp_coeffs))
        for j, (a, b, coeffs) in enumerate(rep.segments):
            lines.append(
                f"{a!r} {b!r} " + " ".join(repr(float(c)) for c in coeffs)
            )
    Path(path).write_text("\n".join(lines) + "\n")


def _taper_window(grid: np.ndarray, cutoff: float) -> np.ndarray:
    """C1 window forcing tabulated channels to zero exactly at the cutoff."""
    start = 0.9 * cutoff
    w = np.ones_like(grid)
    tail = grid >= start
    w[tail] = 0.5 * (1.0 + np.cos(np.pi * (grid[tail] - start) / (cutoff - start)))
    return w


def build_huckel_table(
    params: dict,
    max_range: float = 10.0,
    spacing: float = 0.03,
) -> SlaterKosterTable:
    """Tabulate overlap channels for all element pairs of a basis.

    ``max_range`` (Angstrom) caps the interaction distance; ``spacing`` is
    the sample step in Bohr. Only overlaps are tabulated: offsite
    Hamiltonians follow from the weighting scheme at assembly time.
    """
    table = SlaterKosterTable()
    zs = sorted(params)
    for i, z1 in enumerate(zs):
        for z2 in zs[i:]:
            p1, p2 = params[z1], params[z2]
            reach = min(
                (p1.interaction_range() + p2.interaction_range()) * ANGSTROM_BOHR,
                2 * max_range * ANGSTROM_BOHR,
            )
            cutoff = min(reach, max_range * ANGSTROM_BOHR)
            grid = np.arange(spacing, cutoff + spacing / 2, spacing)
            grid[-1] = cutoff
            window = _taper_window(grid, cutoff)
            overlap = {}
            for sh1 in p1.shells:
                for sh2 in p2.shells:
                    l1, l2 = sh1.l, sh2.l
                    if z1 == z2 and (l2, l1, 0) in overlap and l1 > l2:
                        continue
                    samples = np.array(
                        [sk_decompose(sh1.orbital, sh2.orbital, d) for d in grid]
                    )
                    for m in range(min(l1, l2) + 1):
                        overlap[(l1, l2, m)] = samples[:, m] * window
            table.add_pair(z1, z2, PairTable(grid=grid, overlap=overlap))
    return table
