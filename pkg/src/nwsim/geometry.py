"""Crystal, nanowire and two-probe device construction.

Structures are immutable: every operation returns a new value. Lengths are
in Angstrom, the transport axis is always the third lattice vector.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from itertools import permutations
from pathlib import Path

import numpy as np

__all__ = [
    "LatticeCell",
    "AtomicStructure",
    "TubeRegion",
    "DeviceStructure",
    "GeometryError",
    "build_bulk_crystal",
    "cleave_surface",
    "repeat",
    "wrap",
    "center",
    "with_cell_lengths",
    "passivate_hydrogen",
    "substitute_dopants",
    "make_device",
    "add_tube_region",
    "write_xyz",
    "read_xyz",
    "symbol_for",
    "number_for",
]

MIN_ATOM_SEPARATION = 0.5      # Angstrom, hard validity limit
SLAB_MATCH_TOL = 1e-6          # Angstrom, electrode/central identity
HH_MIN_SEPARATION = 0.7        # Angstrom, passivation sanity limit

_SYMBOLS = (
    "X H He Li Be B C N O F Ne Na Mg Al Si P S Cl Ar K Ca Sc Ti V Cr Mn Fe "
    "Co Ni Cu Zn Ga Ge As Se Br Kr Rb Sr Y Zr Nb Mo Tc Ru Rh Pd Ag Cd In Sn "
    "Sb Te I Xe"
).split()
_NUMBERS = {s: z for z, s in enumerate(_SYMBOLS)}

# Elements sitting on tetrahedral (diamond-lattice) sites.
_TETRAHEDRAL = {5, 6, 14, 15, 32}

_TETRA_DIRS = np.array(
    [[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=float
) / math.sqrt(3.0)


class GeometryError(ValueError):
    """Invalid structure construction or modification."""


def symbol_for(z: int) -> str:
    return _SYMBOLS[z]


def number_for(symbol: str) -> int:
    try:
        return _NUMBERS[symbol.capitalize()]
    except KeyError:
        raise GeometryError(f"unknown element symbol {symbol!r}") from None


@dataclass(frozen=True)
class LatticeCell:
    """Three lattice vectors, rows of a 3x3 matrix, in Angstrom."""

    vectors: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=float).reshape(3, 3).copy()
        v.setflags(write=False)
        object.__setattr__(self, "vectors", v)
        if abs(np.linalg.det(v)) < 1e-9:
            raise GeometryError("lattice vectors are linearly dependent")

    @property
    def volume(self) -> float:
        return abs(float(np.linalg.det(self.vectors)))

    def lengths(self) -> np.ndarray:
        return np.linalg.norm(self.vectors, axis=1)


@dataclass(frozen=True)
class AtomicStructure:
    """A periodic arrangement of atoms: cell + atomic numbers + positions (A).

    ``pbc`` marks which axes are treated as periodic when measuring
    distances; wires keep all three True and simply carry vacuum in a, b.
    """

    cell: LatticeCell
    numbers: np.ndarray
    positions: np.ndarray
    pbc: tuple = (True, True, True)

    def __post_init__(self):
        n = np.asarray(self.numbers, dtype=int).ravel().copy()
        r = np.asarray(self.positions, dtype=float).reshape(-1, 3).copy()
        if len(n) != len(r):
            raise GeometryError("numbers and positions length mismatch")
        n.setflags(write=False)
        r.setflags(write=False)
        object.__setattr__(self, "numbers", n)
        object.__setattr__(self, "positions", r)
        object.__setattr__(self, "pbc", tuple(bool(b) for b in self.pbc))
        if len(n) > 1:
            dmin = self.min_distance()
            if dmin < MIN_ATOM_SEPARATION:
                raise GeometryError(
                    f"atoms closer than {MIN_ATOM_SEPARATION} A (min {dmin:.3f} A)"
                )

    def __len__(self) -> int:
        return len(self.numbers)

    def fractional(self) -> np.ndarray:
        return self.positions @ np.linalg.inv(self.cell.vectors)

    def min_distance(self) -> float:
        d = pair_distances(self)
        d = d + np.diag(np.full(len(self), np.inf))
        return float(d.min())

    def symbols(self) -> list:
        return [symbol_for(z) for z in self.numbers]


def pair_distances(s: AtomicStructure) -> np.ndarray:
    """All-pair minimum-image distances (A) under the structure's pbc."""
    frac = s.fractional()
    delta = frac[:, None, :] - frac[None, :, :]
    for ax, periodic in enumerate(s.pbc):
        if periodic:
            delta[:, :, ax] -= np.round(delta[:, :, ax])
    cart = delta @ s.cell.vectors
    return np.linalg.norm(cart, axis=-1)


def wrap(s: AtomicStructure) -> AtomicStructure:
    """Map all atoms into the home cell (fractional coordinates in [0, 1))."""
    frac = s.fractional() % 1.0
    frac[frac >= 1.0 - 1e-12] = 0.0   # guard against round-up at the face
    return replace(s, positions=frac @ s.cell.vectors)


def center(s: AtomicStructure, axes: str = "abc") -> AtomicStructure:
    """Translate atoms so their midpoint sits at the cell center."""
    frac = s.fractional()
    shift = np.zeros(3)
    for ax, name in enumerate("abc"):
        if name in axes:
            lo, hi = frac[:, ax].min(), frac[:, ax].max()
            shift[ax] = 0.5 - 0.5 * (lo + hi)
    return replace(s, positions=(frac + shift) @ s.cell.vectors)


def with_cell_lengths(s: AtomicStructure, a=None, b=None, c=None) -> AtomicStructure:
    """Rescale lattice-vector lengths, keeping directions and Cartesian atoms."""
    v = s.cell.vectors.copy()
    for ax, new_len in enumerate((a, b, c)):
        if new_len is not None:
            if new_len <= 0:
                raise GeometryError("cell length must be positive")
            v[ax] *= new_len / np.linalg.norm(v[ax])
    return replace(s, cell=LatticeCell(v))


def build_bulk_crystal(lattice_constant: float, prototype: str) -> AtomicStructure:
    """Conventional cell of a crystal prototype (currently diamond-cubic)."""
    if lattice_constant <= 0:
        raise GeometryError("lattice constant must be positive")
    if prototype not in ("diamond-cubic", "diamond"):
        raise GeometryError(f"unknown crystal prototype {prototype!r}")
    a = lattice_constant
    basis = np.array(
        [
            [0.00, 0.00, 0.00],
            [0.00, 0.50, 0.50],
            [0.50, 0.00, 0.50],
            [0.50, 0.50, 0.00],
            [0.25, 0.25, 0.25],
            [0.25, 0.75, 0.75],
            [0.75, 0.25, 0.75],
            [0.75, 0.75, 0.25],
        ]
    )
    cell = LatticeCell(np.eye(3) * a)
    return AtomicStructure(cell, np.full(8, 14), basis * a)


def _ext_gcd(a: int, b: int):
    """Return (g, x, y) with a*x + b*y = g = gcd(a, b)."""
    if b == 0:
        return a, 1, 0
    g, x, y = _ext_gcd(b, a % b)
    return g, y, x - (a // b) * y


def _integer_cleave_basis(h: int, k: int, l: int) -> np.ndarray:
    """Unimodular integer rows (u, v, w): u, v span the (hkl) plane lattice,
    w advances one plane (w . hkl = 1)."""
    n = np.array([h, k, l])
    g1, x1, y1 = _ext_gcd(h, k)
    if g1 == 0:            # h = k = 0, plane is (0,0,l) with l = +-1
        u = np.array([1, 0, 0])
        v = np.array([0, 1, 0])
        w = np.array([0, 0, l])
    else:
        g2, x2, y2 = _ext_gcd(g1, l)
        # g2 == 1 for a coprime triple
        u = np.array([-k // g1, h // g1, 0])
        v = np.array([x1 * (-l) // g2 * 1, y1 * (-l) // g2 * 1, g1 // g2 * 1])
        # above: v . n = -l*(x1*h + y1*k)/g2 + g1*l/g2 = 0
        w = np.array([x2 * x1, x2 * y1, y2])
    m = np.array([u, v, w])
    det = int(round(np.linalg.det(m)))
    if det == -1:
        m[0] = -m[0]
        det = 1
    if det != 1 or (m @ n != np.array([0, 0, 1])).any():
        raise GeometryError(f"failed to build cleave basis for {(h, k, l)}")
    return m


def _parallel_lattice_vector(cell: np.ndarray, normal: np.ndarray, max_index=4):
    """Shortest integer combination of cell rows parallel to ``normal``."""
    best = None
    rng = range(-max_index, max_index + 1)
    for i in rng:
        for j in rng:
            for k in rng:
                if (i, j, k) == (0, 0, 0):
                    continue
                vec = i * cell[0] + j * cell[1] + k * cell[2]
                if np.linalg.norm(np.cross(vec, normal)) < 1e-8 * np.linalg.norm(vec):
                    if vec @ normal < 0:
                        i, j, k, vec = -i, -j, -k, -vec
                    if best is None or np.linalg.norm(vec) < np.linalg.norm(best[1]):
                        best = (np.array([i, j, k]), vec)
    return best


def _fill_cell(old: AtomicStructure, new_vectors: np.ndarray) -> AtomicStructure:
    """Populate a re-based cell with the atoms of the underlying crystal."""
    inv_new = np.linalg.inv(new_vectors)
    # bounding range of new-cell corners expressed in old lattice coordinates
    corners = np.array(
        [[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=float
    )
    corners_old = corners @ new_vectors @ np.linalg.inv(old.cell.vectors)
    lo = np.floor(corners_old.min(axis=0)).astype(int) - 1
    hi = np.ceil(corners_old.max(axis=0)).astype(int) + 1
    numbers, positions = [], []
    seen = set()
    frac_old = old.fractional() % 1.0
    for i in range(lo[0], hi[0] + 1):
        for j in range(lo[1], hi[1] + 1):
            for k in range(lo[2], hi[2] + 1):
                shift = np.array([i, j, k], dtype=float)
                cart = (frac_old + shift) @ old.cell.vectors
                frac_new = cart @ inv_new
                inside = np.all(
                    (frac_new > -1e-9) & (frac_new < 1.0 - 1e-9), axis=1
                )
                for idx in np.nonzero(inside)[0]:
                    key = tuple(np.round(frac_new[idx] % 1.0, 6) % 1.0)
                    if key in seen:
                        continue
                    seen.add(key)
                    numbers.append(old.numbers[idx])
                    positions.append(frac_new[idx] @ new_vectors)
    return AtomicStructure(LatticeCell(new_vectors), numbers, positions)


def _reduce_in_plane(s: AtomicStructure) -> AtomicStructure:
    """Shrink the first two cell vectors to the primitive in-plane lattice."""
    frac = np.round(s.fractional() % 1.0, 6) % 1.0
    ids = {tuple(np.append(np.round(f, 5), z)) for f, z in zip(frac, s.numbers)}

    def is_symmetry(t_frac):
        moved = (frac + t_frac) % 1.0
        for f, z in zip(np.round(moved, 5) % 1.0, s.numbers):
            if tuple(np.append(f, z)) not in ids:
                return False
        return True

    changed = True
    vectors = s.cell.vectors.copy()
    struct = s
    while changed:
        changed = False
        # candidate in-plane translations: half/third sub-multiples
        for div in (2, 3):
            for ca in range(div):
                for cb in range(div):
                    if ca == cb == 0:
                        continue
                    t = np.array([ca / div, cb / div, 0.0])
                    if is_symmetry(t):
                        new_v = vectors.copy()
                        cart = t @ vectors
                        # replace the longer of a, b keeping independence
                        for axis in (0, 1):
                            trial = new_v.copy()
                            trial[axis] = cart
                            if abs(np.linalg.det(trial)) > 1e-9 and abs(
                                np.linalg.det(trial)
                            ) < abs(np.linalg.det(new_v)) - 1e-9:
                                new_v = trial
                        if abs(np.linalg.det(new_v)) >= abs(np.linalg.det(vectors)) - 1e-9:
                            continue
                        try:
                            smaller = _fill_cell(struct, new_v)
                        except GeometryError:
                            continue
                        ratio = abs(np.linalg.det(new_v) / np.linalg.det(vectors))
                        if abs(len(smaller) - ratio * len(struct)) > 1e-6:
                            continue
                        struct = smaller
                        vectors = struct.cell.vectors.copy()
                        frac = np.round(struct.fractional() % 1.0, 6) % 1.0
                        ids.clear()
                        ids.update(
                            tuple(np.append(np.round(f, 5), z))
                            for f, z in zip(frac, struct.numbers)
                        )
                        changed = True
    return struct


def _gauss_reduce_in_plane(s: AtomicStructure) -> AtomicStructure:
    """Lagrange-reduce the first two cell vectors (shortest basis, same lattice)."""
    v = s.cell.vectors.copy()
    a, b = v[0].copy(), v[1].copy()
    for _ in range(64):
        if np.linalg.norm(a) > np.linalg.norm(b):
            a, b = b.copy(), a.copy()
        ratio = float(a @ b) / float(a @ a)
        mu = int(round(ratio))
        if abs(abs(ratio - np.trunc(ratio)) - 0.5) < 1e-9:
            mu = int(np.trunc(ratio))      # half-integer tie: stop reducing
        if mu == 0:
            break
        b = b - mu * a
    v[0], v[1] = a, b
    if np.linalg.det(v) < 0:
        v[1] = -v[1]
    return AtomicStructure(LatticeCell(v), s.numbers, s.positions, s.pbc)


def _orient_surface_frame(s: AtomicStructure, normal: np.ndarray) -> AtomicStructure:
    """Rigidly rotate so the surface normal is +z and vector a lies along +x."""
    v = s.cell.vectors
    zhat = normal / np.linalg.norm(normal)
    a_in = v[0] - (v[0] @ zhat) * zhat
    if np.linalg.norm(a_in) < 1e-9:
        a_in = v[1] - (v[1] @ zhat) * zhat
    xhat = a_in / np.linalg.norm(a_in)
    yhat = np.cross(zhat, xhat)
    rot = np.array([xhat, yhat, zhat])          # old -> new components
    new_vectors = v @ rot.T
    new_positions = s.positions @ rot.T
    return AtomicStructure(LatticeCell(new_vectors), s.numbers, new_positions)


def cleave_surface(crystal: AtomicStructure, miller) -> AtomicStructure:
    """Re-base a crystal so the third vector is the (hkl) stacking direction.

    The returned cell is rotated so the surface normal points along +z and
    the in-plane lattice is reduced to its primitive form; atom density is
    preserved exactly.
    """
    h, k, l = (int(x) for x in miller)
    if (h, k, l) == (0, 0, 0):
        raise GeometryError("Miller indices (0,0,0) do not define a plane")
    if math.gcd(math.gcd(abs(h), abs(k)), abs(l)) != 1:
        raise GeometryError(f"Miller indices {(h, k, l)} are not coprime")

    m = _integer_cleave_basis(h, k, l)
    new_vectors = m.astype(float) @ crystal.cell.vectors

    # surface normal from the reciprocal lattice
    rec = 2 * np.pi * np.linalg.inv(crystal.cell.vectors).T
    normal = h * rec[0] + k * rec[1] + l * rec[2]

    # prefer a stacking vector truly parallel to the normal when one exists
    par = _parallel_lattice_vector(crystal.cell.vectors, normal)
    if par is not None:
        trial = new_vectors.copy()
        trial[2] = par[1]
        if abs(np.linalg.det(trial)) > 1e-9:
            new_vectors = trial

    if np.linalg.det(new_vectors) < 0:
        new_vectors[1] = -new_vectors[1]

    surf = _fill_cell(crystal, new_vectors)
    surf = _reduce_in_plane(surf)
    surf = _gauss_reduce_in_plane(surf)
    surf = _orient_surface_frame(surf, normal)

    density_in = len(crystal) / crystal.cell.volume
    density_out = len(surf) / surf.cell.volume
    if abs(density_in - density_out) > 1e-9 * density_in:
        raise GeometryError("cleave changed the atom density")
    return wrap(surf)


def repeat(s: AtomicStructure, na: int, nb: int, nc: int) -> AtomicStructure:
    """Tile the structure na x nb x nc times."""
    if min(na, nb, nc) < 1:
        raise GeometryError("repeat factors must be positive integers")
    v = s.cell.vectors
    numbers = np.tile(s.numbers, na * nb * nc)
    positions = []
    for i in range(na):
        for j in range(nb):
            for k in range(nc):
                positions.append(s.positions + i * v[0] + j * v[1] + k * v[2])
    new_cell = LatticeCell(np.array([na * v[0], nb * v[1], nc * v[2]]))
    return AtomicStructure(new_cell, numbers, np.vstack(positions), s.pbc)


def _neighbor_directions(s: AtomicStructure, cutoff: float):
    """Unit bond vectors from every atom to its minimum-image neighbors."""
    frac = s.fractional()
    delta = frac[None, :, :] - frac[:, None, :]
    for ax, periodic in enumerate(s.pbc):
        if periodic:
            delta[:, :, ax] -= np.round(delta[:, :, ax])
    cart = delta @ s.cell.vectors
    dist = np.linalg.norm(cart, axis=-1)
    np.fill_diagonal(dist, np.inf)
    out = []
    for i in range(len(s)):
        js = np.nonzero(dist[i] < cutoff)[0]
        out.append(cart[i, js] / dist[i, js][:, None])
    return out


def _kabsch(ref: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Proper rotation mapping the rows of ref onto target, least squares."""
    h = ref.T @ target
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    return vt.T @ np.diag([1.0, 1.0, d]) @ u.T


def _complete_tetrahedron(existing: np.ndarray) -> np.ndarray:
    """Directions completing ``existing`` bond vectors to a tetrahedron."""
    n = len(existing)
    if n == 0:
        return _TETRA_DIRS.copy()
    if n == 1:
        d = existing[0]
        ref = _TETRA_DIRS[0]
        axis = np.cross(ref, d)
        sin = np.linalg.norm(axis)
        cos = float(ref @ d)
        if sin < 1e-12:
            if cos > 0:
                rot = np.eye(3)
            else:
                # antiparallel: rotate pi about any axis perpendicular to ref
                m = np.cross(ref, [1.0, 0.0, 0.0])
                if np.linalg.norm(m) < 1e-6:
                    m = np.cross(ref, [0.0, 1.0, 0.0])
                m /= np.linalg.norm(m)
                rot = 2.0 * np.outer(m, m) - np.eye(3)
        else:
            axis = axis / sin
            kmat = np.array(
                [
                    [0, -axis[2], axis[1]],
                    [axis[2], 0, -axis[0]],
                    [-axis[1], axis[0], 0],
                ]
            )
            rot = np.eye(3) + sin * kmat + (1 - cos) * kmat @ kmat
        return _TETRA_DIRS[1:] @ rot.T
    best = None
    for perm in permutations(range(4), n):
        ref = _TETRA_DIRS[list(perm)]
        rot = _kabsch(ref, existing)
        err = np.linalg.norm(ref @ rot.T - existing)
        if best is None or err < best[0]:
            rest = [i for i in range(4) if i not in perm]
            best = (err, _TETRA_DIRS[rest] @ rot.T)
    return best[1]


def passivate_hydrogen(s: AtomicStructure, bond_length: float = 1.48) -> AtomicStructure:
    """Cap dangling bonds of tetrahedral atoms with hydrogen.

    Every atom with fewer neighbors than its bulk coordination gains H along
    the ideal missing-bond directions at ``bond_length``. Existing atoms are
    never moved.
    """
    if bond_length <= 0:
        raise GeometryError("bond length must be positive")
    heavy = np.isin(s.numbers, list(_TETRAHEDRAL))
    if not heavy.any():
        return s
    dist = pair_distances(s) + np.diag(np.full(len(s), np.inf))
    ideal = float(dist[np.ix_(heavy, heavy)].min()) if heavy.sum() > 1 else 2.35
    cutoff = 1.2 * ideal
    directions = _neighbor_directions(s, cutoff)

    inv_cell = np.linalg.inv(s.cell.vectors)
    new_numbers = list(s.numbers)
    new_positions = list(s.positions)
    added = []
    for i in range(len(s)):
        if s.numbers[i] not in _TETRAHEDRAL:
            continue
        missing = _complete_tetrahedron(directions[i])
        order = np.lexsort(np.round(missing, 9).T)
        for d in missing[order]:
            pos = s.positions[i] + bond_length * d
            frac = pos @ inv_cell
            for ax in (0, 1):
                if frac[ax] < -1e-9 or frac[ax] > 1 + 1e-9:
                    raise GeometryError(
                        "insufficient vacuum: passivating H leaves the cell"
                    )
            new_numbers.append(1)
            new_positions.append(pos)
            added.append(pos)
    if len(added) > 1:
        added = np.array(added)
        dd = np.linalg.norm(added[:, None] - added[None, :], axis=-1)
        np.fill_diagonal(dd, np.inf)
        if dd.min() < HH_MIN_SEPARATION:
            raise GeometryError(
                f"passivation produced H-H contact below {HH_MIN_SEPARATION} A"
            )
    return AtomicStructure(s.cell, new_numbers, new_positions, s.pbc)


def substitute_dopants(s: AtomicStructure, sites, element: int) -> AtomicStructure:
    """Replace the listed host sites by ``element``; positions stay put.

    A site may be doped when it currently holds Si, or restored back to Si;
    re-doping an already substituted site with a different dopant is refused.
    """
    numbers = np.array(s.numbers)
    for idx in sites:
        if not 0 <= idx < len(s):
            raise GeometryError(f"dopant site {idx} out of range")
        if numbers[idx] != 14 and element != 14:
            raise GeometryError(
                f"site {idx} already substituted ({symbol_for(numbers[idx])})"
            )
        numbers[idx] = element
    return replace(s, numbers=numbers)


@dataclass(frozen=True)
class TubeRegion:
    """Cylindrical shell region: metallic gate or dielectric coating.

    ``kind`` is "metallic" (value = gate potential in Volt) or "dielectric"
    (value = relative permittivity kappa).
    """

    kind: str
    value: float
    start_point: tuple
    end_point: tuple
    inner_radius: float
    thickness: float

    def __post_init__(self):
        if self.kind not in ("metallic", "dielectric"):
            raise GeometryError(f"unknown region kind {self.kind!r}")
        object.__setattr__(self, "start_point", tuple(float(x) for x in self.start_point))
        object.__setattr__(self, "end_point", tuple(float(x) for x in self.end_point))
        if self.thickness <= 0:
            raise GeometryError("tube thickness must be positive")
        if self.inner_radius < 0:
            raise GeometryError("tube inner radius must be non-negative")
        if np.allclose(self.start_point, self.end_point):
            raise GeometryError("tube start and end points coincide")
        if self.kind == "dielectric" and self.value < 1.0:
            raise GeometryError("relative permittivity must be >= 1")

    @property
    def outer_radius(self) -> float:
        return self.inner_radius + self.thickness

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Boolean mask of Cartesian points (A) inside the shell."""
        p0 = np.asarray(self.start_point)
        axis = np.asarray(self.end_point) - p0
        length = np.linalg.norm(axis)
        axis = axis / length
        rel = np.atleast_2d(points) - p0
        t = rel @ axis
        radial = np.linalg.norm(rel - np.outer(t, axis), axis=-1)
        return (
            (t >= 0.0)
            & (t <= length)
            & (radial >= self.inner_radius)
            & (radial <= self.outer_radius)
        )


@dataclass(frozen=True)
class DeviceStructure:
    """Two-probe device: central region flanked by periodic electrodes."""

    central: AtomicStructure
    left_electrode: AtomicStructure
    right_electrode: AtomicStructure
    electrode_charges: tuple = (0.0, 0.0)
    regions: tuple = ()

    def __post_init__(self):
        object.__setattr__(
            self, "electrode_charges", tuple(float(q) for q in self.electrode_charges)
        )
        object.__setattr__(self, "regions", tuple(self.regions))
        _check_slab_match(self.central, self.left_electrode, "left")
        _check_slab_match(self.central, self.right_electrode, "right")

    def transport_length(self) -> float:
        return float(np.linalg.norm(self.central.cell.vectors[2]))


def _slab_atoms(central: AtomicStructure, z_lo: float, z_hi: float):
    z = wrap(central).positions[:, 2]
    mask = (z >= z_lo - 1e-9) & (z < z_hi - 1e-9)
    return np.nonzero(mask)[0]


def _check_slab_match(central: AtomicStructure, electrode: AtomicStructure, side: str):
    length = np.linalg.norm(electrode.cell.vectors[2])
    c_len = np.linalg.norm(central.cell.vectors[2])
    if side == "left":
        z_lo, shift = 0.0, 0.0
    else:
        z_lo, shift = c_len - length, c_len - length
    idx = _slab_atoms(central, z_lo, z_lo + length)
    if len(idx) != len(electrode):
        raise GeometryError(
            f"{side} electrode has {len(electrode)} atoms but the matching "
            f"central slab holds {len(idx)}"
        )
    slab_pos = wrap(central).positions[idx].copy()
    slab_pos[:, 2] -= shift
    match = match_atoms(
        slab_pos, central.numbers[idx], wrap(electrode).positions,
        electrode.numbers, electrode.cell, tol=SLAB_MATCH_TOL,
    )
    if match is None:
        raise GeometryError(f"{side} electrode does not match the central slab")


def match_atoms(pos_a, num_a, pos_b, num_b, cell: LatticeCell, tol=1e-6):
    """Index map j(i) with atom a_i == atom b_j(i) (element + position mod cell).

    Returns None when no bijection exists within ``tol``.
    """
    if len(num_a) != len(num_b):
        return None
    inv = np.linalg.inv(cell.vectors)
    fa = (np.asarray(pos_a) @ inv) % 1.0
    fb = (np.asarray(pos_b) @ inv) % 1.0
    mapping = np.full(len(num_a), -1)
    used = np.zeros(len(num_b), dtype=bool)
    for i in range(len(num_a)):
        d = fb - fa[i]
        d -= np.round(d)
        cart = np.linalg.norm(d @ cell.vectors, axis=-1)
        cart[used | (np.asarray(num_b) != num_a[i])] = np.inf
        j = int(np.argmin(cart))
        if cart[j] > tol:
            return None
        mapping[i] = j
        used[j] = True
    return mapping


def detect_period(s: AtomicStructure, tol: float = 1e-5) -> float:
    """Smallest translational period of the structure along the c axis (A)."""
    c_len = float(np.linalg.norm(s.cell.vectors[2]))
    frac = np.round(wrap(s).fractional(), 8) % 1.0
    ids = {tuple(np.append(np.round(f, 5), z)) for f, z in zip(frac, s.numbers)}
    for m in range(len(s), 1, -1):
        if len(s) % m:
            continue
        t = np.array([0.0, 0.0, 1.0 / m])
        moved = (frac + t) % 1.0
        if all(
            tuple(np.append(np.round(f, 5), z)) in ids
            for f, z in zip(moved, s.numbers)
        ):
            return c_len / m
    return c_len


def _extract_electrode(central: AtomicStructure, z_lo: float, length: float):
    idx = _slab_atoms(central, z_lo, z_lo + length)
    pos = wrap(central).positions[idx].copy()
    pos[:, 2] -= z_lo
    v = central.cell.vectors.copy()
    v[2] = v[2] / np.linalg.norm(v[2]) * length
    return AtomicStructure(LatticeCell(v), central.numbers[idx], pos, central.pbc)


def make_device(
    s: AtomicStructure,
    left_len: float | None = None,
    right_len: float | None = None,
    interaction_range: float | None = None,
) -> DeviceStructure:
    """Split a periodic wire into central region plus matching electrodes.

    Default electrode length is one structural period along the transport
    axis, bumped to the smallest commensurate multiple not shorter than
    ``interaction_range`` when that is given.
    """
    s = wrap(s)
    period = detect_period(s)
    c_len = float(np.linalg.norm(s.cell.vectors[2]))

    def default_len():
        n = 1
        if interaction_range is not None:
            n = max(1, math.ceil(interaction_range / period - 1e-9))
        return n * period

    left_len = default_len() if left_len is None else float(left_len)
    right_len = default_len() if right_len is None else float(right_len)
    for name, ln in (("left", left_len), ("right", right_len)):
        ratio = ln / period
        if abs(ratio - round(ratio)) > 1e-6 or ln <= 0:
            raise GeometryError(
                f"{name} electrode length {ln} A is not a multiple of the "
                f"period {period:.6f} A"
            )
    if c_len < left_len + right_len - 1e-9:
        raise GeometryError("central region shorter than the two electrodes")

    left = _extract_electrode(s, 0.0, left_len)
    right = _extract_electrode(s, c_len - right_len, right_len)
    return DeviceStructure(s, left, right)


def add_tube_region(d: DeviceStructure, r: TubeRegion) -> DeviceStructure:
    """Append a spatial region; later regions override earlier on overlap."""
    cell = d.central.cell.vectors
    inv = np.linalg.inv(cell)
    for point in (r.start_point, r.end_point):
        frac = np.asarray(point) @ inv
        if (frac < -1e-9).any() or (frac > 1 + 1e-9).any():
            raise GeometryError("tube axis extends outside the simulation cell")
    axis = np.asarray(r.end_point) - np.asarray(r.start_point)
    axis /= np.linalg.norm(axis)
    # radial footprint must stay inside the cell for the transverse axes
    for ax in (0, 1):
        e = np.zeros(3)
        e[ax] = 1.0
        span = abs(float(e @ cell[ax]))
        for point in (r.start_point, r.end_point):
            c = float(point[ax])
            reach = r.outer_radius * math.sqrt(max(0.0, 1.0 - axis[ax] ** 2))
            if c - reach < -1e-6 or c + reach > span + 1e-6:
                raise GeometryError("tube extends outside the simulation cell")
    return replace(d, regions=d.regions + (r,))


def write_xyz(s: AtomicStructure, path) -> None:
    """XYZ export plus a JSON sidecar holding the cell and pbc."""
    path = Path(path)
    lines = [str(len(s)), "nwsim geometry"]
    for sym, pos in zip(s.symbols(), s.positions):
        lines.append(f"{sym:2s} {pos[0]:.10f} {pos[1]:.10f} {pos[2]:.10f}")
    path.write_text("\n".join(lines) + "\n")
    sidecar = {
        "vectors": s.cell.vectors.tolist(),
        "pbc": list(s.pbc),
    }
    path.with_suffix(path.suffix + ".cell.json").write_text(
        json.dumps(sidecar, indent=2) + "\n"
    )


def read_xyz(path) -> AtomicStructure:
    path = Path(path)
    lines = path.read_text().splitlines()
    n = int(lines[0].split()[0])
    numbers, positions = [], []
    for line in lines[2 : 2 + n]:
        parts = line.split()
        numbers.append(number_for(parts[0]))
        positions.append([float(x) for x in parts[1:4]])
    sidecar = path.with_suffix(path.suffix + ".cell.json")
    if sidecar.exists():
        rec = json.loads(sidecar.read_text())
        cell = LatticeCell(np.array(rec["vectors"]))
        pbc = tuple(rec.get("pbc", (True, True, True)))
    else:
        span = np.ptp(np.array(positions), axis=0) + 10.0
        cell = LatticeCell(np.diag(span))
        pbc = (True, True, True)
    return AtomicStructure(cell, numbers, positions, pbc)
