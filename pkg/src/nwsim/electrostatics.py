"""Hartree electrostatics: grids, Gaussian atomic charges, Poisson solvers.

Sign convention: fields store electron potential ENERGY (eV). Excess
electrons (dm > 0) produce a positive, repulsive potential; a metallic gate
at +V volt imposes the constraint value -V eV on the field. Internally the
solvers work in Hartree atomic units where the equation reads
div(eps grad V) = -4 pi dn.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .geometry import LatticeCell, TubeRegion
from .units import ANGSTROM_BOHR, HARTREE_EV

__all__ = [
    "Grid",
    "ScalarField",
    "ChargeModel",
    "PoissonError",
    "grid_from_cutoff",
    "width_from_shift",
    "shift_from_width",
    "atomic_point_potential",
    "deposit_gaussians",
    "dielectric_field",
    "metal_constraints",
    "multipole_boundary_values",
    "solve_fft",
    "solve_multigrid",
    "sample_at_atoms",
    "write_volumetric",
]

BC_KINDS = ("dirichlet", "neumann", "periodic", "multipole")
GAUSSIAN_TRUNCATION_SIGMAS = 6.0
MAX_V_CYCLES = 200


class PoissonError(RuntimeError):
    pass


@dataclass(frozen=True)
class Grid:
    """Regular orthorhombic grid. Spacing/origin in Bohr.

    Periodic axes hold n points covering [0, L) (wraparound neighbor);
    non-periodic axes hold n points covering [0, L] inclusive.
    """

    shape: tuple
    spacing: tuple
    origin: tuple = (0.0, 0.0, 0.0)
    periodic: tuple = (False, False, False)

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(n) for n in self.shape))
        object.__setattr__(self, "spacing", tuple(float(h) for h in self.spacing))
        object.__setattr__(self, "origin", tuple(float(x) for x in self.origin))
        object.__setattr__(self, "periodic", tuple(bool(p) for p in self.periodic))
        if any(h <= 0 for h in self.spacing):
            raise PoissonError("grid spacing must be positive")

    def axis_coordinates(self, ax: int) -> np.ndarray:
        return self.origin[ax] + self.spacing[ax] * np.arange(self.shape[ax])

    def lengths(self) -> tuple:
        out = []
        for ax in range(3):
            n = self.shape[ax]
            span = n if self.periodic[ax] else n - 1
            out.append(span * self.spacing[ax])
        return tuple(out)

    def point_volume(self) -> float:
        return self.spacing[0] * self.spacing[1] * self.spacing[2]

    def meshgrid(self):
        axes = [self.axis_coordinates(ax) for ax in range(3)]
        return np.meshgrid(*axes, indexing="ij")


@dataclass
class ScalarField:
    """Values on a grid; the physical meaning is up to the producer."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.grid.shape:
            raise PoissonError(
                f"field shape {self.values.shape} != grid {self.grid.shape}"
            )
        if not np.isfinite(self.values).all():
            raise PoissonError("field contains non-finite values")

    def integral(self) -> float:
        return float(self.values.sum() * self.grid.point_volume())

    def copy(self) -> "ScalarField":
        return ScalarField(self.grid, self.values.copy())


@dataclass
class ChargeModel:
    """Gaussian atomic charges: dn(r) = sum dm (a/pi)^{3/2} exp(-a |r-R|^2).

    Positions in Bohr, widths alpha in 1/Bohr^2, dm in electrons.
    """

    positions: np.ndarray
    delta_m: np.ndarray
    alpha: np.ndarray

    def __post_init__(self):
        self.positions = np.atleast_2d(np.asarray(self.positions, dtype=float))
        self.delta_m = np.asarray(self.delta_m, dtype=float).ravel()
        self.alpha = np.asarray(self.alpha, dtype=float).ravel()
        if not (len(self.positions) == len(self.delta_m) == len(self.alpha)):
            raise PoissonError("charge model arrays disagree in length")
        if (self.alpha <= 0).any():
            raise PoissonError("gaussian widths must be positive")

    def total_charge(self) -> float:
        return float(self.delta_m.sum())


def _coarsening_depth(n: int, periodic: bool) -> int:
    depth = 0
    while True:
        if periodic:
            if n % 2 or n // 2 < 4:
                return depth
            n //= 2
        else:
            if (n - 1) % 2 or (n - 1) // 2 < 4:
                return depth
            n = (n - 1) // 2 + 1
        depth += 1


def _multigrid_friendly(spans: int, periodic: bool) -> int:
    """Smallest point count >= spans that coarsens well.

    Small axes (spans <= 8) are allowed as-is; larger ones are rounded up
    to the deepest-coarsening size within a short window (m 2^k + 1, or
    m 2^k on periodic axes).
    """
    if periodic and spans <= 8:
        return max(4, spans + spans % 2)
    if not periodic and spans <= 9:
        return 9
    fallback = None
    for n in range(spans, spans + 33):
        depth = _coarsening_depth(n, periodic)
        if depth >= 2:
            return n
        if depth >= 1 and fallback is None:
            fallback = n
    if fallback is None:
        raise PoissonError(f"no multigrid-friendly size near {spans}")
    return fallback


def grid_from_cutoff(cell: LatticeCell, cutoff_hartree: float,
                     periodic=(False, False, True)) -> Grid:
    """Grid whose spacing matches a plane-wave density cutoff.

    h = pi / sqrt(2 E_cut) per axis, point counts rounded up to the nearest
    multigrid-friendly size (m 2^k + 1 on non-periodic axes, m 2^k on
    periodic ones, at least two coarsenings). Only orthorhombic cells are
    supported by the grid solvers.
    """
    if cutoff_hartree <= 0:
        raise PoissonError("mesh cutoff must be positive")
    v = cell.vectors
    if abs(v[0] @ v[1]) + abs(v[1] @ v[2]) + abs(v[0] @ v[2]) > 1e-9:
        raise PoissonError("grid solvers support orthorhombic cells only")
    h_target = math.pi / math.sqrt(2.0 * cutoff_hartree)
    lengths = [float(np.linalg.norm(v[ax])) * ANGSTROM_BOHR for ax in range(3)]

    def sized(ax, h_max):
        spans = math.ceil(lengths[ax] / h_max)
        if periodic[ax]:
            n = _multigrid_friendly(max(spans, 4), True)
            return n, lengths[ax] / n
        n = _multigrid_friendly(max(spans + 1, 9), False)
        return n, lengths[ax] / (n - 1)

    # axes are sized independently (the same cross section always yields
    # the same transverse grid); the solver's semi-coarsening handles any
    # resulting anisotropy
    shape, spacing = zip(*(sized(ax, h_target) for ax in range(3)))
    return Grid(shape=tuple(shape), spacing=tuple(spacing),
                periodic=tuple(periodic))


def width_from_shift(u_ev: float) -> float:
    """Gaussian width alpha (1/Bohr^2) from the onsite Hartree shift U (eV).

    Inverts U = 2 sqrt(alpha/pi) (atomic units): alpha = pi U^2 / 4.
    """
    if u_ev <= 0:
        raise PoissonError("onsite Hartree shift must be positive")
    u_ha = u_ev / HARTREE_EV
    return math.pi * u_ha * u_ha / 4.0


def shift_from_width(alpha: float) -> float:
    """Inverse of width_from_shift, returns U in eV."""
    return 2.0 * math.sqrt(alpha / math.pi) * HARTREE_EV


def atomic_point_potential(dm: float, alpha: float, r):
    """Potential energy (eV) of one Gaussian charge at distance r (Bohr).

    V = dm Erf(sqrt(alpha) r)/r, continuous at r = 0 where it equals dm U.
    """
    if alpha <= 0:
        raise PoissonError("gaussian width must be positive")
    r = np.asarray(r, dtype=float)
    small = r < 1e-12
    safe = np.where(small, 1.0, r)
    v = np.where(
        small,
        dm * 2.0 * math.sqrt(alpha / math.pi),
        dm * erf(math.sqrt(alpha) * safe) / safe,
    )
    v = v * HARTREE_EV
    return v if v.ndim else float(v)


def deposit_gaussians(cm: ChargeModel, grid: Grid) -> ScalarField:
    """Deposit normalized Gaussians on the grid; returns dn in e/Bohr^3.

    Tails are truncated at 6 sigma (mass loss < 1e-8); on periodic axes the
    deposit wraps around.
    """
    values = np.zeros(grid.shape)
    lengths = grid.lengths()
    axes_coords = [grid.axis_coordinates(ax) for ax in range(3)]
    for pos, dm, alpha in zip(cm.positions, cm.delta_m, cm.alpha):
        if dm == 0.0:
            continue
        sigma = 1.0 / math.sqrt(2.0 * alpha)
        reach = GAUSSIAN_TRUNCATION_SIGMAS * sigma
        axis_terms = []
        for ax in range(3):
            x = axes_coords[ax] - pos[ax]
            if grid.periodic[ax]:
                x = x - np.round(x / lengths[ax]) * lengths[ax]
                # a very wide gaussian may need more than one image
                n_img = int(reach // lengths[ax])
                if n_img:
                    imgs = [x + s * lengths[ax]
                            for s in range(-n_img, n_img + 1)]
                    term = sum(np.exp(-alpha * xi * xi) for xi in imgs)
                else:
                    term = np.exp(-alpha * np.where(np.abs(x) > reach, np.inf, x) ** 2)
            else:
                term = np.exp(-alpha * np.where(np.abs(x) > reach, np.inf, x) ** 2)
            axis_terms.append(term)
        profile = (
            axis_terms[0][:, None, None]
            * axis_terms[1][None, :, None]
            * axis_terms[2][None, None, :]
        )
        values += dm * (alpha / math.pi) ** 1.5 * profile
    return ScalarField(grid, values)


def dielectric_field(grid: Grid, regions, cell: LatticeCell) -> ScalarField:
    """Relative permittivity on the grid; later regions override earlier."""
    eps = np.ones(grid.shape)
    xs, ys, zs = grid.meshgrid()
    pts_bohr = np.stack([xs, ys, zs], axis=-1).reshape(-1, 3)
    pts_ang = pts_bohr / ANGSTROM_BOHR
    for region in regions:
        if region.kind != "dielectric":
            continue
        mask = region.contains(pts_ang).reshape(grid.shape)
        eps[mask] = region.value
    return ScalarField(grid, eps)


def metal_constraints(grid: Grid, regions) -> tuple:
    """(mask, values eV) of grid points pinned by metallic regions.

    A gate at +V volt pins the electron potential energy to -V eV.
    """
    mask = np.zeros(grid.shape, dtype=bool)
    values = np.zeros(grid.shape)
    xs, ys, zs = grid.meshgrid()
    pts_ang = np.stack([xs, ys, zs], axis=-1).reshape(-1, 3) / ANGSTROM_BOHR
    for region in regions:
        if region.kind != "metallic":
            continue
        inside = region.contains(pts_ang).reshape(grid.shape)
        mask |= inside
        values[inside] = -region.value
    return mask, values


def multipole_boundary_values(rho: ScalarField, grid: Grid | None = None):
    """Dirichlet face values (eV) from monopole+dipole+quadrupole moments.

    The expansion is taken about the charge centroid (the |charge| centroid
    for neutral distributions).
    """
    grid = rho.grid if grid is None else grid
    dv = grid.point_volume()
    xs, ys, zs = grid.meshgrid()
    pts = np.stack([xs, ys, zs], axis=-1)
    w = rho.values * dv
    q = w.sum()
    absw = np.abs(w)
    if abs(q) > 1e-14:
        centroid = (w[..., None] * pts).sum(axis=(0, 1, 2)) / q
    elif absw.sum() > 1e-14:
        centroid = (absw[..., None] * pts).sum(axis=(0, 1, 2)) / absw.sum()
    else:
        centroid = np.array([c.mean() for c in (xs, ys, zs)])
    rel = pts - centroid
    dipole = (w[..., None] * rel).sum(axis=(0, 1, 2))
    quad = np.zeros((3, 3))
    r2 = (rel**2).sum(axis=-1)
    for i in range(3):
        for j in range(3):
            quad[i, j] = (w * (3 * rel[..., i] * rel[..., j] - (i == j) * r2)).sum()

    def potential_at(points):
        d = points - centroid
        r = np.linalg.norm(d, axis=-1)
        r = np.where(r < 1e-12, 1e-12, r)
        rhat = d / r[..., None]
        v = q / r
        v += (rhat @ dipole) / r**2
        v += 0.5 * np.einsum("...i,ij,...j->...", rhat, quad, rhat) / r**3
        return v * HARTREE_EV

    faces = {}
    for ax in range(3):
        for side, index in (("lo", 0), ("hi", grid.shape[ax] - 1)):
            sl = [slice(None)] * 3
            sl[ax] = index
            faces[(ax, side)] = potential_at(pts[tuple(sl)])
    return faces


def solve_fft(rho: ScalarField) -> ScalarField:
    """Spectral Poisson solve; all axes periodic, uniform permittivity.

    The k = 0 component is set to zero (potential fixed up to a constant);
    a non-neutral source has its mean removed with a warning.
    """
    grid = rho.grid
    if not all(grid.periodic):
        raise PoissonError("FFT solver requires all axes periodic")
    values = rho.values
    mean = values.mean()
    if abs(mean) * grid.point_volume() * values.size > 1e-12:
        warnings.warn(
            "non-neutral periodic charge: removing the mean (jellium)",
            stacklevel=2,
        )
        values = values - mean
    rho_k = np.fft.fftn(values)
    # discrete 7-point Laplacian symbol: keeps this solver exactly
    # consistent with the multigrid stencil (k~^2 -> k^2 as h -> 0)
    k2 = np.zeros(grid.shape)
    for ax in range(3):
        h = grid.spacing[ax]
        k_ax = 2.0 * math.pi * np.fft.fftfreq(grid.shape[ax], d=h)
        sym = (2.0 - 2.0 * np.cos(k_ax * h)) / (h * h)
        shape = [1, 1, 1]
        shape[ax] = grid.shape[ax]
        k2 = k2 + sym.reshape(shape)
    k2[0, 0, 0] = 1.0
    v_k = 4.0 * math.pi * rho_k / k2
    v_k[0, 0, 0] = 0.0
    v = np.real(np.fft.ifftn(v_k)) * HARTREE_EV
    return ScalarField(grid, v)


# ---------------------------------------------------------------------------
# geometric multigrid


class _Level:
    """One multigrid level: couplings, constraints, boundary values."""

    def __init__(self, shape, spacing, periodic, eps, frozen, frozen_values):
        self.shape = shape
        self.spacing = spacing
        self.periodic = periodic
        self.frozen = frozen
        self.frozen_values = frozen_values
        # coupling coefficients to the +/- neighbor along each axis
        self.cp = []
        self.cm = []
        for ax in range(3):
            h2 = spacing[ax] * spacing[ax]
            eps_n = np.roll(eps, -1, axis=ax)
            face_p = 2.0 * eps * eps_n / (eps + eps_n) / h2
            cp = face_p.copy()
            cm = np.roll(face_p, 1, axis=ax)
            if not periodic[ax]:
                sl_hi = [slice(None)] * 3
                sl_hi[ax] = -1
                cp[tuple(sl_hi)] = 0.0
                sl_lo = [slice(None)] * 3
                sl_lo[ax] = 0
                cm[tuple(sl_lo)] = 0.0
            self.cp.append(cp)
            self.cm.append(cm)
        self.diag = sum(self.cp) + sum(self.cm)
        self.red = self._checkerboard(0)
        self.black = self._checkerboard(1)

    def _checkerboard(self, parity):
        idx = np.indices(self.shape).sum(axis=0)
        mask = (idx % 2) == parity
        return mask & ~self.frozen

    def neighbor_sum(self, v):
        total = np.zeros_like(v)
        for ax in range(3):
            total += self.cp[ax] * np.roll(v, -1, axis=ax)
            total += self.cm[ax] * np.roll(v, 1, axis=ax)
        return total

    def smooth(self, v, rhs, sweeps):
        for _ in range(sweeps):
            for mask in (self.red, self.black):
                num = self.neighbor_sum(v) + rhs
                with np.errstate(invalid="ignore", divide="ignore"):
                    upd = num / self.diag
                v[mask] = upd[mask]
        return v

    def residual(self, v, rhs):
        r = self.neighbor_sum(v) - self.diag * v + rhs
        r[self.frozen] = 0.0
        return r

    def has_nullspace(self) -> bool:
        return not self.frozen.any()


def _coarsen_plan(shape, spacing, periodic):
    """Which axes to coarsen next (semi-coarsening for anisotropic grids).

    Only axes whose spacing is within a factor ~2 of the finest coarsenable
    axis are halved; returns None when nothing can coarsen.
    """
    can = []
    for ax in range(3):
        n = shape[ax]
        if periodic[ax]:
            can.append(n % 2 == 0 and n // 2 >= 4)
        else:
            can.append((n - 1) % 2 == 0 and (n - 1) // 2 >= 4)
    if not any(can):
        return None
    h_min = min(h for h, c in zip(spacing, can) if c)
    plan = tuple(
        c and spacing[ax] <= 2.2 * h_min for ax, c in enumerate(can)
    )
    if not any(plan):
        return None
    return plan


def _apply_plan(shape, spacing, periodic, plan):
    new_shape, new_spacing = [], []
    for ax in range(3):
        n, h = shape[ax], spacing[ax]
        if plan[ax]:
            n = n // 2 if periodic[ax] else (n - 1) // 2 + 1
            h = h * 2
        new_shape.append(n)
        new_spacing.append(h)
    return tuple(new_shape), tuple(new_spacing)


def _restrict(arr, fine: _Level, plan):
    """Full-weighting restriction to the next-coarser vertex grid."""
    out = arr
    for ax in range(3):
        if not plan[ax]:
            continue
        if fine.periodic[ax]:
            a = out
            left = np.roll(a, 1, axis=ax)
            right = np.roll(a, -1, axis=ax)
            smoothed = 0.25 * left + 0.5 * a + 0.25 * right
            sl = [slice(None)] * 3
            sl[ax] = slice(0, None, 2)
            out = smoothed[tuple(sl)]
        else:
            a = out
            smoothed = a.copy()
            sl_c = [slice(None)] * 3
            sl_c[ax] = slice(1, -1)
            sl_l = [slice(None)] * 3
            sl_l[ax] = slice(0, -2)
            sl_r = [slice(None)] * 3
            sl_r[ax] = slice(2, None)
            smoothed[tuple(sl_c)] = (
                0.25 * a[tuple(sl_l)] + 0.5 * a[tuple(sl_c)] + 0.25 * a[tuple(sl_r)]
            )
            # one-sided weighting at the (possibly Neumann) faces
            lo0 = [slice(None)] * 3
            lo0[ax] = 0
            lo1 = [slice(None)] * 3
            lo1[ax] = 1
            hi0 = [slice(None)] * 3
            hi0[ax] = -1
            hi1 = [slice(None)] * 3
            hi1[ax] = -2
            smoothed[tuple(lo0)] = (2.0 * a[tuple(lo0)] + a[tuple(lo1)]) / 3.0
            smoothed[tuple(hi0)] = (2.0 * a[tuple(hi0)] + a[tuple(hi1)]) / 3.0
            sl = [slice(None)] * 3
            sl[ax] = slice(0, None, 2)
            out = smoothed[tuple(sl)]
    return out


def _inject(arr, plan):
    out = arr
    for ax in range(3):
        if not plan[ax]:
            continue
        sl = [slice(None)] * 3
        sl[ax] = slice(0, None, 2)
        out = out[tuple(sl)]
    return out


def _inject_mask(mask, plan):
    """Coarsen a constraint mask, dilating first so thin constrained
    shells (metal tubes) stay visible to the coarse-grid correction."""
    out = mask
    for ax in range(3):
        if not plan[ax]:
            continue
        dilated = out | np.roll(out, 1, axis=ax) | np.roll(out, -1, axis=ax)
        sl = [slice(None)] * 3
        sl[ax] = slice(0, None, 2)
        out = dilated[tuple(sl)]
    return out


def _prolong(coarse, fine_shape, periodic, plan):
    """Trilinear interpolation to the next-finer vertex grid."""
    out = coarse
    for ax in range(3):
        if not plan[ax]:
            continue
        n_f = fine_shape[ax]
        shape = list(out.shape)
        shape[ax] = n_f
        fine = np.zeros(shape)
        sl_even = [slice(None)] * 3
        sl_even[ax] = slice(0, None, 2)
        sl_c = [slice(None)] * 3
        sl_c[ax] = slice(None)
        fine[tuple(sl_even)] = out
        if periodic[ax]:
            nxt = np.roll(out, -1, axis=ax)
            sl_odd = [slice(None)] * 3
            sl_odd[ax] = slice(1, None, 2)
            fine[tuple(sl_odd)] = 0.5 * (out + nxt)
        else:
            sl_odd = [slice(None)] * 3
            sl_odd[ax] = slice(1, -1, 2)
            sl_lo = [slice(None)] * 3
            sl_lo[ax] = slice(0, -1)
            sl_hi = [slice(None)] * 3
            sl_hi[ax] = slice(1, None)
            fine[tuple(sl_odd)] = 0.5 * (out[tuple(sl_lo)] + out[tuple(sl_hi)])
        out = fine
    return out


def _direct_solve(level: _Level, rhs, constraint_values=None):
    n = int(np.prod(level.shape))
    a = np.zeros((n, n))
    idx = np.arange(n).reshape(level.shape)
    diag = level.diag.ravel()
    a[np.arange(n), np.arange(n)] = -diag
    for ax in range(3):
        for coeff, shift in ((level.cp[ax], -1), (level.cm[ax], 1)):
            nb = np.roll(idx, shift, axis=ax).ravel()
            c = coeff.ravel()
            rows = np.arange(n)
            a[rows, nb] += c
    b = -rhs.ravel().copy()
    frozen = level.frozen.ravel()
    if constraint_values is None:
        fv = np.zeros(n)
    else:
        fv = np.asarray(constraint_values).ravel()
    a[frozen] = 0.0
    a[frozen, np.nonzero(frozen)[0]] = 1.0
    b[frozen] = fv[frozen]
    if level.has_nullspace():
        # singular pure-Neumann/periodic operator: least squares, zero mean
        sol, *_ = np.linalg.lstsq(a, b, rcond=None)
        sol -= sol.mean()
    else:
        sol = np.linalg.solve(a, b)
    return sol.reshape(level.shape)


def solve_multigrid(rho: ScalarField, eps: ScalarField | None = None,
                    bc=("dirichlet", "dirichlet", "dirichlet"),
                    regions=(), cell: LatticeCell | None = None,
                    dirichlet_values: dict | None = None,
                    tol: float = 1e-8) -> ScalarField:
    """Solve div(eps grad V) = -4 pi rho with mixed boundary conditions.

    ``bc`` gives one of dirichlet/neumann/periodic/multipole per axis.
    Dirichlet faces default to V = 0 unless ``dirichlet_values[(ax, side)]``
    provides values (eV); multipole axes compute their own face values from
    the charge moments. Metallic regions pin interior points. Returns the
    electron potential energy in eV.
    """
    grid = rho.grid
    bc = tuple(b.lower() for b in bc)
    for b in bc:
        if b not in BC_KINDS:
            raise PoissonError(f"unknown boundary condition {b!r}")
    periodic = tuple(b == "periodic" for b in bc)
    if periodic != grid.periodic:
        raise PoissonError(
            f"grid periodicity {grid.periodic} does not match bc {bc}"
        )
    for ax in range(3):
        if not periodic[ax] and grid.shape[ax] < 9:
            raise PoissonError(
                "non-periodic axes need >= 9 points for two coarsenings"
            )

    eps_values = np.ones(grid.shape) if eps is None else eps.values
    if (eps_values < 1.0 - 1e-12).any():
        raise PoissonError("relative permittivity must be >= 1 everywhere")

    rho_values = rho.values.copy()

    frozen = np.zeros(grid.shape, dtype=bool)
    frozen_values = np.zeros(grid.shape)

    mp_faces = None
    if "multipole" in bc:
        mp_faces = multipole_boundary_values(rho)
    for ax in range(3):
        if bc[ax] in ("dirichlet", "multipole"):
            for side, index in (("lo", 0), ("hi", grid.shape[ax] - 1)):
                sl = [slice(None)] * 3
                sl[ax] = index
                face_val = 0.0
                if bc[ax] == "multipole":
                    face_val = mp_faces[(ax, side)]
                elif dirichlet_values and (ax, side) in dirichlet_values:
                    face_val = dirichlet_values[(ax, side)]
                frozen[tuple(sl)] = True
                frozen_values[tuple(sl)] = face_val

    metal_mask, metal_values = metal_constraints(grid, regions)
    frozen |= metal_mask
    frozen_values = np.where(metal_mask, metal_values, frozen_values)

    pure_neumann = not frozen.any()
    if pure_neumann:
        total = rho_values.sum() * grid.point_volume()
        if abs(total) > 1e-12:
            warnings.warn(
                "non-neutral charge with no potential reference: removing "
                "the mean (jellium)",
                stacklevel=2,
            )
            rho_values -= rho_values.mean()

    # convert constraint values to Hartree for the internal solve
    frozen_ha = frozen_values / HARTREE_EV

    levels = []
    plans = []
    shape, spacing = grid.shape, grid.spacing
    eps_l, frozen_l, fval_l = eps_values, frozen, frozen_ha
    while True:
        levels.append(_Level(shape, spacing, periodic, eps_l, frozen_l, fval_l))
        plan = _coarsen_plan(shape, spacing, periodic)
        if len(levels) >= 20 or plan is None or np.prod(shape) <= 5**3:
            break
        plans.append(plan)
        shape, spacing = _apply_plan(shape, spacing, periodic, plan)
        eps_l = _inject(eps_l, plan)
        frozen_l = _inject_mask(frozen_l, plan)
        fval_l = np.zeros(shape)   # coarse levels solve corrections only
    if np.prod(levels[-1].shape) > 4000:
        raise PoissonError(
            f"coarsest level {levels[-1].shape} too large for a direct solve; "
            "choose multigrid-friendly point counts"
        )

    rhs = 4.0 * math.pi * rho_values
    v = np.where(frozen, frozen_ha, 0.0)

    def v_cycle(level_idx, v_l, rhs_l):
        level = levels[level_idx]
        if level_idx == len(levels) - 1:
            # coarse problems solve for corrections: constraints are zero
            # there; only a single-level solve carries the physical values
            values = level.frozen_values if level_idx == 0 else None
            return _direct_solve(level, rhs_l, values)
        v_l = level.smooth(v_l, rhs_l, sweeps=2)
        r = level.residual(v_l, rhs_l)
        r_coarse = _restrict(r, level, plans[level_idx])
        coarse = levels[level_idx + 1]
        rhs_coarse = np.where(coarse.frozen, 0.0, r_coarse)
        corr = v_cycle(level_idx + 1, np.zeros(coarse.shape), rhs_coarse)
        corr = _prolong(corr, level.shape, level.periodic, plans[level_idx])
        corr[level.frozen] = 0.0
        if level.has_nullspace():
            corr -= corr.mean()
        v_l = v_l + corr
        v_l = level.smooth(v_l, rhs_l, sweeps=2)
        return v_l

    top = levels[0]
    previous_norm = None
    for cycle in range(MAX_V_CYCLES):
        r = top.residual(v, rhs)
        norm = float(np.linalg.norm(r))
        if norm < tol:
            break
        if previous_norm is not None and norm > previous_norm * 0.999 and cycle > 4:
            raise PoissonError(
                f"multigrid stalled at residual {norm:.3e} after {cycle} cycles"
            )
        previous_norm = norm
        v = v_cycle(0, v, rhs)
        if pure_neumann:
            v -= v.mean()
    else:
        raise PoissonError(
            f"multigrid did not reach {tol} in {MAX_V_CYCLES} V-cycles "
            f"(residual {norm:.3e})"
        )
    # frozen coarse-level corrections never touch the constraints; make sure
    v = np.where(frozen, frozen_ha, v)
    return ScalarField(grid, v * HARTREE_EV)


def sample_at_atoms(field: ScalarField, positions_angstrom) -> np.ndarray:
    """Trilinear interpolation of the field at atom positions (Angstrom)."""
    grid = field.grid
    pos = np.atleast_2d(np.asarray(positions_angstrom, dtype=float)) * ANGSTROM_BOHR
    out = np.empty(len(pos))
    lengths = grid.lengths()
    for ia, p in enumerate(pos):
        idx = []
        frac = []
        for ax in range(3):
            x = (p[ax] - grid.origin[ax]) / grid.spacing[ax]
            n = grid.shape[ax]
            if grid.periodic[ax]:
                x = x % n
                i0 = int(math.floor(x)) % n
            else:
                if x < -1e-9 or x > n - 1 + 1e-9:
                    raise PoissonError(
                        f"atom at {p / ANGSTROM_BOHR} A lies outside the grid"
                    )
                x = min(max(x, 0.0), n - 1)
                i0 = min(int(math.floor(x)), n - 2)
            idx.append(i0)
            frac.append(x - i0)
        acc = 0.0
        for da in (0, 1):
            for db in (0, 1):
                for dc in (0, 1):
                    w = (
                        (frac[0] if da else 1 - frac[0])
                        * (frac[1] if db else 1 - frac[1])
                        * (frac[2] if dc else 1 - frac[2])
                    )
                    ia0 = (idx[0] + da) % grid.shape[0]
                    ib0 = (idx[1] + db) % grid.shape[1]
                    ic0 = (idx[2] + dc) % grid.shape[2]
                    acc += w * field.values[ia0, ib0, ic0]
        out[ia] = acc
    return out


def write_volumetric(field: ScalarField, path) -> None:
    """Simple text format: header (shape, spacing, origin), x-fastest values."""
    grid = field.grid
    lines = [
        "nwsim-volumetric 1",
        "shape " + " ".join(str(n) for n in grid.shape),
        "spacing_bohr " + " ".join(repr(h) for h in grid.spacing),
        "origin_bohr " + " ".join(repr(x) for x in grid.origin),
        "periodic " + " ".join(str(int(p)) for p in grid.periodic),
    ]
    vals = np.transpose(field.values, (2, 1, 0)).ravel()   # x fastest
    for i in range(0, len(vals), 6):
        lines.append(" ".join(f"{v:.10e}" for v in vals[i : i + 6]))
    from pathlib import Path

    Path(path).write_text("\n".join(lines) + "\n")
