"""Two-center matrix elements between Slater orbitals.

Overlaps are evaluated in prolate-spheroidal coordinates (exact geometry for
two-center integrands), decomposed into sigma/pi/delta channels with the bond
along z, and rotated to arbitrary directions with the standard
direction-cosine expansion. All distances here are Bohr.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np

from .basis import ParameterError, SlaterOrbital, evaluate_slater_radial

__all__ = [
    "QuadratureError",
    "ORBITAL_NAMES",
    "orbitals_per_l",
    "sk_decompose",
    "sk_rotate",
    "two_center_overlap",
    "same_center_overlap",
]

ORBITAL_NAMES = {
    0: ("s",),
    1: ("px", "py", "pz"),
    2: ("dxy", "dyz", "dzx", "dx2-y2", "dz2"),
}

_QUAD_ORDERS = (24, 36, 54, 82, 124, 188, 284)
_DECAY_LOG = 110.0      # exp(-110) tail truncation of the radial integrand


class QuadratureError(RuntimeError):
    """Two-center quadrature failed to reach the requested tolerance."""


def orbitals_per_l(l: int) -> int:
    return 2 * l + 1


def _legendre_norm(l: int, m: int, x):
    """Normalized associated Legendre P̄_lm(x); int P̄² dx = 1 on [-1, 1]."""
    if l == 0:
        return np.full_like(np.asarray(x, dtype=float), math.sqrt(0.5))
    if l == 1:
        if m == 0:
            return math.sqrt(1.5) * x
        return math.sqrt(0.75) * np.sqrt(np.clip(1.0 - x * x, 0.0, None))
    if l == 2:
        if m == 0:
            return math.sqrt(5.0 / 8.0) * (3.0 * x * x - 1.0)
        if m == 1:
            return math.sqrt(15.0 / 4.0) * x * np.sqrt(np.clip(1.0 - x * x, 0.0, None))
        return math.sqrt(15.0 / 16.0) * (1.0 - x * x)
    raise ParameterError("angular momentum above l=2 is unsupported")


@lru_cache(maxsize=32)
def _gauss_legendre(order: int):
    x, w = np.polynomial.legendre.leggauss(order)
    return x, w


def _min_eta(o: SlaterOrbital) -> float:
    etas = [o.eta1]
    if o.c2 != 0.0 and o.eta2 > 0:
        etas.append(o.eta2)
    return min(etas)


def _decompose_once(oA, oB, d, order):
    xg, wg = _gauss_legendre(order)
    mu_max = 1.0 + _DECAY_LOG / (d * (_min_eta(oA) + _min_eta(oB)))
    mu = 1.0 + 0.5 * (xg + 1.0) * (mu_max - 1.0)
    wmu = wg * 0.5 * (mu_max - 1.0)
    nu, wnu = xg, wg

    MU = mu[:, None]
    NU = nu[None, :]
    r_a = 0.5 * d * (MU + NU)
    r_b = 0.5 * d * (MU - NU)
    cos_a = (1.0 + MU * NU) / (MU + NU)
    cos_b = (MU * NU - 1.0) / (MU - NU)
    weight = (0.5 * d) ** 3 * (MU * MU - NU * NU) * (wmu[:, None] * wnu[None, :])

    rad = evaluate_slater_radial(oA, r_a) * evaluate_slater_radial(oB, r_b) * weight
    out = np.empty(min(oA.l, oB.l) + 1)
    for m in range(len(out)):
        ang = _legendre_norm(oA.l, m, cos_a) * _legendre_norm(oB.l, m, cos_b)
        out[m] = float(np.sum(rad * ang))
    return out


def sk_decompose(oA: SlaterOrbital, oB: SlaterOrbital, distance: float, tol=1e-8):
    """sigma/pi/delta overlap components s(d, l_A, l_B, m), m = 0..min(l).

    Orbital A sits at the origin, orbital B at +z * distance.
    """
    if distance <= 0:
        raise ParameterError("decomposition needs a positive distance")
    previous = None
    for order in _QUAD_ORDERS:
        current = _decompose_once(oA, oB, distance, order)
        if previous is not None and np.max(np.abs(current - previous)) < tol:
            return current
        previous = current
    raise QuadratureError(
        f"two-center quadrature did not converge to {tol} at d={distance} Bohr"
    )


def same_center_overlap(oA: SlaterOrbital, oB: SlaterOrbital, tol=1e-10) -> float:
    """Radial overlap int R_A R_B r^2 dr of two orbitals on one site."""
    r_max = _DECAY_LOG / (_min_eta(oA) + _min_eta(oB))
    previous = None
    for order in _QUAD_ORDERS:
        xg, wg = _gauss_legendre(order)
        r = 0.5 * (xg + 1.0) * r_max
        w = wg * 0.5 * r_max
        val = float(
            np.sum(
                evaluate_slater_radial(oA, r)
                * evaluate_slater_radial(oB, r)
                * r
                * r
                * w
            )
        )
        if previous is not None and abs(val - previous) < tol:
            return val
        previous = val
    raise QuadratureError("radial overlap quadrature did not converge")


def _check_direction(direction):
    direction = np.asarray(direction, dtype=float)
    if abs(np.linalg.norm(direction) - 1.0) > 1e-9:
        raise ParameterError("direction must be a unit vector")
    return direction


def _sk_coefficients(l1: int, m1: int, l2: int, m2: int, direction):
    """Direction-cosine expansion coefficients for the canonical l1 <= l2 pair.

    Returns an array c[m], m = 0..l1, such that the matrix element equals
    sum_m c[m] * s(d, l1, l2, m).
    """
    x, y, z = direction
    s3 = math.sqrt(3.0)
    xx, yy, zz = x * x, y * y, z * z

    if l1 == 0:
        if l2 == 0:
            return np.array([1.0])
        if l2 == 1:
            return np.array([(x, y, z)[m2]])
        return np.array(
            [
                (
                    s3 * x * y,
                    s3 * y * z,
                    s3 * z * x,
                    0.5 * s3 * (xx - yy),
                    zz - 0.5 * (xx + yy),
                )[m2]
            ]
        )

    if l1 == 1:
        if l2 == 1:
            p = (x, y, z)
            a, b = p[m1], p[m2]
            if m1 == m2:
                return np.array([a * a, 1.0 - a * a])
            return np.array([a * b, -a * b])
        # p-d block, rows px, py, pz; columns dxy, dyz, dzx, dx2-y2, dz2
        table = {
            (0, 0): (s3 * xx * y, y * (1 - 2 * xx)),
            (0, 1): (s3 * x * y * z, -2 * x * y * z),
            (0, 2): (s3 * xx * z, z * (1 - 2 * xx)),
            (0, 3): (0.5 * s3 * x * (xx - yy), x * (1 - xx + yy)),
            (0, 4): (x * (zz - 0.5 * (xx + yy)), -s3 * x * zz),
            (1, 0): (s3 * yy * x, x * (1 - 2 * yy)),
            (1, 1): (s3 * yy * z, z * (1 - 2 * yy)),
            (1, 2): (s3 * x * y * z, -2 * x * y * z),
            (1, 3): (0.5 * s3 * y * (xx - yy), -y * (1 + xx - yy)),
            (1, 4): (y * (zz - 0.5 * (xx + yy)), -s3 * y * zz),
            (2, 0): (s3 * x * y * z, -2 * x * y * z),
            (2, 1): (s3 * zz * y, y * (1 - 2 * zz)),
            (2, 2): (s3 * zz * x, x * (1 - 2 * zz)),
            (2, 3): (0.5 * s3 * z * (xx - yy), -z * (xx - yy)),
            (2, 4): (z * (zz - 0.5 * (xx + yy)), s3 * z * (xx + yy)),
        }
        return np.array(table[(m1, m2)])

    # d-d block
    table = {
        (0, 0): (
            3 * xx * yy,
            xx + yy - 4 * xx * yy,
            zz + xx * yy,
        ),
        (0, 1): (
            3 * x * yy * z,
            x * z * (1 - 4 * yy),
            x * z * (yy - 1),
        ),
        (0, 2): (
            3 * xx * y * z,
            y * z * (1 - 4 * xx),
            y * z * (xx - 1),
        ),
        (0, 3): (
            1.5 * x * y * (xx - yy),
            2 * x * y * (yy - xx),
            0.5 * x * y * (xx - yy),
        ),
        (0, 4): (
            s3 * x * y * (zz - 0.5 * (xx + yy)),
            -2 * s3 * x * y * zz,
            0.5 * s3 * x * y * (1 + zz),
        ),
        (1, 1): (
            3 * yy * zz,
            yy + zz - 4 * yy * zz,
            xx + yy * zz,
        ),
        (1, 2): (
            3 * y * zz * x,
            y * x * (1 - 4 * zz),
            y * x * (zz - 1),
        ),
        (1, 3): (
            1.5 * y * z * (xx - yy),
            -y * z * (1 + 2 * (xx - yy)),
            y * z * (1 + 0.5 * (xx - yy)),
        ),
        (1, 4): (
            s3 * y * z * (zz - 0.5 * (xx + yy)),
            s3 * y * z * (xx + yy - zz),
            -0.5 * s3 * y * z * (xx + yy),
        ),
        (2, 2): (
            3 * zz * xx,
            zz + xx - 4 * zz * xx,
            yy + zz * xx,
        ),
        (2, 3): (
            1.5 * z * x * (xx - yy),
            z * x * (1 - 2 * (xx - yy)),
            -z * x * (1 - 0.5 * (xx - yy)),
        ),
        (2, 4): (
            s3 * z * x * (zz - 0.5 * (xx + yy)),
            s3 * z * x * (xx + yy - zz),
            -0.5 * s3 * z * x * (xx + yy),
        ),
        (3, 3): (
            0.75 * (xx - yy) ** 2,
            xx + yy - (xx - yy) ** 2,
            zz + 0.25 * (xx - yy) ** 2,
        ),
        (3, 4): (
            0.5 * s3 * (xx - yy) * (zz - 0.5 * (xx + yy)),
            s3 * zz * (yy - xx),
            0.25 * s3 * (1 + zz) * (xx - yy),
        ),
        (4, 4): (
            (zz - 0.5 * (xx + yy)) ** 2,
            3 * zz * (xx + yy),
            0.75 * (xx + yy) ** 2,
        ),
    }
    key = (m1, m2) if (m1, m2) in table else (m2, m1)
    return np.array(table[key])


def sk_rotate(l1: int, m1: int, l2: int, m2: int, direction, components):
    """Rotate z-oriented channel components to an arbitrary bond direction.

    ``direction`` is the unit vector from the first orbital's atom to the
    second's; ``components`` are s(d, l1, l2, m) for m = 0..min(l1, l2) with
    the first orbital on the first atom.
    """
    if max(l1, l2) > 2:
        raise ParameterError("angular momentum above l=2 is unsupported")
    direction = _check_direction(direction)
    components = np.asarray(components, dtype=float)
    if len(components) != min(l1, l2) + 1:
        raise ParameterError("need one component per m channel")
    if l1 <= l2:
        coeff = _sk_coefficients(l1, m1, l2, m2, direction)
    else:
        # both orbitals rotate with the same frame, so the expansion
        # coefficients are symmetric under orbital exchange
        coeff = _sk_coefficients(l2, m2, l1, m1, direction)
    return float(coeff @ components)


def two_center_overlap(oA, mA: int, oB, mB: int, displacement) -> float:
    """Overlap of orbital (oA, mA) at the origin with (oB, mB) displaced.

    ``displacement`` is the Bohr vector from atom A to atom B; ``mA``/``mB``
    index the real-harmonic orbitals within each shell (see ORBITAL_NAMES).
    """
    displacement = np.asarray(displacement, dtype=float)
    d = float(np.linalg.norm(displacement))
    if d < 1e-12:
        if oA.l != oB.l or mA != mB:
            return 0.0
        return same_center_overlap(oA, oB)
    components = sk_decompose(oA, oB, d)
    return sk_rotate(oA.l, mA, oB.l, mB, displacement / d, components)
