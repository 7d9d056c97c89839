"""Binary convex envelope method for miscibility gaps.

A discretized dgmix/RT curve is scanned for lower-convex-hull segments
that bridge non-convex regions (candidate miscibility gaps); the bridged
compositions are then sharpened by a damped Newton iteration on the
isoactivity conditions x_i' g_i' = x_i'' g_i''.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .thermo import DGmixCurve, GRID_N, ideal_mixing

__all__ = [
    "CemError",
    "BinaryPhaseSplit",
    "lower_convex_envelope",
    "detect_gaps",
    "refine_common_tangent",
    "binodal_scan",
    "curve_from_gamma",
    "write_binodal_csv",
]

# a hull segment only counts as a gap when the bridged curve lies above it
# by more than this (guards float noise on near-affine curves)
GAP_CLEARANCE = 1e-12


class CemError(RuntimeError):
    pass


@dataclass
class BinaryPhaseSplit:
    """Coexisting binary compositions, x1_lo < x1_hi.

    Grid-resolution (unrefined) splits may touch the grid endpoints;
    refined splits are strictly interior.
    """

    x1_lo: float
    x1_hi: float
    refined: bool = False

    def __post_init__(self):
        if not (0.0 <= self.x1_lo < self.x1_hi <= 1.0):
            raise CemError(f"invalid split ({self.x1_lo}, {self.x1_hi})")
        if self.refined and not (0.0 < self.x1_lo and self.x1_hi < 1.0):
            raise CemError("refined split must be strictly interior")


def lower_convex_envelope(points: Sequence[tuple[float, float]]) -> list[int]:
    """Indices of the lower convex hull of points sorted by x.

    Collinear points are kept (an affine input returns every index); the
    kept chain satisfies cross(v[k-1], v[k], v[k+1]) >= 0.
    """
    n = len(points)
    if n < 2:
        raise CemError("need at least two points")
    xs = [p[0] for p in points]
    if any(xs[i] >= xs[i + 1] for i in range(n - 1)):
        raise CemError("points must be sorted with distinct x")

    hull: list[int] = []
    for k in range(n):
        xk, gk = points[k]
        while len(hull) >= 2:
            x0, g0 = points[hull[-2]]
            x1, g1 = points[hull[-1]]
            cross = (x1 - x0) * (gk - g0) - (g1 - g0) * (xk - x0)
            # rounding clearance so affine inputs keep every point
            if cross < -1e-14 * max(1.0, abs(g0), abs(g1), abs(gk)):
                hull.pop()
            else:
                break
        hull.append(k)
    return hull


def detect_gaps(curve: DGmixCurve) -> list[BinaryPhaseSplit]:
    """Miscibility gaps of a curve, at grid resolution (possibly several)."""
    xs = curve.xs
    vals = curve.values
    hull = lower_convex_envelope(list(zip(xs, vals)))
    gaps = []
    for a, b in zip(hull, hull[1:]):
        if b - a <= 1:
            continue
        # interior must sit clearly above the bridging segment
        t = (xs[a + 1:b] - xs[a]) / (xs[b] - xs[a])
        seg = vals[a] + t * (vals[b] - vals[a])
        if np.max(vals[a + 1:b] - seg) > GAP_CLEARANCE:
            gaps.append(BinaryPhaseSplit(float(xs[a]), float(xs[b]), refined=False))
    return gaps


def refine_common_tangent(gamma_fn: Callable, T: float,
                          init: BinaryPhaseSplit,
                          tol: float = 1e-12,
                          max_iter: int = 100) -> BinaryPhaseSplit:
    """Sharpen a grid split by damped Newton on the isoactivity residuals.

    ``gamma_fn(x1, T)`` returns (ln g1, ln g2) for the binary.  Raises
    ``CemError("no stable split")`` on divergence or phase collapse; the
    caller may fall back to the grid answer.
    """
    lo = min(max(init.x1_lo, 1e-9), 1.0 - 1e-6)
    hi = max(min(init.x1_hi, 1.0 - 1e-9), 1e-6)

    def residual(xa, xb):
        ga = gamma_fn(xa, T)
        gb = gamma_fn(xb, T)
        return np.array([
            math.log(xa) + ga[0] - math.log(xb) - gb[0],
            math.log(1.0 - xa) + ga[1] - math.log(1.0 - xb) - gb[1],
        ])

    u = np.array([lo, hi])
    f = residual(*u)
    h = 1e-7
    for _ in range(max_iter):
        if np.max(np.abs(f)) < tol:
            break
        jac = np.empty((2, 2))
        for c in range(2):
            up = u.copy()
            um = u.copy()
            up[c] += h
            um[c] -= h
            jac[:, c] = (residual(*up) - residual(*um)) / (2.0 * h)
        try:
            step = np.linalg.solve(jac, -f)
        except np.linalg.LinAlgError:
            raise CemError("no stable split: singular Jacobian")
        # damp: keep 0 < xa < xb < 1 and shrink until the residual drops
        lam = 1.0
        norm0 = np.max(np.abs(f))
        for _ in range(40):
            cand = u + lam * step
            if 1e-14 < cand[0] < cand[1] - 1e-12 and cand[1] < 1.0 - 1e-14:
                fc = residual(*cand)
                if np.max(np.abs(fc)) < norm0 or lam < 1e-6:
                    u, f = cand, fc
                    break
            lam *= 0.5
        else:
            raise CemError("no stable split: line search failed")
        if u[1] - u[0] < 1e-8:
            raise CemError("no stable split: phases collapsed")
    else:
        raise CemError("no stable split: not converged")
    if np.max(np.abs(f)) >= tol:
        raise CemError("no stable split: not converged")
    return BinaryPhaseSplit(float(u[0]), float(u[1]), refined=True)


def curve_from_gamma(gamma_fn: Callable, T: float) -> DGmixCurve:
    """dgmix/RT grid from a binary ln-gamma provider.

    Uses gE/RT = x1 ln g1 + x2 ln g2, so the same gamma_fn serves both
    detection and refinement.
    """
    vals = np.empty(GRID_N)
    vals[0] = vals[GRID_N - 1] = 0.0
    for d in range(1, GRID_N - 1):
        x1 = d / (GRID_N - 1)
        g = gamma_fn(x1, T)
        vals[d] = x1 * g[0] + (1.0 - x1) * g[1] + ideal_mixing(x1)
    return DGmixCurve(vals, T)


class BinodalScan(NamedTuple):
    temperatures: list[float]
    splits: list[list[BinaryPhaseSplit]]       # per temperature
    consolute: list[tuple[float, float, str]]  # (T_gap, T_no_gap, "UCST"/"LCST")


def binodal_scan(gamma_fn: Callable, T_list: Sequence[float]) -> BinodalScan:
    """Refined splits over sorted temperatures plus consolute brackets.

    Where a gap closes between adjacent temperatures the consolute point
    is bracketed by (last T with a gap, first T without), labeled UCST
    when the gap disappears on heating and LCST on cooling.
    """
    T_list = list(T_list)
    if any(a > b for a, b in zip(T_list, T_list[1:])):
        raise CemError("temperatures must be sorted ascending")
    per_T: list[list[BinaryPhaseSplit]] = []
    for T in T_list:
        splits = []
        for gap in detect_gaps(curve_from_gamma(gamma_fn, T)):
            try:
                splits.append(refine_common_tangent(gamma_fn, T, gap))
            except CemError:
                splits.append(gap)
        per_T.append(splits)

    consolute = []
    for k in range(len(T_list) - 1):
        has0, has1 = bool(per_T[k]), bool(per_T[k + 1])
        if has0 and not has1:
            consolute.append((T_list[k], T_list[k + 1], "UCST"))
        elif has1 and not has0:
            consolute.append((T_list[k + 1], T_list[k], "LCST"))
    return BinodalScan(T_list, per_T, consolute)


def write_binodal_csv(scan: BinodalScan, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["T", "x1_lo", "x1_hi", "refined"])
        for T, splits in zip(scan.temperatures, scan.splits):
            for s in splits:
                w.writerow([repr(T), repr(s.x1_lo), repr(s.x1_hi), int(s.refined)])
