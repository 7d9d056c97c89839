"""Classical thermodynamics primitives.

Conventions fixed here once for the whole package:

* Antoine equation: ``p_s = 10**(A - B/(C + T))`` with T in kelvin and the
  result in kPa.
* All excess quantities are dimensionless (divided by RT).
* ``0*ln(0) = 0`` via an explicit branch, so Gibbs-energy-of-mixing curves
  are exactly zero at the pure-component endpoints.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import autodiff as ad

__all__ = [
    "ThermoError",
    "AntoineCoefficients",
    "MixtureState",
    "NrtlParams",
    "DGmixCurve",
    "antoine_vapor_pressure",
    "gamma_from_vle",
    "bubble_point",
    "xlogx",
    "ideal_mixing",
    "delta_g_mix_curve",
    "stability_scan",
    "margules_gE",
    "margules_ln_gamma",
    "nrtl_tau_G",
    "nrtl_gE",
    "nrtl_ln_gamma",
    "nrtl_gE_of_x",
    "GRID_N",
]

GRID_N = 101  # dgmix curves are discretized on x1 = 0, 0.01, ..., 1


class ThermoError(ValueError):
    pass


@dataclass(frozen=True)
class AntoineCoefficients:
    """log10/kPa/kelvin Antoine constants with a validity range."""

    A: float
    B: float
    C: float
    T_min: float
    T_max: float

    def __post_init__(self):
        if not self.T_min < self.T_max:
            raise ThermoError("Antoine range requires T_min < T_max")


@dataclass
class MixtureState:
    """Query point for a prediction: components, mole fractions, temperature."""

    components: list[str]
    x: np.ndarray
    T: float

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        if len(self.components) < 2:
            raise ThermoError("a mixture needs at least two components")
        if len(self.components) != len(self.x):
            raise ThermoError("component/composition length mismatch")
        if np.any(self.x < 0.0):
            raise ThermoError("mole fractions must be non-negative")
        if abs(self.x.sum() - 1.0) > 1e-12:
            raise ThermoError(f"mole fractions sum to {self.x.sum()!r}, not 1")
        if not self.T > 0.0:
            raise ThermoError("temperature must be positive")


class VaporPressure(NamedTuple):
    p: float          # kPa
    in_range: bool    # False when T fell outside [T_min, T_max]


def antoine_vapor_pressure(coeffs: AntoineCoefficients, T: float) -> VaporPressure:
    """Pure-component vapor pressure in kPa at T (kelvin)."""
    if coeffs.C + T <= 0.0:
        raise ThermoError(f"antoine singularity: C + T = {coeffs.C + T}")
    p = 10.0 ** (coeffs.A - coeffs.B / (coeffs.C + T))
    return VaporPressure(p, coeffs.T_min <= T <= coeffs.T_max)


def save_antoine(coeffs: dict[str, AntoineCoefficients], path) -> None:
    """Write the JSON coefficient file: a list of per-component records."""
    records = [
        {"component_id": cid, "A": c.A, "B": c.B, "C": c.C,
         "T_min": c.T_min, "T_max": c.T_max}
        for cid, c in sorted(coeffs.items())
    ]
    with open(path, "w") as f:
        json.dump(records, f, indent=1)


def load_antoine(path) -> dict[str, AntoineCoefficients]:
    with open(path) as f:
        records = json.load(f)
    return {
        r["component_id"]: AntoineCoefficients(r["A"], r["B"], r["C"],
                                               r["T_min"], r["T_max"])
        for r in records
    }


def gamma_from_vle(p: float, y_i: float, p_s_i: float, x_i: float) -> float:
    """Activity coefficient from extended Raoult's law, gamma = p*y/(p_s*x)."""
    if x_i <= 0.0:
        raise ThermoError("infinite dilution; use ACI path")
    if p_s_i <= 0.0:
        raise ThermoError("vapor pressure must be positive")
    return p * y_i / (p_s_i * x_i)


def bubble_point(gamma_fn, antoine: Sequence[AntoineCoefficients], T: float,
                 x: Sequence[float]):
    """Isothermal bubble point: p = sum(x*gamma*p_s), y = x*gamma*p_s/p.

    ``gamma_fn(x, T)`` must return ln(gamma) for every component; a single
    pure component is allowed (p = p_s, y = 1).
    """
    x = np.asarray(x, dtype=float)
    ps = np.array([antoine_vapor_pressure(a, T).p for a in antoine])
    if len(x) == 1:
        return float(ps[0]), np.array([1.0])
    ln_g = np.asarray(gamma_fn(x, T), dtype=float)
    terms = x * np.exp(ln_g) * ps
    p = float(terms.sum())
    return p, terms / p


def xlogx(x):
    """x*ln(x) with the 0*ln(0) = 0 convention (branch below 1e-300)."""
    if isinstance(x, (int, float)):
        return 0.0 if x < 1e-300 else x * math.log(x)
    return x * ad.dlog(x)  # Dual2 / Node path: caller keeps x interior


def ideal_mixing(x1):
    """Ideal part of dgmix/RT for a binary, x1*ln(x1) + x2*ln(x2)."""
    if isinstance(x1, (int, float)):
        return xlogx(x1) + xlogx(1.0 - x1)
    return xlogx(x1) + xlogx(1.0 - x1)


@dataclass
class DGmixCurve:
    """dgmix/RT for one binary pair on the uniform 101-point grid."""

    values: np.ndarray
    T: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (GRID_N,):
            raise ThermoError(f"curve must have {GRID_N} values")

    @property
    def xs(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, GRID_N)


def delta_g_mix_curve(gE_fn: Callable[[float, float], float], T: float) -> DGmixCurve:
    """Discretize dgmix/RT = gE/RT + ideal mixing on the 101-point grid."""
    vals = np.empty(GRID_N)
    for d in range(GRID_N):
        x1 = d / (GRID_N - 1)
        vals[d] = gE_fn(x1, T) + ideal_mixing(x1)
    return DGmixCurve(vals, T)


class StabilityScan(NamedTuple):
    xs: np.ndarray       # interior grid compositions
    S: np.ndarray        # (1/RT) d2(dgmix)/dx1^2 at each interior point
    min_S: float


def stability_scan(gE_fn, T: float) -> StabilityScan:
    """Curvature of dgmix/RT over the interior grid points.

    ``gE_fn(x1, T)`` must accept a Dual2 composition (endpoints are
    excluded: the entropy curvature diverges there).
    """
    xs = np.array([d / (GRID_N - 1) for d in range(1, GRID_N - 1)])
    S = np.empty(len(xs))
    for k, x1 in enumerate(xs):
        _, _, d2 = ad.second_directional(
            lambda u: gE_fn(u, T) + ideal_mixing(u), x1)
        S[k] = d2.value
    return StabilityScan(xs, S, float(S.min()))


# ---------------------------------------------------------------------------
# oracle excess-Gibbs models


def margules_gE(A: float, x1):
    """One-parameter Margules, gE/RT = A*x1*x2 (works on floats and duals)."""
    return A * x1 * (1.0 - x1)


def margules_ln_gamma(A: float, x1: float) -> tuple[float, float]:
    """Closed form: ln g1 = A*x2^2, ln g2 = A*x1^2."""
    x2 = 1.0 - x1
    return A * x2 * x2, A * x1 * x1


@dataclass
class NrtlParams:
    """Multi-component NRTL parameters, tau_ij = a_ij + b_ij/T.

    ``alpha`` must be symmetric with zero diagonal; ``a``/``b`` have zero
    diagonals (tau_ii = 0).  alpha = 0 with tau != 0 is allowed (the
    exponential weights collapse to 1).
    """

    a: np.ndarray
    b: np.ndarray
    alpha: np.ndarray

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=float)
        self.b = np.asarray(self.b, dtype=float)
        self.alpha = np.asarray(self.alpha, dtype=float)
        n = self.a.shape[0]
        for m in (self.a, self.b, self.alpha):
            if m.shape != (n, n):
                raise ThermoError("NRTL parameter matrices must share one shape")
            if np.any(np.abs(np.diag(m)) > 0):
                raise ThermoError("NRTL diagonals must be zero")
        if not np.allclose(self.alpha, self.alpha.T, atol=0.0):
            raise ThermoError("NRTL alpha must be symmetric")

    @staticmethod
    def binary(tau12: float, tau21: float, alpha: float, T: float = 1.0) -> "NrtlParams":
        """Temperature-independent binary parameters (b = 0)."""
        a = np.array([[0.0, tau12], [tau21, 0.0]])
        return NrtlParams(a, np.zeros((2, 2)), np.array([[0.0, alpha], [alpha, 0.0]]))


def nrtl_tau_G(params: NrtlParams, T: float) -> tuple[np.ndarray, np.ndarray]:
    tau = params.a + params.b / T
    G = np.exp(-params.alpha * tau)
    return tau, G


def nrtl_gE(params: NrtlParams, x: Sequence[float], T: float) -> float:
    """gE/RT from the standard NRTL expression."""
    x = np.asarray(x, dtype=float)
    tau, G = nrtl_tau_G(params, T)
    num = (tau * G).T @ x          # num_i = sum_j tau_ji G_ji x_j
    den = G.T @ x                  # den_i = sum_k G_ki x_k
    return float(x @ (num / den))


def nrtl_ln_gamma(params: NrtlParams, x: Sequence[float], T: float) -> np.ndarray:
    """Closed-form NRTL activity coefficients (valid at x_i = 0, too)."""
    x = np.asarray(x, dtype=float)
    tau, G = nrtl_tau_G(params, T)
    den = G.T @ x
    frac = (tau * G).T @ x / den
    ln_g = np.empty(len(x))
    for i in range(len(x)):
        s = frac[i]
        for j in range(len(x)):
            s += (x[j] * G[i, j] / den[j]) * (tau[i, j] - frac[j])
        ln_g[i] = s
    return ln_g


def nrtl_gE_of_x(params: NrtlParams, T: float):
    """gE/RT as a generic function of composition (floats, Nodes, duals).

    tau and G are composition-independent constants, so the returned
    closure only uses +, *, / and works under the scalar tape.
    """
    tau, G = nrtl_tau_G(params, T)
    n = tau.shape[0]

    def gE(xs):
        total = None
        for i in range(n):
            num = None
            den = None
            for j in range(n):
                tn = xs[j] * float(tau[j, i] * G[j, i])
                dn = xs[j] * float(G[j, i])
                num = tn if num is None else num + tn
                den = dn if den is None else den + dn
            term = xs[i] * num / den
            total = term if total is None else total + term
        return total

    def gE_binary(x1, _T=None):
        return gE([x1, 1.0 - x1])

    gE.binary = gE_binary
    return gE
