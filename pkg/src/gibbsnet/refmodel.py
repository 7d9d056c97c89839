"""Scalar-tape reference implementation of the forward pass.

Slow, loop-based twin of :mod:`gibbsnet.model` built on the scalar tape
and its second-order duals.  Used to verify the vectorized engine;
parameters are treated as constants here.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Dual2, Tape
from .model import SIMILARITY_GAMMA
from .network import ModelParams, power_iterate, softplus_np
from .thermo import GRID_N

__all__ = ["ref_theta", "ref_excess_gibbs", "ref_activity", "ref_curve_points"]


def _scaled_weights(layer) -> tuple[np.ndarray, np.ndarray]:
    _, _, sigma = power_iterate(layer.W_raw, layer.u.copy(), 2)
    return layer.W_raw * (float(softplus_np(layer.c_star)) / sigma), layer.bias


def ref_theta(params: ModelParams, E: np.ndarray) -> np.ndarray:
    """Refined embeddings, plain numpy (composition independent)."""
    E = np.atleast_2d(np.asarray(E, dtype=float))
    h = (E - params.emb_mean) / params.emb_std
    for layer in params.emb_net:
        W, b = _scaled_weights(layer)
        z = h @ W.T + b
        h = z * (1.0 / (1.0 + np.exp(-z)))
    return h


def _mix_layers(params):
    return [_scaled_weights(l) for l in params.mix_net]


def _prop_layers(params):
    return [_scaled_weights(l) for l in params.prop_net]


def _pair_q_dual(mix, prop, theta_i, theta_j, Xi, Xj, Tstar, R_ij):
    """q_ij with Xi, Xj as Dual2; everything else constant floats."""
    alphas = None
    (W1, b1), (W2, b2) = mix
    for theta, X in ((theta_i, Xi), (theta_j, Xj)):
        base = W1[:, :-2] @ theta + W1[:, -1] * Tstar + b1
        h = [ad.dsilu(X * float(W1[k, -2]) + float(base[k]))
             for k in range(len(base))]
        h2 = []
        for k in range(W2.shape[0]):
            z = float(b2[k])
            for m, hm in enumerate(h):
                z = hm * float(W2[k, m]) + z
            h2.append(ad.dsilu(z))
        alphas = h2 if alphas is None else [a + b for a, b in zip(alphas, h2)]
    (P1, c1), (P2, c2) = prop
    h3 = []
    for k in range(P1.shape[0]):
        z = float(c1[k])
        for m, am in enumerate(alphas):
            z = am * float(P1[k, m]) + z
        h3.append(ad.dsilu(z))
    out = float(c2[0])
    for m, hm in enumerate(h3):
        out = hm * float(P2[0, m]) + out
    return out * (1.0 - R_ij)


def _similarity_matrix(theta: np.ndarray) -> np.ndarray:
    n = theta.shape[0]
    R = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            R[i, j] = R[j, i] = np.exp(
                -SIMILARITY_GAMMA * float(((theta[i] - theta[j]) ** 2).sum()))
    return R


def _gibbs_dual(params, theta, R, x_duals, Tstar):
    """gE/RT as Dual2 from per-component composition duals."""
    n = len(x_duals)
    mix, prop = _mix_layers(params), _prop_layers(params)
    lumped = []
    for a in range(n):
        acc = x_duals[a]
        for b in range(n):
            if b != a:
                acc = acc + x_duals[b] * float(R[a, b])
        lumped.append(acc)
    g = None
    for a in range(n):
        for b in range(a + 1, n):
            Xa = (1.0 + (lumped[a] - lumped[b])) * 0.5
            Xb = 1.0 - Xa
            q = _pair_q_dual(mix, prop, theta[a], theta[b], Xa, Xb,
                             Tstar, float(R[a, b]))
            term = x_duals[a] * x_duals[b] * q
            g = term if g is None else g + term
    return g


def _composition_duals(tape, x, direction):
    n = len(x)
    duals = []
    for b in range(n):
        seed = 1.0 if b == direction else (-1.0 if b == n - 1 else 0.0)
        duals.append(Dual2.variable(tape, float(x[b]), seed))
    return duals


def ref_excess_gibbs(params: ModelParams, E: np.ndarray, x, T: float) -> float:
    theta = ref_theta(params, E)
    R = _similarity_matrix(theta)
    Tstar = (T - params.T_mean) / params.T_std
    tape = Tape()
    duals = _composition_duals(tape, np.asarray(x, dtype=float), direction=-1)
    return _gibbs_dual(params, theta, R, duals, Tstar).p.value


def ref_activity(params: ModelParams, E: np.ndarray, x, T: float):
    """(ln_gamma array, gE/RT) via one dual pass per free coordinate."""
    x = np.asarray(x, dtype=float)
    theta = ref_theta(params, E)
    R = _similarity_matrix(theta)
    Tstar = (T - params.T_mean) / params.T_std
    n = len(x)
    g_val = None
    dg = []
    for r in range(n - 1):
        tape = Tape()
        duals = _composition_duals(tape, x, r)
        g = _gibbs_dual(params, theta, R, duals, Tstar)
        dg.append(g.d1.value)
        if g_val is None:
            g_val = g.p.value
    weighted = sum(x[j] * dg[j] for j in range(n - 1))
    ln_g = [g_val + dg[i] - weighted for i in range(n - 1)]
    ln_g.append(g_val - weighted)
    return np.array(ln_g), g_val


def ref_curve_points(params: ModelParams, E_pair: np.ndarray, T: float,
                     grid_indices) -> tuple[np.ndarray, np.ndarray]:
    """(dgmix/RT, S) at selected interior grid indices of the 101 grid."""
    theta = ref_theta(params, E_pair)
    R = _similarity_matrix(theta)
    Tstar = (T - params.T_mean) / params.T_std
    vals = []
    Ss = []
    for d in grid_indices:
        x1 = d / (GRID_N - 1)
        tape = Tape()
        duals = _composition_duals(tape, np.array([x1, 1.0 - x1]), 0)
        g = _gibbs_dual(params, theta, R, duals, Tstar)
        entropy = x1 * np.log(x1) + (1 - x1) * np.log(1 - x1)
        vals.append(g.p.value + entropy)
        Ss.append(g.d2.value + 1.0 / (x1 * (1.0 - x1)))
    return np.array(vals), np.array(Ss)
