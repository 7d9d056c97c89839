"""The hard-constrained excess-Gibbs network.

Forward pass for an N-component state: scale inputs, refine each
component's embedding, compute pairwise similarity scores, lump and
project compositions onto every binary subsystem, predict the
interaction q_ij for each pair with a permutation-invariant deep-set
head, assemble gE/RT = sum x_i x_j q_ij, and differentiate it in the
N-1 free mole fractions to obtain Gibbs-Duhem-consistent ln(gamma).

Everything here is written against the array tape so the same code
serves gradient-based training and (inside ``no_grad``) fast inference.
Composition derivatives ride along as dual-number channels whose
components are tape variables, mirroring the scalar reference engine.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import arraydiff as adf
from .arraydiff import Var, no_grad
from .network import (HIDDEN, ModelParams, model_lipschitz_product,
                      power_iterate, softplus_np)
from .thermo import GRID_N, MixtureState, xlogx

__all__ = [
    "ModelError",
    "SIMILARITY_GAMMA",
    "GibbsModel",
    "EmbeddingTable",
    "ParamVars",
    "Dual",
    "lump_and_project",
    "load_embeddings",
    "save_embeddings",
]

SIMILARITY_GAMMA = 100.0  # RBF sharpness: only near-identical components lump

_GRID = np.linspace(0.0, 1.0, GRID_N)
_ENTROPY = np.array([xlogx(x) + xlogx(1.0 - x) for x in _GRID])
_ENTROPY_D2 = 1.0 / (_GRID[1:-1] * (1.0 - _GRID[1:-1]))


class ModelError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# dual-number channels over array tape variables


class Dual:
    """(primal, d1, d2) triple of tape Vars; None marks a zero channel."""

    __slots__ = ("p", "d1", "d2")

    def __init__(self, p, d1=None, d2=None):
        self.p = p
        self.d1 = d1
        self.d2 = d2


def _nadd(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return adf.add(a, b)


def dual_add(a: Dual, b: Dual) -> Dual:
    return Dual(adf.add(a.p, b.p), _nadd(a.d1, b.d1), _nadd(a.d2, b.d2))


def dual_sub(a: Dual, b: Dual) -> Dual:
    d1 = a.d1 if b.d1 is None else (adf.sub(a.d1, b.d1) if a.d1 is not None else -b.d1)
    d2 = a.d2 if b.d2 is None else (adf.sub(a.d2, b.d2) if a.d2 is not None else -b.d2)
    return Dual(adf.sub(a.p, b.p), d1, d2)


def dual_mul(a: Dual, b: Dual) -> Dual:
    p = adf.mul(a.p, b.p)
    d1 = _nadd(None if a.d1 is None else adf.mul(a.d1, b.p),
               None if b.d1 is None else adf.mul(a.p, b.d1))
    cross = None
    if a.d1 is not None and b.d1 is not None:
        cross = adf.mul(adf.mul(a.d1, b.d1), 2.0)
    d2 = _nadd(_nadd(None if a.d2 is None else adf.mul(a.d2, b.p),
                     None if b.d2 is None else adf.mul(a.p, b.d2)), cross)
    return Dual(p, d1, d2)


def dual_scale(a: Dual, w) -> Dual:
    """Multiply by a composition-independent factor (Var or constant)."""
    return Dual(adf.mul(a.p, w),
                None if a.d1 is None else adf.mul(a.d1, w),
                None if a.d2 is None else adf.mul(a.d2, w))


def dual_silu(z: Dual) -> Dual:
    # order-2 leaves materialize d2 = 0, so z.d2 is None exactly when the
    # evaluation tracks first order only
    y = adf.silu(z.p)
    if z.d1 is None:
        return Dual(y)
    s1 = adf.dsilu(z.p)
    d1 = adf.mul(s1, z.d1)
    d2 = None
    if z.d2 is not None:
        s2 = adf.d2silu(z.p)
        d2 = adf.add(adf.mul(s2, adf.mul(z.d1, z.d1)), adf.mul(s1, z.d2))
    return Dual(y, d1, d2)


# ---------------------------------------------------------------------------
# parameters on the tape


class LayerVars:
    __slots__ = ("W", "b", "c", "Ws", "WsT", "uv")

    def __init__(self, layer, requires_grad: bool, update_u: bool,
                 spectral=None):
        self.W = Var(layer.W_raw, requires_grad=requires_grad)
        self.b = Var(layer.bias, requires_grad=requires_grad)
        if layer.lipschitz:
            self.c = Var(layer.c_star, requires_grad=requires_grad)
            if spectral is None:
                u, v, _ = power_iterate(layer.W_raw, layer.u.copy(), 2)
                if update_u:
                    layer.u[:] = u
            else:
                u, v = spectral
            self.uv = (u, v)
            # u, v detached: d(sigma)/dW = outer(u, v)
            sigma = adf.weighted_entry_sum(self.W, np.outer(u, v))
            scale = adf.div(adf.softplus(self.c), sigma)
            self.Ws = adf.mul(self.W, scale)
        else:
            self.c = None
            self.uv = None
            self.Ws = self.W
        self.WsT = adf.transpose(self.Ws)

    def apply(self, x: Dual) -> Dual:
        p = adf.add(adf.matmul(x.p, self.WsT), self.b)
        d1 = None if x.d1 is None else adf.matmul(x.d1, self.WsT)
        d2 = None if x.d2 is None else adf.matmul(x.d2, self.WsT)
        return Dual(p, d1, d2)


class ParamVars:
    """One step's tape view of the parameters.

    In training mode the layers' persistent power-iteration vectors are
    advanced in place; at inference the iterations run on copies.
    ``update_u`` can be forced off while keeping gradients (finite-
    difference checks need the spectral estimate held fixed).
    """

    def __init__(self, params: ModelParams, training: bool = False,
                 update_u: bool | None = None, spectral=None):
        if update_u is None:
            update_u = training
        self.params = params
        layers = params.layers()
        if spectral is None:
            spectral = [None] * len(layers)
        lvs = [LayerVars(l, training, update_u, s)
               for l, s in zip(layers, spectral)]
        n_emb = len(params.emb_net)
        n_mix = len(params.mix_net)
        self.emb = lvs[:n_emb]
        self.mix = lvs[n_emb:n_emb + n_mix]
        self.prop = lvs[n_emb + n_mix:]

    def all_layer_vars(self):
        return [*self.emb, *self.mix, *self.prop]

    def spectral_vectors(self):
        """Per-layer detached (u, v) pairs, for held-fixed FD checks."""
        return [lv.uv for lv in self.all_layer_vars()]

    def lipschitz_product_var(self) -> Var:
        out = None
        for lv in self.all_layer_vars():
            if lv.c is None:
                continue
            term = adf.softplus(lv.c)
            out = term if out is None else adf.mul(out, term)
        return out


def scale_embeddings(params: ModelParams, E: np.ndarray) -> np.ndarray:
    E = np.asarray(E, dtype=float)
    if E.ndim == 1:
        E = E[None, :]
    if E.shape[1] != params.embedding_dim:
        raise ModelError(
            f"embedding dim {E.shape[1]} does not match model ({params.embedding_dim})")
    if np.any(params.emb_std <= 0.0):
        raise ModelError("embedding scaler is unfitted")
    return (E - params.emb_mean) / params.emb_std


def scale_temperature(params: ModelParams, T) -> np.ndarray:
    if params.T_std <= 0.0:
        raise ModelError("temperature scaler is unfitted")
    return (np.asarray(T, dtype=float) - params.T_mean) / params.T_std


def theta_table(pv: ParamVars, E_scaled: np.ndarray) -> Var:
    """Refined component embeddings: SiLU(modified linear layer)."""
    h = Dual(adf.const(E_scaled))
    for lv in pv.emb:
        h = dual_silu(lv.apply(h))
    return h.p


# ---------------------------------------------------------------------------
# batched pair machinery


def _similarity(theta: Var, idx_a, idx_b) -> Var:
    ta = adf.gather_rows(theta, idx_a)
    tb = adf.gather_rows(theta, idx_b)
    diff = adf.sub(ta, tb)
    sq = adf.vsum(adf.mul(diff, diff), axis=1, keepdims=True)
    return adf.exp(adf.mul(sq, -SIMILARITY_GAMMA))


def _pair_q(pv: ParamVars, theta: Var, idx_i, idx_j, Xi: Dual, R: Var,
            Tstar_col: np.ndarray) -> Dual:
    """q_ij rows for projected composition Xi of component i (Xj = 1 - Xi)."""
    Xj = dual_sub(Dual(adf.const(np.ones_like(Xi.p.value))), Xi)
    alpha = None
    for idx, X in ((idx_i, Xi), (idx_j, Xj)):
        th = adf.gather_rows(theta, idx)
        l0 = pv.mix[0]
        # first layer on [theta, X, T*]: split the weight columns so the
        # dual channels only touch the X column
        p = adf.add(adf.matmul(adf.concat_cols(
            [th, X.p, adf.const(Tstar_col)]), l0.WsT), l0.b)
        wX = adf.transpose(adf.slice_cols(l0.Ws, HIDDEN, HIDDEN + 1))
        d1 = None if X.d1 is None else adf.matmul(X.d1, wX)
        d2 = None if X.d2 is None else adf.matmul(X.d2, wX)
        h = dual_silu(Dual(p, d1, d2))
        for lv in pv.mix[1:]:
            h = dual_silu(lv.apply(h))
        alpha = h if alpha is None else dual_add(alpha, h)
    h = dual_silu(pv.prop[0].apply(alpha))
    phi = pv.prop[1].apply(h)
    one_minus_R = adf.sub(adf.const(np.ones_like(R.value)), R)
    return dual_scale(phi, one_minus_R)


def _composition_duals(x: np.ndarray, direction: int | None, order: int):
    """Per-slot Dual columns for compositions (M, N); slot N-1 is dependent."""
    M, N = x.shape
    duals = []
    for b in range(N):
        p = adf.const(x[:, b:b + 1])
        d1 = None
        d2 = None
        if direction is not None:
            seed = 0.0
            if b == direction:
                seed = 1.0
            elif b == N - 1:
                seed = -1.0
            if seed != 0.0:
                d1 = adf.const(np.full((M, 1), seed))
            elif order >= 1:
                d1 = adf.const(np.zeros((M, 1)))
            if order >= 2:
                d2 = adf.const(np.zeros((M, 1)))
        duals.append(Dual(p, d1, d2))
    return duals


def _excess_gibbs_pass(pv: ParamVars, theta: Var, comp_idx: np.ndarray,
                       x: np.ndarray, Tstar: np.ndarray,
                       direction: int | None, order: int) -> Dual:
    """One forward pass over a group of M points sharing N components."""
    M, N = comp_idx.shape
    Tcol = Tstar.reshape(M, 1)
    xd = _composition_duals(x, direction, order)

    # pairwise similarity for every unordered slot pair
    R = {}
    for a in range(N):
        for b in range(a + 1, N):
            R[a, b] = _similarity(theta, comp_idx[:, a], comp_idx[:, b])

    # lumped compositions: x~_a = x_a + sum_b x_b R_ab
    lumped = []
    for a in range(N):
        acc = xd[a]
        for b in range(N):
            if b == a:
                continue
            Rab = R[min(a, b), max(a, b)]
            acc = dual_add(acc, dual_scale(xd[b], Rab))
        lumped.append(acc)

    g = None
    half = adf.const(np.full((M, 1), 0.5))
    one = adf.const(np.ones((M, 1)))
    for a in range(N):
        for b in range(a + 1, N):
            delta = dual_sub(lumped[a], lumped[b])
            Xa = dual_scale(dual_add(Dual(one), delta), half)
            q = _pair_q(pv, theta, comp_idx[:, a], comp_idx[:, b], Xa,
                        R[a, b], Tcol)
            term = dual_mul(dual_mul(xd[a], xd[b]), q)
            g = term if g is None else dual_add(g, term)
    return g


def gamma_group(pv: ParamVars, theta: Var, comp_idx: np.ndarray,
                x: np.ndarray, Tstar: np.ndarray):
    """ln(gamma) (M, N) and gE/RT (M, 1) for a group of same-N points.

    Runs one dual pass per free coordinate; ln gamma_i = g + dg/dx_i -
    sum_j x_j dg/dx_j with the last component dependent.
    """
    M, N = comp_idx.shape
    dg = []
    g = None
    for r in range(N - 1):
        out = _excess_gibbs_pass(pv, theta, comp_idx, x, Tstar, r, order=1)
        dg.append(out.d1)
        if r == 0:
            g = out.p
    weighted = None
    for j in range(N - 1):
        term = adf.mul(dg[j], x[:, j:j + 1])
        weighted = term if weighted is None else adf.add(weighted, term)
    cols = []
    for i in range(N - 1):
        cols.append(adf.sub(adf.add(g, dg[i]), weighted))
    cols.append(adf.sub(g, weighted))
    return adf.concat_cols(cols), g


def curve_group(pv: ParamVars, theta: Var, comp_idx: np.ndarray,
                Tstar: np.ndarray, order: int = 2):
    """dgmix/RT curves (M, 101) and interior curvature S (M, 99).

    Each row of comp_idx is a binary pair; the composition sweeps the
    uniform grid.  The ideal-mixing part and its curvature enter as
    constants (they carry no parameters).
    """
    M = comp_idx.shape[0]
    P = M * GRID_N
    idx_i = np.repeat(comp_idx[:, 0], GRID_N)
    idx_j = np.repeat(comp_idx[:, 1], GRID_N)
    x1 = np.tile(_GRID, M)
    xmat = np.stack([x1, 1.0 - x1], axis=1)
    Trow = np.repeat(Tstar, GRID_N)
    g = _excess_gibbs_pass(pv, theta, np.stack([idx_i, idx_j], axis=1),
                           xmat, Trow, direction=0, order=order)
    curve = adf.add(adf.reshape(g.p, (M, GRID_N)), adf.const(_ENTROPY))
    S = None
    if order >= 2:
        d2 = adf.reshape(g.d2, (M, GRID_N))
        S = adf.add(adf.slice_cols(d2, 1, GRID_N - 1), adf.const(_ENTROPY_D2))
    return curve, S


# ---------------------------------------------------------------------------
# stand-alone projection helper (spec surface; also used by tests)


def lump_and_project(x: np.ndarray, R: np.ndarray):
    """Lumped mole fractions and per-pair projected compositions.

    Returns (x_lumped, {(i, j): (X_i, X_j)}) with X_i + X_j = 1 exactly
    (X_j is computed as the float complement of X_i).
    """
    x = np.asarray(x, dtype=float)
    R = np.asarray(R, dtype=float)
    lumped = R @ x
    pairs = {}
    n = len(x)
    for i in range(n):
        for j in range(i + 1, n):
            Xi = 0.5 * (1.0 + lumped[i] - lumped[j])
            pairs[(i, j)] = (Xi, 1.0 - Xi)
    return lumped, pairs


# ---------------------------------------------------------------------------
# embedding table file (JSON header line + one record per line)


class EmbeddingTable:
    def __init__(self, dimension: int, vectors: dict[str, np.ndarray]):
        self.dimension = dimension
        self.vectors = vectors

    def __contains__(self, cid):
        return cid in self.vectors

    def get(self, cid: str) -> np.ndarray:
        try:
            return self.vectors[cid]
        except KeyError:
            raise ModelError(f"unknown component {cid!r}") from None

    def matrix(self, ids) -> np.ndarray:
        return np.stack([self.get(c) for c in ids])


def save_embeddings(table: EmbeddingTable, path) -> None:
    with open(path, "w") as f:
        f.write(json.dumps({"version": 1, "dimension": table.dimension,
                            "count": len(table.vectors)}) + "\n")
        for cid in sorted(table.vectors):
            vec = table.vectors[cid]
            f.write(json.dumps({"component_id": cid,
                                "vector": [float(v) for v in vec]}) + "\n")


def load_embeddings(path) -> EmbeddingTable:
    with open(path) as f:
        header = json.loads(f.readline())
        if header.get("version") != 1:
            raise ModelError("unsupported embedding file version")
        D = int(header["dimension"])
        vectors = {}
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            v = np.asarray(rec["vector"], dtype=float)
            if v.shape != (D,):
                raise ModelError(
                    f"vector length {v.shape} does not match header dimension {D}")
            vectors[rec["component_id"]] = v
    if len(vectors) != header["count"]:
        raise ModelError("embedding record count does not match header")
    return EmbeddingTable(D, vectors)


# ---------------------------------------------------------------------------
# inference facade


class GibbsModel:
    """Inference-side view of a parameter set (thread-safe, params frozen)."""

    def __init__(self, params: ModelParams):
        self.params = params

    # -- single state ----------------------------------------------------

    def activity_coefficients(self, state: MixtureState, E: np.ndarray):
        """ln(gamma) vector and gE/RT for one state; E rows follow state order."""
        with no_grad():
            pv = ParamVars(self.params, training=False)
            theta = theta_table(pv, scale_embeddings(self.params, E))
            n = len(state.components)
            comp_idx = np.arange(n)[None, :]
            Tstar = np.atleast_1d(scale_temperature(self.params, state.T))
            ln_g, g = gamma_group(pv, theta, comp_idx, state.x[None, :], Tstar)
        return ln_g.value[0], float(g.value[0, 0])

    def excess_gibbs(self, state: MixtureState, E: np.ndarray) -> float:
        with no_grad():
            pv = ParamVars(self.params, training=False)
            theta = theta_table(pv, scale_embeddings(self.params, E))
            n = len(state.components)
            Tstar = np.atleast_1d(scale_temperature(self.params, state.T))
            g = _excess_gibbs_pass(pv, theta, np.arange(n)[None, :],
                                   state.x[None, :], Tstar, None, 0)
        return float(g.p.value[0, 0])

    # -- batched ----------------------------------------------------------

    def gamma_batch(self, E_table: np.ndarray, comp_idx: np.ndarray,
                    x: np.ndarray, T: np.ndarray):
        """ln(gamma) (M, N) for M points sharing component count N."""
        with no_grad():
            pv = ParamVars(self.params, training=False)
            theta = theta_table(pv, scale_embeddings(self.params, E_table))
            Tstar = scale_temperature(self.params, T)
            ln_g, g = gamma_group(pv, theta, comp_idx, x, Tstar)
        return ln_g.value, g.value[:, 0]

    def curves_batch(self, E_table: np.ndarray, pair_idx: np.ndarray,
                     T: np.ndarray):
        """dgmix/RT curves (M, 101) and interior S (M, 99) for binary pairs."""
        with no_grad():
            pv = ParamVars(self.params, training=False)
            theta = theta_table(pv, scale_embeddings(self.params, E_table))
            Tstar = scale_temperature(self.params, T)
            curve, S = curve_group(pv, theta, pair_idx, Tstar, order=2)
        return curve.value, S.value

    def dgmix_grid(self, E_pair: np.ndarray, T: float):
        """Curve for one pair on the 101-point grid (endpoints exactly 0)."""
        curve, _ = self.curves_batch(E_pair, np.array([[0, 1]]), np.array([T]))
        from .thermo import DGmixCurve
        return DGmixCurve(curve[0], T)

    def binary_gamma_fn(self, E_pair: np.ndarray):
        """(x1, T) -> (ln g1, ln g2) closure for CEM refinement."""
        E_pair = np.asarray(E_pair, dtype=float)

        def gamma(x1, T):
            state = MixtureState(["a", "b"], np.array([x1, 1.0 - x1]), T)
            ln_g, _ = self.activity_coefficients(state, E_pair)
            return float(ln_g[0]), float(ln_g[1])

        return gamma

    # -- spec surface helpers ---------------------------------------------

    def embed_and_refine(self, e: np.ndarray) -> np.ndarray:
        """Refined embedding theta for one component."""
        with no_grad():
            pv = ParamVars(self.params, training=False)
            th = theta_table(pv, scale_embeddings(self.params, e))
        return th.value[0]

    def pair_interaction(self, theta_i, theta_j, X_i, X_j, T_star, R_ij) -> float:
        """q_ij for explicit inputs (used by symmetry/bound checks)."""
        if abs((X_i + X_j) - 1.0) > 1e-12:
            raise ModelError("projected compositions must sum to 1")
        with no_grad():
            pv = ParamVars(self.params, training=False)
            th = Var(np.stack([theta_i, theta_j]))
            Xi = Dual(adf.const(np.array([[X_i]])))
            q = _pair_q(pv, th, np.array([0]), np.array([1]), Xi,
                        adf.const(np.array([[R_ij]])), np.array([[T_star]]))
        return float(q.p.value[0, 0])

    def lipschitz_product(self) -> float:
        return model_lipschitz_product(self.params)
