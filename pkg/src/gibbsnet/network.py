"""Layer parameters, spectral normalization, and the checkpoint container.

All learnable state lives in plain numpy arrays so that checkpoints are
bit-exact and training is engine-agnostic.  A "Lipschitz" layer forwards
through ``W_raw / sigma_max(W_raw) * softplus(c_star)`` with the maximum
singular value estimated by exactly two power iterations on a persistent
vector ``u`` (updated in place during training, left untouched at
inference).
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "CheckpointError",
    "LayerParams",
    "ModelParams",
    "init_layer",
    "power_iterate",
    "softplus_np",
    "lipschitz_linear_forward",
    "init_model_params",
    "model_lipschitz_product",
    "save_checkpoint",
    "load_checkpoint",
    "MAGIC_MODEL",
    "MAGIC_SURROGATE",
    "HIDDEN",
    "MIX_IN_EXTRA",
]

MAGIC_MODEL = b"HCNN"
MAGIC_SURROGATE = b"SLLE"
FORMAT_VERSION = 1

HIDDEN = 96          # width of every modified linear layer
MIX_IN_EXTRA = 2     # mixture net input appends projected x and scaled T


class CheckpointError(RuntimeError):
    pass


def softplus_np(z):
    z = np.asarray(z, dtype=float)
    return np.where(z > 30.0, z, np.log1p(np.exp(np.minimum(z, 30.0))))


@dataclass
class LayerParams:
    W_raw: np.ndarray             # (out, in)
    bias: np.ndarray              # (out,)
    c_star: np.ndarray = None     # () learnable Lipschitz scalar; None for plain layers
    u: np.ndarray = None          # (out,) persistent power-iteration vector

    @property
    def lipschitz(self) -> bool:
        return self.c_star is not None

    @property
    def shape(self):
        return self.W_raw.shape

    def copy(self) -> "LayerParams":
        return LayerParams(
            self.W_raw.copy(), self.bias.copy(),
            None if self.c_star is None else self.c_star.copy(),
            None if self.u is None else self.u.copy())


def init_layer(rng: np.random.Generator, out_dim: int, in_dim: int,
               lipschitz: bool = True) -> LayerParams:
    """Uniform(-1/sqrt(in), 1/sqrt(in)) weights; softplus(c*) starts near 1.

    The persistent power-iteration vector is warm-started (15 iterations)
    so the 2-iteration spectral estimate is accurate from the first
    forward pass; training keeps it warm thereafter.
    """
    bound = 1.0 / np.sqrt(in_dim)
    W = rng.uniform(-bound, bound, size=(out_dim, in_dim))
    b = rng.uniform(-bound, bound, size=out_dim)
    if not lipschitz:
        return LayerParams(W, b)
    c = np.array(np.log(np.expm1(1.0)))  # softplus^{-1}(1)
    u = rng.normal(size=out_dim)
    u /= np.linalg.norm(u)
    u, _, _ = power_iterate(W, u, 15)
    return LayerParams(W, b, c, u)


def power_iterate(W: np.ndarray, u: np.ndarray, n_iter: int = 2):
    """Power iteration for sigma_max; returns (u, v, sigma).

    sigma is floored at 1e-12 so a degenerate all-zero weight matrix
    scales to zero instead of NaN.
    """
    eps = 1e-12
    for _ in range(n_iter):
        v = W.T @ u
        v = v / (np.linalg.norm(v) + eps)
        u = W @ v
        u = u / (np.linalg.norm(u) + eps)
    sigma = max(float(u @ W @ v), 1e-12)
    return u, v, sigma


def lipschitz_linear_forward(layer: LayerParams, x: np.ndarray,
                             training: bool = False) -> np.ndarray:
    """y = W_scaled x + bias with the 2-iteration spectral estimate.

    In training mode the persistent ``u`` is advanced in place; at
    inference the iterations run on a copy and ``u`` stays frozen.
    """
    if not layer.lipschitz:
        return x @ layer.W_raw.T + layer.bias
    u, v, sigma = power_iterate(layer.W_raw, layer.u.copy(), 2)
    if training:
        layer.u[:] = u
    scale = float(softplus_np(layer.c_star)) / sigma
    return x @ (layer.W_raw * scale).T + layer.bias


@dataclass
class ModelParams:
    """All learnable state of the activity model plus fitted input scalers."""

    embedding_dim: int
    emb_net: list[LayerParams]    # 1 layer, D -> 96
    mix_net: list[LayerParams]    # 2 layers, 98 -> 96 -> 96
    prop_net: list[LayerParams]   # 2 layers, 96 -> 96 -> 1
    emb_mean: np.ndarray
    emb_std: np.ndarray
    T_mean: float
    T_std: float

    def layers(self) -> list[LayerParams]:
        return [*self.emb_net, *self.mix_net, *self.prop_net]

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.embedding_dim,
            [l.copy() for l in self.emb_net],
            [l.copy() for l in self.mix_net],
            [l.copy() for l in self.prop_net],
            self.emb_mean.copy(), self.emb_std.copy(),
            self.T_mean, self.T_std)


def init_model_params(embedding_dim: int, seed: int,
                      emb_mean=None, emb_std=None,
                      T_mean: float = 353.0, T_std: float = 46.0) -> ModelParams:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6E65745F]))
    D = embedding_dim
    emb_net = [init_layer(rng, HIDDEN, D)]
    mix_net = [init_layer(rng, HIDDEN, HIDDEN + MIX_IN_EXTRA),
               init_layer(rng, HIDDEN, HIDDEN)]
    prop_net = [init_layer(rng, HIDDEN, HIDDEN),
                init_layer(rng, 1, HIDDEN)]
    if emb_mean is None:
        emb_mean = np.zeros(D)
    if emb_std is None:
        emb_std = np.ones(D)
    return ModelParams(D, emb_net, mix_net, prop_net,
                       np.asarray(emb_mean, dtype=float),
                       np.asarray(emb_std, dtype=float),
                       float(T_mean), float(T_std))


def model_lipschitz_product(params: ModelParams) -> float:
    """Product of softplus(c*) over every modified linear layer."""
    out = 1.0
    for layer in params.layers():
        out *= float(softplus_np(layer.c_star))
    return out


# ---------------------------------------------------------------------------
# checkpoint container
#
# magic(4) version(u32) D(u32) n_layers(u32)
#   per layer: out(u32) in(u32) flags(u32; bit0 = lipschitz)
#   per layer: W_raw, bias [, c_star, u]   (little-endian f64)
# n_scalers(u32), per scaler: len(u32) + f64 data
# crc32(u32) over everything before it


def _pack_array(buf: bytearray, a: np.ndarray) -> None:
    buf += np.ascontiguousarray(a, dtype="<f8").tobytes()


def save_checkpoint(path, magic: bytes, layers: list[LayerParams],
                    meta_dim: int, scalers: list[np.ndarray]) -> None:
    buf = bytearray()
    buf += magic
    buf += struct.pack("<III", FORMAT_VERSION, meta_dim, len(layers))
    for l in layers:
        out_dim, in_dim = l.W_raw.shape
        buf += struct.pack("<III", out_dim, in_dim, 1 if l.lipschitz else 0)
    for l in layers:
        _pack_array(buf, l.W_raw)
        _pack_array(buf, l.bias)
        if l.lipschitz:
            _pack_array(buf, np.atleast_1d(l.c_star))
            _pack_array(buf, l.u)
    buf += struct.pack("<I", len(scalers))
    for s in scalers:
        s = np.atleast_1d(np.asarray(s, dtype=float))
        buf += struct.pack("<I", s.size)
        _pack_array(buf, s)
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
    with open(path, "wb") as f:
        f.write(bytes(buf))


def load_checkpoint(path, magic: bytes):
    """Returns (meta_dim, layers, scalers); validates magic, version, CRC."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 20:
        raise CheckpointError("checkpoint truncated")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError("checksum failure")
    if body[:4] != magic:
        raise CheckpointError(f"magic mismatch: {body[:4]!r} != {magic!r}")
    off = 4
    version, meta_dim, n_layers = struct.unpack_from("<III", body, off)
    off += 12
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {version}")
    dims = []
    for _ in range(n_layers):
        out_dim, in_dim, flags = struct.unpack_from("<III", body, off)
        off += 12
        dims.append((out_dim, in_dim, flags))

    def take(n):
        nonlocal off
        a = np.frombuffer(body, dtype="<f8", count=n, offset=off).copy()
        off += 8 * n
        return a

    layers = []
    for out_dim, in_dim, flags in dims:
        W = take(out_dim * in_dim).reshape(out_dim, in_dim)
        b = take(out_dim)
        if flags & 1:
            c = take(1)[0]
            u = take(out_dim)
            layers.append(LayerParams(W, b, np.array(c), u))
        else:
            layers.append(LayerParams(W, b))
    (n_scalers,) = struct.unpack_from("<I", body, off)
    off += 4
    scalers = []
    for _ in range(n_scalers):
        (n,) = struct.unpack_from("<I", body, off)
        off += 4
        scalers.append(take(n))
    if off != len(body):
        raise CheckpointError("trailing bytes in checkpoint")
    return meta_dim, layers, scalers


def save_model(params: ModelParams, path) -> None:
    scalers = [params.emb_mean, params.emb_std,
               np.array([params.T_mean]), np.array([params.T_std])]
    save_checkpoint(path, MAGIC_MODEL, params.layers(), params.embedding_dim, scalers)


def load_model(path) -> ModelParams:
    D, layers, scalers = load_checkpoint(path, MAGIC_MODEL)
    if len(layers) != 5:
        raise CheckpointError(f"expected 5 layers, found {len(layers)}")
    expect = [(HIDDEN, D), (HIDDEN, HIDDEN + MIX_IN_EXTRA), (HIDDEN, HIDDEN),
              (HIDDEN, HIDDEN), (1, HIDDEN)]
    got = [l.W_raw.shape for l in layers]
    if got != expect:
        raise CheckpointError(f"dimension mismatch: {got} != {expect}")
    if len(scalers) != 4 or scalers[0].size != D or scalers[1].size != D:
        raise CheckpointError("scaler table does not match embedding dim")
    return ModelParams(D, [layers[0]], layers[1:3], layers[3:5],
                       scalers[0], scalers[1],
                       float(scalers[2][0]), float(scalers[3][0]))
