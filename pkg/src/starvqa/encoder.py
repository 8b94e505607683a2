"""Divided space-time attention blocks.

Per block, patch tokens go through time attention (same patch position,
all frames, plus the MOS token), then space attention (same frame, all
patch positions, plus the MOS token), then a pre-norm MLP.  The MOS token
is carried through time attention unchanged; in space attention its query
attends over its own key and every patch key of the clip.

Weight matrices are stored (in, out) so a row vector ``z`` maps as
``z @ W``.  Head ``a`` owns columns ``a*Hd:(a+1)*Hd`` of the Q/K/V
matrices, and per-head outputs are concatenated in head order before the
output projection.

Two implementations live here: small per-token functions that follow
the attention maths token by token (used as oracles), and a batched forward that
the model uses.
"""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import ContractError
from .tensor import Tensor

LN_EPS = 1e-6
STAGES = ("time", "space")


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) resampled until every draw lies within two std."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def init_stage(rng: np.random.Generator, dim: int, zero_proj: bool = False) -> dict[str, np.ndarray]:
    p = {
        "ln.gamma": np.ones(dim),
        "ln.beta": np.zeros(dim),
        "wq": trunc_normal(rng, (dim, dim)),
        "wk": trunc_normal(rng, (dim, dim)),
        "wv": trunc_normal(rng, (dim, dim)),
    }
    p["proj"] = np.zeros((dim, dim)) if zero_proj else trunc_normal(rng, (dim, dim))
    return p


def init_mlp(rng: np.random.Generator, dim: int, ratio: int) -> dict[str, np.ndarray]:
    return {
        "ln.gamma": np.ones(dim),
        "ln.beta": np.zeros(dim),
        "fc1.w": trunc_normal(rng, (dim, ratio * dim)),
        "fc1.b": np.zeros(ratio * dim),
        "fc2.w": trunc_normal(rng, (ratio * dim, dim)),
        "fc2.b": np.zeros(dim),
    }


def sub_weights(weights: dict[str, Tensor], prefix: str) -> dict[str, Tensor]:
    """View of ``weights`` under ``prefix.`` with the prefix stripped."""
    prefix = prefix + "."
    return {k[len(prefix):]: v for k, v in weights.items() if k.startswith(prefix)}


# -- per-token reference operations ---------------------------------------

def qkv(z: Tensor, stage: dict[str, Tensor], head: int, heads: int) -> tuple[Tensor, Tensor, Tensor]:
    dim = z.shape[-1]
    if dim % heads:
        raise ContractError(f"width {dim} not divisible by {heads} heads")
    hd = dim // heads
    h = T.layernorm(z, stage["ln.gamma"], stage["ln.beta"], LN_EPS)
    cols = (slice(None), slice(head * hd, (head + 1) * hd))
    return (T.matmul(h, stage["wq"][cols]), T.matmul(h, stage["wk"][cols]),
            T.matmul(h, stage["wv"][cols]))


def attention_weights(q: Tensor, mos_key: Tensor, keys: Tensor) -> Tensor:
    """softmax(q . [k_mos, k_1..k_L] / sqrt(Hd)); index 0 is the MOS key."""
    hd = q.shape[-1]
    K = T.concat([mos_key.reshape(1, hd), keys], axis=0)
    return T.softmax(T.scale(T.matmul(K, q), 1.0 / math.sqrt(hd)), axis=-1)


def aggregate(weights: Tensor, mos_value: Tensor, values: Tensor) -> Tensor:
    """mos_value * w[0] + sum_j values[j] * w[j+1]."""
    hd = mos_value.shape[-1]
    V = T.concat([mos_value.reshape(1, hd), values], axis=0)
    return T.matmul(weights, V)


def project_residual(head_outputs: list[Tensor], proj: Tensor, residual: Tensor) -> Tensor:
    return T.matmul(T.concat(head_outputs, axis=-1), proj) + residual


# Time and space stages share the math; only the gathered key set differs.
time_attention_weights = attention_weights
space_attention_weights = attention_weights
time_aggregate = aggregate
space_aggregate = aggregate
time_project_residual = project_residual
space_project_residual = project_residual


def mlp_block(e: Tensor, mlp: dict[str, Tensor]) -> Tensor:
    h = T.layernorm(e, mlp["ln.gamma"], mlp["ln.beta"], LN_EPS)
    h = T.gelu(T.matmul(h, mlp["fc1.w"]) + mlp["fc1.b"])
    return T.matmul(h, mlp["fc2.w"]) + mlp["fc2.b"] + e


def reference_block(E: Tensor, block: dict[str, Tensor], n_patches: int, n_frames: int,
                    heads: int, mode: str = "video") -> Tensor:
    """One encoder block evaluated token by token; E is (K+1, D)."""
    P, N = n_patches, n_frames
    rows = [E[i] for i in range(E.shape[0])]

    def row(p, n):  # p, n are 0-based patch / frame
        return 1 + n * P + p

    if mode == "video":
        stage = sub_weights(block, "time")
        qs, ks, vs = zip(*[zip(*[qkv(r, stage, a, heads) for a in range(heads)]) for r in rows])
        new = [rows[0]]
        for n in range(N):
            for p in range(P):
                i = row(p, n)
                outs = []
                for a in range(heads):
                    idx = [row(p, m) for m in range(N)]
                    keys = T.concat([ks[j][a].reshape(1, -1) for j in idx], axis=0)
                    vals = T.concat([vs[j][a].reshape(1, -1) for j in idx], axis=0)
                    w = time_attention_weights(qs[i][a], ks[0][a], keys)
                    outs.append(time_aggregate(w, vs[0][a], vals))
                new.append(time_project_residual(outs, stage["proj"], rows[i]))
        rows = new

    stage = sub_weights(block, "space")
    qs, ks, vs = zip(*[zip(*[qkv(r, stage, a, heads) for a in range(heads)]) for r in rows])
    new = []
    outs = []
    for a in range(heads):
        keys = T.concat([ks[j][a].reshape(1, -1) for j in range(1, len(rows))], axis=0)
        vals = T.concat([vs[j][a].reshape(1, -1) for j in range(1, len(rows))], axis=0)
        outs.append(space_aggregate(space_attention_weights(qs[0][a], ks[0][a], keys), vs[0][a], vals))
    new.append(space_project_residual(outs, stage["proj"], rows[0]))
    for n in range(N):
        for p in range(P):
            i = row(p, n)
            outs = []
            for a in range(heads):
                idx = [row(q, n) for q in range(P)]
                keys = T.concat([ks[j][a].reshape(1, -1) for j in idx], axis=0)
                vals = T.concat([vs[j][a].reshape(1, -1) for j in idx], axis=0)
                w = space_attention_weights(qs[i][a], ks[0][a], keys)
                outs.append(space_aggregate(w, vs[0][a], vals))
            new.append(space_project_residual(outs, stage["proj"], rows[i]))
    mlp = sub_weights(block, "mlp")
    return T.concat([mlp_block(r, mlp).reshape(1, -1) for r in new], axis=0)


# -- batched forward ------------------------------------------------------

def _split_heads(x: Tensor, heads: int) -> Tensor:
    """(B, L, D) -> (B, A, L, Hd)."""
    B, L, D = x.shape
    return x.reshape(B, L, heads, D // heads).transpose(0, 2, 1, 3)


def _stage_qkv(E: Tensor, stage: dict[str, Tensor], heads: int):
    h = T.layernorm(E, stage["ln.gamma"], stage["ln.beta"], LN_EPS)
    return tuple(_split_heads(T.matmul(h, stage[w]), heads) for w in ("wq", "wk", "wv"))


def _attend(q: Tensor, keys: Tensor, values: Tensor):
    hd = q.shape[-1]
    scores = T.scale(T.matmul(q, keys.swap_last()), 1.0 / math.sqrt(hd))
    alpha = T.softmax(scores, axis=-1)
    return T.matmul(alpha, values), alpha


def _with_mos(mos: Tensor, patches: Tensor) -> Tensor:
    """Prepend the MOS entry along the key axis.

    mos (B, A, 1, Hd), patches (B, A, G, L, Hd) -> (B, A, G, L+1, Hd)
    """
    B, A, G, L, hd = patches.shape
    m = T.broadcast_to(mos.reshape(B, A, 1, 1, hd), (B, A, G, 1, hd))
    return T.concat([m, patches], axis=3)


def time_stage(E: Tensor, stage: dict[str, Tensor], n_patches: int, n_frames: int,
               heads: int, trace: dict | None = None) -> Tensor:
    B, L, D = E.shape
    P, N, hd = n_patches, n_frames, D // heads
    q, k, v = _stage_qkv(E, stage, heads)

    def by_patch(x):  # (B, A, K, Hd) -> (B, A, P, N, Hd)
        return x[:, :, 1:].reshape(B, heads, N, P, hd).transpose(0, 1, 3, 2, 4)

    out, alpha = _attend(by_patch(q), _with_mos(k[:, :, :1], by_patch(k)),
                         _with_mos(v[:, :, :1], by_patch(v)))
    if trace is not None:
        trace.setdefault("time", []).append(alpha.data)
    s = out.transpose(0, 3, 2, 1, 4).reshape(B, N * P, D)
    patches = T.matmul(s, stage["proj"]) + E[:, 1:]
    return T.concat([E[:, :1], patches], axis=1)


def space_stage(E: Tensor, stage: dict[str, Tensor], n_patches: int, n_frames: int,
                heads: int, trace: dict | None = None) -> Tensor:
    B, L, D = E.shape
    P, N, hd = n_patches, n_frames, D // heads
    q, k, v = _stage_qkv(E, stage, heads)

    def by_frame(x):  # (B, A, K, Hd) -> (B, A, N, P, Hd)
        return x[:, :, 1:].reshape(B, heads, N, P, hd)

    out, alpha = _attend(by_frame(q), _with_mos(k[:, :, :1], by_frame(k)),
                         _with_mos(v[:, :, :1], by_frame(v)))
    mos_out, mos_alpha = _attend(q[:, :, :1], k, v)
    if trace is not None:
        trace.setdefault("space", []).append(alpha.data)
        trace.setdefault("space_mos", []).append(mos_alpha.data)
    s_patch = out.transpose(0, 2, 3, 1, 4).reshape(B, N * P, D)
    s_mos = mos_out.transpose(0, 2, 1, 3).reshape(B, 1, D)
    s = T.concat([s_mos, s_patch], axis=1)
    return T.matmul(s, stage["proj"]) + E


def block_forward(E: Tensor, block: dict[str, Tensor], n_patches: int, n_frames: int,
                  heads: int, mode: str = "video", trace: dict | None = None) -> Tensor:
    if mode == "video":
        E = time_stage(E, sub_weights(block, "time"), n_patches, n_frames, heads, trace)
    E = space_stage(E, sub_weights(block, "space"), n_patches, n_frames, heads, trace)
    return mlp_block(E, sub_weights(block, "mlp"))


def encoder_forward(E: Tensor, weights: dict[str, Tensor], n_patches: int, n_frames: int,
                    heads: int, blocks: int, mode: str = "video",
                    trace: dict | None = None) -> tuple[Tensor, Tensor]:
    """Run every block on E (B, K+1, D) or (K+1, D).

    Returns the final sequence and the normalised MOS row.
    """
    single = E.ndim == 2
    if single:
        E = E.reshape(1, *E.shape)
    if E.ndim != 3 or E.shape[1] != n_patches * n_frames + 1:
        raise ContractError(f"sequence shape {E.shape} does not match P={n_patches}, N={n_frames}")
    for i in range(blocks):
        E = block_forward(E, sub_weights(weights, f"blocks.{i}"), n_patches, n_frames, heads, mode, trace)
    mos = T.layernorm(E[:, 0], weights["norm.gamma"], weights["norm.beta"], LN_EPS)
    if single:
        return E.reshape(E.shape[1:]), mos.reshape(-1)
    return E, mos
