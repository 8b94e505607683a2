"""The full network: patch embedding, space-time encoder and score head."""
from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .encoder import LN_EPS, encoder_forward, init_mlp, init_stage, trunc_normal
from .errors import ContractError
from .tensor import Tensor


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> "OrderedDict[str, np.ndarray]":
    """Fresh parameters for ``cfg``; draw order is fixed so seeds reproduce.

    Image mode has no time-attention stages and no temporal position table.
    Time-stage output projections start at zero so a fresh time stage
    leaves its input untouched.
    """
    D, P = cfg.dim, cfg.n_patches
    p: OrderedDict[str, np.ndarray] = OrderedDict()
    p["embed.proj"] = trunc_normal(rng, (cfg.patch_dim, D))
    p["embed.pos_spatial"] = trunc_normal(rng, (P, D))
    if cfg.mode == "video":
        p["embed.pos_temporal"] = trunc_normal(rng, (cfg.n_frames, D))
    p["embed.pos_mos"] = trunc_normal(rng, (1, D))
    p["embed.mos_token"] = trunc_normal(rng, (1, D))
    for i in range(cfg.blocks):
        if cfg.mode == "video":
            for k, v in init_stage(rng, D, zero_proj=True).items():
                p[f"blocks.{i}.time.{k}"] = v
        for k, v in init_stage(rng, D).items():
            p[f"blocks.{i}.space.{k}"] = v
        for k, v in init_mlp(rng, D, cfg.mlp_ratio).items():
            p[f"blocks.{i}.mlp.{k}"] = v
    p["norm.gamma"] = np.ones(D)
    p["norm.beta"] = np.zeros(D)
    p.update(init_head(cfg, rng))
    return p


def init_head(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    D = cfg.dim
    return {
        "head.fc1.w": trunc_normal(rng, (D, D)),
        "head.fc1.b": np.zeros(D),
        "head.fc2.w": trunc_normal(rng, (D, cfg.out_dim)),
        "head.fc2.b": np.zeros(cfg.out_dim),
    }


def expected_shapes(cfg: ModelConfig) -> "OrderedDict[str, tuple[int, ...]]":
    return OrderedDict((k, v.shape) for k, v in init_params(cfg, np.random.default_rng(0)).items())


def head_logits(mos: Tensor, params: dict[str, Tensor]) -> Tensor:
    """Two-layer head on the final MOS row: D -> D (GELU) -> outputs."""
    h = T.gelu(T.matmul(mos, params["head.fc1.w"]) + params["head.fc1.b"])
    return T.matmul(h, params["head.fc2.w"]) + params["head.fc2.b"]


class StarVQA:
    """Parameters plus forward pass for one configuration."""

    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray] | None = None, seed: int = 0):
        self.cfg = cfg
        if params is None:
            params = init_params(cfg, np.random.default_rng(seed))
        shapes = expected_shapes(cfg)
        if list(params) != list(shapes):
            missing = sorted(set(shapes) - set(params))
            extra = sorted(set(params) - set(shapes))
            raise ContractError(f"parameter names do not match config (missing {missing}, unexpected {extra})")
        self.params: OrderedDict[str, Tensor] = OrderedDict()
        for k, shape in shapes.items():
            arr = np.array(params[k], dtype=np.float64)
            if arr.shape != shape:
                raise ContractError(f"parameter {k!r} has shape {arr.shape}, expected {shape}")
            self.params[k] = Tensor(arr, requires_grad=True)

    @property
    def mode(self) -> str:
        return self.cfg.mode

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data.copy()) for k, v in self.params.items())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def embed(self, patches: np.ndarray) -> Tensor:
        """(B, N, P, D_patch) patch tokens -> (B, K+1, D) sequence."""
        patches = np.asarray(patches, dtype=np.float64)
        if patches.ndim == 3:
            patches = patches[None]
        B, N, P, Dp = patches.shape
        cfg = self.cfg
        if P != cfg.n_patches or Dp != cfg.patch_dim:
            raise ContractError(f"patch tokens {patches.shape[1:]} do not match P={cfg.n_patches}, D_patch={cfg.patch_dim}")
        w = self.params
        e = T.matmul(Tensor(patches), w["embed.proj"]) + w["embed.pos_spatial"]
        if cfg.mode == "video":
            if N > cfg.n_frames:
                raise ContractError(f"clip has {N} frames, temporal table holds {cfg.n_frames}")
            e = e + w["embed.pos_temporal"][:N].reshape(N, 1, cfg.dim)
        elif N != 1:
            raise ContractError(f"image mode takes one frame, got {N}")
        e = e.reshape(B, N * P, cfg.dim)
        mos = T.broadcast_to((w["embed.mos_token"] + w["embed.pos_mos"]).reshape(1, 1, cfg.dim), (B, 1, cfg.dim))
        return T.concat([mos, e], axis=1)

    def encode(self, patches: np.ndarray, trace: dict | None = None) -> Tensor:
        """Final normalised MOS rows, shape (B, D)."""
        patches = np.asarray(patches)
        if patches.ndim == 3:
            patches = patches[None]
        E = self.embed(patches)
        _, mos = encoder_forward(E, self.params, self.cfg.n_patches, patches.shape[1],
                                 self.cfg.heads, self.cfg.blocks, self.cfg.mode, trace)
        return mos

    def logits(self, patches: np.ndarray, trace: dict | None = None) -> Tensor:
        return head_logits(self.encode(patches, trace), self.params)

    def predict_proba(self, patches: np.ndarray) -> np.ndarray:
        with T.no_grad():
            return T.softmax(self.logits(patches), axis=-1).data


__all__ = ["StarVQA", "init_params", "init_head", "expected_shapes", "head_logits", "LN_EPS"]
