"""Finite-difference gradient checks.

The network check does not reuse the autodiff forward: it evaluates the
training loss with a separate plain-numpy forward that carries an extra
leading "replica" axis.  Every +h / -h perturbation of one parameter
tensor becomes one replica, so a whole tensor is checked with a single
batched evaluation.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .anchors import AnchorCodec, encode_mos, vr_loss
from .config import ModelConfig
from .model import StarVQA
from .tensor import Tensor

STEP = 1e-4
TOLERANCE = 1e-3
# Entries whose gradients are both below this are compared in absolute terms.
FLOOR = 1e-8

TINY = ModelConfig(n_frames=2, crop=4, patch=2, embed_dim=24, heads=2, blocks=2, anchors=6)


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), FLOOR)


def numeric_grad(f, x: np.ndarray, h: float = STEP) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x`` (one entry at a time)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def check_op(fn, *inputs: np.ndarray, h: float = STEP, seed: int = 0) -> float:
    """Max relative error of d<w, fn(inputs)>/d(input) over all inputs.

    ``fn`` maps Tensors to a Tensor; a fixed random weighting ``w`` turns
    the output into a scalar.
    """
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    ts = [Tensor(x, requires_grad=True) for x in inputs]
    out = fn(*ts)
    w = np.random.default_rng(seed).normal(size=out.shape)
    (out * w).sum().backward()
    worst = 0.0
    for k, t in enumerate(ts):
        def f(xk, k=k):
            args = [Tensor(xk if j == k else inputs[j]) for j in range(len(inputs))]
            with T.no_grad():
                return float((fn(*args).data * w).sum())
        num = numeric_grad(f, inputs[k], h)
        worst = max(worst, float(rel_error(t.grad, num).max()))
    return worst


# -- independent numpy forward with a replica axis ------------------------

def _ln(x, gamma, beta, eps=1e-6):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gamma + beta


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x ** 3)))


def _softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


class _Params:
    """Parameter lookup that inserts ``lead`` singleton axes after the replica axis.

    ``lead`` is the number of activation axes between the replica axis and
    the parameter's own axes: batch axes of the left operand for matmul
    weights, all non-feature axes for additive parameters.
    """

    def __init__(self, params: dict[str, np.ndarray], replica: str | None):
        self.params = params
        self.replica = replica

    def __call__(self, name: str, lead: int) -> np.ndarray:
        arr = self.params[name]
        if name != self.replica:
            return arr
        return arr.reshape((arr.shape[0],) + (1,) * lead + arr.shape[1:])


def _attn(q, k, v):
    s = q @ np.swapaxes(k, -1, -2) / math.sqrt(q.shape[-1])
    return _softmax(s) @ v


def replica_losses(params: dict[str, np.ndarray], cfg: ModelConfig, patches: np.ndarray,
                   targets: np.ndarray, replica: str | None = None) -> np.ndarray:
    """VR training loss for each replica of ``params[replica]``.

    Activations have shape (R, B, ...), where R is 1 when nothing is
    replicated.  Returns an array of shape (R,).
    """
    g = _Params(params, replica)
    A, P = cfg.heads, cfg.n_patches
    x = np.asarray(patches, dtype=np.float64)[None]  # (1, B, N, P, Dp)
    _, B, N, _, _ = x.shape
    D = cfg.dim
    hd = D // A
    e = x @ g("embed.proj", 2) + g("embed.pos_spatial", 2)
    if cfg.mode == "video":
        e = e + g("embed.pos_temporal", 1)[..., :N, :][..., :, None, :]
    R = e.shape[0]
    e = e.reshape(R, B, N * P, D)
    mos = (g("embed.mos_token", 1) + g("embed.pos_mos", 1)).reshape(-1, 1, 1, D)
    R = max(R, mos.shape[0])
    E = np.concatenate([np.broadcast_to(mos, (R, B, 1, D)), np.broadcast_to(e, (R, B, N * P, D))], axis=2)

    def heads(t):  # (R, B, L, D) -> (R, B, A, L, hd)
        return t.reshape(t.shape[0], B, -1, A, hd).transpose(0, 1, 3, 2, 4)

    def stage_qkv(E, pre):
        h = _ln(E, g(pre + "ln.gamma", 2), g(pre + "ln.beta", 2))
        q, k, v = (heads(h @ g(pre + w, 1)) for w in ("wq", "wk", "wv"))
        r = max(q.shape[0], k.shape[0], v.shape[0])
        return [np.broadcast_to(t, (r,) + t.shape[1:]) for t in (q, k, v)]

    for i in range(cfg.blocks):
        b = f"blocks.{i}."
        if cfg.mode == "video":
            q, k, v = stage_qkv(E, b + "time.")
            r = q.shape[0]
            outs = np.empty((r, B, N * P, D))
            for n in range(N):
                for p in range(P):
                    idx = [1 + m * P + p for m in range(N)]
                    kk = np.concatenate([k[..., :1, :], k[..., idx, :]], axis=-2)
                    vv = np.concatenate([v[..., :1, :], v[..., idx, :]], axis=-2)
                    j = 1 + n * P + p
                    s = _attn(q[..., j:j + 1, :], kk, vv)  # (r, B, A, 1, hd)
                    outs[:, :, j - 1] = s.reshape(r, B, D)
            patches_out = outs @ g(b + "time.proj", 1) + E[:, :, 1:]
            r = max(patches_out.shape[0], E.shape[0])
            E = np.concatenate([np.broadcast_to(E[:, :, :1], (r, B, 1, D)),
                                np.broadcast_to(patches_out, (r, B, N * P, D))], axis=2)
        q, k, v = stage_qkv(E, b + "space.")
        r = q.shape[0]
        s_all = np.empty((r, B, N * P + 1, D))
        s_all[:, :, 0] = _attn(q[..., :1, :], k, v).reshape(r, B, D)
        for n in range(N):
            idx = [0] + [1 + n * P + p for p in range(P)]
            s = _attn(q[..., idx[1:], :], k[..., idx, :], v[..., idx, :])  # (r, B, A, P, hd)
            s_all[:, :, idx[1:]] = s.transpose(0, 1, 3, 2, 4).reshape(r, B, P, D)
        E = s_all @ g(b + "space.proj", 1) + E
        h = _ln(E, g(b + "mlp.ln.gamma", 2), g(b + "mlp.ln.beta", 2))
        h = _gelu(h @ g(b + "mlp.fc1.w", 1) + g(b + "mlp.fc1.b", 2))
        E = h @ g(b + "mlp.fc2.w", 1) + g(b + "mlp.fc2.b", 2) + E
    m = _ln(E[:, :, 0], g("norm.gamma", 1), g("norm.beta", 1))
    h = _gelu(m @ g("head.fc1.w", 0) + g("head.fc1.b", 1))
    y_hat = _softmax(h @ g("head.fc2.w", 0) + g("head.fc2.b", 1))  # (R, B, M)
    cos = (targets * y_hat).sum(-1) / (np.linalg.norm(targets, axis=-1) * np.linalg.norm(y_hat, axis=-1))
    return (1.0 - cos).mean(axis=-1)


@dataclass
class GradCheckReport:
    errors: dict[str, float] = field(default_factory=dict)
    seconds: float = 0.0
    n_entries: int = 0

    @property
    def worst(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    def passed(self, tol: float = TOLERANCE) -> bool:
        return self.worst < tol


def tiny_problem(cfg: ModelConfig = TINY, seed: int = 0, batch: int = 2, jitter: float = 0.3):
    """A model with every parameter perturbed off its init, plus inputs and targets."""
    rng = np.random.default_rng(seed)
    model = StarVQA(cfg, seed=seed)
    for p in model.params.values():
        p.data = p.data + rng.normal(0.0, jitter, p.shape)
    patches = rng.uniform(-1.0, 1.0, size=(batch, cfg.n_frames, cfg.n_patches, cfg.patch_dim))
    codec = AnchorCodec(cfg.anchors, cfg.lo, cfg.hi)
    targets = encode_mos(rng.uniform(cfg.lo, cfg.hi, size=batch), codec)
    return model, patches, targets


def check_model(cfg: ModelConfig = TINY, seed: int = 0, h: float = STEP, chunk: int = 2048) -> GradCheckReport:
    """Compare every parameter gradient of the VR loss with central differences."""
    start = time.perf_counter()
    model, patches, targets = tiny_problem(cfg, seed)
    model.zero_grad()
    y_hat = T.softmax(model.logits(patches), axis=-1)
    vr_loss(targets, y_hat).backward()
    base = {k: p.data for k, p in model.params.items()}
    report = GradCheckReport()
    for name, p in model.params.items():
        flat = p.data.reshape(-1)
        numeric = np.empty(flat.size)
        for lo in range(0, flat.size, chunk):
            idx = np.arange(lo, min(lo + chunk, flat.size))
            reps = np.repeat(flat[None], 2 * idx.size, axis=0)
            reps[np.arange(idx.size), idx] += h
            reps[idx.size + np.arange(idx.size), idx] -= h
            params = dict(base)
            params[name] = reps.reshape((2 * idx.size,) + p.shape)
            losses = replica_losses(params, cfg, patches, targets, replica=name)
            numeric[idx] = (losses[:idx.size] - losses[idx.size:]) / (2 * h)
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        report.errors[name] = float(rel_error(analytic.reshape(-1), numeric).max())
        report.n_entries += flat.size
    report.seconds = time.perf_counter() - start
    return report


def op_suite() -> dict[str, float]:
    """Max relative error for each differentiable primitive on small random inputs."""
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    x8 = rng.normal(size=(2, 8))
    return {
        "matmul": check_op(T.matmul, a, b),
        "softmax": check_op(lambda x: T.softmax(x, axis=-1), rng.normal(size=(3, 5))),
        "log_softmax": check_op(lambda x: T.log_softmax(x, axis=-1), rng.normal(size=(3, 5))),
        "layernorm": check_op(lambda x, g, be: T.layernorm(x, g, be, 1e-6), x8,
                              rng.normal(size=8), rng.normal(size=8)),
        "gelu": check_op(T.gelu, np.array([-3.0, -1.0, 0.0, 1.0, 3.0])),
        "add": check_op(T.add, a, rng.normal(size=(4,))),
        "mul": check_op(T.mul, a, rng.normal(size=(3, 1))),
        "div": check_op(T.div, a, rng.uniform(1, 2, size=(3, 4))),
        "sqrt": check_op(T.sqrt, rng.uniform(0.5, 2, size=(5,))),
        "neg_sq_dist": check_op(T.neg_sq_dist, rng.normal(size=(3, 1)), np.arange(6.0)),
        "concat": check_op(lambda x, y: T.concat([x, y], axis=0), rng.normal(size=(1, 3)), rng.normal(size=(2, 3))),
        "slice_rows": check_op(lambda x: T.slice_rows(x, 1, 3), rng.normal(size=(4, 3))),
        "transpose": check_op(lambda x: x.transpose(2, 0, 1), rng.normal(size=(2, 3, 4))),
        "broadcast_to": check_op(lambda x: T.broadcast_to(x, (3, 2, 4)), rng.normal(size=(2, 1))),
    }
