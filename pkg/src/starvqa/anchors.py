"""Score <-> probability-vector machinery.

A scalar MOS is rescaled into [lo, hi] and soft-encoded against ``m``
uniformly spaced anchors; the network predicts a probability vector over
the same anchors and is trained with one minus the cosine similarity.
At inference a linear epsilon-insensitive SVR maps predicted vectors back
to scores (the anchor expectation is kept as an analytic fallback).
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, InputError, StateError
from .tensor import Tensor


class MosClampWarning(UserWarning):
    pass


@dataclass(frozen=True)
class AnchorCodec:
    m: int = 6
    lo: float = 0.0
    hi: float = 5.0

    def __post_init__(self):
        if self.m < 2:
            raise ConfigError(f"need at least 2 anchors, got {self.m}")
        if not self.hi > self.lo:
            raise ConfigError(f"anchor range needs hi > lo, got [{self.lo}, {self.hi}]")

    @property
    def anchors(self) -> np.ndarray:
        i = np.arange(self.m, dtype=np.float64)
        b = self.lo + (self.hi - self.lo) * i / (self.m - 1)
        b[-1] = self.hi
        return b

    @property
    def spacing(self) -> float:
        return (self.hi - self.lo) / (self.m - 1)


def make_anchors(m: int, lo: float, hi: float) -> AnchorCodec:
    return AnchorCodec(int(m), float(lo), float(hi))


def _check_range(raw_range) -> tuple[float, float]:
    lo, hi = (float(v) for v in raw_range)
    if not hi > lo:
        raise ConfigError(f"degenerate raw MOS range [{lo}, {hi}]")
    return lo, hi


def scale_mos(raw: float, raw_range: tuple[float, float], codec: AnchorCodec) -> float:
    """Affine map of ``raw_range`` onto [codec.lo, codec.hi]; outside values clamp."""
    rmin, rmax = _check_range(raw_range)
    raw = float(raw)
    if raw < rmin or raw > rmax:
        warnings.warn(f"MOS {raw} outside [{rmin}, {rmax}]; clamped", MosClampWarning, stacklevel=2)
        raw = min(max(raw, rmin), rmax)
    return codec.lo + (raw - rmin) * (codec.hi - codec.lo) / (rmax - rmin)


def unscale_mos(c: float, raw_range: tuple[float, float], codec: AnchorCodec) -> float:
    rmin, rmax = _check_range(raw_range)
    return rmin + (float(c) - codec.lo) * (rmax - rmin) / (codec.hi - codec.lo)


def encode_mos(c, codec: AnchorCodec) -> np.ndarray:
    """y_i proportional to exp(-(c - b_i)^2); vectorises over a leading axis of ``c``."""
    c = np.asarray(c, dtype=np.float64)
    if not np.all(np.isfinite(c)):
        raise InputError("scaled MOS must be finite")
    logits = -(c[..., None] - codec.anchors) ** 2
    logits -= logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=-1, keepdims=True)


def expectation_decode(y, codec: AnchorCodec):
    return np.asarray(y, dtype=np.float64) @ codec.anchors


def vr_loss(y, y_hat):
    """1 - cos(y, y_hat) along the last axis, averaged over any leading axis.

    Evaluated as 0.5 * |y/|y| - y_hat/|y_hat||^2, which equals 1 - cos for
    any nonzero pair but is exactly 0 for identical inputs and exactly 1 for
    distinct one-hot vectors. Works on numpy arrays or on ``Tensor``
    predictions (differentiable in ``y_hat``).
    """
    if isinstance(y_hat, Tensor) or isinstance(y, Tensor):
        yt = y if isinstance(y, Tensor) else Tensor(y)
        pt = y_hat if isinstance(y_hat, Tensor) else Tensor(y_hat)
        if yt.shape != pt.shape:
            raise ContractError(f"vr_loss: shapes {yt.shape} and {pt.shape} differ")
        if np.any(np.linalg.norm(yt.data, axis=-1) == 0) or np.any(np.linalg.norm(pt.data, axis=-1) == 0):
            raise ContractError("vr_loss: zero-norm probability vector")
        u = yt / T.sqrt((yt * yt).sum(axis=-1, keepdims=True))
        v = pt / T.sqrt((pt * pt).sum(axis=-1, keepdims=True))
        d = u - v
        return T.scale((d * d).sum(axis=-1).mean(), 0.5)
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ContractError(f"vr_loss: shapes {y.shape} and {y_hat.shape} differ")
    ny = np.linalg.norm(y, axis=-1)
    np_ = np.linalg.norm(y_hat, axis=-1)
    if np.any(ny == 0) or np.any(np_ == 0):
        raise ContractError("vr_loss: zero-norm probability vector")
    d = y / ny[..., None] - y_hat / np_[..., None]
    return float(np.mean(0.5 * (d * d).sum(axis=-1)))


def probability_head(mos_row: Tensor, params: dict[str, Tensor]) -> Tensor:
    """softmax(MLP(mos_row)) with the model's ``head.*`` weights."""
    from .model import head_logits

    return T.softmax(head_logits(mos_row, params), axis=-1)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean of -log softmax(logits)[target] over the leading axis."""
    targets = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    C = logits.shape[-1]
    if C < 2:
        raise ConfigError(f"cross-entropy needs at least 2 classes, got {C}")
    if np.any(targets < 0) or np.any(targets >= C):
        raise IndexError(f"class target out of range [0, {C}): {targets.tolist()}")
    lp = T.log_softmax(logits.reshape(-1, C), axis=-1)
    onehot = np.zeros((targets.size, C))
    onehot[np.arange(targets.size), targets] = 1.0
    return T.scale((lp * onehot).sum(), -1.0 / targets.size)


def cross_entropy_head(mos_row: Tensor, params: dict[str, Tensor], target) -> tuple[np.ndarray, Tensor]:
    """Class probabilities and cross-entropy loss for the classification mode."""
    from .model import head_logits

    logits = head_logits(mos_row, params)
    return T.softmax(logits, axis=-1).data, cross_entropy(logits, target)


def nearest_anchor(c, codec: AnchorCodec):
    """Index of the closest anchor; ties go to the lower index."""
    c = np.asarray(c, dtype=np.float64)
    return np.argmin(np.abs(c[..., None] - codec.anchors), axis=-1)


# -- SVR inverse mapping --------------------------------------------------

@dataclass
class SvrDecoder:
    """Linear epsilon-insensitive regressor from probability vectors to scores.

    Fitted by seeded stochastic subgradient descent on
    ``C * sum(max(0, |w.y + b - c| - eps)) + 0.5 * |w|^2``.
    """

    lo: float
    hi: float
    C: float = 1.0
    epsilon: float | None = None
    epochs: int = 200
    step: float = 0.01
    seed: int = 0
    weights: np.ndarray | None = None
    bias: float = 0.0
    fitted: bool = False

    def __post_init__(self):
        if self.epsilon is None:
            self.epsilon = 0.02 * (self.hi - self.lo)
        if self.weights is not None:
            self.weights = np.asarray(self.weights, dtype=np.float64)

    def fit(self, Y, c) -> "SvrDecoder":
        Y = np.asarray(Y, dtype=np.float64)
        c = np.asarray(c, dtype=np.float64)
        n = Y.shape[0] if Y.ndim == 2 else 0
        if n < 2 or c.shape != (n,):
            raise InputError(f"SVR fit needs >= 2 (vector, score) pairs, got {n}")
        rng = np.random.default_rng(self.seed)
        m = Y.shape[1]
        w = np.zeros(m)
        b = float(np.median(c))
        lam = 1.0 / (self.C * n)
        lr = self.step
        for _ in range(self.epochs):
            for i in rng.permutation(n):
                r = Y[i] @ w + b - c[i]
                gw = lam * w
                gb = 0.0
                if r > self.epsilon:
                    gw = gw + Y[i]
                    gb = 1.0
                elif r < -self.epsilon:
                    gw = gw - Y[i]
                    gb = -1.0
                w = w - lr * gw
                b = b - lr * gb
        self.weights, self.bias, self.fitted = w, float(b), True
        return self

    def predict(self, y_hat):
        if not self.fitted:
            raise StateError("SVR decoder has not been fitted")
        raw = np.asarray(y_hat, dtype=np.float64) @ self.weights + self.bias
        out = np.clip(raw, self.lo, self.hi)
        return float(out) if np.ndim(out) == 0 else out

    def to_dict(self) -> dict:
        return {
            "lo": self.lo, "hi": self.hi, "C": self.C, "epsilon": self.epsilon,
            "epochs": self.epochs, "step": self.step, "seed": self.seed,
            "weights": None if self.weights is None else [float(v) for v in self.weights],
            "bias": self.bias, "fitted": self.fitted,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SvrDecoder":
        return cls(**d)


def svr_fit(pairs, codec: AnchorCodec, **hyper) -> SvrDecoder:
    """Fit on ``(probability_vector, scaled_mos)`` pairs."""
    pairs = list(pairs)
    if len(pairs) < 2:
        raise InputError(f"SVR fit needs >= 2 pairs, got {len(pairs)}")
    Y = np.stack([np.asarray(p[0], dtype=np.float64) for p in pairs])
    c = np.array([float(p[1]) for p in pairs])
    return SvrDecoder(codec.lo, codec.hi, **hyper).fit(Y, c)


def svr_predict(decoder: SvrDecoder, y_hat):
    return decoder.predict(y_hat)
