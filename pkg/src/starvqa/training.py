"""Training protocol: image-mode pretraining, transfer, video training, inference."""
from __future__ import annotations

import csv
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .anchors import (AnchorCodec, SvrDecoder, cross_entropy, encode_mos, expectation_decode,
                      nearest_anchor, scale_mos, unscale_mos, vr_loss)
from .config import ModelConfig, TrainConfig
from .errors import ConfigError, DegenerateInputError, InputError, ManifestError, StateError
from .io import Checkpoint, Manifest, ManifestItem, read_container
from .metrics import plcc, srocc
from .model import StarVQA, init_params
from .tensor import SGD
from .tokenizer import RawVideo, tokenize

log = logging.getLogger(__name__)

INFERENCE_CROPS = ("top_left", "center", "bottom_right")
LOG_FIELDS = ("epoch", "lr", "mean_loss", "train_srocc", "train_plcc")


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Step decay: lr0 * decay_factor ** floor(epoch / decay_every)."""
    if epoch < 0:
        raise InputError(f"epoch must be >= 0, got {epoch}")
    return cfg.lr0 * cfg.decay_factor ** (epoch // cfg.decay_every)


def split_dataset(manifest: Manifest, seed: int,
                  test_fraction: float = 0.2) -> tuple[list[ManifestItem], list[ManifestItem]]:
    """Seeded 80/20 split, stratified by dataset; items keep manifest order."""
    items = manifest.items
    if len(items) < 5:
        raise InputError(f"need at least 5 items to split, got {len(items)}")
    rng = np.random.default_rng(seed)
    test_ids: set[int] = set()
    for name in sorted({it.dataset for it in items}):
        idx = [i for i, it in enumerate(items) if it.dataset == name]
        n_test = int(round(len(idx) * test_fraction))
        if len(idx) >= 5:
            n_test = max(1, n_test)
        for j in rng.permutation(len(idx))[:n_test]:
            test_ids.add(idx[j])
    train = [it for i, it in enumerate(items) if i not in test_ids]
    test = [it for i, it in enumerate(items) if i in test_ids]
    return train, test


def resolve_split(manifest: Manifest, seed: int, test_fraction: float = 0.2):
    """Use explicit ``split`` fields when every item has one, else ``split_dataset``."""
    if manifest.items and all(it.split is not None for it in manifest.items):
        return ([it for it in manifest.items if it.split == "train"],
                [it for it in manifest.items if it.split == "test"])
    return split_dataset(manifest, seed, test_fraction)


@dataclass
class TrainState:
    cfg: TrainConfig
    model: StarVQA
    optimizer: SGD
    epoch: int = 0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    best: dict = field(default_factory=dict)
    history: list[dict] = field(default_factory=list)

    @classmethod
    def fresh(cls, cfg: TrainConfig) -> "TrainState":
        model = StarVQA(cfg.model, seed=cfg.seed)
        return cls(cfg, model, SGD(model.params, cfg.lr0, cfg.momentum),
                   rng=np.random.default_rng(cfg.seed + 1))

    @property
    def codec(self) -> AnchorCodec:
        return AnchorCodec(self.cfg.model.anchors, self.cfg.model.lo, self.cfg.model.hi)


def _codec(cfg: ModelConfig) -> AnchorCodec:
    return AnchorCodec(cfg.anchors, cfg.lo, cfg.hi)


def load_videos(manifest: Manifest, items: list[ManifestItem]) -> list[RawVideo]:
    return [read_container(manifest.resolve(it)) for it in items]


def scaled_targets(manifest: Manifest, items: list[ManifestItem], codec: AnchorCodec) -> np.ndarray:
    out = []
    for it in items:
        try:
            rng = manifest.range_of(it.dataset)
        except ManifestError as exc:
            raise ConfigError(str(exc)) from None
        out.append(scale_mos(it.mos, rng, codec))
    return np.array(out)


def batch_loss(logits: T.Tensor, c: np.ndarray, labels: np.ndarray | None, loss: str,
               codec: AnchorCodec) -> T.Tensor:
    if loss == "vr":
        return vr_loss(encode_mos(c, codec), T.softmax(logits, axis=-1))
    if loss == "l2":
        pred = T.matmul(T.softmax(logits, axis=-1), codec.anchors)
        diff = pred - c
        return (diff * diff).mean()
    if loss == "cross_entropy":
        targets = labels if labels is not None else nearest_anchor(c, codec)
        return cross_entropy(logits, targets)
    raise ConfigError(f"unknown loss {loss!r}")


def _safe_corr(fn, a, b) -> float:
    try:
        return fn(a, b)
    except (DegenerateInputError, InputError):
        return float("nan")


def run_epochs(state: TrainState, manifest: Manifest, items: list[ManifestItem],
               log_path: str | Path | None = None,
               on_epoch: Callable[[dict], None] | None = None) -> TrainState:
    """Shuffled minibatch SGD with momentum over ``items`` for cfg.epochs epochs."""
    cfg, mcfg = state.cfg, state.cfg.model
    if not items:
        raise InputError("no training items")
    codec = state.codec
    videos = load_videos(manifest, items)
    c_all = scaled_targets(manifest, items, codec)
    use_labels = cfg.loss == "cross_entropy" and all(it.label is not None for it in items)
    labels_all = np.array([it.label for it in items]) if use_labels else None
    regression_head = mcfg.out_dim == mcfg.anchors and not use_labels
    n_frames = 1 if mcfg.mode == "image" else mcfg.n_frames
    writer = None
    fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        writer.writeheader()
    try:
        for _ in range(cfg.epochs):
            lr = lr_schedule(state.epoch, cfg)
            order = state.rng.permutation(len(items))
            losses, preds, truth = [], [], []
            for start in range(0, len(order), cfg.batch):
                idx = order[start:start + cfg.batch]
                patches = np.stack([tokenize(videos[i], n_frames, mcfg.crop, mcfg.patch, "random", state.rng)
                                    for i in idx])
                logits = state.model.logits(patches)
                labels = labels_all[idx] if labels_all is not None else None
                loss = batch_loss(logits, c_all[idx], labels, cfg.loss, codec)
                state.optimizer.zero_grad()
                loss.backward()
                state.optimizer.step(lr)
                losses.append(loss.item() * len(idx))
                if regression_head:
                    probs = T.softmax(logits.detach(), axis=-1).data
                    preds.extend(expectation_decode(probs, codec))
                    truth.extend(c_all[idx])
            row = {
                "epoch": state.epoch,
                "lr": lr,
                "mean_loss": sum(losses) / len(items),
                "train_srocc": _safe_corr(srocc, truth, preds) if preds else float("nan"),
                "train_plcc": _safe_corr(plcc, truth, preds) if preds else float("nan"),
            }
            state.history.append(row)
            if writer is not None:
                writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
            log.info("epoch %d lr %.3g loss %.5f srocc %.4f", row["epoch"], lr, row["mean_loss"], row["train_srocc"])
            if on_epoch is not None:
                on_epoch(row)
            if not state.best or row["mean_loss"] < state.best["mean_loss"]:
                state.best = dict(row)
            state.epoch += 1
    finally:
        if fh is not None:
            fh.close()
    return state


def fit_decoder(manifest: Manifest, items: list[ManifestItem], codec: AnchorCodec, seed: int) -> SvrDecoder:
    """SVR on (encode(c), c) pairs of the training items."""
    c = scaled_targets(manifest, items, codec)
    return SvrDecoder(codec.lo, codec.hi, seed=seed).fit(encode_mos(c, codec), c)


def to_checkpoint(state: TrainState, manifest: Manifest | None = None, decoder: SvrDecoder | None = None,
                  test_items: list[ManifestItem] | None = None) -> Checkpoint:
    meta = {"epoch": state.epoch, "best": state.best, "loss": state.cfg.loss}
    if test_items is not None:
        meta["test_paths"] = [it.path for it in test_items]
    datasets = {k: [lo, hi] for k, (lo, hi) in manifest.datasets.items()} if manifest else {}
    return Checkpoint(
        config=state.cfg.to_dict(),
        stage=state.cfg.model.mode,
        params=state.model.state_dict(),
        velocity=OrderedDict((k, v.copy()) for k, v in state.optimizer.velocity.items()),
        decoder=decoder.to_dict() if decoder is not None else None,
        datasets=datasets,
        meta=meta,
    )


def state_from_checkpoint(ckpt: Checkpoint, stage: str | None = None) -> TrainState:
    """Rebuild a TrainState; ``stage`` guards against loading across stages."""
    if stage is not None and ckpt.stage != stage:
        hint = " (pass it through transfer_weights first)" if ckpt.stage == "image" else ""
        raise StateError(f"checkpoint stage is {ckpt.stage!r}, expected {stage!r}{hint}")
    cfg = TrainConfig.from_dict(ckpt.config)
    model = StarVQA(cfg.model, ckpt.params)
    opt = SGD(model.params, cfg.lr0, cfg.momentum)
    for k, v in ckpt.velocity.items():
        opt.velocity[k] = np.array(v)
    state = TrainState(cfg, model, opt, epoch=int(ckpt.meta.get("epoch", 0)),
                       rng=np.random.default_rng(cfg.seed + 1 + int(ckpt.meta.get("epoch", 0))),
                       best=dict(ckpt.meta.get("best", {})))
    return state


def train_stage_image(manifest: Manifest, cfg: TrainConfig, loss: str | None = None,
                      log_path: str | Path | None = None, items: list[ManifestItem] | None = None,
                      on_epoch=None) -> Checkpoint:
    """Train the time-attention-free network on single frames."""
    if not manifest.items:
        raise InputError("manifest has no items")
    cfg = cfg.replace(mode="image", n_frames=1, **({"loss": loss} if loss else {}))
    test = None
    if items is None:
        items, test = resolve_split(manifest, cfg.seed, cfg.test_fraction) if len(manifest.items) >= 5 \
            else (list(manifest.items), [])
    state = run_epochs(TrainState.fresh(cfg), manifest, items, log_path, on_epoch)
    decoder = None
    if cfg.model.out_dim == cfg.model.anchors and len(items) >= 2:
        decoder = fit_decoder(manifest, items, state.codec, cfg.seed)
    return to_checkpoint(state, manifest, decoder, test)


def transfer_weights(image_ckpt: Checkpoint, video_cfg: TrainConfig) -> TrainState:
    """Initialise a video-mode state from an image-mode checkpoint.

    Embedding, spatial positions, MOS token, space-attention stages, MLPs,
    final norm and (when shapes agree) the head are copied; temporal
    positions start at zero and time-attention stages are freshly drawn
    with a zero output projection.
    """
    if image_ckpt.stage != "image":
        raise StateError(f"transfer source must be an image checkpoint, got stage {image_ckpt.stage!r}")
    src_cfg = TrainConfig.from_dict(image_ckpt.config).model
    vcfg = video_cfg.replace(mode="video")
    dst = vcfg.model
    mismatches = [f"{k}: image {getattr(src_cfg, k)} vs video {getattr(dst, k)}"
                  for k in ("patch", "dim", "heads", "blocks", "crop", "mlp_ratio")
                  if getattr(src_cfg, k) != getattr(dst, k)]
    if mismatches:
        raise ConfigError("incompatible stages: " + "; ".join(mismatches))
    rng = np.random.default_rng(vcfg.seed)
    params = init_params(dst, rng)
    for name in params:
        if name.startswith("blocks.") and ".time." in name:
            continue
        if name == "embed.pos_temporal":
            params[name] = np.zeros_like(params[name])
            continue
        src = image_ckpt.params.get(name)
        if src is not None and src.shape == params[name].shape:
            params[name] = np.array(src, copy=True)
        elif not name.startswith("head."):
            raise ConfigError(f"tensor {name!r} cannot be transferred")
    model = StarVQA(dst, params)
    return TrainState(vcfg, model, SGD(model.params, vcfg.lr0, vcfg.momentum),
                      rng=np.random.default_rng(vcfg.seed + 1))


def train_stage_video(manifest: Manifest, cfg: TrainConfig, init: TrainState | None = None,
                      log_path: str | Path | None = None, items: list[ManifestItem] | None = None,
                      on_epoch=None) -> Checkpoint:
    """Joint space-time training on a (possibly mixed) manifest, then SVR fit."""
    cfg = cfg.replace(mode="video")
    for it in manifest.items:
        if it.dataset not in manifest.datasets:
            raise ConfigError(f"dataset {it.dataset!r} has no declared MOS range")
    test = None
    if items is None:
        items, test = resolve_split(manifest, cfg.seed, cfg.test_fraction)
    if init is None:
        state = TrainState.fresh(cfg)
    else:
        state = init
        state.cfg = cfg
        state.optimizer.lr = cfg.lr0
        state.optimizer.momentum = cfg.momentum
    state = run_epochs(state, manifest, items, log_path, on_epoch)
    decoder = fit_decoder(manifest, items, state.codec, cfg.seed)
    return to_checkpoint(state, manifest, decoder, test)


# -- inference -------------------------------------------------------------

@dataclass
class Prediction:
    score: float
    scaled_score: float
    crop_scores: list[float]
    probabilities: np.ndarray
    crop_probabilities: np.ndarray


class Predictor:
    """Deterministic three-crop inference with a fixed model and decoder."""

    def __init__(self, ckpt: Checkpoint, decoder: str = "svr", sampling: str = "uniform"):
        self.ckpt = ckpt
        self.cfg = TrainConfig.from_dict(ckpt.config).model
        self.model = StarVQA(self.cfg, ckpt.params)
        self.codec = _codec(self.cfg)
        self.sampling = sampling
        self.decoder_kind = decoder
        if decoder == "svr":
            if not ckpt.decoder or not ckpt.decoder.get("fitted"):
                raise StateError("checkpoint has no fitted SVR decoder")
            self.svr = SvrDecoder.from_dict(ckpt.decoder)
        elif decoder != "expectation":
            raise ConfigError(f"unknown decoder {decoder!r}")

    def decode(self, probs: np.ndarray) -> np.ndarray:
        if self.decoder_kind == "svr":
            return np.atleast_1d(self.svr.predict(probs))
        return np.atleast_1d(expectation_decode(probs, self.codec))

    def __call__(self, video: RawVideo, dataset: str | None = None) -> Prediction:
        n = 1 if self.cfg.mode == "image" else self.cfg.n_frames
        patches = np.stack([tokenize(video, n, self.cfg.crop, self.cfg.patch, mode, sampling=self.sampling)
                            for mode in INFERENCE_CROPS])
        probs = self.model.predict_proba(patches)
        crop_scores = self.decode(probs)
        scaled = float(np.mean(crop_scores))
        score = scaled
        if dataset is not None:
            if dataset not in self.ckpt.datasets:
                raise ConfigError(f"checkpoint has no MOS range for dataset {dataset!r}")
            score = unscale_mos(scaled, tuple(self.ckpt.datasets[dataset]), self.codec)
        return Prediction(score, scaled, [float(s) for s in crop_scores], probs.mean(axis=0), probs)


def infer_video(ckpt: Checkpoint, video: RawVideo, dataset: str | None = None,
                decoder: str = "svr", sampling: str = "uniform") -> Prediction:
    return Predictor(ckpt, decoder, sampling)(video, dataset)


def evaluate(ckpt: Checkpoint, manifest: Manifest, decoder: str = "svr",
             sampling: str = "uniform") -> list[dict]:
    """Per (dataset, split) SROCC/PLCC rows between raw MOS and predictions."""
    predictor = Predictor(ckpt, decoder, sampling)
    test_paths = set(ckpt.meta.get("test_paths", []))
    groups: dict[tuple[str, str], tuple[list, list]] = {}
    for it in manifest.items:
        split = it.split or ("test" if it.path in test_paths else "train" if test_paths else "all")
        video = read_container(manifest.resolve(it))
        ds = it.dataset if it.dataset in ckpt.datasets else None
        pred = predictor(video, ds)
        if ds is None:
            pred_score = unscale_mos(pred.scaled_score, manifest.range_of(it.dataset), predictor.codec)
        else:
            pred_score = pred.score
        g, p = groups.setdefault((it.dataset, split), ([], []))
        g.append(it.mos)
        p.append(pred_score)
    rows = []
    for (ds, split), (g, p) in sorted(groups.items()):
        rows.append({"dataset": ds, "split": split, "srocc": _safe_corr(srocc, g, p),
                     "plcc": _safe_corr(plcc, g, p), "n": len(g)})
    return rows


def write_csv(rows: list[dict], fh, fields=("dataset", "split", "srocc", "plcc", "n")) -> None:
    writer = csv.DictWriter(fh, fieldnames=list(fields), lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


# -- cost model ----------------------------------------------------------------

def flops_breakdown(cfg: ModelConfig, n_frames: int | None = None, n_patches: int | None = None,
                    batch: int = 1) -> dict[str, int]:
    """Multiply-accumulates of every matrix product in one forward pass.

    With K = N*P tokens, width D, MLP ratio r and m outputs:

    * embedding:   K * (3 S^2) * D
    * time stage:  3 (K+1) D^2 + 2 K (N+1) D + K D^2            (video only)
    * space stage: 3 (K+1) D^2 + 2 K (P+1) D + 2 (K+1) D + (K+1) D^2
    * MLP:         2 r (K+1) D^2
    * head:        D^2 + D m

    Elementwise work (softmax, LayerNorm, GELU, residuals) is not counted.
    The source resolution does not appear: the crop fixes P.
    """
    N = cfg.n_frames if n_frames is None else n_frames
    P = cfg.n_patches if n_patches is None else n_patches
    D, r, m = cfg.dim, cfg.mlp_ratio, cfg.out_dim
    if cfg.mode == "image":
        N = 1
    K = N * P
    time = 3 * (K + 1) * D * D + 2 * K * (N + 1) * D + K * D * D if cfg.mode == "video" else 0
    space = 3 * (K + 1) * D * D + 2 * K * (P + 1) * D + 2 * (K + 1) * D + (K + 1) * D * D
    mlp = 2 * r * (K + 1) * D * D
    out = {
        "embed": K * cfg.patch_dim * D,
        "time": cfg.blocks * time,
        "space": cfg.blocks * space,
        "mlp": cfg.blocks * mlp,
        "head": D * D + D * m,
    }
    out = {k: batch * v for k, v in out.items()}
    out["blocks"] = out["time"] + out["space"] + out["mlp"]
    out["total"] = out["embed"] + out["blocks"] + out["head"]
    return out


def estimate_flops(cfg: ModelConfig, source_hw: tuple[int, int] | None = None) -> int:
    """Total multiply-accumulates for one clip.

    ``source_hw`` is accepted for symmetry with the tokenizer; frames are
    upscaled or cropped to ``cfg.crop`` so it never changes the count.
    """
    if source_hw is not None and (source_hw[0] < 1 or source_hw[1] < 1):
        raise InputError(f"bad source resolution {source_hw}")
    return flops_breakdown(cfg)["total"]


def count_forward_macs(model: StarVQA, patches: np.ndarray) -> int:
    with T.no_grad(), T.count_macs() as counter:
        model.logits(patches)
    return counter.macs


def fmt_gmacs(macs: int) -> str:
    return f"{macs / 1e9:.3f} GMAC"


__all__ = [
    "lr_schedule", "split_dataset", "resolve_split", "TrainState", "run_epochs", "train_stage_image",
    "train_stage_video", "transfer_weights", "infer_video", "Predictor", "Prediction", "evaluate",
    "estimate_flops", "flops_breakdown", "count_forward_macs", "state_from_checkpoint", "to_checkpoint",
    "fit_decoder", "write_csv",
]
