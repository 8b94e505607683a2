"""Video -> token sequence: frame sampling, cropping, patchify, embedding.

Layout conventions (fixed so checkpoints are portable):

* patches are taken in row-major order over the floor(H/S) x floor(W/S) grid;
* each patch is flattened row-major with the colour channel fastest;
* the assembled sequence has the MOS token at row 0 followed by frame 0's
  patches, frame 1's patches, and so on.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, InputError
from .tensor import Tensor

CROP_MODES = ("random", "top_left", "center", "bottom_right")


@dataclass
class RawVideo:
    """Decoded RGB frames, shape (T, height, width, 3), uint8."""

    frames: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.frames)
        if f.ndim != 4 or f.shape[-1] != 3:
            raise InputError(f"video frames must have shape (T, H, W, 3), got {f.shape}")
        if f.shape[0] < 1:
            raise InputError("video has no frames")
        self.frames = f.astype(np.uint8, copy=False)

    @property
    def frame_count(self) -> int:
        return self.frames.shape[0]

    @property
    def height(self) -> int:
        return self.frames.shape[1]

    @property
    def width(self) -> int:
        return self.frames.shape[2]

    @classmethod
    def from_image(cls, image: np.ndarray) -> "RawVideo":
        return cls(np.asarray(image)[None])


@dataclass
class TokenSequence:
    """Embedded sequence of K+1 rows (MOS token first) with its layout."""

    E: Tensor
    n_patches: int
    n_frames: int
    patch: int

    @property
    def K(self) -> int:
        return self.n_patches * self.n_frames

    @property
    def D(self) -> int:
        return self.E.shape[-1]

    def row_index(self, patch_index: int, frame_index: int) -> int:
        return 1 + frame_index * self.n_patches + patch_index


def sample_indices(frame_count: int, n: int) -> list[int]:
    """Equal-interval indices floor(j * T / n), j = 0..n-1."""
    if frame_count < 1:
        raise InputError("cannot sample frames from an empty video")
    if n < 1:
        raise InputError(f"frame count to sample must be >= 1, got {n}")
    return [(j * frame_count) // n for j in range(n)]


def middle_window_indices(frame_count: int, n: int) -> list[int]:
    """A contiguous run of n frames centred in the video (repeats the last when short)."""
    if frame_count < 1:
        raise InputError("cannot sample frames from an empty video")
    if n < 1:
        raise InputError(f"frame count to sample must be >= 1, got {n}")
    start = max(0, (frame_count - n) // 2)
    return [min(start + j, frame_count - 1) for j in range(n)]


def sample_frames(video: RawVideo, n: int, mode: str = "uniform") -> np.ndarray:
    if mode == "uniform":
        idx = sample_indices(video.frame_count, n)
    elif mode == "middle":
        idx = middle_window_indices(video.frame_count, n)
    else:
        raise InputError(f"unknown sampling mode {mode!r}")
    return video.frames[idx]


def bilinear_resize(frame: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centred bilinear resize of an (H, W, C) array."""
    h, w = frame.shape[:2]
    src = frame.astype(np.float64)
    ys = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top = src[y0][:, x0] * (1 - wx) + src[y0][:, x1] * wx
    bot = src[y1][:, x0] * (1 - wx) + src[y1][:, x1] * wx
    out = top * (1 - wy) + bot * wy
    if frame.dtype == np.uint8:
        return np.clip(np.rint(out), 0, 255).astype(np.uint8)
    return out


def upscale_to_cover(frame: np.ndarray, h: int, w: int) -> np.ndarray:
    """Upscale so both sides are at least (h, w), keeping the aspect ratio."""
    fh, fw = frame.shape[:2]
    if fh >= h and fw >= w:
        return frame
    factor = max(h / fh, w / fw)
    nh = max(h, int(np.ceil(fh * factor)))
    nw = max(w, int(np.ceil(fw * factor)))
    return bilinear_resize(frame, nh, nw)


def crop_offset(frame_hw: tuple[int, int], h: int, w: int, mode: str,
                rng: np.random.Generator | None = None) -> tuple[int, int]:
    fh, fw = frame_hw
    if mode == "top_left":
        return 0, 0
    if mode == "center":
        return (fh - h) // 2, (fw - w) // 2
    if mode == "bottom_right":
        return fh - h, fw - w
    if mode == "random":
        if rng is None:
            raise InputError("random crop needs an explicit rng")
        return int(rng.integers(0, fh - h + 1)), int(rng.integers(0, fw - w + 1))
    raise InputError(f"unknown crop mode {mode!r}; expected one of {CROP_MODES}")


def crop(frame: np.ndarray, h: int, w: int, mode: str = "center",
         rng: np.random.Generator | None = None) -> np.ndarray:
    """Cut an h x w window; undersized frames are bilinearly upscaled first."""
    if h <= 0 or w <= 0:
        raise InputError(f"crop extents must be positive, got {h}x{w}")
    frame = upscale_to_cover(frame, h, w)
    y, x = crop_offset(frame.shape[:2], h, w, mode, rng)
    return frame[y:y + h, x:x + w]


def crop_clip(frames: np.ndarray, h: int, w: int, mode: str = "center",
              rng: np.random.Generator | None = None) -> np.ndarray:
    """Crop every frame of a clip with the same window."""
    if h <= 0 or w <= 0:
        raise InputError(f"crop extents must be positive, got {h}x{w}")
    frames = np.stack([upscale_to_cover(f, h, w) for f in frames])
    y, x = crop_offset(frames.shape[1:3], h, w, mode, rng)
    return frames[:, y:y + h, x:x + w]


def normalize_pixels(frame: np.ndarray) -> np.ndarray:
    return (np.asarray(frame, dtype=np.float64) / 255.0 - 0.5) / 0.5


def patchify(frame: np.ndarray, s: int) -> np.ndarray:
    """(H, W, 3) -> (P, s*s*3); pixels outside the floor grid are dropped."""
    if s < 1:
        raise InputError(f"patch size must be >= 1, got {s}")
    h, w = frame.shape[:2]
    if s > h or s > w:
        raise InputError(f"patch size {s} exceeds frame {h}x{w}")
    gh, gw = h // s, w // s
    c = frame.shape[2]
    win = frame[:gh * s, :gw * s]
    return win.reshape(gh, s, gw, s, c).transpose(0, 2, 1, 3, 4).reshape(gh * gw, s * s * c)


def unpatchify(tokens: np.ndarray, s: int, grid_h: int, grid_w: int, channels: int = 3) -> np.ndarray:
    return (np.asarray(tokens).reshape(grid_h, grid_w, s, s, channels)
            .transpose(0, 2, 1, 3, 4).reshape(grid_h * s, grid_w * s, channels))


def clip_to_patches(frames: np.ndarray, s: int) -> np.ndarray:
    """Normalised clip (N, H, W, 3) -> patch tokens (N, P, s*s*3)."""
    return np.stack([patchify(normalize_pixels(f), s) for f in frames])


def tokenize(video: RawVideo, n_frames: int, crop_size: int, patch: int, crop_mode: str = "center",
             rng: np.random.Generator | None = None, sampling: str = "uniform") -> np.ndarray:
    """Sample, crop, normalise and patchify a video into (N, P, D_patch) tokens."""
    clip = sample_frames(video, n_frames, sampling)
    clip = crop_clip(clip, crop_size, crop_size, crop_mode, rng)
    return clip_to_patches(clip, patch)


# -- embedding --------------------------------------------------------------

def embed(tokens, weights: dict[str, Tensor], frame_index: int, patch_index: int) -> Tensor:
    """Embed one patch token: proj(x) + spatial[p] + temporal[n].

    ``weights`` uses the model's parameter names (``embed.proj``,
    ``embed.pos_spatial``, optionally ``embed.pos_temporal``).
    """
    spatial = weights["embed.pos_spatial"]
    temporal = weights.get("embed.pos_temporal")
    n_frames = temporal.shape[0] if temporal is not None else 1
    if not 0 <= patch_index < spatial.shape[0]:
        raise IndexError(f"patch index {patch_index} outside [0, {spatial.shape[0]})")
    if not 0 <= frame_index < n_frames:
        raise IndexError(f"frame index {frame_index} outside [0, {n_frames})")
    x = tokens if isinstance(tokens, Tensor) else Tensor(tokens)
    e = T.matmul(x, weights["embed.proj"]) + T.slice_rows(spatial, patch_index).reshape(-1)
    if temporal is not None:
        e = e + T.slice_rows(temporal, frame_index).reshape(-1)
    return e


def mos_row(weights: dict[str, Tensor]) -> Tensor:
    return (weights["embed.mos_token"] + weights["embed.pos_mos"]).reshape(-1)


def assemble_sequence(patch_rows: list[Tensor] | Tensor, mos: Tensor, n_patches: int,
                      n_frames: int, patch: int) -> TokenSequence:
    """Stack the MOS row on top of P*N embedded patch rows (frame-major)."""
    if isinstance(patch_rows, Tensor):
        rows = patch_rows.reshape(-1, patch_rows.shape[-1])
    else:
        rows = T.concat([r.reshape(1, -1) for r in patch_rows], axis=0)
    if rows.shape[0] != n_patches * n_frames:
        raise ContractError(f"expected {n_patches * n_frames} patch rows (P={n_patches}, N={n_frames}), got {rows.shape[0]}")
    E = T.concat([mos.reshape(1, -1), rows], axis=0)
    return TokenSequence(E, n_patches, n_frames, patch)


def embed_sequence(patches: np.ndarray, weights: dict[str, Tensor], patch: int) -> TokenSequence:
    """Row-by-row embedding of an (N, P, D_patch) clip; the slow reference path."""
    n, p = patches.shape[:2]
    rows = [embed(patches[f, q], weights, f, q) for f in range(n) for q in range(p)]
    return assemble_sequence(rows, mos_row(weights), p, n, patch)
